#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/data.hpp"
#include "sct/models.hpp"
#include "sct/pipeline.hpp"

namespace sct {

// Flat key=value run configuration. Keys are fixed (unknown keys are
// rejected); every key can be overridden by the command-line flag of the
// same name, and the fully resolved set is echoed into the run directory.
class RunConfig {
  public:
    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"family", "resnet-cifar"},
            {"depth", "20"},
            {"norm", "bn"},
            {"num_classes", "10"},
            {"width_multiplier", "1.0"},
            {"gn_groups", "8"},
            {"scheme", "cifar-32"},
            {"scales", ""},  // overrides scheme when set, e.g. "32x32,16x16"
            {"alphas", ""},  // uniform 1/M when empty
            {"epochs", "10"},
            {"batch_size", "128"},
            {"lr0", "0.1"},
            {"schedule", "cosine"},
            {"milestones", ""},
            {"calibration", "avg"},
            {"seed", "1"},
            {"deterministic", "0"},
            {"skip_zero_weight", "0"},
            {"momentum", "0.9"},
            {"weight_decay", "0.0001"},
            {"pad_crop", "4"},
            {"hflip_prob", "0.5"},
            {"mean", "0.4914,0.4822,0.4465"},
            {"std", "0.2470,0.2435,0.2616"},
            {"data_dir", ""},
            {"synthetic", "0"},
            {"synthetic_train_count", "10000"},
            {"synthetic_test_count", "2000"},
            {"train_subset", "0"},
            {"out_dir", "runs/default"},
            {"checkpoint_every", "0"},
            {"nearest_bank", "0"},
            {"test_sizes", ""},
        };
        return d;
    }

    static std::string normalize_key(std::string k) {
        std::replace(k.begin(), k.end(), '-', '_');
        return k;
    }

    void set(const std::string& key, const std::string& value) {
        const std::string k = normalize_key(key);
        if (!defaults().count(k))
            throw std::invalid_argument("unknown config key '" + key + "'");
        values_[k] = value;
    }

    void load_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::invalid_argument("cannot open config file: " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto strip = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                const auto b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            line = strip(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                            ": expected key=value, got '" + line + "'");
            try {
                set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
            } catch (const std::invalid_argument& e) {
                throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    std::string get(const std::string& key) const {
        const std::string k = normalize_key(key);
        const auto it = values_.find(k);
        if (it != values_.end()) return it->second;
        const auto d = defaults().find(k);
        if (d == defaults().end()) throw std::invalid_argument("unknown config key '" + key + "'");
        return d->second;
    }

    int get_int(const std::string& key) const {
        const std::string v = get(key);
        try {
            std::size_t pos = 0;
            const int out = std::stoi(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw std::invalid_argument("config key '" + key + "': '" + v + "' is not an integer");
        }
    }

    double get_double(const std::string& key) const {
        const std::string v = get(key);
        try {
            std::size_t pos = 0;
            const double out = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a number");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string v = get(key);
        if (v == "1" || v == "true" || v == "yes") return true;
        if (v == "0" || v == "false" || v == "no" || v.empty()) return false;
        throw std::invalid_argument("config key '" + key + "': '" + v + "' is not a boolean");
    }

    // Resolved key=value text, sorted, one per line.
    std::string echo() const {
        std::ostringstream os;
        for (const auto& [k, d] : defaults()) os << k << "=" << get(k) << "\n";
        return os.str();
    }

  private:
    std::map<std::string, std::string> values_;
};

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, sep))
        if (!cur.empty()) out.push_back(cur);
    return out;
}

// "32x32,16x16" (or bare "32,16" for square sizes).
inline ScaleSet parse_scales(const std::string& s) {
    std::vector<std::pair<int, int>> sizes;
    for (const auto& item : split_list(s)) {
        const auto x = item.find('x');
        try {
            if (x == std::string::npos) {
                const int v = std::stoi(item);
                sizes.emplace_back(v, v);
            } else {
                sizes.emplace_back(std::stoi(item.substr(0, x)), std::stoi(item.substr(x + 1)));
            }
        } catch (const std::exception&) {
            throw std::invalid_argument("bad scale '" + item + "' in '" + s + "'");
        }
    }
    return ScaleSet(sizes);
}

inline std::vector<float> parse_float_list(const std::string& s) {
    std::vector<float> out;
    for (const auto& item : split_list(s)) {
        try {
            out.push_back(std::stof(item));
        } catch (const std::exception&) {
            throw std::invalid_argument("bad number '" + item + "' in '" + s + "'");
        }
    }
    return out;
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    for (const auto& item : split_list(s)) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw std::invalid_argument("bad integer '" + item + "' in '" + s + "'");
        }
    }
    return out;
}

struct ResolvedRun {
    ModelConfig model;
    SCTConfig sct;
    bool fixup = false;  // norm given as "fixup": NormKind::None + fixup init
    bool synthetic = false;
    std::string data_dir;
    int synthetic_train_count = 10000;
    int synthetic_test_count = 2000;
    int train_subset = 0;
    bool nearest_bank = false;
    std::vector<std::pair<int, int>> test_sizes;
};

inline ResolvedRun resolve_run(const RunConfig& rc) {
    ResolvedRun run;

    const std::string family = rc.get("family");
    if (family == "resnet-cifar")
        run.model.family = ModelFamily::ResNetCifar;
    else if (family == "small-cnn")
        run.model.family = ModelFamily::SmallCnn;
    else
        throw std::invalid_argument("unknown family '" + family +
                                    "' (expected resnet-cifar|small-cnn)");
    run.model.depth = rc.get_int("depth");
    run.fixup = rc.get("norm") == "fixup";
    run.model.norm = norm_kind_from_string(rc.get("norm"));
    run.model.num_classes = rc.get_int("num_classes");
    run.model.width_multiplier = static_cast<float>(rc.get_double("width_multiplier"));
    run.model.gn_groups = rc.get_int("gn_groups");

    run.sct.scheme_name = rc.get("scheme");
    run.sct.scale_set =
        rc.get("scales").empty() ? scheme_scales(run.sct.scheme_name) : parse_scales(rc.get("scales"));
    if (!rc.get("alphas").empty()) run.sct.alphas = parse_float_list(rc.get("alphas"));
    run.sct.epochs = rc.get_int("epochs");
    run.sct.batch_size = rc.get_int("batch_size");
    run.sct.lr0 = rc.get_double("lr0");
    run.sct.schedule = schedule_from_string(rc.get("schedule"));
    if (!rc.get("milestones").empty()) run.sct.milestones = parse_int_list(rc.get("milestones"));
    run.sct.calibration = calibration_from_string(rc.get("calibration"));
    run.sct.seed = static_cast<std::uint64_t>(rc.get_int("seed"));
    run.sct.deterministic = rc.get_bool("deterministic");
    run.sct.skip_zero_weight = rc.get_bool("skip_zero_weight");
    run.sct.momentum = static_cast<float>(rc.get_double("momentum"));
    run.sct.weight_decay = static_cast<float>(rc.get_double("weight_decay"));
    run.sct.checkpoint_every = rc.get_int("checkpoint_every");
    run.sct.out_dir = rc.get("out_dir");

    run.sct.augment.pad_crop = rc.get_int("pad_crop");
    run.sct.augment.hflip_prob = static_cast<float>(rc.get_double("hflip_prob"));
    const auto mean = parse_float_list(rc.get("mean"));
    const auto stdv = parse_float_list(rc.get("std"));
    if (mean.size() != 3 || stdv.size() != 3)
        throw std::invalid_argument("mean/std must hold exactly 3 comma-separated values");
    for (int c = 0; c < 3; ++c) {
        run.sct.augment.mean[c] = mean[c];
        run.sct.augment.std[c] = stdv[c];
    }

    run.synthetic = rc.get_bool("synthetic");
    run.data_dir = rc.get("data_dir");
    run.synthetic_train_count = rc.get_int("synthetic_train_count");
    run.synthetic_test_count = rc.get_int("synthetic_test_count");
    run.train_subset = rc.get_int("train_subset");
    run.nearest_bank = rc.get_bool("nearest_bank");
    for (const auto& s : rc.get("test_sizes").empty()
                             ? std::vector<std::string>{}
                             : std::vector<std::string>{rc.get("test_sizes")}) {
        for (const auto& sz : parse_scales(s).sizes) run.test_sizes.push_back(sz);
    }

    run.sct.validate();
    return run;
}

// Architecture string parser, the inverse of Model::arch_string. Lets the
// eval/probe commands rebuild a model purely from a checkpoint.
inline std::pair<ModelConfig, ScaleSet> parse_arch_string(const std::string& arch) {
    ModelConfig cfg;
    ScaleSet scales;
    const auto parts = split_list(arch, ';');
    if (parts.empty()) throw std::runtime_error("empty architecture string");
    if (parts[0] == "resnet-cifar")
        cfg.family = ModelFamily::ResNetCifar;
    else if (parts[0] == "small-cnn")
        cfg.family = ModelFamily::SmallCnn;
    else
        throw std::runtime_error("unknown family in architecture string: " + parts[0]);
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const auto eq = parts[i].find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("bad architecture field '" + parts[i] + "'");
        const std::string key = parts[i].substr(0, eq);
        const std::string value = parts[i].substr(eq + 1);
        if (key == "depth")
            cfg.depth = std::stoi(value);
        else if (key == "norm")
            cfg.norm = norm_kind_from_string(value);
        else if (key == "classes")
            cfg.num_classes = std::stoi(value);
        else if (key == "width")
            cfg.width_multiplier = std::stof(value);
        else if (key == "gn_groups")
            cfg.gn_groups = std::stoi(value);
        else if (key == "scales")
            scales = parse_scales(value);
        else
            throw std::runtime_error("unknown architecture field '" + key + "'");
    }
    return {cfg, scales};
}

}  // namespace sct
