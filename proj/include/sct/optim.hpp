#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sct/tensor.hpp"

namespace sct {

enum class ScheduleKind { Cosine, Step };

inline ScheduleKind schedule_from_string(const std::string& s) {
    if (s == "cosine") return ScheduleKind::Cosine;
    if (s == "step") return ScheduleKind::Step;
    throw std::invalid_argument("unknown schedule '" + s + "' (expected cosine|step)");
}

// Cosine: lr = 0.5*lr0*(1 + cos(pi*t/T)). Step: lr0 / 10 at each passed milestone.
inline double lr_schedule(ScheduleKind kind, int t, int total_epochs, double lr0,
                          const std::vector<int>& milestones = {}) {
    if (t < 0 || t > total_epochs)
        throw std::invalid_argument("lr_schedule: epoch " + std::to_string(t) + " outside [0," +
                                    std::to_string(total_epochs) + "]");
    if (kind == ScheduleKind::Cosine) {
        return 0.5 * lr0 * (1.0 + std::cos(M_PI * static_cast<double>(t) / total_epochs));
    }
    double lr = lr0;
    for (int m : milestones)
        if (t >= m) lr /= 10.0;
    return lr;
}

// SGD with classical momentum:
//   v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v
class SgdMomentum {
  public:
    SgdMomentum(std::vector<Parameter*> params, float momentum, float weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        velocity_.reserve(params_.size());
        for (auto* p : params_) velocity_.emplace_back(p->value.numel(), 0.0f);
    }

    void step(float lr) {
        if (lr < 0.0f) throw std::invalid_argument("SgdMomentum::step: negative lr");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& t = params_[i]->value;
            if (!t.has_grad()) continue;
            float* v = velocity_[i].data();
            float* val = t.data();
            const float* g = t.grad();
            const std::size_t total = t.numel();
            for (std::size_t j = 0; j < total; ++j) {
                v[j] = momentum_ * v[j] + g[j] + weight_decay_ * val[j];
                val[j] -= lr * v[j];
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->value.zero_grad();
    }

    const std::vector<Parameter*>& params() const { return params_; }

  private:
    std::vector<Parameter*> params_;
    std::vector<std::vector<float>> velocity_;
    float momentum_;
    float weight_decay_;
};

}  // namespace sct
