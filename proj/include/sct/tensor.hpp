#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sct {

// Dense rank-4 shape in (N, C, H, W) order. Lower-rank values (matrices,
// per-channel vectors, scalars) are carried with trailing dims set to 1.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    Shape() = default;
    Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    bool operator==(const Shape& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

// Rank-4 float tensor with copy-on-handle semantics: copies share storage
// and the gradient slot, like a reference-counted view of the whole buffer.
// The gradient buffer is allocated lazily on first accumulation.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape s)
        : shape_(s),
          data_(std::make_shared<std::vector<float>>(checked_numel(s), 0.0f)),
          grad_(std::make_shared<GradSlot>()) {}
    Tensor(int n, int c, int h, int w) : Tensor(Shape(n, c, h, w)) {}

    static Tensor full(Shape s, float v) {
        Tensor t(s);
        for (auto& x : *t.data_) x = v;
        return t;
    }
    static Tensor scalar(float v) { return full(Shape(1, 1, 1, 1), v); }
    static Tensor from_vector(Shape s, const std::vector<float>& values) {
        Tensor t(s);
        if (values.size() != s.numel()) {
            throw std::invalid_argument("Tensor::from_vector: " + std::to_string(values.size()) +
                                        " values for shape " + s.str());
        }
        *t.data_ = values;
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    int n() const { return shape_.n; }
    int c() const { return shape_.c; }
    int h() const { return shape_.h; }
    int w() const { return shape_.w; }
    std::size_t numel() const { return shape_.numel(); }

    float* data() { return data_->data(); }
    const float* data() const { return data_->data(); }
    std::vector<float>& vec() { return *data_; }
    const std::vector<float>& vec() const { return *data_; }

    std::size_t index(int in, int ic, int ih, int iw) const {
        return ((static_cast<std::size_t>(in) * shape_.c + ic) * shape_.h + ih) * shape_.w + iw;
    }
    float& at(int in, int ic, int ih, int iw) { return (*data_)[index(in, ic, ih, iw)]; }
    float at(int in, int ic, int ih, int iw) const { return (*data_)[index(in, ic, ih, iw)]; }

    float item() const {
        if (numel() != 1) {
            throw std::logic_error("Tensor::item on non-scalar shape " + shape_.str());
        }
        return (*data_)[0];
    }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool b) {
        requires_grad_ = b;
        return *this;
    }

    bool has_grad() const { return grad_ && !grad_->g.empty(); }
    // Grad buffer, zero-allocated on first touch. Shared between handle copies.
    float* grad() {
        ensure_grad();
        return grad_->g.data();
    }
    const std::vector<float>& grad_vec() const {
        if (!has_grad()) {
            throw std::logic_error("Tensor: gradient never populated for shape " + shape_.str());
        }
        return grad_->g;
    }
    void ensure_grad() {
        if (grad_->g.empty()) grad_->g.assign(numel(), 0.0f);
    }
    void zero_grad() {
        if (has_grad()) grad_->g.assign(numel(), 0.0f);
    }

    // Storage identity, used by disjointness and sharing assertions.
    const void* storage_id() const { return static_cast<const void*>(data_.get()); }
    bool shares_storage(const Tensor& o) const { return data_ == o.data_; }

    // Deep copy of values; fresh grad slot, requires_grad cleared.
    Tensor clone() const {
        Tensor t(shape_);
        *t.data_ = *data_;
        return t;
    }

  private:
    static std::size_t checked_numel(const Shape& s) {
        if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
            throw std::invalid_argument("Tensor: nonpositive dim in shape " + s.str());
        }
        return s.numel();
    }

    struct GradSlot {
        std::vector<float> g;
    };

    Shape shape_;
    std::shared_ptr<std::vector<float>> data_;
    std::shared_ptr<GradSlot> grad_;
    bool requires_grad_ = false;
};

// Named trainable tensor. Names are unique within a model and double as
// checkpoint keys, e.g. "stage2.block1.conv1.weight".
struct Parameter {
    std::string name;
    Tensor value;

    Parameter() = default;
    Parameter(std::string name_, Tensor value_) : name(std::move(name_)), value(std::move(value_)) {
        value.set_requires_grad(true);
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape().str() +
                                    " vs " + b.shape().str());
    }
}

}  // namespace sct
