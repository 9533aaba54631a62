#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "physgan/errors.hpp"
#include "physgan/rng.hpp"

namespace physgan {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until backward reaches this tensor
    Tape* tape = nullptr;
    bool requires_grad = false;
};
}  // namespace detail

// Value-semantic handle to an n-dimensional array of doubles. Stored values
// are immutable after construction; gradient buffers and tape attachment are
// bookkeeping on the side. An operation's result participates in a tape when
// any of its inputs does.
class Tensor {
public:
    Tensor();  // empty 0-d placeholder, size 0

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor from_values(Shape shape, std::vector<double> values);
    static Tensor random_uniform(Shape shape, Rng& rng, double lo, double hi);

    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t dim(int axis) const;
    int64_t size() const { return static_cast<int64_t>(impl_->values.size()); }
    const std::vector<double>& values() const { return impl_->values; }
    // Scalar payload; ContractError when size() != 1.
    double item() const;
    double at(std::initializer_list<int64_t> index) const;

    bool defined() const { return impl_ != nullptr && !impl_->shape.empty(); }
    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    Tape* tape() const { return impl_->tape; }

    // Marks this tensor as a differentiable leaf of `tape`. Clears any stale
    // gradient. ContractError if already attached to a different live tape.
    Tensor& watch(Tape& tape);

    // Same values, no tape participation.
    Tensor detach() const;

    bool all_finite() const;

    // Internal handle used by operation implementations.
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
    friend class Tape;
    friend Tensor make_op_output(Shape, std::vector<double>, std::initializer_list<const Tensor*>,
                                 std::function<void(const std::vector<double>&)>);
};

// Records executed differentiable operations for one logical computation.
// Reverse replay populates gradients; backward() consumes the tape and frees
// saved intermediates. A tape is confined to one logical thread.
class Tape {
public:
    Tape() = default;
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Populates grad for every participating tensor, starting from a scalar
    // result attached to this tape, then clears the tape.
    void backward(const Tensor& result);
    void clear();
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void(const std::vector<double>&)> pull;
    };
    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<detail::TensorImpl>> watched_;

    friend class Tensor;
    friend Tensor make_op_output(Shape, std::vector<double>, std::initializer_list<const Tensor*>,
                                 std::function<void(const std::vector<double>&)>);
};

// Low-level hook for defining differentiable operations outside this
// translation unit (the warp module uses it for compositing). `pull` receives
// the output gradient and must accumulate into the captured input impls.
Tensor make_op_output(Shape shape, std::vector<double> values,
                      std::initializer_list<const Tensor*> inputs,
                      std::function<void(const std::vector<double>&)> pull);

namespace detail {
// Accumulation helpers for custom pull closures.
void ensure_grad(TensorImpl& t);
inline bool grad_needed(const TensorImpl& t) { return t.tape != nullptr || t.requires_grad; }
}  // namespace detail

// ---- elementwise / linear algebra ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // NumericError on zero divisor
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor sub(double a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor div(const Tensor& a, double b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // NumericError on non-positive input
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);  // 2-d x 2-d
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t stop);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
Tensor reduce_max(const Tensor& a);  // gradient routed to the first max element

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- convolution / resampling ----
// input [N, C, D, H, W], kernel [CO, C, KD, KH, KW]; zero padding.
Tensor conv3d(const Tensor& input, const Tensor& kernel, std::array<int, 3> stride,
              std::array<int, 3> pad);
// input [N, C, H, W], kernel [CO, C, KH, KW]; routed through conv3d with depth 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::array<int, 2> stride,
              std::array<int, 2> pad);
// Nearest-neighbour x2 upsampling of [N, C, H, W].
Tensor upsample_nearest2(const Tensor& input);

// Backward entry point: `result` must be scalar and tape-attached.
void backward(const Tensor& result);

// ---- optimizer ----
struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    int64_t step = 0;
};

// Standard Adam with bias correction. Deterministic given identical inputs;
// returns freshly allocated parameter tensors.
std::vector<Tensor> adam_step(const std::vector<Tensor>& params,
                              const std::vector<const std::vector<double>*>& grads,
                              AdamState& state, const AdamConfig& cfg);

}  // namespace physgan
