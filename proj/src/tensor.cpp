#include "physgan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace physgan {

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        strides[i] = strides[i + 1] * shape[i + 1];
    return strides;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> values) {
    if (numel(shape) != static_cast<int64_t>(values.size()))
        throw DimensionError("tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    return impl;
}

void validate_shape(const Shape& shape) {
    for (int64_t d : shape)
        if (d <= 0) throw DimensionError("tensor: non-positive extent in " + shape_str(shape));
}

}  // namespace

namespace detail {
void ensure_grad(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

Tensor Tensor::zeros(Shape shape) {
    validate_shape(shape);
    int64_t n = numel(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
    validate_shape(shape);
    int64_t n = numel(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
    validate_shape(shape);
    return Tensor(make_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::random_uniform(Shape shape, Rng& rng, double lo, double hi) {
    validate_shape(shape);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(make_impl(std::move(shape), std::move(v)));
}

int64_t Tensor::dim(int axis) const {
    if (axis < 0 || axis >= rank())
        throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(impl_->shape));
    return impl_->shape[axis];
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a scalar, got " + shape_str(impl_->shape));
    return impl_->values[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
    if (static_cast<int>(index.size()) != rank())
        throw DimensionError("at(): index rank mismatch for " + shape_str(impl_->shape));
    auto strides = row_major_strides(impl_->shape);
    int64_t flat = 0;
    int i = 0;
    for (int64_t ix : index) {
        if (ix < 0 || ix >= impl_->shape[i]) throw DimensionError("at(): index out of bounds");
        flat += ix * strides[i++];
    }
    return impl_->values[flat];
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty())
        throw ContractError("grad(): no gradient present; run backward over a tape first");
    return impl_->grad;
}

Tensor& Tensor::watch(Tape& tape) {
    if (impl_->tape != nullptr && impl_->tape != &tape)
        throw ContractError("watch(): tensor already attached to a different tape");
    impl_->tape = &tape;
    impl_->requires_grad = true;
    impl_->grad.clear();
    tape.watched_.push_back(impl_);
    return *this;
}

Tensor Tensor::detach() const {
    return Tensor(make_impl(impl_->shape, impl_->values));
}

bool Tensor::all_finite() const {
    for (double v : impl_->values)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::~Tape() { clear(); }

void Tape::clear() {
    for (auto& node : nodes_)
        if (node.output) node.output->tape = nullptr;
    for (auto& leaf : watched_)
        if (leaf) leaf->tape = nullptr;
    nodes_.clear();
    watched_.clear();
}

void Tape::backward(const Tensor& result) {
    if (result.size() != 1)
        throw ContractError("backward(): result must be scalar, got " + shape_str(result.shape()));
    if (result.tape() != this)
        throw ContractError("backward(): result is not attached to this tape");
    result.impl()->grad.assign(1, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        it->pull(it->output->grad);
    }
    clear();
}

Tensor make_op_output(Shape shape, std::vector<double> values,
                      std::initializer_list<const Tensor*> inputs,
                      std::function<void(const std::vector<double>&)> pull) {
    auto out = make_impl(std::move(shape), std::move(values));
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        Tape* it = t->impl()->tape;
        if (it == nullptr) continue;
        if (tape != nullptr && tape != it)
            throw ContractError("operation mixes tensors from two different tapes");
        tape = it;
    }
    Tensor result{nullptr};
    result.impl_ = out;
    if (tape != nullptr) {
        out->tape = tape;
        out->requires_grad = true;
        tape->nodes_.push_back({out, std::move(pull)});
    }
    return result;
}

void backward(const Tensor& result) {
    if (result.tape() == nullptr)
        throw ContractError("backward(): result does not participate in a tape");
    result.tape()->backward(result);
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

namespace {

// Trailing-dimension broadcasting: shapes align right, extents must match or be 1.
Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t ra = a.size(), rb = b.size();
    const std::size_t r = std::max(ra, rb);
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            throw DimensionError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` viewed inside the broadcast output frame; broadcast axes get 0.
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    auto st = row_major_strides(in);
    std::vector<int64_t> res(out.size(), 0);
    const std::size_t off = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) res[off + i] = in[i] == 1 ? 0 : st[i];
    return res;
}

struct BinaryMap {
    Shape out_shape;
    int64_t n;
    bool same_shape;
    std::vector<int64_t> out_strides, a_strides, b_strides;

    BinaryMap(const Shape& a, const Shape& b)
        : out_shape(broadcast_shape(a, b)),
          n(numel(out_shape)),
          same_shape(a == b) {
        if (!same_shape) {
            out_strides = row_major_strides(out_shape);
            a_strides = broadcast_strides(a, out_shape);
            b_strides = broadcast_strides(b, out_shape);
        }
    }

    // Flat index of each operand for output flat index `i`.
    void locate(int64_t i, int64_t& ia, int64_t& ib) const {
        if (same_shape) {
            ia = ib = i;
            return;
        }
        ia = 0;
        ib = 0;
        int64_t rem = i;
        for (std::size_t ax = 0; ax < out_shape.size(); ++ax) {
            int64_t c = rem / out_strides[ax];
            rem -= c * out_strides[ax];
            ia += c * a_strides[ax];
            ib += c * b_strides[ax];
        }
    }
};

using ValueFn = double (*)(double, double);
using GradFn = void (*)(double a, double b, double g, double& ga, double& gb);

Tensor binary_op(const Tensor& a, const Tensor& b, ValueFn f, GradFn df) {
    BinaryMap map(a.shape(), b.shape());
    std::vector<double> out(map.n);
    const auto& av = a.values();
    const auto& bv = b.values();
    if (map.same_shape) {
        for (int64_t i = 0; i < map.n; ++i) out[i] = f(av[i], bv[i]);
    } else {
        for (int64_t i = 0; i < map.n; ++i) {
            int64_t ia, ib;
            map.locate(i, ia, ib);
            out[i] = f(av[ia], bv[ib]);
        }
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op_output(
        map.out_shape, std::move(out), {&a, &b},
        [ai, bi, map, df](const std::vector<double>& gout) {
            const bool need_a = detail::grad_needed(*ai);
            const bool need_b = detail::grad_needed(*bi);
            if (!need_a && !need_b) return;
            if (need_a) detail::ensure_grad(*ai);
            if (need_b) detail::ensure_grad(*bi);
            for (int64_t i = 0; i < map.n; ++i) {
                int64_t ia, ib;
                map.locate(i, ia, ib);
                double ga = 0, gb = 0;
                df(ai->values[ia], bi->values[ib], gout[i], ga, gb);
                if (need_a) ai->grad[ia] += ga;
                if (need_b) bi->grad[ib] += gb;
            }
        });
}

using UnaryValueFn = double (*)(double);
using UnaryGradFn = double (*)(double x);  // df/dx, recomputed from the saved input

Tensor unary_op(const Tensor& a, UnaryValueFn f, UnaryGradFn df) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    auto ai = a.impl();
    return make_op_output(a.shape(), std::move(out), {&a},
                          [ai, df](const std::vector<double>& gout) {
                              if (!detail::grad_needed(*ai)) return;
                              detail::ensure_grad(*ai);
                              for (std::size_t i = 0; i < gout.size(); ++i)
                                  ai->grad[i] += gout[i] * df(ai->values[i]);
                          });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double g, double& ga, double& gb) {
            ga = g;
            gb = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double g, double& ga, double& gb) {
            ga = g;
            gb = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& ga, double& gb) {
            ga = g * y;
            gb = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    for (double y : b.values())
        if (y == 0.0) throw NumericError("div: zero divisor");
    return binary_op(
        a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& ga, double& gb) {
            ga = g / y;
            gb = -g * x / (y * y);
        });
}

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor sub(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor sub(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor div(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
Tensor neg(const Tensor& a) { return mul(a, -1.0); }

namespace {
inline double sigmoid_value(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
    for (double v : a.values())
        if (v <= 0.0) throw NumericError("log: non-positive input");
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double x) {
            const double y = std::tanh(x);
            return 1.0 - y * y;
        });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, [](double x) { return sigmoid_value(x); },
                    [](double x) {
                        const double y = sigmoid_value(x);
                        return y * (1.0 - y);
                    });
}

Tensor abs(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    validate_shape(shape);
    if (numel(shape) != a.size())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    auto ai = a.impl();
    return make_op_output(std::move(shape), a.values(), {&a},
                          [ai](const std::vector<double>& gout) {
                              if (!detail::grad_needed(*ai)) return;
                              detail::ensure_grad(*ai);
                              for (std::size_t i = 0; i < gout.size(); ++i) ai->grad[i] += gout[i];
                          });
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t stop) {
    if (axis < 0 || axis >= a.rank()) throw DimensionError("slice: bad axis");
    if (start < 0 || stop > a.dim(axis) || start >= stop)
        throw DimensionError("slice: bad range [" + std::to_string(start) + "," +
                             std::to_string(stop) + ") on axis of extent " +
                             std::to_string(a.dim(axis)));
    Shape out_shape = a.shape();
    out_shape[axis] = stop - start;
    // Contiguous block copy: outer x (range * inner).
    int64_t inner = 1;
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    const int64_t in_row = a.dim(axis) * inner;
    const int64_t out_row = (stop - start) * inner;
    std::vector<double> out(numel(out_shape));
    const auto& av = a.values();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * out_row, av.data() + o * in_row + start * inner,
                    sizeof(double) * out_row);
    auto ai = a.impl();
    return make_op_output(std::move(out_shape), std::move(out), {&a},
                          [ai, outer, inner, in_row, out_row, start](const std::vector<double>& g) {
                              if (!detail::grad_needed(*ai)) return;
                              detail::ensure_grad(*ai);
                              for (int64_t o = 0; o < outer; ++o) {
                                  double* dst = ai->grad.data() + o * in_row + start * inner;
                                  const double* src = g.data() + o * out_row;
                                  for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
                              }
                          });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& base = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(base.size())) throw DimensionError("concat: bad axis");
    Shape out_shape = base;
    out_shape[axis] = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != static_cast<int>(base.size()))
            throw DimensionError("concat: rank mismatch");
        for (int i = 0; i < p.rank(); ++i)
            if (i != axis && p.dim(i) != base[i])
                throw DimensionError("concat: extent mismatch off the concat axis");
        out_shape[axis] += p.dim(axis);
    }
    int64_t inner = 1;
    for (std::size_t i = axis + 1; i < base.size(); ++i) inner *= base[i];
    int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= base[i];
    const int64_t out_row = out_shape[axis] * inner;
    std::vector<double> out(numel(out_shape));
    int64_t col = 0;
    for (const Tensor& p : parts) {
        const int64_t p_row = p.dim(axis) * inner;
        const auto& pv = p.values();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * out_row + col, pv.data() + o * p_row,
                        sizeof(double) * p_row);
        col += p_row;
    }

    // Anchor tape participation on the first taped part; all parts must agree.
    const Tensor* anchor = nullptr;
    for (const Tensor& p : parts) {
        if (p.tape() == nullptr) continue;
        if (anchor != nullptr && anchor->tape() != p.tape())
            throw ContractError("concat mixes tensors from two different tapes");
        if (anchor == nullptr) anchor = &p;
    }
    if (anchor == nullptr) return Tensor::from_values(std::move(out_shape), std::move(out));

    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    return make_op_output(std::move(out_shape), std::move(out), {anchor},
                          [impls, outer, inner, out_row, axis](const std::vector<double>& g) {
                              int64_t col2 = 0;
                              for (const auto& im : impls) {
                                  const int64_t p_row = im->shape[axis] * inner;
                                  if (detail::grad_needed(*im)) {
                                      detail::ensure_grad(*im);
                                      for (int64_t o = 0; o < outer; ++o) {
                                          double* dst = im->grad.data() + o * p_row;
                                          const double* src = g.data() + o * out_row + col2;
                                          for (int64_t i = 0; i < p_row; ++i) dst[i] += src[i];
                                      }
                                  }
                                  col2 += p_row;
                              }
                          });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor reduce_sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto ai = a.impl();
    return make_op_output({1}, {s}, {&a}, [ai](const std::vector<double>& gout) {
        if (!detail::grad_needed(*ai)) return;
        detail::ensure_grad(*ai);
        for (double& g : ai->grad) g += gout[0];
    });
}

Tensor reduce_mean(const Tensor& a) {
    const double inv_n = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto ai = a.impl();
    return make_op_output({1}, {s * inv_n}, {&a}, [ai, inv_n](const std::vector<double>& gout) {
        if (!detail::grad_needed(*ai)) return;
        detail::ensure_grad(*ai);
        for (double& g : ai->grad) g += gout[0] * inv_n;
    });
}

Tensor reduce_max(const Tensor& a) {
    const auto& av = a.values();
    std::size_t arg = 0;
    for (std::size_t i = 1; i < av.size(); ++i)
        if (av[i] > av[arg]) arg = i;
    auto ai = a.impl();
    return make_op_output({1}, {av[arg]}, {&a}, [ai, arg](const std::vector<double>& gout) {
        if (!detail::grad_needed(*ai)) return;
        detail::ensure_grad(*ai);
        ai->grad[arg] += gout[0];
    });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: expects 2-d operands, got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (int64_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = av + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double apv = arow[p];
            const double* brow = bv + p * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += apv * brow[j];
        }
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op_output({m, n}, std::move(out), {&a, &b},
                          [ai, bi, m, k, n](const std::vector<double>& g) {
                              if (detail::grad_needed(*ai)) {
                                  detail::ensure_grad(*ai);
                                  // dA = g . B^T
                                  for (int64_t i = 0; i < m; ++i)
                                      for (int64_t p = 0; p < k; ++p) {
                                          double acc = 0.0;
                                          const double* grow = g.data() + i * n;
                                          const double* brow = bi->values.data() + p * n;
                                          for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                          ai->grad[i * k + p] += acc;
                                      }
                              }
                              if (detail::grad_needed(*bi)) {
                                  detail::ensure_grad(*bi);
                                  // dB = A^T . g
                                  for (int64_t p = 0; p < k; ++p)
                                      for (int64_t i = 0; i < m; ++i) {
                                          const double apv = ai->values[i * k + p];
                                          const double* grow = g.data() + i * n;
                                          double* brow = bi->grad.data() + p * n;
                                          for (int64_t j = 0; j < n; ++j) brow[j] += apv * grow[j];
                                      }
                              }
                          });
}

// ---------------------------------------------------------------------------
// conv3d / conv2d / upsampling
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int64_t N, C, D, H, W, CO, KD, KH, KW, OD, OH, OW;
    int sd, sh, sw, pd, ph, pw;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, std::array<int, 3> stride,
                   std::array<int, 3> pad) {
    if (input.rank() != 5 || kernel.rank() != 5)
        throw DimensionError("conv3d: expects input [N,C,D,H,W] and kernel [CO,C,KD,KH,KW]");
    ConvDims d{};
    d.N = input.dim(0);
    d.C = input.dim(1);
    d.D = input.dim(2);
    d.H = input.dim(3);
    d.W = input.dim(4);
    d.CO = kernel.dim(0);
    d.KD = kernel.dim(2);
    d.KH = kernel.dim(3);
    d.KW = kernel.dim(4);
    if (kernel.dim(1) != d.C)
        throw DimensionError("conv3d: kernel expects " + std::to_string(kernel.dim(1)) +
                             " input channels, input has " + std::to_string(d.C));
    d.sd = stride[0];
    d.sh = stride[1];
    d.sw = stride[2];
    d.pd = pad[0];
    d.ph = pad[1];
    d.pw = pad[2];
    if (d.sd < 1 || d.sh < 1 || d.sw < 1) throw DimensionError("conv3d: stride must be >= 1");
    if (d.pd < 0 || d.ph < 0 || d.pw < 0) throw DimensionError("conv3d: negative padding");
    d.OD = (d.D + 2 * d.pd - d.KD) / d.sd + 1;
    d.OH = (d.H + 2 * d.ph - d.KH) / d.sh + 1;
    d.OW = (d.W + 2 * d.pw - d.KW) / d.sw + 1;
    if (d.D + 2 * d.pd < d.KD || d.H + 2 * d.ph < d.KH || d.W + 2 * d.pw < d.KW)
        throw DimensionError("conv3d: padded input smaller than kernel");
    return d;
}

void conv3d_forward(const ConvDims& d, const double* in, const double* ker, double* out) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < d.N; ++n) {
        for (int64_t co = 0; co < d.CO; ++co) {
            for (int64_t od = 0; od < d.OD; ++od)
                for (int64_t oh = 0; oh < d.OH; ++oh)
                    for (int64_t ow = 0; ow < d.OW; ++ow) {
                        double acc = 0.0;
                        for (int64_t c = 0; c < d.C; ++c)
                            for (int64_t kd = 0; kd < d.KD; ++kd) {
                                const int64_t id = od * d.sd - d.pd + kd;
                                if (id < 0 || id >= d.D) continue;
                                for (int64_t kh = 0; kh < d.KH; ++kh) {
                                    const int64_t ih = oh * d.sh - d.ph + kh;
                                    if (ih < 0 || ih >= d.H) continue;
                                    const double* irow =
                                        in + (((n * d.C + c) * d.D + id) * d.H + ih) * d.W;
                                    const double* krow =
                                        ker + (((co * d.C + c) * d.KD + kd) * d.KH + kh) * d.KW;
                                    const int64_t iw0 = ow * d.sw - d.pw;
                                    for (int64_t kw = 0; kw < d.KW; ++kw) {
                                        const int64_t iw = iw0 + kw;
                                        if (iw < 0 || iw >= d.W) continue;
                                        acc += krow[kw] * irow[iw];
                                    }
                                }
                            }
                        out[(((n * d.CO + co) * d.OD + od) * d.OH + oh) * d.OW + ow] = acc;
                    }
        }
    }
}

void conv3d_backward_input(const ConvDims& d, const double* g, const double* ker, double* gin) {
    // Each thread owns one input channel: writes are disjoint, order fixed.
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < d.C; ++c) {
        for (int64_t n = 0; n < d.N; ++n)
            for (int64_t co = 0; co < d.CO; ++co)
                for (int64_t od = 0; od < d.OD; ++od)
                    for (int64_t oh = 0; oh < d.OH; ++oh)
                        for (int64_t ow = 0; ow < d.OW; ++ow) {
                            const double gv =
                                g[(((n * d.CO + co) * d.OD + od) * d.OH + oh) * d.OW + ow];
                            if (gv == 0.0) continue;
                            for (int64_t kd = 0; kd < d.KD; ++kd) {
                                const int64_t id = od * d.sd - d.pd + kd;
                                if (id < 0 || id >= d.D) continue;
                                for (int64_t kh = 0; kh < d.KH; ++kh) {
                                    const int64_t ih = oh * d.sh - d.ph + kh;
                                    if (ih < 0 || ih >= d.H) continue;
                                    double* grow =
                                        gin + (((n * d.C + c) * d.D + id) * d.H + ih) * d.W;
                                    const double* krow =
                                        ker + (((co * d.C + c) * d.KD + kd) * d.KH + kh) * d.KW;
                                    const int64_t iw0 = ow * d.sw - d.pw;
                                    for (int64_t kw = 0; kw < d.KW; ++kw) {
                                        const int64_t iw = iw0 + kw;
                                        if (iw < 0 || iw >= d.W) continue;
                                        grow[iw] += gv * krow[kw];
                                    }
                                }
                            }
                        }
    }
}

void conv3d_backward_kernel(const ConvDims& d, const double* g, const double* in, double* gker) {
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < d.CO; ++co) {
        for (int64_t n = 0; n < d.N; ++n)
            for (int64_t od = 0; od < d.OD; ++od)
                for (int64_t oh = 0; oh < d.OH; ++oh)
                    for (int64_t ow = 0; ow < d.OW; ++ow) {
                        const double gv =
                            g[(((n * d.CO + co) * d.OD + od) * d.OH + oh) * d.OW + ow];
                        if (gv == 0.0) continue;
                        for (int64_t c = 0; c < d.C; ++c)
                            for (int64_t kd = 0; kd < d.KD; ++kd) {
                                const int64_t id = od * d.sd - d.pd + kd;
                                if (id < 0 || id >= d.D) continue;
                                for (int64_t kh = 0; kh < d.KH; ++kh) {
                                    const int64_t ih = oh * d.sh - d.ph + kh;
                                    if (ih < 0 || ih >= d.H) continue;
                                    const double* irow =
                                        in + (((n * d.C + c) * d.D + id) * d.H + ih) * d.W;
                                    double* krow =
                                        gker + (((co * d.C + c) * d.KD + kd) * d.KH + kh) * d.KW;
                                    const int64_t iw0 = ow * d.sw - d.pw;
                                    for (int64_t kw = 0; kw < d.KW; ++kw) {
                                        const int64_t iw = iw0 + kw;
                                        if (iw < 0 || iw >= d.W) continue;
                                        krow[kw] += gv * irow[iw];
                                    }
                                }
                            }
                    }
    }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& kernel, std::array<int, 3> stride,
              std::array<int, 3> pad) {
    const ConvDims d = conv_dims(input, kernel, stride, pad);
    std::vector<double> out(d.N * d.CO * d.OD * d.OH * d.OW);
    conv3d_forward(d, input.values().data(), kernel.values().data(), out.data());
    auto ii = input.impl();
    auto ki = kernel.impl();
    return make_op_output({d.N, d.CO, d.OD, d.OH, d.OW}, std::move(out), {&input, &kernel},
                          [ii, ki, d](const std::vector<double>& g) {
                              if (detail::grad_needed(*ii)) {
                                  detail::ensure_grad(*ii);
                                  conv3d_backward_input(d, g.data(), ki->values.data(),
                                                        ii->grad.data());
                              }
                              if (detail::grad_needed(*ki)) {
                                  detail::ensure_grad(*ki);
                                  conv3d_backward_kernel(d, g.data(), ii->values.data(),
                                                         ki->grad.data());
                              }
                          });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::array<int, 2> stride,
              std::array<int, 2> pad) {
    if (input.rank() != 4 || kernel.rank() != 4)
        throw DimensionError("conv2d: expects input [N,C,H,W] and kernel [CO,C,KH,KW]");
    Tensor in5 = reshape(input, {input.dim(0), input.dim(1), 1, input.dim(2), input.dim(3)});
    Tensor k5 = reshape(kernel, {kernel.dim(0), kernel.dim(1), 1, kernel.dim(2), kernel.dim(3)});
    Tensor out5 = conv3d(in5, k5, {1, stride[0], stride[1]}, {0, pad[0], pad[1]});
    return reshape(out5, {out5.dim(0), out5.dim(1), out5.dim(3), out5.dim(4)});
}

Tensor upsample_nearest2(const Tensor& input) {
    if (input.rank() != 4) throw DimensionError("upsample_nearest2: expects [N,C,H,W]");
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    std::vector<double> out(N * C * 4 * H * W);
    const auto& iv = input.values();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* src = iv.data() + nc * H * W;
        double* dst = out.data() + nc * 4 * H * W;
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                const double v = src[h * W + w];
                const int64_t r = 2 * h, c = 2 * w;
                dst[r * 2 * W + c] = v;
                dst[r * 2 * W + c + 1] = v;
                dst[(r + 1) * 2 * W + c] = v;
                dst[(r + 1) * 2 * W + c + 1] = v;
            }
    }
    auto ii = input.impl();
    return make_op_output({N, C, 2 * H, 2 * W}, std::move(out), {&input},
                          [ii, N, C, H, W](const std::vector<double>& g) {
                              if (!detail::grad_needed(*ii)) return;
                              detail::ensure_grad(*ii);
                              for (int64_t nc = 0; nc < N * C; ++nc) {
                                  const double* gsrc = g.data() + nc * 4 * H * W;
                                  double* gdst = ii->grad.data() + nc * H * W;
                                  for (int64_t h = 0; h < H; ++h)
                                      for (int64_t w = 0; w < W; ++w) {
                                          const int64_t r = 2 * h, c = 2 * w;
                                          gdst[h * W + w] += gsrc[r * 2 * W + c] +
                                                             gsrc[r * 2 * W + c + 1] +
                                                             gsrc[(r + 1) * 2 * W + c] +
                                                             gsrc[(r + 1) * 2 * W + c + 1];
                                      }
                              }
                          });
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

std::vector<Tensor> adam_step(const std::vector<Tensor>& params,
                              const std::vector<const std::vector<double>*>& grads,
                              AdamState& state, const AdamConfig& cfg) {
    if (params.size() != grads.size())
        throw DimensionError("adam_step: params/grads count mismatch");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].size(), 0.0);
            state.v[i].assign(params[i].size(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw DimensionError("adam_step: state was initialized for a different parameter set");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    std::vector<Tensor> updated;
    updated.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& g = *grads[i];
        if (g.size() != static_cast<std::size_t>(params[i].size()))
            throw DimensionError("adam_step: gradient shape mismatch at parameter " +
                                 std::to_string(i));
        std::vector<double> next = params[i].values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < g.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            next[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        updated.push_back(Tensor::from_values(params[i].shape(), std::move(next)));
    }
    return updated;
}

}  // namespace physgan
