#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace microformer {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

struct TensorData {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient reaches this tensor
    bool requires_grad = false;
    std::int64_t tape_id = -1;  // tape that produced this tensor, -1 for leaves
};

// Value-semantic handle over a shared payload. Copies alias the same storage,
// which is what the tape's backward closures rely on.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        check_shape(shape);
        auto d = std::make_shared<TensorData>();
        d->data.assign(static_cast<std::size_t>(numel_of(shape)), value);
        d->shape = std::move(shape);
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        check_shape(shape);
        if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        for (double v : values)
            if (!std::isfinite(v)) throw std::invalid_argument("tensor: non-finite value in constructor");
        auto d = std::make_shared<TensorData>();
        d->shape = std::move(shape);
        d->data = std::move(values);
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->data.size()); }
    int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(d_->shape.size()); }

    std::vector<double>& data() { return d_->data; }
    const std::vector<double>& data() const { return d_->data; }
    double item() const {
        if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
        return d_->data[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool b) { d_->requires_grad = b; }
    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad() {
        ensure_grad();
        return d_->grad;
    }
    const std::vector<double>& grad() const {
        if (d_->grad.empty()) throw std::runtime_error("tensor: gradient not populated");
        return d_->grad;
    }
    void ensure_grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->data.size(), 0.0);
    }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    std::shared_ptr<TensorData> payload() const { return d_; }

  private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
        for (int d : shape)
            if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
    }
    friend class Tape;
    friend Tensor wrap_payload(std::shared_ptr<TensorData>);

    std::shared_ptr<TensorData> d_;
};

inline Tensor wrap_payload(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }

// Every op output goes through this; a NaN/Inf anywhere aborts with the op name.
inline void check_finite(const char* op, const TensorData& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
}

// Records one closure per op, in execution order, which is already a valid
// topological order. backward() replays them in reverse.
class Tape {
  public:
    Tape() : id_(++counter()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    void set_recording(bool b) { recording_ = b; }
    std::int64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    void record(const char* op, const std::shared_ptr<TensorData>& out, std::function<void()> back) {
        if (!recording_) return;
        out->tape_id = id_;
        nodes_.push_back(Node{op, std::move(back)});
    }

    void backward(Tensor loss) {
        if (backward_done_) throw std::runtime_error("tape: backward called twice without reset");
        if (loss.numel() != 1)
            throw std::invalid_argument("tape: backward requires a scalar loss, got " + shape_str(loss.shape()));
        if (loss.payload()->tape_id != id_)
            throw std::invalid_argument("tape: backward on a tensor detached from this tape");
        backward_done_ = true;
        loss.ensure_grad();
        loss.grad()[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
    }

    void reset() {
        nodes_.clear();
        backward_done_ = false;
    }

  private:
    struct Node {
        const char* op;
        std::function<void()> back;
    };
    static std::int64_t& counter() {
        static std::int64_t c = 0;
        return c;
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
    std::int64_t id_;
};

namespace detail {

// ---- matmul kernels -------------------------------------------------------
// Plain loops ordered so the inner loop is contiguous; the compiler vectorizes
// these fine at -O3. `acc` accumulates into c instead of overwriting.

inline void mm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<std::size_t>(i) * n;
        if (!acc)
            for (int j = 0; j < n; ++j) ci[j] = 0.0;
        const double* ai = a + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            double aik = ai[kk];
            const double* bk = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
inline void mm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
            ci[j] = acc ? ci[j] + s : s;
        }
    }
}

// c[k,n] (+)= a[m,k]^T * b[m,n]
inline void mm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
    if (!acc) std::fill(c, c + static_cast<std::size_t>(k) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            double av = ai[kk];
            double* ck = c + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ck[j] += av * bi[j];
        }
    }
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

enum class Broadcast { kNone, kScalar, kTrailing };

inline Broadcast broadcast_kind(const Shape& a, const Shape& b) {
    if (a == b) return Broadcast::kNone;
    if (numel_of(b) == 1) return Broadcast::kScalar;
    if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size())))
        return Broadcast::kTrailing;
    throw std::invalid_argument("elementwise: shapes " + shape_str(a) + " and " + shape_str(b) +
                                " are not broadcastable");
}

}  // namespace detail

// ---- elementwise ops -------------------------------------------------------

namespace detail {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(Tape& tape, const char* name, const Tensor& a, const Tensor& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    Broadcast bc = broadcast_kind(a.shape(), b.shape());
    Tensor out = Tensor::zeros(a.shape());
    auto ad = a.payload();
    auto bd = b.payload();
    auto od = out.payload();
    const std::size_t n = ad->data.size();
    const std::size_t bn = bd->data.size();
    for (std::size_t i = 0; i < n; ++i) {
        double bv = bc == Broadcast::kNone ? bd->data[i] : bc == Broadcast::kScalar ? bd->data[0] : bd->data[i % bn];
        od->data[i] = fwd(ad->data[i], bv);
    }
    check_finite(name, *od);
    if (tape.recording() && (ad->requires_grad || bd->requires_grad)) {
        od->requires_grad = true;
        tape.record(name, od, [ad, bd, od, bc, bwd_a, bwd_b]() {
            if (od->grad.empty()) return;
            const std::size_t n = od->data.size();
            const std::size_t bn = bd->data.size();
            if (ad->requires_grad) {
                if (ad->grad.empty()) ad->grad.assign(ad->data.size(), 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    double bv = bc == Broadcast::kNone  ? bd->data[i]
                                : bc == Broadcast::kScalar ? bd->data[0]
                                                           : bd->data[i % bn];
                    ad->grad[i] += bwd_a(ad->data[i], bv) * od->grad[i];
                }
            }
            if (bd->requires_grad) {
                if (bd->grad.empty()) bd->grad.assign(bd->data.size(), 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    double bv = bc == Broadcast::kNone  ? bd->data[i]
                                : bc == Broadcast::kScalar ? bd->data[0]
                                                           : bd->data[i % bn];
                    std::size_t bi = bc == Broadcast::kNone ? i : bc == Broadcast::kScalar ? 0 : i % bn;
                    bd->grad[bi] += bwd_b(ad->data[i], bv) * od->grad[i];
                }
            }
        });
    }
    return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(Tape& tape, const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(a.shape());
    auto ad = a.payload();
    auto od = out.payload();
    for (std::size_t i = 0; i < ad->data.size(); ++i) od->data[i] = fwd(ad->data[i]);
    check_finite(name, *od);
    if (tape.recording() && ad->requires_grad) {
        od->requires_grad = true;
        tape.record(name, od, [ad, od, bwd]() {
            if (od->grad.empty()) return;
            if (ad->grad.empty()) ad->grad.assign(ad->data.size(), 0.0);
            for (std::size_t i = 0; i < ad->data.size(); ++i)
                ad->grad[i] += bwd(ad->data[i], od->data[i]) * od->grad[i];
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        tape, "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        tape, "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        tape, "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
    return detail::unary_op(
        tape, "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor exp(Tape& tape, const Tensor& a) {
    return detail::unary_op(
        tape, "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor sqrt(Tape& tape, const Tensor& a) {
    return detail::unary_op(
        tape, "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

inline Tensor reciprocal(Tape& tape, const Tensor& a) {
    for (double v : a.data())
        if (v == 0.0) throw std::invalid_argument("reciprocal: division by zero");
    return detail::unary_op(
        tape, "reciprocal", a, [](double x) { return 1.0 / x; },
        [](double, double y) { return -y * y; });
}

// tanh-approximation GeLU
inline Tensor gelu(Tape& tape, const Tensor& a) {
    constexpr double kC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    Tensor out = Tensor::zeros(a.shape());
    auto ad = a.payload();
    auto od = out.payload();
    for (std::size_t i = 0; i < ad->data.size(); ++i) {
        double x = ad->data[i];
        od->data[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
    }
    check_finite("gelu", *od);
    if (tape.recording() && ad->requires_grad) {
        od->requires_grad = true;
        tape.record("gelu", od, [ad, od]() {
            if (od->grad.empty()) return;
            if (ad->grad.empty()) ad->grad.assign(ad->data.size(), 0.0);
            for (std::size_t i = 0; i < ad->data.size(); ++i) {
                double x = ad->data[i];
                double u = kC * (x + kA * x * x * x);
                double t = std::tanh(u);
                double sech2 = 1.0 - t * t;
                double du = kC * (1.0 + 3.0 * kA * x * x);
                ad->grad[i] += (0.5 * (1.0 + t) + 0.5 * x * sech2 * du) * od->grad[i];
            }
        });
    }
    return out;
}

// ---- structural ops --------------------------------------------------------

inline Tensor reshape(Tape& tape, const Tensor& a, Shape new_shape) {
    if (numel_of(new_shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    Tensor out = Tensor::zeros(new_shape);
    auto ad = a.payload();
    auto od = out.payload();
    od->data = ad->data;
    if (tape.recording() && ad->requires_grad) {
        od->requires_grad = true;
        tape.record("reshape", od, [ad, od]() {
            if (od->grad.empty()) return;
            if (ad->grad.empty()) ad->grad.assign(ad->data.size(), 0.0);
            detail::add_into(ad->grad, od->grad);
        });
    }
    return out;
}

namespace detail {
inline std::vector<std::int64_t> strides_of(const Shape& shape) {
    std::vector<std::int64_t> st(shape.size());
    std::int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = acc;
        acc *= shape[static_cast<std::size_t>(i)];
    }
    return st;
}

inline void permute_copy(const Shape& in_shape, const std::vector<int>& axes, const double* src, double* dst,
                         bool add_to_dst) {
    const int nd = static_cast<int>(in_shape.size());
    Shape out_shape(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    auto in_st = strides_of(in_shape);
    std::vector<std::int64_t> src_stride(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) src_stride[static_cast<std::size_t>(i)] = in_st[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    std::vector<int> idx(static_cast<std::size_t>(nd), 0);
    const std::int64_t total = numel_of(in_shape);
    std::int64_t src_off = 0;
    for (std::int64_t o = 0; o < total; ++o) {
        if (add_to_dst)
            dst[o] += src[src_off];
        else
            dst[o] = src[src_off];
        for (int i = nd - 1; i >= 0; --i) {
            auto ui = static_cast<std::size_t>(i);
            if (++idx[ui] < out_shape[ui]) {
                src_off += src_stride[ui];
                break;
            }
            idx[ui] = 0;
            src_off -= src_stride[ui] * (out_shape[ui] - 1);
        }
    }
}
}  // namespace detail

inline Tensor permute(Tape& tape, const Tensor& a, std::vector<int> axes) {
    const int nd = a.ndim();
    if (static_cast<int>(axes.size()) != nd) throw std::invalid_argument("permute: axes rank mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= nd || seen[static_cast<std::size_t>(ax)])
            throw std::invalid_argument("permute: invalid axes");
        seen[static_cast<std::size_t>(ax)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = a.dim(axes[static_cast<std::size_t>(i)]);
    Tensor out = Tensor::zeros(out_shape);
    auto ad = a.payload();
    auto od = out.payload();
    detail::permute_copy(ad->shape, axes, ad->data.data(), od->data.data(), false);
    if (tape.recording() && ad->requires_grad) {
        od->requires_grad = true;
        std::vector<int> inverse(static_cast<std::size_t>(nd));
        for (int i = 0; i < nd; ++i) inverse[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = i;
        tape.record("permute", od, [ad, od, inverse]() {
            if (od->grad.empty()) return;
            if (ad->grad.empty()) ad->grad.assign(ad->data.size(), 0.0);
            detail::permute_copy(od->shape, inverse, od->grad.data(), ad->grad.data(), true);
        });
    }
    return out;
}

// ---- matmul ----------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    auto ad = a.payload();
    auto bd = b.payload();
    auto od = out.payload();
    detail::mm_nn(ad->data.data(), bd->data.data(), od->data.data(), m, k, n, false);
    check_finite("matmul", *od);
    if (tape.recording() && (ad->requires_grad || bd->requires_grad)) {
        od->requires_grad = true;
        tape.record("matmul", od, [ad, bd, od, m, k, n]() {
            if (od->grad.empty()) return;
            if (ad->requires_grad) {
                if (ad->grad.empty()) ad->grad.assign(ad->data.size(), 0.0);
                detail::mm_nt(od->grad.data(), bd->data.data(), ad->grad.data(), m, n, k, true);
            }
            if (bd->requires_grad) {
                if (bd->grad.empty()) bd->grad.assign(bd->data.size(), 0.0);
                detail::mm_tn(ad->data.data(), od->grad.data(), bd->grad.data(), m, k, n, true);
            }
        });
    }
    return out;
}

// Batched matmul over matching leading dimensions:
//   a: [..., m, k], b: [..., k, n]     (transpose_b=false)
//   a: [..., m, k], b: [..., n, k]     (transpose_b=true)
inline Tensor matmul_batched(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b = false) {
    if (a.ndim() < 2 || a.ndim() != b.ndim())
        throw std::invalid_argument("matmul_batched: rank mismatch");
    const int nd = a.ndim();
    std::int64_t batch = 1;
    for (int i = 0; i < nd - 2; ++i) {
        if (a.dim(i) != b.dim(i)) throw std::invalid_argument("matmul_batched: leading dims differ");
        batch *= a.dim(i);
    }
    const int m = a.dim(nd - 2), k = a.dim(nd - 1);
    const int bk = transpose_b ? b.dim(nd - 1) : b.dim(nd - 2);
    const int n = transpose_b ? b.dim(nd - 2) : b.dim(nd - 1);
    if (bk != k)
        throw std::invalid_argument("matmul_batched: inner dims differ, " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Shape out_shape(a.shape());
    out_shape[static_cast<std::size_t>(nd - 1)] = n;
    Tensor out = Tensor::zeros(out_shape);
    auto ad = a.payload();
    auto bd = b.payload();
    auto od = out.payload();
    const std::size_t sa = static_cast<std::size_t>(m) * k;
    const std::size_t sb = static_cast<std::size_t>(k) * n;
    const std::size_t sc = static_cast<std::size_t>(m) * n;
    for (std::int64_t p = 0; p < batch; ++p) {
        const double* ap = ad->data.data() + p * sa;
        const double* bp = bd->data.data() + p * sb;
        double* cp = od->data.data() + p * sc;
        if (transpose_b)
            detail::mm_nt(ap, bp, cp, m, k, n, false);
        else
            detail::mm_nn(ap, bp, cp, m, k, n, false);
    }
    check_finite("matmul_batched", *od);
    if (tape.recording() && (ad->requires_grad || bd->requires_grad)) {
        od->requires_grad = true;
        tape.record("matmul_batched", od, [ad, bd, od, batch, m, k, n, sa, sb, sc, transpose_b]() {
            if (od->grad.empty()) return;
            if (ad->requires_grad && ad->grad.empty()) ad->grad.assign(ad->data.size(), 0.0);
            if (bd->requires_grad && bd->grad.empty()) bd->grad.assign(bd->data.size(), 0.0);
            for (std::int64_t p = 0; p < batch; ++p) {
                const double* ap = ad->data.data() + p * sa;
                const double* bp = bd->data.data() + p * sb;
                const double* gp = od->grad.data() + p * sc;
                if (ad->requires_grad) {
                    double* gap = ad->grad.data() + p * sa;
                    if (transpose_b)
                        detail::mm_nn(gp, bp, gap, m, n, k, true);  // dA += dC * B
                    else
                        detail::mm_nt(gp, bp, gap, m, n, k, true);  // dA += dC * B^T
                }
                if (bd->requires_grad) {
                    double* gbp = bd->grad.data() + p * sb;
                    if (transpose_b)
                        detail::mm_tn(gp, ap, gbp, m, n, k, true);  // dB += dC^T * A
                    else
                        detail::mm_tn(ap, gp, gbp, m, k, n, true);  // dB += A^T * dC
                }
            }
        });
    }
    return out;
}

// ---- reductions ------------------------------------------------------------

enum class ReduceKind { kSum, kMean, kMax, kVariance };

inline Tensor reduce(Tape& tape, ReduceKind kind, const Tensor& a, int axis) {
    const int nd = a.ndim();
    if (axis < 0 || axis >= nd) throw std::invalid_argument("reduce: axis out of range");
    const int reduced = a.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
    Shape out_shape;
    for (int i = 0; i < nd; ++i)
        if (i != axis) out_shape.push_back(a.dim(i));
    if (out_shape.empty()) out_shape = {1};

    Tensor out = Tensor::zeros(out_shape);
    auto ad = a.payload();
    auto od = out.payload();
    std::vector<std::int64_t> argmax;
    if (kind == ReduceKind::kMax) argmax.assign(static_cast<std::size_t>(outer * inner), 0);

    const double* src = ad->data.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = (o * reduced) * inner + in;
            double acc;
            switch (kind) {
                case ReduceKind::kSum:
                case ReduceKind::kMean: {
                    acc = 0.0;
                    for (int r = 0; r < reduced; ++r) acc += src[base + r * inner];
                    if (kind == ReduceKind::kMean) acc /= reduced;
                    break;
                }
                case ReduceKind::kMax: {
                    acc = src[base];
                    std::int64_t best = 0;
                    for (int r = 1; r < reduced; ++r) {
                        double v = src[base + r * inner];
                        if (v > acc) {
                            acc = v;
                            best = r;
                        }
                    }
                    argmax[static_cast<std::size_t>(o * inner + in)] = best;
                    break;
                }
                case ReduceKind::kVariance: {
                    double mean = 0.0;
                    for (int r = 0; r < reduced; ++r) mean += src[base + r * inner];
                    mean /= reduced;
                    acc = 0.0;
                    for (int r = 0; r < reduced; ++r) {
                        double d = src[base + r * inner] - mean;
                        acc += d * d;
                    }
                    acc /= reduced;  // population convention
                    break;
                }
            }
            od->data[static_cast<std::size_t>(o * inner + in)] = acc;
        }
    }
    check_finite("reduce", *od);
    if (tape.recording() && ad->requires_grad) {
        od->requires_grad = true;
        tape.record("reduce", od, [ad, od, kind, outer, inner, reduced, argmax]() {
            if (od->grad.empty()) return;
            if (ad->grad.empty()) ad->grad.assign(ad->data.size(), 0.0);
            const double* src = ad->data.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = (o * reduced) * inner + in;
                    const double g = od->grad[static_cast<std::size_t>(o * inner + in)];
                    switch (kind) {
                        case ReduceKind::kSum:
                            for (int r = 0; r < reduced; ++r) ad->grad[static_cast<std::size_t>(base + r * inner)] += g;
                            break;
                        case ReduceKind::kMean:
                            for (int r = 0; r < reduced; ++r)
                                ad->grad[static_cast<std::size_t>(base + r * inner)] += g / reduced;
                            break;
                        case ReduceKind::kMax:
                            ad->grad[static_cast<std::size_t>(base + argmax[static_cast<std::size_t>(o * inner + in)] * inner)] += g;
                            break;
                        case ReduceKind::kVariance: {
                            double mean = 0.0;
                            for (int r = 0; r < reduced; ++r) mean += src[base + r * inner];
                            mean /= reduced;
                            for (int r = 0; r < reduced; ++r)
                                ad->grad[static_cast<std::size_t>(base + r * inner)] +=
                                    g * 2.0 * (src[base + r * inner] - mean) / reduced;
                            break;
                        }
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor reduce_sum(Tape& tape, const Tensor& a, int axis) { return reduce(tape, ReduceKind::kSum, a, axis); }
inline Tensor reduce_mean(Tape& tape, const Tensor& a, int axis) { return reduce(tape, ReduceKind::kMean, a, axis); }
inline Tensor reduce_max(Tape& tape, const Tensor& a, int axis) { return reduce(tape, ReduceKind::kMax, a, axis); }
inline Tensor reduce_variance(Tape& tape, const Tensor& a, int axis) {
    return reduce(tape, ReduceKind::kVariance, a, axis);
}

inline Tensor sum_all(Tape& tape, const Tensor& a) {
    Tensor flat = a.ndim() == 1 ? a : reshape(tape, a, {static_cast<int>(a.numel())});
    return reduce_sum(tape, flat, 0);
}

}  // namespace microformer
