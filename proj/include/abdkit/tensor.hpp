#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace abdkit::ad {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
};

/// Handle to a dense row-major float64 array. Copies alias the same storage;
/// use clone() for an independent copy.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);

    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const;
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    double item() const;
    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    bool has_grad() const { return !impl_->grad.empty(); }
    /// Gradient buffer; all zeros if no gradient has been accumulated.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    Tensor clone() const;
    /// Same values, no gradient tracking.
    Tensor detach() const;

    TensorImpl* impl() const { return impl_.get(); }
    bool same(const Tensor& o) const { return impl_ == o.impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Records differentiable ops executed on this thread while it is alive.
/// Constructing a Tape makes it the thread's active tape; the previous one
/// is restored on destruction. Without an active tape all ops run forward-only.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();
    /// True when an op on `inputs` should be recorded.
    static bool recording(std::initializer_list<const Tensor*> inputs);

    /// Appends an op. `fn` reads output.grad() and accumulates into its inputs.
    void record(const Tensor& output, BackwardFn fn);

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate.
    void backward(const Tensor& loss);
    /// Drops recorded ops so the tape can be reused.
    void reset();
    std::size_t size() const { return entries_.size(); }

private:
    struct Entry {
        Tensor output;
        BackwardFn fn;
    };
    std::vector<Entry> entries_;
    bool consumed_ = false;
    Tape* previous_ = nullptr;
};

/// Adds `g` into `t`'s gradient buffer if `t` tracks gradients.
void accumulate_grad(const Tensor& t, std::span<const double> g);

// --- ops -------------------------------------------------------------------
// Unless noted, shapes must match exactly; there is no broadcasting.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Tensor transpose_last2(const Tensor& a);

/// [m,k] x [k,n] or batched [B,m,k] x [B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * W[out, in]^T + b[out]; `bias` may be empty.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);

/// Softmax along `axis` (negative counts from the end), max-subtracted.
Tensor softmax(const Tensor& x, int axis = -1);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over the trailing `count` axes.
Tensor mean_trailing(const Tensor& x, int count);

struct Conv2dParams {
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
};
struct Conv3dParams {
    int stride_d = 1, stride_h = 1, stride_w = 1;
    int pad_d = 0, pad_h = 0, pad_w = 0;
};

/// Cross-correlation. x: [N,C,H,W], kernel: [O,C,kh,kw], bias: [O] or null.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor* bias, const Conv2dParams& p);
/// x: [N,C,D,H,W], kernel: [O,C,kd,kh,kw], bias: [O] or null.
Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor* bias, const Conv3dParams& p);

int conv_out_extent(int in, int kernel, int stride, int pad);

/// softmax(Q K^T / sqrt(d_k)) V. Q: [(B,) n_q, d_k], K: [(B,) n_v, d_k], V: [(B,) n_v, d_v].
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);
/// The softmax weight matrix of scaled_dot_attention, [(B,) n_q, n_v].
Tensor attention_weights(const Tensor& q, const Tensor& k);

/// Forward KL(target || pred) summed over all elements, with pred clamped at 1e-12.
/// target is treated as a constant.
Tensor kl_div(const Tensor& target, const Tensor& pred);

// --- verification ----------------------------------------------------------

/// Max over all elements of all `params` of |g_bp - g_fd| / max(1, |g_fd|),
/// with g_fd the central difference (f(x+h) - f(x-h)) / 2h. `f` must return a
/// scalar. Parameter values are restored on return. When `max_elements` > 0
/// only that many elements (picked with `seed`) are probed.
double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h,
                         std::size_t max_elements = 0, unsigned seed = 0);
/// Single-input convenience form.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h);

// --- optimizer -------------------------------------------------------------

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One Adam update with bias correction. Moments are created on first use.
void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& state);
/// Uses each parameter's accumulated gradient.
void adam_step(std::span<Tensor> params, AdamState& state);

}  // namespace abdkit::ad
