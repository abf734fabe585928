#include "abdkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Core>

#include "abdkit/error.hpp"

namespace abdkit::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local Tape* g_current_tape = nullptr;

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) throw ContractError(std::string("non-finite value produced by ") + op);
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

Tensor make_result(Shape shape, std::vector<double> data, bool tracked, const char* op) {
    Tensor out(std::move(shape), std::move(data), tracked);
    check_finite(out, op);
    return out;
}

int normalize_axis(int axis, int rank) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
    return axis;
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) {
        if (e < 0) throw ShapeError("negative extent in shape");
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// --- Tensor ----------------------------------------------------------------

Tensor::Tensor() : impl_(std::make_shared<TensorImpl>()) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) : impl_(std::make_shared<TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

int Tensor::dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(normalize_axis(i, rank()))); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on a tensor with " + std::to_string(numel()) + " elements");
    return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
    Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
    return t;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

void accumulate_grad(const Tensor& t, std::span<const double> g) {
    if (!t.requires_grad()) return;
    auto& dst = t.impl()->grad;
    if (dst.empty()) dst.assign(t.numel(), 0.0);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

// --- Tape ------------------------------------------------------------------

Tape::Tape() : previous_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

bool Tape::recording(std::initializer_list<const Tensor*> inputs) {
    if (g_current_tape == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t && t->requires_grad(); });
}

void Tape::record(const Tensor& output, BackwardFn fn) {
    if (consumed_) throw ContractError("recording onto a tape after backward; call reset() first");
    entries_.push_back({output, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw ContractError("backward called twice without reset");
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    consumed_ = true;
    Tensor l = loss;
    if (!l.requires_grad()) return;
    l.mutable_grad()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (!it->output.has_grad()) continue;
        it->fn();
    }
}

void Tape::reset() {
    entries_.clear();
    consumed_ = false;
}

// --- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    const bool rec = Tape::recording({&a, &b});
    Tensor r = make_result(a.shape(), std::move(out), rec, "add");
    if (rec) {
        Tape::current()->record(r, [r, a, b]() mutable {
            accumulate_grad(a, r.grad());
            accumulate_grad(b, r.grad());
        });
    }
    return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    const bool rec = Tape::recording({&a, &b});
    Tensor r = make_result(a.shape(), std::move(out), rec, "sub");
    if (rec) {
        Tape::current()->record(r, [r, a, b]() mutable {
            accumulate_grad(a, r.grad());
            if (b.requires_grad()) {
                std::vector<double> g(r.grad().begin(), r.grad().end());
                for (double& x : g) x = -x;
                accumulate_grad(b, g);
            }
        });
    }
    return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    const bool rec = Tape::recording({&a, &b});
    Tensor r = make_result(a.shape(), std::move(out), rec, "mul");
    if (rec) {
        Tape::current()->record(r, [r, a, b]() mutable {
            auto g = r.grad();
            std::vector<double> ga(g.size()), gb(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] = g[i] * b[i];
                gb[i] = g[i] * a[i];
            }
            accumulate_grad(a, ga);
            accumulate_grad(b, gb);
        });
    }
    return r;
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    const bool rec = Tape::recording({&a});
    Tensor r = make_result(a.shape(), std::move(out), rec, "scale");
    if (rec) {
        Tape::current()->record(r, [r, a, s]() mutable {
            std::vector<double> g(r.grad().begin(), r.grad().end());
            for (double& x : g) x *= s;
            accumulate_grad(a, g);
        });
    }
    return r;
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
    const bool rec = Tape::recording({&a});
    Tensor r = make_result(a.shape(), std::move(out), rec, "relu");
    if (rec) {
        Tape::current()->record(r, [r, a]() mutable {
            auto g = r.grad();
            std::vector<double> ga(g.size());
            // subgradient 0 at exactly 0
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = a[i] > 0.0 ? g[i] : 0.0;
            accumulate_grad(a, ga);
        });
    }
    return r;
}

// --- shape ops -------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
    }
    const bool rec = Tape::recording({&a});
    Tensor r(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), rec);
    if (rec) {
        Tape::current()->record(r, [r, a]() mutable { accumulate_grad(a, r.grad()); });
    }
    return r;
}

Tensor transpose_last2(const Tensor& a) {
    if (a.rank() != 2 && a.rank() != 3) throw ShapeError("transpose_last2 expects rank 2 or 3");
    const int batch = a.rank() == 3 ? a.dim(0) : 1;
    const int m = a.dim(-2);
    const int n = a.dim(-1);
    auto permute = [batch, m, n](std::span<const double> src, std::vector<double>& dst, bool forward) {
        for (int b = 0; b < batch; ++b) {
            const std::size_t off = static_cast<std::size_t>(b) * m * n;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const std::size_t ij = off + static_cast<std::size_t>(i) * n + j;
                    const std::size_t ji = off + static_cast<std::size_t>(j) * m + i;
                    if (forward) dst[ji] = src[ij];
                    else dst[ij] = src[ji];
                }
        }
    };
    std::vector<double> out(a.numel());
    permute(a.data(), out, true);
    Shape s = a.shape();
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    const bool rec = Tape::recording({&a});
    Tensor r(std::move(s), std::move(out), rec);
    if (rec) {
        Tape::current()->record(r, [r, a, permute]() mutable {
            std::vector<double> g(a.numel());
            permute(r.grad(), g, false);
            accumulate_grad(a, g);
        });
    }
    return r;
}

// --- matmul / linear -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
        throw ShapeError("matmul expects two rank-2 or two rank-3 tensors");
    }
    const bool batched = a.rank() == 3;
    const int batch = batched ? a.dim(0) : 1;
    if (batched && b.dim(0) != batch) throw ShapeError("matmul batch mismatch");
    const int m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
    if (b.dim(-2) != k) {
        throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(batch) * m * n);
    const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
                      so = static_cast<std::size_t>(m) * n;
    for (int i = 0; i < batch; ++i) {
        MapMat(out.data() + i * so, m, n).noalias() =
            ConstMapMat(a.data().data() + i * sa, m, k) * ConstMapMat(b.data().data() + i * sb, k, n);
    }
    Shape s = batched ? Shape{batch, m, n} : Shape{m, n};
    const bool rec = Tape::recording({&a, &b});
    Tensor r = make_result(std::move(s), std::move(out), rec, "matmul");
    if (rec) {
        Tape::current()->record(r, [=]() mutable {
            std::vector<double> ga(a.numel()), gb(b.numel());
            auto g = r.grad();
            for (int i = 0; i < batch; ++i) {
                ConstMapMat gi(g.data() + i * so, m, n);
                if (a.requires_grad())
                    MapMat(ga.data() + i * sa, m, k).noalias() =
                        gi * ConstMapMat(b.data().data() + i * sb, k, n).transpose();
                if (b.requires_grad())
                    MapMat(gb.data() + i * sb, k, n).noalias() =
                        ConstMapMat(a.data().data() + i * sa, m, k).transpose() * gi;
            }
            accumulate_grad(a, ga);
            accumulate_grad(b, gb);
        });
    }
    return r;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
    if (weight.rank() != 2) throw ShapeError("linear weight must be [out, in]");
    const int out_f = weight.dim(0), in_f = weight.dim(1);
    if (x.rank() < 1 || x.dim(-1) != in_f) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != out_f)) throw ShapeError("linear bias must be [out]");
    const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(in_f));
    std::vector<double> out(static_cast<std::size_t>(rows) * out_f);
    MapMat om(out.data(), rows, out_f);
    om.noalias() = ConstMapMat(x.data().data(), rows, in_f) * ConstMapMat(weight.data().data(), out_f, in_f).transpose();
    if (bias) om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->data().data(), out_f);
    Shape s = x.shape();
    s.back() = out_f;
    Tensor b = bias ? *bias : Tensor();
    const bool has_bias = bias != nullptr;
    const bool rec = Tape::recording({&x, &weight, bias});
    Tensor r = make_result(std::move(s), std::move(out), rec, "linear");
    if (rec) {
        Tape::current()->record(r, [=]() mutable {
            ConstMapMat g(r.grad().data(), rows, out_f);
            if (x.requires_grad()) {
                std::vector<double> gx(x.numel());
                MapMat(gx.data(), rows, in_f).noalias() = g * ConstMapMat(weight.data().data(), out_f, in_f);
                accumulate_grad(x, gx);
            }
            if (weight.requires_grad()) {
                std::vector<double> gw(weight.numel());
                MapMat(gw.data(), out_f, in_f).noalias() = g.transpose() * ConstMapMat(x.data().data(), rows, in_f);
                accumulate_grad(weight, gw);
            }
            if (has_bias && b.requires_grad()) {
                std::vector<double> gb(static_cast<std::size_t>(out_f));
                Eigen::Map<Eigen::RowVectorXd>(gb.data(), out_f) = g.colwise().sum();
                accumulate_grad(b, gb);
            }
        });
    }
    return r;
}

// --- softmax ---------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    const int ax = normalize_axis(axis, x.rank());
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= static_cast<std::size_t>(x.dim(i));
    for (int i = ax + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(x.dim(i));
    const std::size_t len = static_cast<std::size_t>(x.dim(ax));

    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, x[base + i * inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                const double e = std::exp(x[base + i * inner] - mx);
                out[base + i * inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
        }
    }
    const bool rec = Tape::recording({&x});
    Tensor r = make_result(x.shape(), std::move(out), rec, "softmax");
    if (rec) {
        Tape::current()->record(r, [=]() mutable {
            auto g = r.grad();
            auto y = r.data();
            std::vector<double> gx(x.numel());
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < len; ++i) {
                        const std::size_t j = base + i * inner;
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            accumulate_grad(x, gx);
        });
    }
    return r;
}

// --- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
    const double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
    const bool rec = Tape::recording({&x});
    Tensor r = make_result({1}, {s}, rec, "sum");
    if (rec) {
        Tape::current()->record(r, [r, x]() mutable {
            std::vector<double> g(x.numel(), r.grad()[0]);
            accumulate_grad(x, g);
        });
    }
    return r;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_trailing(const Tensor& x, int count) {
    if (count < 1 || count >= x.rank()) throw ShapeError("mean_trailing: bad axis count");
    Shape s(x.shape().begin(), x.shape().end() - count);
    std::size_t group = 1;
    for (int i = x.rank() - count; i < x.rank(); ++i) group *= static_cast<std::size_t>(x.dim(i));
    const std::size_t n = shape_numel(s);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < group; ++j) acc += x[i * group + j];
        out[i] = acc / static_cast<double>(group);
    }
    const bool rec = Tape::recording({&x});
    Tensor r = make_result(std::move(s), std::move(out), rec, "mean_trailing");
    if (rec) {
        Tape::current()->record(r, [r, x, group, n]() mutable {
            auto g = r.grad();
            std::vector<double> gx(x.numel());
            for (std::size_t i = 0; i < n; ++i) {
                const double v = g[i] / static_cast<double>(group);
                std::fill_n(gx.begin() + static_cast<std::ptrdiff_t>(i * group), group, v);
            }
            accumulate_grad(x, gx);
        });
    }
    return r;
}

// --- convolution -----------------------------------------------------------

int conv_out_extent(int in, int kernel, int stride, int pad) {
    if (stride < 1) throw ShapeError("stride must be >= 1");
    const int span = in + 2 * pad - kernel;
    if (span < 0) throw ShapeError("kernel larger than padded input");
    return span / stride + 1;
}

namespace {

struct ConvGeom {
    int n, c, d, h, w;     // input
    int o, kd, kh, kw;     // kernel
    int od, oh, ow;        // output
    Conv3dParams p;

    std::size_t col_rows() const { return static_cast<std::size_t>(c) * kd * kh * kw; }
    std::size_t col_cols() const { return static_cast<std::size_t>(od) * oh * ow; }
    std::size_t in_size() const { return static_cast<std::size_t>(c) * d * h * w; }
    std::size_t out_size() const { return static_cast<std::size_t>(o) * col_cols(); }
};

// col[(c,kz,ky,kx), (z,y,x)] = x[c, z*s - p + kz, ...] (0 outside)
void im2col(const double* x, const ConvGeom& g, double* col) {
    std::size_t row = 0;
    for (int c = 0; c < g.c; ++c)
        for (int kz = 0; kz < g.kd; ++kz)
            for (int ky = 0; ky < g.kh; ++ky)
                for (int kx = 0; kx < g.kw; ++kx, ++row) {
                    double* dst = col + row * g.col_cols();
                    for (int z = 0; z < g.od; ++z) {
                        const int iz = z * g.p.stride_d - g.p.pad_d + kz;
                        for (int y = 0; y < g.oh; ++y) {
                            const int iy = y * g.p.stride_h - g.p.pad_h + ky;
                            const bool zy_ok = iz >= 0 && iz < g.d && iy >= 0 && iy < g.h;
                            const double* src = x + ((static_cast<std::size_t>(c) * g.d + iz) * g.h + iy) * g.w;
                            for (int xx = 0; xx < g.ow; ++xx) {
                                const int ix = xx * g.p.stride_w - g.p.pad_w + kx;
                                *dst++ = (zy_ok && ix >= 0 && ix < g.w) ? src[ix] : 0.0;
                            }
                        }
                    }
                }
}

void col2im(const double* col, const ConvGeom& g, double* x) {
    std::size_t row = 0;
    for (int c = 0; c < g.c; ++c)
        for (int kz = 0; kz < g.kd; ++kz)
            for (int ky = 0; ky < g.kh; ++ky)
                for (int kx = 0; kx < g.kw; ++kx, ++row) {
                    const double* src = col + row * g.col_cols();
                    for (int z = 0; z < g.od; ++z) {
                        const int iz = z * g.p.stride_d - g.p.pad_d + kz;
                        for (int y = 0; y < g.oh; ++y) {
                            const int iy = y * g.p.stride_h - g.p.pad_h + ky;
                            const bool zy_ok = iz >= 0 && iz < g.d && iy >= 0 && iy < g.h;
                            double* dst = x + ((static_cast<std::size_t>(c) * g.d + iz) * g.h + iy) * g.w;
                            for (int xx = 0; xx < g.ow; ++xx, ++src) {
                                const int ix = xx * g.p.stride_w - g.p.pad_w + kx;
                                if (zy_ok && ix >= 0 && ix < g.w) dst[ix] += *src;
                            }
                        }
                    }
                }
}

Tensor conv_core(const Tensor& x, const Tensor& kernel, const Tensor* bias, const ConvGeom& g, Shape out_shape,
                 const char* name) {
    const std::size_t rows = g.col_rows(), cols = g.col_cols();
    std::vector<double> out(static_cast<std::size_t>(g.n) * g.out_size());
    std::vector<double> col(rows * cols);
    ConstMapMat km(kernel.data().data(), g.o, static_cast<Eigen::Index>(rows));
    for (int i = 0; i < g.n; ++i) {
        im2col(x.data().data() + i * g.in_size(), g, col.data());
        MapMat om(out.data() + i * g.out_size(), g.o, static_cast<Eigen::Index>(cols));
        om.noalias() = km * ConstMapMat(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        if (bias) om.colwise() += Eigen::Map<const Eigen::VectorXd>(bias->data().data(), g.o);
    }
    const bool rec = Tape::recording({&x, &kernel, bias});
    Tensor r = make_result(std::move(out_shape), std::move(out), rec, name);
    if (rec) {
        Tensor b = bias ? *bias : Tensor();
        const bool has_bias = bias != nullptr;
        Tensor xx = x, kk = kernel;
        Tape::current()->record(r, [=]() mutable {
            auto gr = r.grad();
            std::vector<double> colbuf(rows * cols);
            std::vector<double> gx(xx.requires_grad() ? xx.numel() : 0);
            std::vector<double> gk(kk.requires_grad() ? kk.numel() : 0);
            std::vector<double> gb(has_bias && b.requires_grad() ? static_cast<std::size_t>(g.o) : 0);
            ConstMapMat km2(kk.data().data(), g.o, static_cast<Eigen::Index>(rows));
            for (int i = 0; i < g.n; ++i) {
                ConstMapMat go(gr.data() + i * g.out_size(), g.o, static_cast<Eigen::Index>(cols));
                if (!gk.empty()) {
                    im2col(xx.data().data() + i * g.in_size(), g, colbuf.data());
                    MapMat(gk.data(), g.o, static_cast<Eigen::Index>(rows)).noalias() +=
                        go * ConstMapMat(colbuf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols))
                                 .transpose();
                }
                if (!gb.empty()) Eigen::Map<Eigen::VectorXd>(gb.data(), g.o) += go.rowwise().sum();
                if (!gx.empty()) {
                    MapMat(colbuf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)).noalias() =
                        km2.transpose() * go;
                    col2im(colbuf.data(), g, gx.data() + i * g.in_size());
                }
            }
            if (!gx.empty()) accumulate_grad(xx, gx);
            if (!gk.empty()) accumulate_grad(kk, gk);
            if (!gb.empty()) accumulate_grad(b, gb);
        });
    }
    return r;
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor* bias, const Conv3dParams& p) {
    if (x.rank() != 5 || kernel.rank() != 5) throw ShapeError("conv3d expects x [N,C,D,H,W] and kernel [O,C,kd,kh,kw]");
    if (kernel.dim(1) != x.dim(1)) {
        throw ShapeError("conv3d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(kernel.shape()));
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != kernel.dim(0))) throw ShapeError("conv3d bias must be [O]");
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4), kernel.dim(0), kernel.dim(2), kernel.dim(3),
               kernel.dim(4), 0, 0, 0, p};
    g.od = conv_out_extent(g.d, g.kd, p.stride_d, p.pad_d);
    g.oh = conv_out_extent(g.h, g.kh, p.stride_h, p.pad_h);
    g.ow = conv_out_extent(g.w, g.kw, p.stride_w, p.pad_w);
    return conv_core(x, kernel, bias, g, {g.n, g.o, g.od, g.oh, g.ow}, "conv3d");
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor* bias, const Conv2dParams& p) {
    if (x.rank() != 4 || kernel.rank() != 4) throw ShapeError("conv2d expects x [N,C,H,W] and kernel [O,C,kh,kw]");
    if (kernel.dim(1) != x.dim(1)) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(kernel.shape()));
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != kernel.dim(0))) throw ShapeError("conv2d bias must be [O]");
    // A 2D convolution is a 3D one over a depth-1 volume.
    ConvGeom g{x.dim(0), x.dim(1), 1, x.dim(2), x.dim(3), kernel.dim(0), 1, kernel.dim(2), kernel.dim(3), 1, 0, 0,
               Conv3dParams{1, p.stride_h, p.stride_w, 0, p.pad_h, p.pad_w}};
    g.oh = conv_out_extent(g.h, g.kh, p.stride_h, p.pad_h);
    g.ow = conv_out_extent(g.w, g.kw, p.stride_w, p.pad_w);
    return conv_core(x, kernel, bias, g, {g.n, g.o, g.oh, g.ow}, "conv2d");
}

// --- attention & loss ------------------------------------------------------

Tensor attention_weights(const Tensor& q, const Tensor& k) {
    if (q.rank() != k.rank() || q.dim(-1) != k.dim(-1)) {
        throw ShapeError("attention d_k mismatch: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()));
    }
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
    return softmax(scale(matmul(q, transpose_last2(k)), inv_sqrt_dk), -1);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (v.rank() != k.rank() || v.dim(-2) != k.dim(-2)) {
        throw ShapeError("attention: K and V must have the same number of rows");
    }
    return matmul(attention_weights(q, k), v);
}

Tensor kl_div(const Tensor& target, const Tensor& pred) {
    require_same_shape(target, pred, "kl_div");
    constexpr double eps = 1e-12;
    double acc = 0.0;
    for (std::size_t i = 0; i < target.numel(); ++i) {
        const double t = target[i];
        if (t > 0.0) acc += t * std::log(t / std::max(pred[i], eps));
    }
    const bool rec = Tape::recording({&pred});
    Tensor r = make_result({1}, {acc}, rec, "kl_div");
    if (rec) {
        Tape::current()->record(r, [r, target, pred]() mutable {
            const double g = r.grad()[0];
            std::vector<double> gp(pred.numel(), 0.0);
            for (std::size_t i = 0; i < gp.size(); ++i) {
                if (target[i] > 0.0 && pred[i] > eps) gp[i] = -g * target[i] / pred[i];
            }
            accumulate_grad(pred, gp);
        });
    }
    return r;
}

// --- verification ----------------------------------------------------------

double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h,
                         std::size_t max_elements, unsigned seed) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    {
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
    }
    std::vector<std::pair<std::size_t, std::size_t>> probes;
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::size_t e = 0; e < params[pi].numel(); ++e) probes.emplace_back(pi, e);
    if (max_elements > 0 && probes.size() > max_elements) {
        std::mt19937_64 rng(seed);
        std::shuffle(probes.begin(), probes.end(), rng);
        probes.resize(max_elements);
    }
    double worst = 0.0;
    for (auto [pi, e] : probes) {
        Tensor& p = params[pi];
        const double g_bp = p.grad()[e];
        const double orig = p.data()[e];
        p.mutable_data()[e] = orig + h;
        const double fp = f().item();
        p.mutable_data()[e] = orig - h;
        const double fm = f().item();
        p.mutable_data()[e] = orig;
        const double g_fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(g_bp - g_fd) / std::max(1.0, std::abs(g_fd)));
    }
    return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    Tensor leaf = x.clone();
    std::vector<Tensor> params{leaf};
    return finite_diff_check([&] { return f(params[0]); }, params, h);
}

// --- Adam ------------------------------------------------------------------

void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, AdamState& s) {
    if (grads.size() != params.size()) throw ShapeError("adam_step: params/grads count mismatch");
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(p.numel(), 0.0);
            s.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (s.m.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter set");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].numel() || s.m[i].size() != params[i].numel()) {
            throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(i));
        }
    }
    ++s.step;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].mutable_data();
        auto& m = s.m[i];
        auto& v = s.v[i];
        const auto& g = grads[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
            v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
        }
    }
}

void adam_step(std::span<Tensor> params, AdamState& state) {
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.emplace_back(p.grad().begin(), p.grad().end());
    adam_step(params, grads, state);
}

}  // namespace abdkit::ad
