#include "niff/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace niff {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_shape(const Shape& shape) {
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    if (static_cast<std::int64_t>(data.size()) != numel(node->shape)) {
        throw DimensionError("data size " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(node->shape));
    }
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->data.size(), 0.0);
    return node;
}

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward_fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    auto node = make_node(std::move(shape), std::move(data), rg);
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    if (rg) node->backward_fn = std::move(backward_fn);
    return Tensor::wrap(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

}  // namespace

// ---- Tensor --------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    check_shape(shape);
    return wrap(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = numel(shape);
    check_shape(shape);
    return wrap(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return wrap(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return wrap(make_node({1}, {value}, requires_grad));
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("shape() on undefined tensor");
    return node_->shape;
}

int Tensor::ndim() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
    const auto& s = shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const { return numel(shape()); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::data() const {
    if (!node_) throw ContractError("data() on undefined tensor");
    return node_->data;
}

std::span<double> Tensor::data_mut() {
    if (!node_) throw ContractError("data_mut() on undefined tensor");
    return node_->data;
}

std::span<const double> Tensor::grad() const {
    if (!node_ || !node_->requires_grad) throw ContractError("grad() on tensor without gradient tracking");
    return node_->grad;
}

std::span<double> Tensor::grad_mut() {
    if (!node_ || !node_->requires_grad) throw ContractError("grad_mut() on tensor without gradient tracking");
    return node_->grad;
}

bool Tensor::has_grad() const { return node_ && node_->requires_grad; }

double Tensor::value() const {
    if (size() != 1) throw DimensionError("value() requires a single-element tensor, got " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size()) {
        throw DimensionError("at(): rank mismatch, " + std::to_string(idx.size()) + " indices for " + shape_str(s));
    }
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (int i : idx) {
        if (i < 0 || i >= s[axis]) {
            throw DimensionError("at(): index " + std::to_string(i) + " out of range on axis " +
                                 std::to_string(axis) + " of " + shape_str(s));
        }
        flat = flat * s[axis] + i;
        ++axis;
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

void Tensor::zero_grad() {
    if (node_ && node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detached() const {
    if (!node_) throw ContractError("detached() on undefined tensor");
    return wrap(make_node(node_->shape, node_->data, false));
}

// ---- matmul / linear ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw DimensionError("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    CMapRM A(a.data().data(), m, k);
    CMapRM B(b.data().data(), k, n);
    MapRM(out.data(), m, n).noalias() = A * B;
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        CMapRM G(node.grad.data(), m, n);
        if (pa.requires_grad) {
            CMapRM B(pb.data.data(), k, n);
            MapRM(pa.grad.data(), m, k).noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
            CMapRM A(pa.data.data(), m, k);
            MapRM(pb.grad.data(), k, n).noalias() += A.transpose() * G;
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_defined(x, "linear");
    require_defined(w, "linear");
    require_defined(b, "linear");
    if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1) {
        throw DimensionError("linear: expects x:[N,d], w:[M,d], b:[M], got " + shape_str(x.shape()) + ", " +
                             shape_str(w.shape()) + ", " + shape_str(b.shape()));
    }
    const int n = x.dim(0), d = x.dim(1), m = w.dim(0);
    if (w.dim(1) != d || b.dim(0) != m) {
        throw DimensionError("linear: incompatible shapes x " + shape_str(x.shape()) + ", w " +
                             shape_str(w.shape()) + ", b " + shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(n) * m);
    CMapRM X(x.data().data(), n, d);
    CMapRM W(w.data().data(), m, d);
    MapRM Y(out.data(), n, m);
    Y.noalias() = X * W.transpose();
    const auto bd = b.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(i) * m + j] += bd[static_cast<std::size_t>(j)];
    return make_op({n, m}, std::move(out), {x, w, b}, [n, d, m](detail::Node& node) {
        auto& px = *node.parents[0];
        auto& pw = *node.parents[1];
        auto& pb = *node.parents[2];
        CMapRM G(node.grad.data(), n, m);
        if (px.requires_grad) {
            CMapRM W(pw.data.data(), m, d);
            MapRM(px.grad.data(), n, d).noalias() += G * W;
        }
        if (pw.requires_grad) {
            CMapRM X(px.data.data(), n, d);
            MapRM(pw.grad.data(), m, d).noalias() += G.transpose() * X;
        }
        if (pb.requires_grad) {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) pb.grad[static_cast<std::size_t>(j)] += G(i, j);
        }
    });
}

// ---- conv2d ----------------------------------------------------------------

namespace {

// Patch matrix: row (n*S + oh*Wout + ow) holds the receptive field at that
// output position, laid out [ci][kh][kw]. Out-of-bounds taps are zero.
std::vector<double> im2col(std::span<const double> x, int n, int cin, int h, int w, int k, int pad, int hout,
                           int wout) {
    const std::int64_t ckk = static_cast<std::int64_t>(cin) * k * k;
    const std::int64_t rows = static_cast<std::int64_t>(n) * hout * wout;
    std::vector<double> cols(static_cast<std::size_t>(rows * ckk), 0.0);
    for (int ni = 0; ni < n; ++ni) {
        for (int oh = 0; oh < hout; ++oh) {
            for (int ow = 0; ow < wout; ++ow) {
                const std::int64_t row = (static_cast<std::int64_t>(ni) * hout + oh) * wout + ow;
                double* dst = cols.data() + row * ckk;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* src = x.data() + ((static_cast<std::int64_t>(ni) * cin + ci) * h) * w;
                    for (int kh = 0; kh < k; ++kh) {
                        const int ih = oh - pad + kh;
                        if (ih < 0 || ih >= h) {
                            dst += k;
                            continue;
                        }
                        for (int kw = 0; kw < k; ++kw) {
                            const int iw = ow - pad + kw;
                            *dst++ = (iw < 0 || iw >= w) ? 0.0 : src[static_cast<std::int64_t>(ih) * w + iw];
                        }
                    }
                }
            }
        }
    }
    return cols;
}

void col2im_add(std::span<const double> cols, std::span<double> dx, int n, int cin, int h, int w, int k, int pad,
                int hout, int wout) {
    const std::int64_t ckk = static_cast<std::int64_t>(cin) * k * k;
    for (int ni = 0; ni < n; ++ni) {
        for (int oh = 0; oh < hout; ++oh) {
            for (int ow = 0; ow < wout; ++ow) {
                const std::int64_t row = (static_cast<std::int64_t>(ni) * hout + oh) * wout + ow;
                const double* src = cols.data() + row * ckk;
                for (int ci = 0; ci < cin; ++ci) {
                    double* dst = dx.data() + ((static_cast<std::int64_t>(ni) * cin + ci) * h) * w;
                    for (int kh = 0; kh < k; ++kh) {
                        const int ih = oh - pad + kh;
                        if (ih < 0 || ih >= h) {
                            src += k;
                            continue;
                        }
                        for (int kw = 0; kw < k; ++kw) {
                            const int iw = ow - pad + kw;
                            const double v = *src++;
                            if (iw >= 0 && iw < w) dst[static_cast<std::int64_t>(ih) * w + iw] += v;
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding) {
    require_defined(x, "conv2d");
    require_defined(w, "conv2d");
    require_defined(bias, "conv2d");
    if (x.ndim() != 4 || w.ndim() != 4 || bias.ndim() != 1) {
        throw DimensionError("conv2d: expects x:[N,C,H,W], w:[Co,Ci,k,k], bias:[Co], got " +
                             shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " + shape_str(bias.shape()));
    }
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin) {
        throw DimensionError("conv2d: input has " + std::to_string(cin) + " channels but kernel expects " +
                             std::to_string(w.dim(1)));
    }
    if (w.dim(3) != k) throw DimensionError("conv2d: kernel must be square, got " + shape_str(w.shape()));
    if (bias.dim(0) != cout) {
        throw DimensionError("conv2d: bias size " + std::to_string(bias.dim(0)) + " does not match " +
                             std::to_string(cout) + " output channels");
    }
    if (padding < 0) throw DimensionError("conv2d: padding must be non-negative");
    const int hout = h + 2 * padding - k + 1;
    const int wout = wd + 2 * padding - k + 1;
    if (hout < 1 || wout < 1) {
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " with padding " + std::to_string(padding) +
                             " exceeds input " + shape_str(x.shape()));
    }
    const std::int64_t ckk = static_cast<std::int64_t>(cin) * k * k;
    const std::int64_t rows = static_cast<std::int64_t>(n) * hout * wout;
    const std::int64_t s = static_cast<std::int64_t>(hout) * wout;

    auto cols = std::make_shared<std::vector<double>>(im2col(x.data(), n, cin, h, wd, k, padding, hout, wout));
    std::vector<double> ym(static_cast<std::size_t>(rows) * cout);
    {
        CMapRM C(cols->data(), rows, ckk);
        CMapRM W(w.data().data(), cout, ckk);
        MapRM(ym.data(), rows, cout).noalias() = C * W.transpose();
    }
    std::vector<double> out(static_cast<std::size_t>(n) * cout * s);
    const auto bd = bias.data();
    for (int ni = 0; ni < n; ++ni) {
        for (int co = 0; co < cout; ++co) {
            const double b = bd[static_cast<std::size_t>(co)];
            double* dst = out.data() + (static_cast<std::int64_t>(ni) * cout + co) * s;
            const double* src = ym.data() + static_cast<std::int64_t>(ni) * s * cout + co;
            for (std::int64_t si = 0; si < s; ++si) dst[si] = src[si * cout] + b;
        }
    }
    // The patch matrix is only needed again for the kernel gradient.
    if (!w.requires_grad()) cols.reset();

    return make_op({n, cout, hout, wout}, std::move(out), {x, w, bias},
                   [n, cin, h, wd, cout, k, padding, hout, wout, ckk, rows, s, cols](detail::Node& node) {
                       auto& px = *node.parents[0];
                       auto& pw = *node.parents[1];
                       auto& pb = *node.parents[2];
                       std::vector<double> gm(static_cast<std::size_t>(rows) * cout);
                       for (int ni = 0; ni < n; ++ni) {
                           for (int co = 0; co < cout; ++co) {
                               const double* src = node.grad.data() + (static_cast<std::int64_t>(ni) * cout + co) * s;
                               double* dst = gm.data() + static_cast<std::int64_t>(ni) * s * cout + co;
                               for (std::int64_t si = 0; si < s; ++si) dst[si * cout] = src[si];
                           }
                       }
                       CMapRM G(gm.data(), rows, cout);
                       if (pw.requires_grad) {
                           CMapRM C(cols->data(), rows, ckk);
                           MapRM(pw.grad.data(), cout, ckk).noalias() += G.transpose() * C;
                       }
                       if (pb.requires_grad) {
                           for (std::int64_t r = 0; r < rows; ++r)
                               for (int co = 0; co < cout; ++co)
                                   pb.grad[static_cast<std::size_t>(co)] += G(r, co);
                       }
                       if (px.requires_grad) {
                           std::vector<double> dcols(static_cast<std::size_t>(rows) * ckk);
                           CMapRM W(pw.data.data(), cout, ckk);
                           MapRM(dcols.data(), rows, ckk).noalias() = G * W;
                           col2im_add(dcols, px.grad, n, cin, h, wd, k, padding, hout, wout);
                       }
                   });
}

// ---- pointwise / shape ops -------------------------------------------------

Tensor channel_affine(const Tensor& x, std::span<const double> gain, std::span<const double> offset) {
    require_defined(x, "channel_affine");
    if (x.ndim() != 4) throw DimensionError("channel_affine: expects [N,C,H,W], got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1);
    const std::int64_t s = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    if (static_cast<int>(gain.size()) != c || static_cast<int>(offset.size()) != c) {
        throw DimensionError("channel_affine: " + std::to_string(gain.size()) + " gains / " +
                             std::to_string(offset.size()) + " offsets for " + std::to_string(c) + " channels");
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            double* p = out.data() + (static_cast<std::int64_t>(ni) * c + ci) * s;
            const double g = gain[static_cast<std::size_t>(ci)], o = offset[static_cast<std::size_t>(ci)];
            for (std::int64_t i = 0; i < s; ++i) p[i] = p[i] * g + o;
        }
    }
    std::vector<double> gv(gain.begin(), gain.end());
    return make_op(x.shape(), std::move(out), {x}, [n, c, s, gv = std::move(gv)](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (int ni = 0; ni < n; ++ni) {
            for (int ci = 0; ci < c; ++ci) {
                const std::int64_t base = (static_cast<std::int64_t>(ni) * c + ci) * s;
                const double g = gv[static_cast<std::size_t>(ci)];
                for (std::int64_t i = 0; i < s; ++i)
                    px.grad[static_cast<std::size_t>(base + i)] += node.grad[static_cast<std::size_t>(base + i)] * g;
            }
        }
    });
}

Tensor relu(const Tensor& x) {
    require_defined(x, "relu");
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    return make_op(x.shape(), std::move(out), {x}, [](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < node.grad.size(); ++i)
            if (px.data[i] > 0.0) px.grad[i] += node.grad[i];
    });
}

namespace {

std::pair<std::int64_t, std::int64_t> rows_and_width(const Tensor& x) {
    const auto& s = x.shape();
    const std::int64_t c = s.back();
    return {numel(s) / c, c};
}

}  // namespace

Tensor softmax(const Tensor& x) {
    require_defined(x, "softmax");
    auto [rows, c] = rows_and_width(x);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::int64_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * c;
        double mx = p[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, p[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            p[j] = std::exp(p[j] - mx);
            z += p[j];
        }
        for (std::int64_t j = 0; j < c; ++j) p[j] /= z;
    }
    return make_op(x.shape(), std::move(out), {x}, [rows, c](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = node.data.data() + r * c;
            const double* g = node.grad.data() + r * c;
            double dot = 0.0;
            for (std::int64_t j = 0; j < c; ++j) dot += y[j] * g[j];
            double* dx = px.grad.data() + r * c;
            for (std::int64_t j = 0; j < c; ++j) dx[j] += y[j] * (g[j] - dot);
        }
    });
}

Tensor log_softmax(const Tensor& x) {
    require_defined(x, "log_softmax");
    auto [rows, c] = rows_and_width(x);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::int64_t r = 0; r < rows; ++r) {
        double* p = out.data() + r * c;
        double mx = p[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, p[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < c; ++j) z += std::exp(p[j] - mx);
        const double lse = mx + std::log(z);
        for (std::int64_t j = 0; j < c; ++j) p[j] -= lse;
    }
    return make_op(x.shape(), std::move(out), {x}, [rows, c](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* z = node.data.data() + r * c;
            const double* g = node.grad.data() + r * c;
            double gsum = 0.0;
            for (std::int64_t j = 0; j < c; ++j) gsum += g[j];
            double* dx = px.grad.data() + r * c;
            for (std::int64_t j = 0; j < c; ++j) dx[j] += g[j] - std::exp(z[j]) * gsum;
        }
    });
}

Tensor avg_pool2d(const Tensor& x) {
    require_defined(x, "avg_pool2d");
    if (x.ndim() != 4) throw DimensionError("avg_pool2d: expects [N,C,H,W], got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1);
    const std::int64_t s = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    std::vector<double> out(static_cast<std::size_t>(n) * c);
    const auto xd = x.data();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * c; ++i) {
        double acc = 0.0;
        const double* p = xd.data() + i * s;
        for (std::int64_t j = 0; j < s; ++j) acc += p[j];
        out[static_cast<std::size_t>(i)] = acc / static_cast<double>(s);
    }
    return make_op({n, c}, std::move(out), {x}, [n, c, s](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        const double inv = 1.0 / static_cast<double>(s);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * c; ++i) {
            const double g = node.grad[static_cast<std::size_t>(i)] * inv;
            double* dst = px.grad.data() + i * s;
            for (std::int64_t j = 0; j < s; ++j) dst[j] += g;
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    require_defined(x, "reshape");
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_op(std::move(shape), std::move(out), {x}, [](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < node.grad.size(); ++i) px.grad[i] += node.grad[i];
    });
}

Tensor flatten(const Tensor& x) {
    require_defined(x, "flatten");
    if (x.ndim() < 2) throw DimensionError("flatten: expects rank >= 2, got " + shape_str(x.shape()));
    const int n = x.dim(0);
    return reshape(x, {n, static_cast<int>(x.size() / n)});
}

// ---- elementwise arithmetic -------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    require_defined(a, name);
    require_defined(b, name);
    require_same_shape(a, b, name);
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
    return make_op(a.shape(), std::move(out), {a, b}, [bwd](detail::Node& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        for (std::size_t i = 0; i < node.grad.size(); ++i) {
            const auto [da, db] = bwd(pa.data[i], pb.data[i]);
            if (pa.requires_grad) pa.grad[i] += node.grad[i] * da;
            if (pb.requires_grad) pb.grad[i] += node.grad[i] * db;
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y) { return std::pair{y, x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

Tensor add_scalar(const Tensor& x, double s) {
    require_defined(x, "add_scalar");
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v += s;
    return make_op(x.shape(), std::move(out), {x}, [](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < node.grad.size(); ++i) px.grad[i] += node.grad[i];
    });
}

Tensor mul_scalar(const Tensor& x, double s) {
    require_defined(x, "mul_scalar");
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v *= s;
    return make_op(x.shape(), std::move(out), {x}, [s](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < node.grad.size(); ++i) px.grad[i] += node.grad[i] * s;
    });
}

Tensor log(const Tensor& x) {
    require_defined(x, "log");
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = std::log(v);
    return make_op(x.shape(), std::move(out), {x}, [](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (std::size_t i = 0; i < node.grad.size(); ++i) px.grad[i] += node.grad[i] / px.data[i];
    });
}

// ---- reductions / assembly ---------------------------------------------------

Tensor sum(const Tensor& x) {
    require_defined(x, "sum");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_op({1}, {acc}, {x}, [](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        const double g = node.grad[0];
        for (double& v : px.grad) v += g;
    });
}

Tensor mean(const Tensor& x) {
    require_defined(x, "mean");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    return make_op({1}, {acc * inv}, {x}, [inv](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        const double g = node.grad[0] * inv;
        for (double& v : px.grad) v += g;
    });
}

Tensor sum_rows(const Tensor& x) {
    require_defined(x, "sum_rows");
    if (x.ndim() != 2) throw DimensionError("sum_rows: expects [N,d], got " + shape_str(x.shape()));
    const int n = x.dim(0), d = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    const auto xd = x.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += xd[static_cast<std::size_t>(i) * d + j];
    return make_op({d}, std::move(out), {x}, [n, d](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                px.grad[static_cast<std::size_t>(i) * d + j] += node.grad[static_cast<std::size_t>(j)];
    });
}

Tensor broadcast_row(const Tensor& v, int n) {
    require_defined(v, "broadcast_row");
    if (v.ndim() != 1) throw DimensionError("broadcast_row: expects [d], got " + shape_str(v.shape()));
    if (n <= 0) throw DimensionError("broadcast_row: row count must be positive");
    const int d = v.dim(0);
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    const auto vd = v.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] = vd[static_cast<std::size_t>(j)];
    return make_op({n, d}, std::move(out), {v}, [n, d](detail::Node& node) {
        auto& pv = *node.parents[0];
        if (!pv.requires_grad) return;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                pv.grad[static_cast<std::size_t>(j)] += node.grad[static_cast<std::size_t>(i) * d + j];
    });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_defined(a, "concat_rows");
    require_defined(b, "concat_rows");
    if (a.ndim() != b.ndim() || a.ndim() < 1 || a.ndim() > 2) {
        throw DimensionError("concat_rows: expects matching 1-D or 2-D operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    if (a.ndim() == 2 && a.dim(1) != b.dim(1)) {
        throw DimensionError("concat_rows: trailing dimensions differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out;
    out.reserve(ad.size() + bd.size());
    out.insert(out.end(), ad.begin(), ad.end());
    out.insert(out.end(), bd.begin(), bd.end());
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    const std::size_t na = ad.size();
    return make_op(std::move(shape), std::move(out), {a, b}, [na](detail::Node& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        if (pa.requires_grad)
            for (std::size_t i = 0; i < na; ++i) pa.grad[i] += node.grad[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < pb.grad.size(); ++i) pb.grad[i] += node.grad[na + i];
    });
}

Tensor select_class_block(const Tensor& x, std::span<const int> labels, int block) {
    require_defined(x, "select_class_block");
    if (x.ndim() != 2) throw DimensionError("select_class_block: expects [N,G*B], got " + shape_str(x.shape()));
    const int n = x.dim(0), width = x.dim(1);
    if (block <= 0 || width % block != 0) {
        throw DimensionError("select_class_block: block " + std::to_string(block) + " does not divide width " +
                             std::to_string(width));
    }
    if (static_cast<int>(labels.size()) != n) {
        throw DimensionError("select_class_block: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
    }
    const int groups = width / block;
    std::vector<int> lv(labels.begin(), labels.end());
    for (int l : lv) {
        if (l < 0 || l >= groups) {
            throw ContractError("select_class_block: label " + std::to_string(l) + " out of range for " +
                                std::to_string(groups) + " groups");
        }
    }
    std::vector<double> out(static_cast<std::size_t>(n) * block);
    const auto xd = x.data();
    for (int i = 0; i < n; ++i) {
        const double* src = xd.data() + static_cast<std::int64_t>(i) * width + static_cast<std::int64_t>(lv[static_cast<std::size_t>(i)]) * block;
        std::copy(src, src + block, out.data() + static_cast<std::int64_t>(i) * block);
    }
    return make_op({n, block}, std::move(out), {x}, [n, width, block, lv = std::move(lv)](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        for (int i = 0; i < n; ++i) {
            double* dst = px.grad.data() + static_cast<std::int64_t>(i) * width +
                          static_cast<std::int64_t>(lv[static_cast<std::size_t>(i)]) * block;
            const double* src = node.grad.data() + static_cast<std::int64_t>(i) * block;
            for (int j = 0; j < block; ++j) dst[j] += src[j];
        }
    });
}

// ---- losses ------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_defined(logits, "cross_entropy");
    if (logits.ndim() != 2) throw DimensionError("cross_entropy: expects [N,C] logits, got " + shape_str(logits.shape()));
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
    }
    std::vector<int> lv(labels.begin(), labels.end());
    for (int l : lv) {
        if (l < 0 || l >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(l) + " out of range for " +
                                std::to_string(c) + " classes");
        }
    }
    const auto xd = logits.data();
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* p = xd.data() + static_cast<std::int64_t>(i) * c;
        double mx = p[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, p[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(p[j] - mx);
        loss += mx + std::log(z) - p[lv[static_cast<std::size_t>(i)]];
    }
    loss /= static_cast<double>(n);
    return make_op({1}, {loss}, {logits}, [n, c, lv = std::move(lv)](detail::Node& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        const double g = node.grad[0] / static_cast<double>(n);
        for (int i = 0; i < n; ++i) {
            const double* p = px.data.data() + static_cast<std::int64_t>(i) * c;
            double mx = p[0];
            for (int j = 1; j < c; ++j) mx = std::max(mx, p[j]);
            double z = 0.0;
            for (int j = 0; j < c; ++j) z += std::exp(p[j] - mx);
            double* dx = px.grad.data() + static_cast<std::int64_t>(i) * c;
            for (int j = 0; j < c; ++j) {
                const double soft = std::exp(p[j] - mx) / z;
                dx[j] += g * (soft - (j == lv[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
            }
        }
    });
}

namespace {

template <typename Fwd, typename Grad>
Tensor row_mean_penalty(const Tensor& pred, const Tensor& target, const char* name, Fwd fwd, Grad grad) {
    require_defined(pred, name);
    require_defined(target, name);
    require_same_shape(pred, target, name);
    if (pred.ndim() != 2) throw DimensionError(std::string(name) + ": expects [N,B], got " + shape_str(pred.shape()));
    const int n = pred.dim(0);
    const auto pd = pred.data();
    const auto td = target.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < pd.size(); ++i) loss += fwd(pd[i] - td[i]);
    loss /= static_cast<double>(n);
    return make_op({1}, {loss}, {pred, target}, [n, grad](detail::Node& node) {
        auto& pp = *node.parents[0];
        auto& pt = *node.parents[1];
        const double g = node.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < pp.data.size(); ++i) {
            const double d = grad(pp.data[i] - pt.data[i]) * g;
            if (pp.requires_grad) pp.grad[i] += d;
            if (pt.requires_grad) pt.grad[i] -= d;
        }
    });
}

}  // namespace

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
    return row_mean_penalty(
        pred, target, "smooth_l1",
        [](double d) { return std::abs(d) <= 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; },
        [](double d) { return std::clamp(d, -1.0, 1.0); });
}

Tensor l1(const Tensor& pred, const Tensor& target) {
    return row_mean_penalty(
        pred, target, "l1", [](double d) { return std::abs(d); },
        [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); });
}

// ---- backward ------------------------------------------------------------------

void backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be a single-element tensor, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss does not depend on any tracked tensor");
    }

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior nodes restart from zero every sweep; only leaves accumulate
    // across calls. Repeating backward on one graph therefore doubles leaf
    // grads instead of compounding stale interior values.
    for (detail::Node* node : order) {
        if (node->backward_fn) std::fill(node->grad.begin(), node->grad.end(), 0.0);
    }
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

}  // namespace niff
