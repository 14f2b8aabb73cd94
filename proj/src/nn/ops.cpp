#include "obsd/nn/ops.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace obsd::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

NodePtr result_node(std::vector<int> shape, std::vector<NodePtr> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->v.assign((size_t)n->numel(), 0.0);
    if (grad_enabled()) {
        for (auto& p : parents)
            if (p->requires_grad) n->requires_grad = true;
        if (n->requires_grad) n->parents = std::move(parents);
    }
    return n;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

void check_nchw(const Tensor& x, const char* what) {
    require(x.shape().size() == 4, std::string(what) + ": expected NCHW tensor, got " +
                                       shape_str(x.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
    auto n = result_node(a.shape(), {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < n->v.size(); ++i) n->v[i] = av[i] + bv[i];
    if (n->requires_grad)
        n->backward = [](Node& self) {
            for (int pi = 0; pi < 2; ++pi) {
                Node& p = *self.parents[pi];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) p.g[i] += self.g[i];
            }
        };
    return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "sub: shape mismatch");
    auto n = result_node(a.shape(), {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < n->v.size(); ++i) n->v[i] = av[i] - bv[i];
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) pa.g[i] += self.g[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) pb.g[i] -= self.g[i];
            }
        };
    return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "mul: shape mismatch");
    auto n = result_node(a.shape(), {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < n->v.size(); ++i) n->v[i] = av[i] * bv[i];
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) pa.g[i] += self.g[i] * pb.v[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) pb.g[i] += self.g[i] * pa.v[i];
            }
        };
    return Tensor(n);
}

Tensor add_scalar(const Tensor& a, double s) {
    auto n = result_node(a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < n->v.size(); ++i) n->v[i] = av[i] + s;
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) p.g[i] += self.g[i];
        };
    return Tensor(n);
}

Tensor mul_scalar(const Tensor& a, double s) {
    auto n = result_node(a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < n->v.size(); ++i) n->v[i] = av[i] * s;
    if (n->requires_grad)
        n->backward = [s](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) p.g[i] += self.g[i] * s;
        };
    return Tensor(n);
}

Tensor silu(const Tensor& x) {
    auto n = result_node(x.shape(), {x.node()});
    const auto& xv = x.values();
    for (size_t i = 0; i < n->v.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-xv[i]));
        n->v[i] = xv[i] * s;
    }
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-p.v[i]));
                p.g[i] += self.g[i] * s * (1.0 + p.v[i] * (1.0 - s));
            }
        };
    return Tensor(n);
}

Tensor relu(const Tensor& x) {
    auto n = result_node(x.shape(), {x.node()});
    const auto& xv = x.values();
    for (size_t i = 0; i < n->v.size(); ++i) n->v[i] = xv[i] > 0 ? xv[i] : 0.0;
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i)
                if (p.v[i] > 0) p.g[i] += self.g[i];
        };
    return Tensor(n);
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    int64_t n_new = 1;
    for (int s : shape) n_new *= s;
    require(n_new == x.numel(), "reshape: numel mismatch");
    auto n = result_node(std::move(shape), {x.node()});
    n->v = x.values();
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) p.g[i] += self.g[i];
        };
    return Tensor(n);
}

Tensor transpose2d(const Tensor& x) {
    require(x.shape().size() == 2, "transpose2d: expected 2-D");
    int m = x.dim(0), k = x.dim(1);
    auto n = result_node({k, m}, {x.node()});
    CMapMat xm(x.data(), m, k);
    MapMat om(n->v.data(), k, m);
    om = xm.transpose();
    if (n->requires_grad)
        n->backward = [m, k](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            CMapMat gm(self.g.data(), k, m);
            MapMat pg(p.g.data(), m, k);
            pg += gm.transpose();
        };
    return Tensor(n);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check_nchw(a, "concat_channels");
    check_nchw(b, "concat_channels");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels: N/H/W mismatch");
    int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    auto n = result_node({N, Ca + Cb, H, W}, {a.node(), b.node()});
    size_t plane = (size_t)H * W;
    for (int i = 0; i < N; ++i) {
        std::copy_n(a.data() + (size_t)i * Ca * plane, Ca * plane,
                    n->v.data() + (size_t)i * (Ca + Cb) * plane);
        std::copy_n(b.data() + (size_t)i * Cb * plane, Cb * plane,
                    n->v.data() + ((size_t)i * (Ca + Cb) + Ca) * plane);
    }
    if (n->requires_grad)
        n->backward = [N, Ca, Cb, plane](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (int i = 0; i < N; ++i)
                    for (size_t j = 0; j < Ca * plane; ++j)
                        pa.g[(size_t)i * Ca * plane + j] +=
                            self.g[(size_t)i * (Ca + Cb) * plane + j];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int i = 0; i < N; ++i)
                    for (size_t j = 0; j < Cb * plane; ++j)
                        pb.g[(size_t)i * Cb * plane + j] +=
                            self.g[((size_t)i * (Ca + Cb) + Ca) * plane + j];
            }
        };
    return Tensor(n);
}

Tensor select_batch(const Tensor& x, int bi) {
    require(x.shape().size() >= 2, "select_batch: need batch dim");
    require(bi >= 0 && bi < x.dim(0), "select_batch: index out of range");
    std::vector<int> shape(x.shape().begin() + 1, x.shape().end());
    auto n = result_node(shape, {x.node()});
    size_t stride = (size_t)n->numel();
    std::copy_n(x.data() + stride * bi, stride, n->v.data());
    if (n->requires_grad)
        n->backward = [bi, stride](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (size_t i = 0; i < stride; ++i) p.g[stride * bi + i] += self.g[i];
        };
    return Tensor(n);
}

Tensor stack_batch(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "stack_batch: empty");
    std::vector<int> shape{(int)parts.size()};
    for (int s : parts[0].shape()) shape.push_back(s);
    std::vector<NodePtr> parents;
    for (auto& p : parts) {
        require(p.shape() == parts[0].shape(), "stack_batch: shape mismatch");
        parents.push_back(p.node());
    }
    auto n = result_node(shape, parents);
    size_t stride = (size_t)parts[0].numel();
    for (size_t i = 0; i < parts.size(); ++i)
        std::copy_n(parts[i].data(), stride, n->v.data() + stride * i);
    if (n->requires_grad)
        n->backward = [stride](Node& self) {
            for (size_t i = 0; i < self.parents.size(); ++i) {
                Node& p = *self.parents[i];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (size_t j = 0; j < stride; ++j) p.g[j] += self.g[stride * i + j];
            }
        };
    return Tensor(n);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: expected 2-D");
    require(a.dim(1) == b.dim(0), "matmul: inner dim mismatch " + shape_str(a.shape()) +
                                      " x " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), p = b.dim(1);
    auto n = result_node({m, p}, {a.node(), b.node()});
    CMapMat am(a.data(), m, k), bm(b.data(), k, p);
    MapMat om(n->v.data(), m, p);
    om.noalias() = am * bm;
    if (n->requires_grad)
        n->backward = [m, k, p](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            CMapMat gm(self.g.data(), m, p);
            if (pa.requires_grad) {
                pa.ensure_grad();
                CMapMat bm(pb.v.data(), k, p);
                MapMat ga(pa.g.data(), m, k);
                ga.noalias() += gm * bm.transpose();
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                CMapMat am(pa.v.data(), m, k);
                MapMat gb(pb.g.data(), k, p);
                gb.noalias() += am.transpose() * gm;
            }
        };
    return Tensor(n);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.shape().size() == 2 && w.shape().size() == 2, "linear: expected 2-D");
    require(x.dim(1) == w.dim(1), "linear: in-features mismatch");
    int n_rows = x.dim(0), in = x.dim(1), out = w.dim(0);
    std::vector<NodePtr> parents{x.node(), w.node()};
    if (b.defined()) {
        require(b.numel() == out, "linear: bias size mismatch");
        parents.push_back(b.node());
    }
    auto n = result_node({n_rows, out}, parents);
    CMapMat xm(x.data(), n_rows, in), wm(w.data(), out, in);
    MapMat om(n->v.data(), n_rows, out);
    om.noalias() = xm * wm.transpose();
    if (b.defined())
        for (int r = 0; r < n_rows; ++r)
            for (int c = 0; c < out; ++c) n->v[(size_t)r * out + c] += b.data()[c];
    if (n->requires_grad)
        n->backward = [n_rows, in, out](Node& self) {
            Node& px = *self.parents[0];
            Node& pw = *self.parents[1];
            CMapMat gm(self.g.data(), n_rows, out);
            if (px.requires_grad) {
                px.ensure_grad();
                CMapMat wm(pw.v.data(), out, in);
                MapMat gx(px.g.data(), n_rows, in);
                gx.noalias() += gm * wm;
            }
            if (pw.requires_grad) {
                pw.ensure_grad();
                CMapMat xm(px.v.data(), n_rows, in);
                MapMat gw(pw.g.data(), out, in);
                gw.noalias() += gm.transpose() * xm;
            }
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                Node& pb = *self.parents[2];
                pb.ensure_grad();
                for (int r = 0; r < n_rows; ++r)
                    for (int c = 0; c < out; ++c) pb.g[c] += self.g[(size_t)r * out + c];
            }
        };
    return Tensor(n);
}

namespace {

// col buffer layout: (Cin*kh*kw) x (Ho*Wo)
void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* col) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                double* dst = col + (((size_t)c * kh + ky) * kw + kx) * Ho * Wo;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        dst[(size_t)oy * Wo + ox] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[((size_t)c * H + iy) * W + ix]
                                : 0.0;
                    }
                }
            }
}

void col2im_add(const double* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int Ho, int Wo, double* x) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const double* src = col + (((size_t)c * kh + ky) * kw + kx) * Ho * Wo;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        x[((size_t)c * H + iy) * W + ix] += src[(size_t)oy * Wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check_nchw(x, "conv2d");
    require(w.shape().size() == 4, "conv2d: weight must be (Cout,Cin,kh,kw)");
    require(x.dim(1) == w.dim(1), "conv2d: channel mismatch " + shape_str(x.shape()) +
                                      " vs " + shape_str(w.shape()));
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
    std::vector<NodePtr> parents{x.node(), w.node()};
    if (b.defined()) {
        require(b.numel() == Cout, "conv2d: bias size mismatch");
        parents.push_back(b.node());
    }
    auto n = result_node({N, Cout, Ho, Wo}, parents);
    int ck = C * kh * kw;
    std::vector<double> col((size_t)ck * Ho * Wo);
    CMapMat wm(w.data(), Cout, ck);
    for (int i = 0; i < N; ++i) {
        im2col(x.data() + (size_t)i * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
               col.data());
        CMapMat cm(col.data(), ck, (size_t)Ho * Wo);
        MapMat om(n->v.data() + (size_t)i * Cout * Ho * Wo, Cout, (size_t)Ho * Wo);
        om.noalias() = wm * cm;
        if (b.defined())
            for (int co = 0; co < Cout; ++co)
                om.row(co).array() += b.data()[co];
    }
    if (n->requires_grad)
        n->backward = [N, C, H, W, Cout, kh, kw, stride, pad, Ho, Wo, ck](Node& self) {
            Node& px = *self.parents[0];
            Node& pw = *self.parents[1];
            Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
            bool need_x = px.requires_grad, need_w = pw.requires_grad;
            if (need_x) px.ensure_grad();
            if (need_w) pw.ensure_grad();
            std::vector<double> col((size_t)ck * Ho * Wo);
            std::vector<double> dcol;
            if (need_x) dcol.resize((size_t)ck * Ho * Wo);
            CMapMat wm(pw.v.data(), Cout, ck);
            for (int i = 0; i < N; ++i) {
                CMapMat gm(self.g.data() + (size_t)i * Cout * Ho * Wo, Cout,
                           (size_t)Ho * Wo);
                if (need_w) {
                    im2col(px.v.data() + (size_t)i * C * H * W, C, H, W, kh, kw, stride,
                           pad, Ho, Wo, col.data());
                    CMapMat cm(col.data(), ck, (size_t)Ho * Wo);
                    MapMat gw(pw.g.data(), Cout, ck);
                    gw.noalias() += gm * cm.transpose();
                }
                if (need_x) {
                    MapMat dcm(dcol.data(), ck, (size_t)Ho * Wo);
                    dcm.noalias() = wm.transpose() * gm;
                    col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               px.g.data() + (size_t)i * C * H * W);
                }
                if (pb && pb->requires_grad) {
                    pb->ensure_grad();
                    for (int co = 0; co < Cout; ++co)
                        for (size_t j = 0; j < (size_t)Ho * Wo; ++j)
                            pb->g[co] += gm(co, (Eigen::Index)j);
                }
            }
        };
    return Tensor(n);
}

namespace {

// bilinear fetch with zero padding; also returns the four corner indices and
// weights so backward can reuse the decomposition
struct BilinearTap {
    int y0, x0;
    double wy, wx;  // fractional parts
};

inline double bilerp(const double* plane, int H, int W, double py, double px,
                     BilinearTap* tap = nullptr) {
    double fy = std::floor(py), fx = std::floor(px);
    int y0 = (int)fy, x0 = (int)fx;
    double wy = py - fy, wx = px - fx;
    if (tap) *tap = {y0, x0, wy, wx};
    auto at = [&](int y, int x) -> double {
        return (y >= 0 && y < H && x >= 0 && x < W) ? plane[(size_t)y * W + x] : 0.0;
    };
    double v00 = at(y0, x0), v01 = at(y0, x0 + 1);
    double v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
    double top = v00 + wx * (v01 - v00);
    double bot = v10 + wx * (v11 - v10);
    return top + wy * (bot - top);
}

}  // namespace

Tensor deformable_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& w,
                         const Tensor& b) {
    check_nchw(x, "deformable_conv2d");
    check_nchw(offsets, "deformable_conv2d offsets");
    require(w.shape().size() == 4 && w.dim(2) == 3 && w.dim(3) == 3,
            "deformable_conv2d: 3x3 kernels only");
    require(x.dim(1) == w.dim(1), "deformable_conv2d: channel mismatch");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Cout = w.dim(0);
    const int K = 9;
    require(offsets.dim(0) == N && offsets.dim(1) == 2 * K && offsets.dim(2) == H &&
                offsets.dim(3) == W,
            "deformable_conv2d: offsets must be (N,18,H,W)");
    for (double v : offsets.values())
        if (!std::isfinite(v)) throw UsageError("deformable_conv2d: non-finite offsets");
    std::vector<NodePtr> parents{x.node(), offsets.node(), w.node()};
    if (b.defined()) {
        require(b.numel() == Cout, "deformable_conv2d: bias size mismatch");
        parents.push_back(b.node());
    }
    auto n = result_node({N, Cout, H, W}, parents);

    size_t plane = (size_t)H * W;
    int ck = C * K;
    // deformable im2col: col(c*K + k, y*W + x) = bilinear sample
    std::vector<double> col((size_t)ck * plane);
    CMapMat wm(w.data(), Cout, ck);
    for (int i = 0; i < N; ++i) {
        const double* xn = x.data() + (size_t)i * C * plane;
        const double* on = offsets.data() + (size_t)i * 2 * K * plane;
        for (int c = 0; c < C; ++c) {
            const double* xp = xn + (size_t)c * plane;
            for (int k = 0; k < K; ++k) {
                int gy = k / 3 - 1, gx = k % 3 - 1;
                const double* dy = on + (size_t)(2 * k) * plane;
                const double* dx = on + (size_t)(2 * k + 1) * plane;
                double* dst = col.data() + ((size_t)c * K + k) * plane;
                for (int y = 0; y < H; ++y)
                    for (int xq = 0; xq < W; ++xq) {
                        size_t j = (size_t)y * W + xq;
                        dst[j] = bilerp(xp, H, W, y + gy + dy[j], xq + gx + dx[j]);
                    }
            }
        }
        CMapMat cm(col.data(), ck, (Eigen::Index)plane);
        MapMat om(n->v.data() + (size_t)i * Cout * plane, Cout, (Eigen::Index)plane);
        om.noalias() = wm * cm;
        if (b.defined())
            for (int co = 0; co < Cout; ++co) om.row(co).array() += b.data()[co];
    }

    if (n->requires_grad)
        n->backward = [N, C, H, W, Cout, ck, plane](Node& self) {
            const int K = 9;
            Node& px = *self.parents[0];
            Node& po = *self.parents[1];
            Node& pw = *self.parents[2];
            Node* pb = self.parents.size() > 3 ? self.parents[3].get() : nullptr;
            bool need_x = px.requires_grad, need_o = po.requires_grad,
                 need_w = pw.requires_grad;
            if (need_x) px.ensure_grad();
            if (need_o) po.ensure_grad();
            if (need_w) pw.ensure_grad();
            if (pb && pb->requires_grad) pb->ensure_grad();
            CMapMat wm(pw.v.data(), Cout, ck);
            std::vector<double> col((size_t)ck * plane);
            std::vector<double> dcol((size_t)ck * plane);
            for (int i = 0; i < N; ++i) {
                const double* xn = px.v.data() + (size_t)i * C * plane;
                const double* on = po.v.data() + (size_t)i * 2 * K * plane;
                CMapMat gm(self.g.data() + (size_t)i * Cout * plane, Cout,
                           (Eigen::Index)plane);
                // rebuild the sample matrix for dW
                if (need_w) {
                    for (int c = 0; c < C; ++c) {
                        const double* xp = xn + (size_t)c * plane;
                        for (int k = 0; k < K; ++k) {
                            int gy = k / 3 - 1, gx = k % 3 - 1;
                            const double* dyp = on + (size_t)(2 * k) * plane;
                            const double* dxp = on + (size_t)(2 * k + 1) * plane;
                            double* dst = col.data() + ((size_t)c * K + k) * plane;
                            for (int y = 0; y < H; ++y)
                                for (int xq = 0; xq < W; ++xq) {
                                    size_t j = (size_t)y * W + xq;
                                    dst[j] = bilerp(xp, H, W, y + gy + dyp[j],
                                                    xq + gx + dxp[j]);
                                }
                        }
                    }
                    CMapMat cm(col.data(), ck, (Eigen::Index)plane);
                    MapMat gw(pw.g.data(), Cout, ck);
                    gw.noalias() += gm * cm.transpose();
                }
                if (pb && pb->requires_grad)
                    for (int co = 0; co < Cout; ++co)
                        for (size_t j = 0; j < plane; ++j)
                            pb->g[co] += gm(co, (Eigen::Index)j);
                if (!need_x && !need_o) continue;
                // dcol = W^T * dout
                MapMat dcm(dcol.data(), ck, (Eigen::Index)plane);
                dcm.noalias() = wm.transpose() * gm;
                double* gx_n = need_x ? px.g.data() + (size_t)i * C * plane : nullptr;
                double* go_n = need_o ? po.g.data() + (size_t)i * 2 * K * plane : nullptr;
                for (int c = 0; c < C; ++c) {
                    const double* xp = xn + (size_t)c * plane;
                    for (int k = 0; k < K; ++k) {
                        int gy = k / 3 - 1, gx = k % 3 - 1;
                        const double* dyp = on + (size_t)(2 * k) * plane;
                        const double* dxp = on + (size_t)(2 * k + 1) * plane;
                        const double* dc = dcol.data() + ((size_t)c * K + k) * plane;
                        for (int y = 0; y < H; ++y)
                            for (int xq = 0; xq < W; ++xq) {
                                size_t j = (size_t)y * W + xq;
                                double py = y + gy + dyp[j], pxx = xq + gx + dxp[j];
                                BilinearTap t;
                                bilerp(xp, H, W, py, pxx, &t);
                                double gval = dc[j];
                                if (gval == 0.0) continue;
                                auto in = [&](int yy, int xx) {
                                    return yy >= 0 && yy < H && xx >= 0 && xx < W;
                                };
                                auto at = [&](int yy, int xx) -> double {
                                    return in(yy, xx) ? xp[(size_t)yy * W + xx] : 0.0;
                                };
                                double w00 = (1 - t.wy) * (1 - t.wx),
                                       w01 = (1 - t.wy) * t.wx, w10 = t.wy * (1 - t.wx),
                                       w11 = t.wy * t.wx;
                                if (need_x) {
                                    double* gp = gx_n + (size_t)c * plane;
                                    if (in(t.y0, t.x0))
                                        gp[(size_t)t.y0 * W + t.x0] += gval * w00;
                                    if (in(t.y0, t.x0 + 1))
                                        gp[(size_t)t.y0 * W + t.x0 + 1] += gval * w01;
                                    if (in(t.y0 + 1, t.x0))
                                        gp[(size_t)(t.y0 + 1) * W + t.x0] += gval * w10;
                                    if (in(t.y0 + 1, t.x0 + 1))
                                        gp[(size_t)(t.y0 + 1) * W + t.x0 + 1] +=
                                            gval * w11;
                                }
                                if (need_o) {
                                    double v00 = at(t.y0, t.x0), v01 = at(t.y0, t.x0 + 1);
                                    double v10 = at(t.y0 + 1, t.x0),
                                           v11 = at(t.y0 + 1, t.x0 + 1);
                                    double ddy = (v10 + t.wx * (v11 - v10)) -
                                                 (v00 + t.wx * (v01 - v00));
                                    double ddx = (v01 + t.wy * (v11 - v01)) -
                                                 (v00 + t.wy * (v10 - v00));
                                    go_n[(size_t)(2 * k) * plane + j] += gval * ddy;
                                    go_n[(size_t)(2 * k + 1) * plane + j] += gval * ddx;
                                }
                            }
                    }
                }
            }
        };
    return Tensor(n);
}

Tensor upsample2x(const Tensor& x) {
    check_nchw(x, "upsample2x");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto n = result_node({N, C, 2 * H, 2 * W}, {x.node()});
    for (int i = 0; i < N * C; ++i) {
        const double* src = x.data() + (size_t)i * H * W;
        double* dst = n->v.data() + (size_t)i * 4 * H * W;
        for (int y = 0; y < H; ++y)
            for (int xq = 0; xq < W; ++xq) {
                double v = src[(size_t)y * W + xq];
                size_t base = (size_t)(2 * y) * 2 * W + 2 * xq;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * W] = v;
                dst[base + 2 * W + 1] = v;
            }
    }
    if (n->requires_grad)
        n->backward = [N, C, H, W](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < N * C; ++i) {
                const double* gs = self.g.data() + (size_t)i * 4 * H * W;
                double* gp = p.g.data() + (size_t)i * H * W;
                for (int y = 0; y < H; ++y)
                    for (int xq = 0; xq < W; ++xq) {
                        size_t base = (size_t)(2 * y) * 2 * W + 2 * xq;
                        gp[(size_t)y * W + xq] +=
                            gs[base] + gs[base + 1] + gs[base + 2 * W] + gs[base + 2 * W + 1];
                    }
            }
        };
    return Tensor(n);
}

Tensor avgpool2(const Tensor& x) {
    check_nchw(x, "avgpool2");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H % 2 == 0 && W % 2 == 0, "avgpool2: odd spatial dims");
    int Ho = H / 2, Wo = W / 2;
    auto n = result_node({N, C, Ho, Wo}, {x.node()});
    for (int i = 0; i < N * C; ++i) {
        const double* src = x.data() + (size_t)i * H * W;
        double* dst = n->v.data() + (size_t)i * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int xq = 0; xq < Wo; ++xq) {
                size_t base = (size_t)(2 * y) * W + 2 * xq;
                dst[(size_t)y * Wo + xq] =
                    0.25 * (src[base] + src[base + 1] + src[base + W] + src[base + W + 1]);
            }
    }
    if (n->requires_grad)
        n->backward = [N, C, H, W, Ho, Wo](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < N * C; ++i) {
                const double* gs = self.g.data() + (size_t)i * Ho * Wo;
                double* gp = p.g.data() + (size_t)i * H * W;
                for (int y = 0; y < Ho; ++y)
                    for (int xq = 0; xq < Wo; ++xq) {
                        double gv = 0.25 * gs[(size_t)y * Wo + xq];
                        size_t base = (size_t)(2 * y) * W + 2 * xq;
                        gp[base] += gv;
                        gp[base + 1] += gv;
                        gp[base + W] += gv;
                        gp[base + W + 1] += gv;
                    }
            }
        };
    return Tensor(n);
}

Tensor global_avgpool(const Tensor& x) {
    check_nchw(x, "global_avgpool");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto n = result_node({N, C}, {x.node()});
    double inv = 1.0 / ((double)H * W);
    for (int i = 0; i < N * C; ++i) {
        const double* src = x.data() + (size_t)i * H * W;
        double acc = 0.0;
        for (size_t j = 0; j < (size_t)H * W; ++j) acc += src[j];
        n->v[i] = acc * inv;
    }
    if (n->requires_grad)
        n->backward = [N, C, H, W, inv](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < N * C; ++i) {
                double gv = self.g[i] * inv;
                double* gp = p.g.data() + (size_t)i * H * W;
                for (size_t j = 0; j < (size_t)H * W; ++j) gp[j] += gv;
            }
        };
    return Tensor(n);
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
    check_nchw(x, "group_norm");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(C % groups == 0, "group_norm: channels not divisible by groups");
    require(gamma.numel() == C && beta.numel() == C, "group_norm: affine size mismatch");
    int cg = C / groups;
    size_t m = (size_t)cg * H * W;  // elements per group
    auto n = result_node(x.shape(), {x.node(), gamma.node(), beta.node()});
    std::vector<double> means((size_t)N * groups), rstds((size_t)N * groups);
    size_t plane = (size_t)H * W;
    for (int i = 0; i < N; ++i)
        for (int gr = 0; gr < groups; ++gr) {
            const double* src = x.data() + ((size_t)i * C + (size_t)gr * cg) * plane;
            double mean = 0.0;
            for (size_t j = 0; j < m; ++j) mean += src[j];
            mean /= (double)m;
            double var = 0.0;
            for (size_t j = 0; j < m; ++j) {
                double d = src[j] - mean;
                var += d * d;
            }
            var /= (double)m;
            double rstd = 1.0 / std::sqrt(var + eps);
            means[(size_t)i * groups + gr] = mean;
            rstds[(size_t)i * groups + gr] = rstd;
            double* dst = n->v.data() + ((size_t)i * C + (size_t)gr * cg) * plane;
            for (int cc = 0; cc < cg; ++cc) {
                double gm = gamma.data()[gr * cg + cc], bt = beta.data()[gr * cg + cc];
                for (size_t j = 0; j < plane; ++j) {
                    double xhat = (src[cc * plane + j] - mean) * rstd;
                    dst[cc * plane + j] = gm * xhat + bt;
                }
            }
        }
    if (n->requires_grad)
        n->backward = [N, C, H, W, groups, cg, m, plane, means, rstds](Node& self) {
            Node& px = *self.parents[0];
            Node& pg = *self.parents[1];
            Node& pbt = *self.parents[2];
            bool need_x = px.requires_grad;
            if (need_x) px.ensure_grad();
            if (pg.requires_grad) pg.ensure_grad();
            if (pbt.requires_grad) pbt.ensure_grad();
            (void)C; (void)H; (void)W;
            for (int i = 0; i < N; ++i)
                for (int gr = 0; gr < groups; ++gr) {
                    size_t base = ((size_t)i * C + (size_t)gr * cg) * plane;
                    const double* xv = px.v.data() + base;
                    const double* gy = self.g.data() + base;
                    double mean = means[(size_t)i * groups + gr];
                    double rstd = rstds[(size_t)i * groups + gr];
                    // accumulate affine grads + the two reduction terms
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int cc = 0; cc < cg; ++cc) {
                        double gm = pg.v[gr * cg + cc];
                        for (size_t j = 0; j < plane; ++j) {
                            double xhat = (xv[cc * plane + j] - mean) * rstd;
                            double dy = gy[cc * plane + j];
                            if (pg.requires_grad) pg.g[gr * cg + cc] += dy * xhat;
                            if (pbt.requires_grad) pbt.g[gr * cg + cc] += dy;
                            double dxhat = dy * gm;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    if (!need_x) continue;
                    double inv_m = 1.0 / (double)m;
                    double* gx = px.g.data() + base;
                    for (int cc = 0; cc < cg; ++cc) {
                        double gm = pg.v[gr * cg + cc];
                        for (size_t j = 0; j < plane; ++j) {
                            double xhat = (xv[cc * plane + j] - mean) * rstd;
                            double dxhat = gy[cc * plane + j] * gm;
                            gx[cc * plane + j] +=
                                rstd * (dxhat - inv_m * sum_dxhat -
                                        xhat * inv_m * sum_dxhat_xhat);
                        }
                    }
                }
        };
    return Tensor(n);
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    check_nchw(x, "add_channel_bias");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(b.numel() == C, "add_channel_bias: size mismatch");
    auto n = result_node(x.shape(), {x.node(), b.node()});
    size_t plane = (size_t)H * W;
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            double bv = b.data()[c];
            const double* src = x.data() + ((size_t)i * C + c) * plane;
            double* dst = n->v.data() + ((size_t)i * C + c) * plane;
            for (size_t j = 0; j < plane; ++j) dst[j] = src[j] + bv;
        }
    if (n->requires_grad)
        n->backward = [N, C, plane](Node& self) {
            Node& px = *self.parents[0];
            Node& pb = *self.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) px.g[i] += self.g[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int i = 0; i < N; ++i)
                    for (int c = 0; c < C; ++c) {
                        const double* gs = self.g.data() + ((size_t)i * C + c) * plane;
                        for (size_t j = 0; j < plane; ++j) pb.g[c] += gs[j];
                    }
            }
        };
    return Tensor(n);
}

Tensor add_sample_channel(const Tensor& x, const Tensor& s) {
    check_nchw(x, "add_sample_channel");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(s.shape().size() == 2 && s.dim(0) == N && s.dim(1) == C,
            "add_sample_channel: expected (N,C)");
    auto n = result_node(x.shape(), {x.node(), s.node()});
    size_t plane = (size_t)H * W;
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            double sv = s.data()[(size_t)i * C + c];
            const double* src = x.data() + ((size_t)i * C + c) * plane;
            double* dst = n->v.data() + ((size_t)i * C + c) * plane;
            for (size_t j = 0; j < plane; ++j) dst[j] = src[j] + sv;
        }
    if (n->requires_grad)
        n->backward = [N, C, plane](Node& self) {
            Node& px = *self.parents[0];
            Node& ps = *self.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) px.g[i] += self.g[i];
            }
            if (ps.requires_grad) {
                ps.ensure_grad();
                for (int i = 0; i < N; ++i)
                    for (int c = 0; c < C; ++c) {
                        const double* gs = self.g.data() + ((size_t)i * C + c) * plane;
                        double acc = 0.0;
                        for (size_t j = 0; j < plane; ++j) acc += gs[j];
                        ps.g[(size_t)i * C + c] += acc;
                    }
            }
        };
    return Tensor(n);
}

Tensor film(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    check_nchw(x, "film");
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(scale.shape().size() == 2 && scale.dim(0) == N && scale.dim(1) == C,
            "film: scale must be (N,C)");
    require(shift.shape() == scale.shape(), "film: shift must match scale");
    auto n = result_node(x.shape(), {x.node(), scale.node(), shift.node()});
    size_t plane = (size_t)H * W;
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            double sc = 1.0 + scale.data()[(size_t)i * C + c];
            double sh = shift.data()[(size_t)i * C + c];
            const double* src = x.data() + ((size_t)i * C + c) * plane;
            double* dst = n->v.data() + ((size_t)i * C + c) * plane;
            for (size_t j = 0; j < plane; ++j) dst[j] = src[j] * sc + sh;
        }
    if (n->requires_grad)
        n->backward = [N, C, plane](Node& self) {
            Node& px = *self.parents[0];
            Node& psc = *self.parents[1];
            Node& psh = *self.parents[2];
            if (px.requires_grad) px.ensure_grad();
            if (psc.requires_grad) psc.ensure_grad();
            if (psh.requires_grad) psh.ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c) {
                    size_t base = ((size_t)i * C + c) * plane;
                    double sc = 1.0 + psc.v[(size_t)i * C + c];
                    double acc_sc = 0.0, acc_sh = 0.0;
                    for (size_t j = 0; j < plane; ++j) {
                        double gv = self.g[base + j];
                        if (px.requires_grad) px.g[base + j] += gv * sc;
                        acc_sc += gv * px.v[base + j];
                        acc_sh += gv;
                    }
                    if (psc.requires_grad) psc.g[(size_t)i * C + c] += acc_sc;
                    if (psh.requires_grad) psh.g[(size_t)i * C + c] += acc_sh;
                }
        };
    return Tensor(n);
}

Tensor softmax_rows(const Tensor& x) {
    require(x.shape().size() == 2, "softmax_rows: expected 2-D");
    int m = x.dim(0), k = x.dim(1);
    auto n = result_node(x.shape(), {x.node()});
    for (int r = 0; r < m; ++r) {
        const double* src = x.data() + (size_t)r * k;
        double* dst = n->v.data() + (size_t)r * k;
        double mx = src[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        for (int j = 0; j < k; ++j) dst[j] /= sum;
    }
    if (n->requires_grad)
        n->backward = [m, k](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (int r = 0; r < m; ++r) {
                const double* y = self.v.data() + (size_t)r * k;
                const double* gy = self.g.data() + (size_t)r * k;
                double dot = 0.0;
                for (int j = 0; j < k; ++j) dot += gy[j] * y[j];
                double* gx = p.g.data() + (size_t)r * k;
                for (int j = 0; j < k; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        };
    return Tensor(n);
}

Tensor sum_all(const Tensor& x) {
    auto n = result_node({1}, {x.node()});
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    n->v[0] = acc;
    if (n->requires_grad)
        n->backward = [](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            double g = self.g[0];
            for (size_t i = 0; i < p.g.size(); ++i) p.g[i] += g;
        };
    return Tensor(n);
}

Tensor mean_all(const Tensor& x) {
    return mul_scalar(sum_all(x), 1.0 / (double)x.numel());
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require(same_shape(a, b), "mse: shape mismatch");
    auto n = result_node({1}, {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        double d = av[i] - bv[i];
        acc += d * d;
    }
    double inv = 1.0 / (double)av.size();
    n->v[0] = acc * inv;
    if (n->requires_grad)
        n->backward = [inv](Node& self) {
            Node& pa = *self.parents[0];
            Node& pb = *self.parents[1];
            double g = 2.0 * inv * self.g[0];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (size_t i = 0; i < pa.g.size(); ++i)
                    pa.g[i] += g * (pa.v[i] - pb.v[i]);
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (size_t i = 0; i < pb.g.size(); ++i)
                    pb.g[i] -= g * (pa.v[i] - pb.v[i]);
            }
        };
    return Tensor(n);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require(logits.shape().size() == 2, "cross_entropy: expected (N,K) logits");
    int N = logits.dim(0), K = logits.dim(1);
    require((int)labels.size() == N, "cross_entropy: label count mismatch");
    auto n = result_node({1}, {logits.node()});
    double loss = 0.0;
    std::vector<double> probs((size_t)N * K);
    for (int i = 0; i < N; ++i) {
        require(labels[i] >= 0 && labels[i] < K, "cross_entropy: label out of range");
        const double* src = logits.data() + (size_t)i * K;
        double mx = src[0];
        for (int j = 1; j < K; ++j) mx = std::max(mx, src[j]);
        double sum = 0.0;
        for (int j = 0; j < K; ++j) {
            probs[(size_t)i * K + j] = std::exp(src[j] - mx);
            sum += probs[(size_t)i * K + j];
        }
        for (int j = 0; j < K; ++j) probs[(size_t)i * K + j] /= sum;
        loss -= std::log(std::max(probs[(size_t)i * K + labels[i]], 1e-300));
    }
    n->v[0] = loss / N;
    if (n->requires_grad)
        n->backward = [N, K, probs, labels](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            double g = self.g[0] / N;
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < K; ++j)
                    p.g[(size_t)i * K + j] +=
                        g * (probs[(size_t)i * K + j] - (j == labels[i] ? 1.0 : 0.0));
        };
    return Tensor(n);
}

Tensor offset_mean_norm(const Tensor& offsets) {
    check_nchw(offsets, "offset_mean_norm");
    int N = offsets.dim(0), C2K = offsets.dim(1), H = offsets.dim(2), W = offsets.dim(3);
    require(C2K % 2 == 0, "offset_mean_norm: channel count must be even");
    int K = C2K / 2;
    auto n = result_node({1}, {offsets.node()});
    size_t plane = (size_t)H * W;
    size_t count = (size_t)N * K * plane;
    double acc = 0.0;
    for (int i = 0; i < N; ++i)
        for (int k = 0; k < K; ++k) {
            const double* dy = offsets.data() + ((size_t)i * C2K + 2 * k) * plane;
            const double* dx = offsets.data() + ((size_t)i * C2K + 2 * k + 1) * plane;
            for (size_t j = 0; j < plane; ++j)
                acc += std::sqrt(dy[j] * dy[j] + dx[j] * dx[j]);
        }
    n->v[0] = acc / (double)count;
    if (n->requires_grad)
        n->backward = [N, K, C2K, plane, count](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            double g = self.g[0] / (double)count;
            for (int i = 0; i < N; ++i)
                for (int k = 0; k < K; ++k) {
                    size_t by = ((size_t)i * C2K + 2 * k) * plane;
                    size_t bx = ((size_t)i * C2K + 2 * k + 1) * plane;
                    for (size_t j = 0; j < plane; ++j) {
                        double dy = p.v[by + j], dx = p.v[bx + j];
                        double norm = std::sqrt(dy * dy + dx * dx);
                        if (norm > 0.0) {
                            p.g[by + j] += g * dy / norm;
                            p.g[bx + j] += g * dx / norm;
                        }
                    }
                }
        };
    return Tensor(n);
}

}  // namespace obsd::nn
