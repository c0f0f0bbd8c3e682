#include "latentdyn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace latentdyn {

namespace {

// Snap tolerance (in pixel units) for bilinear sampling. Coordinates within
// this distance of a lattice point collapse onto it, which keeps sampling at
// the native grid an exact identity even when x*(W-1) rounds away from an
// integer.
constexpr double kLatticeSnap = 1e-9;

long long idx4(int H, int W, int C, int b, int i, int j, int c) {
    return ((static_cast<long long>(b) * H + i) * W + j) * C + c;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw shape_error(msg);
}

} // namespace

long long shape_size(const std::vector<int>& shape) {
    if (shape.empty()) return 0;
    long long n = 1;
    for (int e : shape) {
        if (e <= 0) throw shape_error("tensor extent must be positive, got " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    if (shape_.size() > 4) throw shape_error("tensor rank exceeds 4: " + shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(shape_size(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (shape_.size() > 4) throw shape_error("tensor rank exceeds 4: " + shape_str(shape_));
    if (shape_size(shape_) != static_cast<long long>(values.size()))
        throw shape_error("value count " + std::to_string(values.size()) +
                          " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
}

double& Tensor::at(std::initializer_list<int> idx) {
    if (static_cast<int>(idx.size()) != rank())
        throw shape_error("index rank mismatch for shape " + shape_str(shape_));
    long long flat = 0;
    int axis = 0;
    for (int i : idx) {
        if (i < 0 || i >= shape_[static_cast<std::size_t>(axis)])
            throw shape_error("index out of range for shape " + shape_str(shape_));
        flat = flat * shape_[static_cast<std::size_t>(axis)] + i;
        ++axis;
    }
    return (*data_)[static_cast<std::size_t>(flat)];
}

double Tensor::at(std::initializer_list<int> idx) const {
    return const_cast<Tensor*>(this)->at(idx);
}

double Tensor::item() const {
    if (size() != 1) throw shape_error("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.node_ = -1;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

bool Tensor::all_finite() const {
    if (!data_) return true;
    for (double v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor domain_grid(int b, int h, int w) {
    Tensor g({b, h, w, 2});
    double* gd = g.data();
    const double sx = w > 1 ? 1.0 / (w - 1) : 0.0;
    const double sy = h > 1 ? 1.0 / (h - 1) : 0.0;
    for (int bb = 0; bb < b; ++bb)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double* p = gd + idx4(h, w, 2, bb, i, j, 0);
                p[0] = j * sx;
                p[1] = i * sy;
            }
    return g;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::attach(Tensor t, std::function<void(Tape&, const std::vector<double>&)> fn) {
    t.node_ = static_cast<int>(nodes_.size());
    Node n;
    n.backprop = std::move(fn);
    n.value_size = t.size();
    nodes_.push_back(std::move(n));
    return t;
}

Tensor Tape::watch(const Tensor& t) {
    if (t.empty()) throw shape_error("watch() on empty tensor");
    if (t.attached()) return t;
    return attach(t, nullptr);
}

std::vector<double>& Tape::grad_buf(int node, long long size) {
    Node& n = nodes_[static_cast<std::size_t>(node)];
    if (!n.has_grad) {
        n.grad.assign(static_cast<std::size_t>(size), 0.0);
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::add_to_grad(const Tensor& parent, const std::vector<double>& contribution) {
    if (!parent.attached()) return;
    std::vector<double>& g = grad_buf(parent.node_, parent.size());
    for (std::size_t i = 0; i < contribution.size(); ++i) g[i] += contribution[i];
}

void Tape::reset() {
    nodes_.clear();
    backward_done_ = false;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.attached()) throw shape_error("backward() on a detached loss");
    if (loss.size() != 1) throw shape_error("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (backward_done_) throw std::logic_error("backward() called twice without reset()");
    backward_done_ = true;

    grad_buf(loss.node_, 1)[0] += 1.0;
    for (int i = loss.node_; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.has_grad && n.backprop) n.backprop(*this, n.grad);
    }
}

const std::vector<double>* Tape::grad_if(const Tensor& t) const {
    if (!t.attached()) throw shape_error("gradient of a detached tensor");
    const Node& n = nodes_[static_cast<std::size_t>(t.node_)];
    return n.has_grad ? &n.grad : nullptr;
}

std::vector<double> Tape::grad_or_zeros(const Tensor& t) const {
    if (const std::vector<double>* g = grad_if(t)) return *g;
    return std::vector<double>(static_cast<std::size_t>(t.size()), 0.0);
}

// ---------------------------------------------------------------------------
// Elementwise / reductions
// ---------------------------------------------------------------------------

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    const long long n = a.size();
    for (long long i = 0; i < n; ++i) od[i] = ad[i] + bd[i];
    if (!a.attached() && !b.attached()) return out;
    return attach(std::move(out), [a, b](Tape& t, const std::vector<double>& g) {
        t.add_to_grad(a, g);
        t.add_to_grad(b, g);
    });
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    const long long n = a.size();
    for (long long i = 0; i < n; ++i) od[i] = ad[i] - bd[i];
    if (!a.attached() && !b.attached()) return out;
    return attach(std::move(out), [a, b](Tape& t, const std::vector<double>& g) {
        t.add_to_grad(a, g);
        if (b.attached()) {
            std::vector<double>& gb = t.grad_buf(b.node_, b.size());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    const long long n = a.size();
    for (long long i = 0; i < n; ++i) od[i] = ad[i] * bd[i];
    if (!a.attached() && !b.attached()) return out;
    return attach(std::move(out), [a, b](Tape& t, const std::vector<double>& g) {
        if (a.attached()) {
            std::vector<double>& ga = t.grad_buf(a.node_, a.size());
            const double* bp = b.data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bp[i];
        }
        if (b.attached()) {
            std::vector<double>& gb = t.grad_buf(b.node_, b.size());
            const double* ap = a.data();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ap[i];
        }
    });
}

Tensor Tape::scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    const double* ad = a.data();
    double* od = out.data();
    const long long n = a.size();
    for (long long i = 0; i < n; ++i) od[i] = ad[i] * s;
    if (!a.attached()) return out;
    return attach(std::move(out), [a, s](Tape& t, const std::vector<double>& g) {
        std::vector<double>& ga = t.grad_buf(a.node_, a.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
}

Tensor Tape::sum(const Tensor& a) {
    double acc = 0.0;
    const double* ad = a.data();
    const long long n = a.size();
    for (long long i = 0; i < n; ++i) acc += ad[i];
    Tensor out = Tensor::scalar(acc);
    if (!a.attached()) return out;
    return attach(std::move(out), [a](Tape& t, const std::vector<double>& g) {
        std::vector<double>& ga = t.grad_buf(a.node_, a.size());
        const double gv = g[0];
        for (double& v : ga) v += gv;
    });
}

Tensor Tape::sum_squares(const Tensor& a) {
    double acc = 0.0;
    const double* ad = a.data();
    const long long n = a.size();
    for (long long i = 0; i < n; ++i) acc += ad[i] * ad[i];
    Tensor out = Tensor::scalar(acc);
    if (!a.attached()) return out;
    return attach(std::move(out), [a](Tape& t, const std::vector<double>& g) {
        std::vector<double>& ga = t.grad_buf(a.node_, a.size());
        const double gv = 2.0 * g[0];
        const double* ap = a.data();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gv * ap[i];
    });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

Tensor Tape::conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    require(x.rank() == 4, "conv2d: input must be [B,H,W,C], got " + shape_str(x.shape()));
    require(kernel.rank() == 4, "conv2d: kernel must be [k,k,Cin,Cout], got " + shape_str(kernel.shape()));
    const int B = x.extent(0), H = x.extent(1), W = x.extent(2), Ci = x.extent(3);
    const int K = kernel.extent(0), Co = kernel.extent(3);
    require(kernel.extent(1) == K, "conv2d: kernel must be square");
    require(K % 2 == 1, "conv2d: kernel size must be odd");
    require(kernel.extent(2) == Ci, "conv2d: input has " + std::to_string(Ci) +
                                        " channels but kernel expects " + std::to_string(kernel.extent(2)));
    require(bias.rank() == 1 && bias.extent(0) == Co, "conv2d: bias must be [Cout]");

    const int R = K / 2;
    Tensor out({B, H, W, Co});
    const double* xd = x.data();
    const double* kd = kernel.data();
    const double* bd = bias.data();
    double* od = out.data();

#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2)
#endif
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                double* o = od + idx4(H, W, Co, b, i, j, 0);
                for (int c = 0; c < Co; ++c) o[c] = bd[c];
                for (int dy = 0; dy < K; ++dy) {
                    const int si = i + dy - R;
                    if (static_cast<unsigned>(si) >= static_cast<unsigned>(H)) continue;
                    for (int dx = 0; dx < K; ++dx) {
                        const int sj = j + dx - R;
                        if (static_cast<unsigned>(sj) >= static_cast<unsigned>(W)) continue;
                        const double* xrow = xd + idx4(H, W, Ci, b, si, sj, 0);
                        const double* kpos = kd + (static_cast<long long>(dy) * K + dx) * Ci * Co;
                        for (int ci = 0; ci < Ci; ++ci) {
                            const double a = xrow[ci];
                            const double* kk = kpos + static_cast<long long>(ci) * Co;
                            for (int c = 0; c < Co; ++c) o[c] += a * kk[c];
                        }
                    }
                }
            }
        }
    }

    if (!x.attached() && !kernel.attached() && !bias.attached()) return out;
    return attach(std::move(out), [x, kernel, bias, B, H, W, Ci, K, Co, R](Tape& t, const std::vector<double>& g) {
        const double* gd = g.data();
        const double* xd = x.data();
        const double* kd = kernel.data();

        if (bias.attached()) {
            std::vector<double>& gb = t.grad_buf(bias.node_, Co);
            for (long long p = 0; p < static_cast<long long>(B) * H * W; ++p) {
                const double* grow = gd + p * Co;
                for (int c = 0; c < Co; ++c) gb[c] += grow[c];
            }
        }

        if (kernel.attached()) {
            std::vector<double>& gk = t.grad_buf(kernel.node_, kernel.size());
            double* gkd = gk.data();
            // Each (dy,dx) slab of the kernel gradient is owned by exactly one
            // iteration, so this parallelizes without races and the inner
            // summation order stays fixed.
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int off = 0; off < K * K; ++off) {
                const int dy = off / K, dx = off % K;
                double* slab = gkd + static_cast<long long>(off) * Ci * Co;
                for (int b = 0; b < B; ++b) {
                    const int i0 = std::max(0, R - dy), i1 = std::min(H, H + R - dy);
                    const int j0 = std::max(0, R - dx), j1 = std::min(W, W + R - dx);
                    for (int i = i0; i < i1; ++i) {
                        const int si = i + dy - R;
                        for (int j = j0; j < j1; ++j) {
                            const int sj = j + dx - R;
                            const double* xrow = xd + idx4(H, W, Ci, b, si, sj, 0);
                            const double* grow = gd + idx4(H, W, Co, b, i, j, 0);
                            for (int ci = 0; ci < Ci; ++ci) {
                                const double a = xrow[ci];
                                double* kk = slab + static_cast<long long>(ci) * Co;
                                for (int c = 0; c < Co; ++c) kk[c] += a * grow[c];
                            }
                        }
                    }
                }
            }
        }

        if (x.attached()) {
            std::vector<double>& gx = t.grad_buf(x.node_, x.size());
            double* gxd = gx.data();
            // Gather form: each input cell sums its contributions, so rows can
            // be processed in parallel deterministically.
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2)
#endif
            for (int b = 0; b < B; ++b) {
                for (int si = 0; si < H; ++si) {
                    for (int sj = 0; sj < W; ++sj) {
                        double* gxrow = gxd + idx4(H, W, Ci, b, si, sj, 0);
                        for (int dy = 0; dy < K; ++dy) {
                            const int i = si - (dy - R);
                            if (static_cast<unsigned>(i) >= static_cast<unsigned>(H)) continue;
                            for (int dx = 0; dx < K; ++dx) {
                                const int j = sj - (dx - R);
                                if (static_cast<unsigned>(j) >= static_cast<unsigned>(W)) continue;
                                const double* grow = gd + idx4(H, W, Co, b, i, j, 0);
                                const double* kpos = kd + (static_cast<long long>(dy) * K + dx) * Ci * Co;
                                for (int ci = 0; ci < Ci; ++ci) {
                                    const double* kk = kpos + static_cast<long long>(ci) * Co;
                                    double acc = 0.0;
                                    for (int c = 0; c < Co; ++c) acc += kk[c] * grow[c];
                                    gxrow[ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Activations / pooling / resampling
// ---------------------------------------------------------------------------

Tensor Tape::leaky_relu(const Tensor& x, double slope) {
    require(slope >= 0.0 && slope < 1.0, "leaky_relu: slope must be in [0,1)");
    Tensor out(x.shape());
    const double* xd = x.data();
    double* od = out.data();
    const long long n = x.size();
    for (long long i = 0; i < n; ++i) od[i] = xd[i] >= 0.0 ? xd[i] : slope * xd[i];
    if (!x.attached()) return out;
    return attach(std::move(out), [x, slope](Tape& t, const std::vector<double>& g) {
        std::vector<double>& gx = t.grad_buf(x.node_, x.size());
        const double* xd = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xd[i] >= 0.0 ? g[i] : slope * g[i];
    });
}

Tensor Tape::max_pool2(const Tensor& x) {
    require(x.rank() == 4, "max_pool2: input must be [B,H,W,C]");
    const int B = x.extent(0), H = x.extent(1), W = x.extent(2), C = x.extent(3);
    require(H % 2 == 0 && W % 2 == 0, "max_pool2: spatial extents must be even, got " + shape_str(x.shape()));
    const int Ho = H / 2, Wo = W / 2;
    Tensor out({B, Ho, Wo, C});
    const double* xd = x.data();
    double* od = out.data();
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j)
                for (int c = 0; c < C; ++c) {
                    double best = xd[idx4(H, W, C, b, 2 * i, 2 * j, c)];
                    for (int d = 1; d < 4; ++d) {
                        const double v = xd[idx4(H, W, C, b, 2 * i + d / 2, 2 * j + d % 2, c)];
                        if (v > best) best = v;
                    }
                    od[idx4(Ho, Wo, C, b, i, j, c)] = best;
                }
    if (!x.attached()) return out;
    return attach(std::move(out), [x, B, H, W, C, Ho, Wo](Tape& t, const std::vector<double>& g) {
        std::vector<double>& gx = t.grad_buf(x.node_, x.size());
        const double* xd = x.data();
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j)
                    for (int c = 0; c < C; ++c) {
                        // First maximum in row-major window order wins ties.
                        long long arg = idx4(H, W, C, b, 2 * i, 2 * j, c);
                        double best = xd[arg];
                        for (int d = 1; d < 4; ++d) {
                            const long long k = idx4(H, W, C, b, 2 * i + d / 2, 2 * j + d % 2, c);
                            if (xd[k] > best) {
                                best = xd[k];
                                arg = k;
                            }
                        }
                        gx[static_cast<std::size_t>(arg)] += g[static_cast<std::size_t>(idx4(Ho, Wo, C, b, i, j, c))];
                    }
    });
}

namespace {

// Corner-aligned source position tables for one axis.
struct ResizeAxis {
    std::vector<int> i0;
    std::vector<double> frac;
};

ResizeAxis resize_axis(int in, int out) {
    ResizeAxis ax;
    ax.i0.resize(static_cast<std::size_t>(out));
    ax.frac.resize(static_cast<std::size_t>(out));
    const double s = (out > 1 && in > 1) ? static_cast<double>(in - 1) / (out - 1) : 0.0;
    for (int o = 0; o < out; ++o) {
        double p = o * s;
        int i0 = static_cast<int>(p);
        if (i0 > in - 2) i0 = in > 1 ? in - 2 : 0;
        double f = p - i0;
        if (f < kLatticeSnap) f = 0.0;
        if (f > 1.0 - kLatticeSnap) {
            i0 = std::min(i0 + 1, in - 1);
            f = 0.0;
        }
        ax.i0[static_cast<std::size_t>(o)] = i0;
        ax.frac[static_cast<std::size_t>(o)] = f;
    }
    return ax;
}

} // namespace

Tensor Tape::resize_bilinear(const Tensor& x, int out_h, int out_w) {
    require(x.rank() == 4, "resize_bilinear: input must be [B,H,W,C]");
    require(out_h >= 1 && out_w >= 1, "resize_bilinear: output extents must be positive");
    const int B = x.extent(0), H = x.extent(1), W = x.extent(2), C = x.extent(3);
    const ResizeAxis ay = resize_axis(H, out_h);
    const ResizeAxis axx = resize_axis(W, out_w);
    Tensor out({B, out_h, out_w, C});
    const double* xd = x.data();
    double* od = out.data();
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < out_h; ++i) {
            const int y0 = ay.i0[static_cast<std::size_t>(i)];
            const double fy = ay.frac[static_cast<std::size_t>(i)];
            const int y1 = fy > 0.0 ? y0 + 1 : y0;
            for (int j = 0; j < out_w; ++j) {
                const int x0 = axx.i0[static_cast<std::size_t>(j)];
                const double fx = axx.frac[static_cast<std::size_t>(j)];
                const int x1 = fx > 0.0 ? x0 + 1 : x0;
                const double* p00 = xd + idx4(H, W, C, b, y0, x0, 0);
                const double* p01 = xd + idx4(H, W, C, b, y0, x1, 0);
                const double* p10 = xd + idx4(H, W, C, b, y1, x0, 0);
                const double* p11 = xd + idx4(H, W, C, b, y1, x1, 0);
                double* o = od + idx4(out_h, out_w, C, b, i, j, 0);
                // Nested lerps: exact for constants and never outside the
                // corner range.
                for (int c = 0; c < C; ++c) {
                    const double top = p00[c] + fx * (p01[c] - p00[c]);
                    const double bot = p10[c] + fx * (p11[c] - p10[c]);
                    o[c] = top + fy * (bot - top);
                }
            }
        }
    if (!x.attached()) return out;
    return attach(std::move(out), [x, B, H, W, C, out_h, out_w, ay, axx](Tape& t, const std::vector<double>& g) {
        std::vector<double>& gx = t.grad_buf(x.node_, x.size());
        double* gxd = gx.data();
        const double* gd = g.data();
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < out_h; ++i) {
                const int y0 = ay.i0[static_cast<std::size_t>(i)];
                const double fy = ay.frac[static_cast<std::size_t>(i)];
                const int y1 = fy > 0.0 ? y0 + 1 : y0;
                for (int j = 0; j < out_w; ++j) {
                    const int x0 = axx.i0[static_cast<std::size_t>(j)];
                    const double fx = axx.frac[static_cast<std::size_t>(j)];
                    const int x1 = fx > 0.0 ? x0 + 1 : x0;
                    const double w00 = (1.0 - fy) * (1.0 - fx), w01 = (1.0 - fy) * fx;
                    const double w10 = fy * (1.0 - fx), w11 = fy * fx;
                    const double* grow = gd + idx4(out_h, out_w, C, b, i, j, 0);
                    for (int c = 0; c < C; ++c) {
                        const double gv = grow[c];
                        gxd[idx4(H, W, C, b, y0, x0, c)] += w00 * gv;
                        gxd[idx4(H, W, C, b, y0, x1, c)] += w01 * gv;
                        gxd[idx4(H, W, C, b, y1, x0, c)] += w10 * gv;
                        gxd[idx4(H, W, C, b, y1, x1, c)] += w11 * gv;
                    }
                }
            }
    });
}

Tensor Tape::grid_sample(const Tensor& x, const Tensor& coords) {
    require(x.rank() == 4, "grid_sample: input must be [B,H,W,C]");
    require(coords.rank() == 4 && coords.extent(3) == 2, "grid_sample: coords must be [B,H,W,2]");
    const int B = x.extent(0), H = x.extent(1), W = x.extent(2), C = x.extent(3);
    require(coords.extent(0) == B, "grid_sample: batch mismatch");
    const int Hc = coords.extent(1), Wc = coords.extent(2);

    Tensor out({B, Hc, Wc, C});
    const double* xd = x.data();
    const double* cd = coords.data();
    double* od = out.data();

    const double sx = W - 1, sy = H - 1;
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < Hc; ++i)
            for (int j = 0; j < Wc; ++j) {
                const double* cc = cd + idx4(Hc, Wc, 2, b, i, j, 0);
                double px = std::clamp(cc[0], 0.0, 1.0) * sx;
                double py = std::clamp(cc[1], 0.0, 1.0) * sy;
                int x0 = std::min(static_cast<int>(px), std::max(W - 2, 0));
                int y0 = std::min(static_cast<int>(py), std::max(H - 2, 0));
                double fx = px - x0, fy = py - y0;
                if (fx < kLatticeSnap) fx = 0.0;
                else if (fx > 1.0 - kLatticeSnap) { x0 = std::min(x0 + 1, W - 1); fx = 0.0; }
                if (fy < kLatticeSnap) fy = 0.0;
                else if (fy > 1.0 - kLatticeSnap) { y0 = std::min(y0 + 1, H - 1); fy = 0.0; }
                const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                const double* p00 = xd + idx4(H, W, C, b, y0, x0, 0);
                const double* p01 = xd + idx4(H, W, C, b, y0, x1, 0);
                const double* p10 = xd + idx4(H, W, C, b, y1, x0, 0);
                const double* p11 = xd + idx4(H, W, C, b, y1, x1, 0);
                double* o = od + idx4(Hc, Wc, C, b, i, j, 0);
                // Nested lerps keep constants exact and honor the maximum
                // principle down to the last bit.
                for (int c = 0; c < C; ++c) {
                    const double top = p00[c] + fx * (p01[c] - p00[c]);
                    const double bot = p10[c] + fx * (p11[c] - p10[c]);
                    o[c] = top + fy * (bot - top);
                }
            }

    if (!x.attached() && !coords.attached()) return out;
    return attach(std::move(out), [x, coords, B, H, W, C, Hc, Wc](Tape& t, const std::vector<double>& g) {
        const double* xd = x.data();
        const double* cd = coords.data();
        const double* gd = g.data();
        const double sx = W - 1, sy = H - 1;
        double* gxd = nullptr;
        double* gcd = nullptr;
        if (x.attached()) gxd = t.grad_buf(x.node_, x.size()).data();
        if (coords.attached()) gcd = t.grad_buf(coords.node_, coords.size()).data();
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < Hc; ++i)
                for (int j = 0; j < Wc; ++j) {
                    const double* cc = cd + idx4(Hc, Wc, 2, b, i, j, 0);
                    const bool clipped_x = cc[0] < 0.0 || cc[0] > 1.0;
                    const bool clipped_y = cc[1] < 0.0 || cc[1] > 1.0;
                    double px = std::clamp(cc[0], 0.0, 1.0) * sx;
                    double py = std::clamp(cc[1], 0.0, 1.0) * sy;
                    int x0 = std::min(static_cast<int>(px), std::max(W - 2, 0));
                    int y0 = std::min(static_cast<int>(py), std::max(H - 2, 0));
                    double fx = px - x0, fy = py - y0;
                    if (fx < kLatticeSnap) fx = 0.0;
                    else if (fx > 1.0 - kLatticeSnap) { x0 = std::min(x0 + 1, W - 1); fx = 0.0; }
                    if (fy < kLatticeSnap) fy = 0.0;
                    else if (fy > 1.0 - kLatticeSnap) { y0 = std::min(y0 + 1, H - 1); fy = 0.0; }
                    const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                    const double w00 = (1.0 - fy) * (1.0 - fx), w01 = (1.0 - fy) * fx;
                    const double w10 = fy * (1.0 - fx), w11 = fy * fx;
                    const double* grow = gd + idx4(Hc, Wc, C, b, i, j, 0);
                    const long long i00 = idx4(H, W, C, b, y0, x0, 0), i01 = idx4(H, W, C, b, y0, x1, 0);
                    const long long i10 = idx4(H, W, C, b, y1, x0, 0), i11 = idx4(H, W, C, b, y1, x1, 0);
                    double dfx = 0.0, dfy = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const double gv = grow[c];
                        if (gxd) {
                            gxd[i00 + c] += w00 * gv;
                            gxd[i01 + c] += w01 * gv;
                            gxd[i10 + c] += w10 * gv;
                            gxd[i11 + c] += w11 * gv;
                        }
                        if (gcd) {
                            const double v00 = xd[i00 + c], v01 = xd[i01 + c];
                            const double v10 = xd[i10 + c], v11 = xd[i11 + c];
                            dfx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                            dfy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                    }
                    if (gcd) {
                        double* gc = gcd + idx4(Hc, Wc, 2, b, i, j, 0);
                        if (!clipped_x) gc[0] += dfx * sx;
                        if (!clipped_y) gc[1] += dfy * sy;
                    }
                }
    });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

Tensor Tape::concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 4 && b.rank() == 4, "concat_channels: inputs must be [B,H,W,C]");
    require(a.extent(0) == b.extent(0) && a.extent(1) == b.extent(1) && a.extent(2) == b.extent(2),
            "concat_channels: spatial/batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int B = a.extent(0), H = a.extent(1), W = a.extent(2);
    const int Ca = a.extent(3), Cb = b.extent(3), C = Ca + Cb;
    Tensor out({B, H, W, C});
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out.data();
    const long long pixels = static_cast<long long>(B) * H * W;
    for (long long p = 0; p < pixels; ++p) {
        double* o = od + p * C;
        const double* ap = ad + p * Ca;
        const double* bp = bd + p * Cb;
        for (int c = 0; c < Ca; ++c) o[c] = ap[c];
        for (int c = 0; c < Cb; ++c) o[Ca + c] = bp[c];
    }
    if (!a.attached() && !b.attached()) return out;
    return attach(std::move(out), [a, b, Ca, Cb, C, pixels](Tape& t, const std::vector<double>& g) {
        if (a.attached()) {
            std::vector<double>& ga = t.grad_buf(a.node_, a.size());
            for (long long p = 0; p < pixels; ++p)
                for (int c = 0; c < Ca; ++c) ga[static_cast<std::size_t>(p * Ca + c)] += g[static_cast<std::size_t>(p * C + c)];
        }
        if (b.attached()) {
            std::vector<double>& gb = t.grad_buf(b.node_, b.size());
            for (long long p = 0; p < pixels; ++p)
                for (int c = 0; c < Cb; ++c) gb[static_cast<std::size_t>(p * Cb + c)] += g[static_cast<std::size_t>(p * C + Ca + c)];
        }
    });
}

Tensor Tape::slice_channels(const Tensor& x, int c0, int c1) {
    require(x.rank() == 4, "slice_channels: input must be [B,H,W,C]");
    const int C = x.extent(3);
    require(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels: bad range [" + std::to_string(c0) + "," +
                                               std::to_string(c1) + ") for C=" + std::to_string(C));
    const int B = x.extent(0), H = x.extent(1), W = x.extent(2), Cs = c1 - c0;
    Tensor out({B, H, W, Cs});
    const double* xd = x.data();
    double* od = out.data();
    const long long pixels = static_cast<long long>(B) * H * W;
    for (long long p = 0; p < pixels; ++p) {
        const double* xp = xd + p * C + c0;
        double* o = od + p * Cs;
        for (int c = 0; c < Cs; ++c) o[c] = xp[c];
    }
    if (!x.attached()) return out;
    return attach(std::move(out), [x, c0, C, Cs, pixels](Tape& t, const std::vector<double>& g) {
        std::vector<double>& gx = t.grad_buf(x.node_, x.size());
        for (long long p = 0; p < pixels; ++p)
            for (int c = 0; c < Cs; ++c)
                gx[static_cast<std::size_t>(p * C + c0 + c)] += g[static_cast<std::size_t>(p * Cs + c)];
    });
}

} // namespace latentdyn
