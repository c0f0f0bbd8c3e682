#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "latentdyn/errors.hpp"

namespace latentdyn {

long long shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

/// Dense row-major array of doubles, rank <= 4. Image-like tensors use the
/// [batch, height, width, channels] layout; kernels use [kh, kw, cin, cout];
/// scalars use shape {1}. Storage is shared between copies, so a Tensor is a
/// cheap handle. `node()` is the optional tape handle: -1 means detached, and
/// a detached tensor never accumulates gradient.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor full(std::vector<int> shape, double v);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    long long size() const { return data_ ? static_cast<long long>(data_->size()) : 0; }
    bool empty() const { return !data_; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }

    double& operator[](long long i) { return (*data_)[static_cast<std::size_t>(i)]; }
    double operator[](long long i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    /// Row-major multi-index access; index count must equal rank().
    double& at(std::initializer_list<int> idx);
    double at(std::initializer_list<int> idx) const;

    /// Value of a single-element tensor.
    double item() const;

    int node() const { return node_; }
    bool attached() const { return node_ >= 0; }
    /// Same storage, no tape handle.
    Tensor detached() const;
    /// Deep copy, detached.
    Tensor clone() const;

    bool all_finite() const;

private:
    friend class Tape;
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
    int node_ = -1;
};

/// Recorded computation for reverse-mode differentiation. Append order is
/// topological order. A Tape owns per-node gradient buffers; ops return
/// tensors attached to the tape whenever at least one input is attached, so
/// purely-constant subexpressions cost no graph nodes.
///
/// Single-threaded per tape: one forward/backward at a time. Distinct tapes
/// over disjoint data may run concurrently.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a leaf whose gradient should be tracked. Shares storage with
    /// the input. Watching an already-attached tensor returns it unchanged.
    Tensor watch(const Tensor& t);

    // Elementwise and reduction primitives.
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double s);
    Tensor sum(const Tensor& a);         // -> shape {1}
    Tensor sum_squares(const Tensor& a); // -> shape {1}

    /// Same-padded cross-correlation. x [B,H,W,Ci], kernel [k,k,Ci,Co] with k
    /// odd, bias [Co]; output [B,H,W,Co] keeps the spatial extents.
    Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias);

    /// x if x >= 0 else slope * x, slope in [0, 1).
    Tensor leaky_relu(const Tensor& x, double slope);

    /// Non-overlapping 2x2 max. Backward routes to the first maximum in
    /// row-major window order, so ties break deterministically.
    Tensor max_pool2(const Tensor& x);

    /// Corner-aligned separable bilinear resize to (out_h, out_w). Exact on
    /// per-axis linear ramps; identity when extents are unchanged.
    Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

    /// Bilinear sample of x at coords[..., {x,y}] given in domain units of
    /// [0,1]^2 (corner-aligned: domain x maps to pixel column x*(W-1)).
    /// Out-of-range coordinates clamp to the boundary, i.e. constant
    /// extrapolation. Differentiable in both x and coords.
    Tensor grid_sample(const Tensor& x, const Tensor& coords);

    /// Concatenate along the channel axis; all other extents must agree.
    Tensor concat_channels(const Tensor& a, const Tensor& b);

    /// Channels [c0, c1) of x as a new tensor.
    Tensor slice_channels(const Tensor& x, int c0, int c1);

    /// Reverse accumulation from a scalar, tape-attached loss. Fills
    /// gradients for every node reachable from it. Calling twice without
    /// reset() is an error.
    void backward(const Tensor& loss);

    /// Gradient buffer of an attached tensor, or nullptr if backward never
    /// reached it.
    const std::vector<double>* grad_if(const Tensor& t) const;
    /// Gradient buffer, zeros when unreached. Throws on detached tensors.
    std::vector<double> grad_or_zeros(const Tensor& t) const;

    /// Drop all nodes and gradients; previously returned tensors keep their
    /// values but their tape handles become stale.
    void reset();

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        // Pulls this node's gradient and pushes it to the parents; null for
        // leaves.
        std::function<void(Tape&, const std::vector<double>&)> backprop;
        std::vector<double> grad;
        long long value_size = 0;
        bool has_grad = false;
    };

    Tensor attach(Tensor t, std::function<void(Tape&, const std::vector<double>&)> fn);
    std::vector<double>& grad_buf(int node, long long size);
    void add_to_grad(const Tensor& parent, const std::vector<double>& contribution);

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

/// Corner-aligned coordinates of the uniform H x W grid on [0,1]^2, shape
/// [B,H,W,2] with channel 0 = x (width axis) and channel 1 = y (height axis).
Tensor domain_grid(int b, int h, int w);

} // namespace latentdyn
