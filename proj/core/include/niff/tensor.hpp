#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "niff/errors.hpp"

namespace niff {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized like data iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Pulls this node's grad into the parents' grads (+=, never overwrite).
    std::function<void(Node&)> backward_fn;
};

}  // namespace detail

/// Dense row-major f64 tensor with reverse-mode autodiff. Cheap to copy:
/// copies share the underlying node. Data is treated as immutable once a
/// tensor participates in a graph; only grad buffers and optimizer updates
/// mutate in place.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int ndim() const;
    int dim(int axis) const;
    std::int64_t size() const;
    bool requires_grad() const;

    std::span<const double> data() const;
    /// In-place mutation hook for initialization and optimizer steps only.
    std::span<double> data_mut();
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    bool has_grad() const;

    double value() const;  // scalar tensors
    double at(std::initializer_list<int> idx) const;

    void zero_grad();
    /// Deep copy of the data with no graph attachment and no grad tracking.
    Tensor detached() const;

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

// ---- differentiable operations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// x:[N,d], w:[M,d], b:[M] -> x w^T + b : [N,M]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Cross-correlation (no kernel flip). x:[N,Cin,H,W], w:[Cout,Cin,k,k], bias:[Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding);
/// Per-channel y = gain[c] * x + offset[c] over [N,C,H,W]; gain/offset are
/// constants (frozen-normalization realization), so no gradient flows to them.
Tensor channel_affine(const Tensor& x, std::span<const double> gain, std::span<const double> offset);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x);      // over last axis
Tensor log_softmax(const Tensor& x);  // over last axis
/// [N,C,H,W] -> [N,C], full spatial mean.
Tensor avg_pool2d(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// [N, ...] -> [N, prod(rest)]
Tensor flatten(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
Tensor log(const Tensor& x);

Tensor sum(const Tensor& x);   // all elements -> scalar
Tensor mean(const Tensor& x);  // all elements -> scalar
/// Column sums: [N,d] -> [d]
Tensor sum_rows(const Tensor& x);
/// [d] -> [n,d], each row a copy.
Tensor broadcast_row(const Tensor& v, int n);
/// Concatenate along the leading axis; 1-D or 2-D operands with equal trailing dims.
Tensor concat_rows(const Tensor& a, const Tensor& b);
/// x:[N, groups*block]; row i yields columns [labels[i]*block, ...+block) -> [N,block]
Tensor select_class_block(const Tensor& x, std::span<const int> labels, int block);

/// Mean negative log-likelihood of `labels` under softmax(logits); logits:[N,C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// (1/N) sum_i sum_j huber(pred_ij - target_ij) over [N,B]; huber kink at |1|.
Tensor smooth_l1(const Tensor& pred, const Tensor& target);
/// (1/N) sum_i sum_j |pred_ij - target_ij| over [N,B].
Tensor l1(const Tensor& pred, const Tensor& target);

/// Reverse-mode sweep from a scalar loss. Gradients are ACCUMULATED into every
/// reachable requires_grad tensor; callers zero grads explicitly between steps.
void backward(const Tensor& loss);

}  // namespace niff
