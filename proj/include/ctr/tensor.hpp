#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctr/errors.hpp"

namespace ctr {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Autograd bookkeeping shared by all copies of a tensor. The grad buffer is
// written only during Tape::backward; node ids are valid only for the tape
// they were issued by.
struct GradMeta {
    bool requires_grad = false;
    std::shared_ptr<std::vector<double>> grad;
    Tape* tape = nullptr;
    int node_id = -1;
};

/// Dense row-major tensor of 64-bit floats. Copies share storage; tensors
/// that participate in a tape are never mutated in place.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const;
    std::size_t dim(std::size_t axis) const;

    double* data();
    const double* data() const;
    const std::vector<double>& values() const { return *data_; }
    double item() const;

    bool defined() const { return data_ != nullptr; }
    bool requires_grad() const;
    void set_requires_grad(bool on);
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    std::shared_ptr<GradMeta> meta_;
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
};

/// Append-only record of one forward pass; replays it in reverse to
/// accumulate gradients on every requires_grad leaf. Constructing a Tape
/// makes it the active tape for the current thread (nesting allowed).
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    /// loss must be a scalar recorded on this tape. Consumes the tape;
    /// a second call is a contract_error.
    void backward(const Tensor& loss);

    // -- recording interface, used by the op implementations --
    bool tracks(const Tensor& t) const;
    int track(const Tensor& t);
    void record(Tensor& out, std::vector<int> inputs,
                std::function<void(Tape&, const std::vector<double>&)> backprop);
    std::vector<double>& adj(int node_id);
    std::size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<int> inputs;
        std::function<void(Tape&, const std::vector<double>&)> backprop;
        std::size_t out_size = 0;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> adj_;
    std::vector<std::shared_ptr<GradMeta>> leaves_;
    bool consumed_ = false;
    Tape* prev_ = nullptr;
};

// ---- operations ----

enum class EwiseOp { add, sub, mul, div };
enum class Activation { tanh, sigmoid, relu, softmax_lastdim };
enum class Reduce { mean, max, sum };

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor ewise(EwiseOp op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor batch_matmul(const Tensor& a, const Tensor& b);
/// Contracts the last axis of x with W[C,C']; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

Tensor activation(Activation kind, const Tensor& x);
Tensor reduce(Reduce kind, const Tensor& x, std::size_t axis);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
Tensor sqrt_elem(const Tensor& x);

/// z[...,i,c] = sum_j topo[i,j] * x[...,j,c] with x of shape [B,T,N,C] and
/// topo of rank 2 [N,N] (shared), rank 3 [B,N,N] (per sample) or rank 4
/// [B,N,N,C] (per sample and channel).
Tensor topo_aggregate(const Tensor& x, const Tensor& topo);

/// 1-D convolution along the frame axis of x[B,T,N,Cin] with kernel
/// w[Cout,Cin,K], symmetric zero padding dilation*(K-1)/2.
Tensor temporal_conv(const Tensor& x, const Tensor& w, const Tensor& bias,
                     std::size_t stride, std::size_t dilation);
/// Max over valid frames of a window of `kernel` frames, padding (kernel-1)/2.
Tensor temporal_maxpool(const Tensor& x, std::size_t kernel, std::size_t stride);

/// Mean over the batch of -log softmax(logits)[label], max-stabilized.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Runs reverse mode over the tape the loss was recorded on.
void backward(const Tensor& loss);

} // namespace ctr
