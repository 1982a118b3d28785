// Dense float32 tensors with a replayable reverse-mode tape.
//
// Storage is always float32 row-major; reductions (inner products, pooling,
// losses) accumulate in float64 so finite-difference checks stay tight.
// The tape records one node per differentiable op and is replayed once, in
// reverse, by Tape::backward. It is meant to be cleared (destroyed) per step.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "matssl/common.hpp"

namespace matssl {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

constexpr float kNormEps = 1e-8f;  // norm guard for cosine similarity

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    int tape_id = -1;
    // Reductions keep their float64 result alongside the float32 storage so
    // finite-difference checks difference full-precision values.
    double scalar_f64 = 0.0;
    bool has_scalar_f64 = false;
};

// Cheap value handle over shared storage. Values are treated as immutable once
// an op has produced them; only leaf parameters are mutated (by optimizers,
// between tape lifetimes) and by tests.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor scalar64(double value);  // float32 storage + float64 side value

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::span<float> data() { return impl_->data; }
    std::span<const float> data() const { return impl_->data; }
    float value() const;   // scalar tensors only
    double value_f64() const;  // the float64 side value when present, else value()

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) const { impl_->requires_grad = v; }

    // Tensor is a shared handle, so gradient access is shallow-const: backward
    // closures accumulate through by-value (const) captures.
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<float> grad() const;  // allocates zeros on first touch
    void zero_grad() const;

    void check_finite(const char* what) const;

    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend class Tape;
};

// Reverse-mode tape. Ops append nodes in execution order, so inputs of every
// node were produced earlier or are leaves; backward walks the list once in
// reverse. A tape constructed with grad_enabled=false records nothing and the
// same op code paths become plain forward evaluation.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }
    void clear();

    // Seeds d(loss)/d(loss)=1 and replays every node once in reverse order.
    void backward(const Tensor& loss);

    // Op plumbing: registers output (and any unseen inputs) and stores the
    // backward closure. No-op when grads are off or no input requires grad.
    void record(const char* op, std::span<const Tensor> inputs, Tensor& output,
                std::function<void()> backward);

private:
    struct Node {
        const char* op;
        std::vector<int> input_ids;
        int output_id;
        std::function<void()> backward;
    };
    int assign_id(const Tensor& t);
    std::vector<Node> nodes_;
    int next_id_ = 0;
    bool grad_enabled_;
};

enum class Activation { kRelu, kSigmoid };

// --- operation set -----------------------------------------------------------

// Cross-correlation. input [N,C,H,W], kernel [K,C,kh,kw], bias [K].
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding);

// [N,C,H,W] -> [N,C], spatial mean per channel.
Tensor global_average_pool(Tape& tape, const Tensor& input);

Tensor activation(Tape& tape, const Tensor& x, Activation kind);
Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);

// dot(a,b) / (max(|a|,eps) * max(|b|,eps)) for 1-D a,b. Returns a scalar tensor.
Tensor cosine_similarity(Tape& tape, const Tensor& a, const Tensor& b, float eps = kNormEps);

// input [N,D] x weight [D,E] + bias [E] -> [N,E].
Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias);

// Concatenation along axis 1 of [N,D_i] or [N,C_i,H,W] parts.
Tensor concat(Tape& tape, std::span<const Tensor> parts);

// Column slice [c0,c1) of a [N,D] tensor (inverse of concat on 2-D parts).
Tensor slice_cols(Tape& tape, const Tensor& x, std::int64_t c0, std::int64_t c1);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);

// [N,C,H,W] -> [N,C,2H,2W].
Tensor upsample_nearest2x(Tape& tape, const Tensor& x);

// Numerically stable softmax over the class axis of [N,C] or [N,C,H,W].
Tensor softmax_channels(Tape& tape, const Tensor& logits);

Tensor reduce_sum(Tape& tape, const Tensor& x);
Tensor reduce_mean(Tape& tape, const Tensor& x);

// Mean over rows of lse(logits_n) - logits_n[label_n]; logits [N,C].
Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<std::int32_t>& labels);

// Central-difference check of the tape gradient for every entry of every
// parameter. make_loss must rebuild the graph from the parameters' current
// values and return a scalar. Returns max over entries of
// |analytic - numeric| / max(1, |numeric|).
double gradient_check(const std::function<Tensor(Tape&)>& make_loss, std::span<Tensor> params,
                      double h);

}  // namespace matssl
