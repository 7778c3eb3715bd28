#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace svit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
};

/// Shared handle to a dense double tensor. Values are row-major; gradients
/// live on the node and are filled in by Tape::backward.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->value.size(); }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t rows() const;  // 2-D only
    std::size_t cols() const;  // 2-D only

    double& at(std::size_t i) { return n_->value[i]; }
    double at(std::size_t i) const { return n_->value[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    std::vector<double>& data() { return n_->value; }
    const std::vector<double>& data() const { return n_->value; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    /// Gradient buffer; allocated zero-filled on first access.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool has_grad() const { return !n_->grad.empty(); }
    double scalar_value() const;

    TensorNode* node() const { return n_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return n_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}
    std::shared_ptr<TensorNode> n_;
    friend class Tape;
};

/// Value-only transpose of a 2-D tensor, off-tape.
Tensor transpose_values(const Tensor& a);

/// Reverse-mode tape. Ops are recorded in execution order (topological by
/// construction); backward() replays them once in reverse. Gradients
/// accumulate (+=), and every touched node is zeroed before a replay so that
/// running backward twice is bit-identical.
class Tape {
public:
    // -- elementwise / shape ops ------------------------------------------
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double c);
    Tensor add_rowvec(const Tensor& x, const Tensor& b);   // [r x c] + [c]
    Tensor scale_rows(const Tensor& x, const Tensor& v);   // row i scaled by v[i]
    Tensor reshape(const Tensor& x, Shape shape);
    Tensor transpose(const Tensor& a);
    Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx);
    Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
    Tensor concat_cols(const std::vector<Tensor>& parts);
    Tensor concat_rows(const Tensor& a, const Tensor& b);
    Tensor detach(const Tensor& x);

    // -- dense algebra ------------------------------------------------------
    Tensor matmul(const Tensor& a, const Tensor& b);
    /// matmul whose backward routes the gradient of `a` through `b_read`
    /// instead of `b`. Used by structured scoring passes, where the read path
    /// must see the unmasked weights while the weight gradient still lands on
    /// the masked (effective) tensor.
    Tensor matmul_read(const Tensor& a, const Tensor& b, const Tensor& b_read);

    // -- nonlinearities -----------------------------------------------------
    Tensor softmax(const Tensor& x, std::size_t axis);
    Tensor gelu(const Tensor& x);
    Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);

    /// w ⊙ m with m restricted to {0,1}. The weight gradient is masked; the
    /// output node's gradient is the dense gradient of the effective weight
    /// (the grow signal), so callers keep the returned handle.
    Tensor masked_weight(const Tensor& w, const Tensor& m);

    /// Mean label-smoothed cross entropy of one row of logits.
    Tensor cross_entropy_label_smoothed(const Tensor& logits, std::size_t target,
                                        double eps = 0.1);

    void backward(const Tensor& root);
    void clear();
    std::size_t op_count() const { return ops_.size(); }

    // matmul instrumentation: multiply-accumulate count of all matmuls
    // executed on this tape since the last reset.
    std::uint64_t mac_count() const { return macs_; }
    void reset_mac_count() { macs_ = 0; }

private:
    struct Op {
        std::function<void()> backward;
        std::vector<std::shared_ptr<TensorNode>> touched;
    };
    std::vector<Op> ops_;
    std::uint64_t macs_ = 0;

    Tensor make(Shape shape, bool requires_grad);
    void record(std::vector<std::shared_ptr<TensorNode>> touched,
                std::function<void()> backward);
    static void check_finite(const Tensor& t, const char* op);
};

}  // namespace svit
