#pragma once

#include "fitcls/rng.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fitcls::ag {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Reference-counted handle to a dense row-major float64 array.
///
/// Copies share storage: two handles to the same parameter see each other's
/// writes, which is how tied weights are expressed. Every op treats a tensor
/// as a matrix of rows() x cols(), where cols() is the last dimension.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool value);

    bool has_grad() const;
    std::span<double> grad();
    std::span<const double> grad() const;
    /// Allocates (if needed) and zero-fills the gradient buffer.
    void zero_grad();
    void clear_grad();

    /// Copy of the values with no gradient history.
    Tensor detach() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const void* key() const { return impl_.get(); }

private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Records primitive ops as they execute and replays them in reverse.
///
/// An op is recorded only when one of its inputs requires a gradient and the
/// tape is recording; otherwise it just computes the value. A tape belongs to
/// one thread. backward() clears the record.
class Tape {
public:
    Tape();
    explicit Tape(bool recording);
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }
    std::size_t size() const { return nodes_.size(); }
    void clear();

    /// (m,k) x (k,n), or (m,k) x (n,k)^T when transpose_b. Leading dims of `a` are kept.
    Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
    /// Same shapes, or `b` a vector matching a.cols() broadcast over rows.
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double factor);
    Tensor sum(const Tensor& a);
    /// axis 0 stacks rows (equal cols); axis 1 joins columns (equal rows).
    Tensor concat(std::span<const Tensor> parts, int axis);
    /// Columns [begin, end) of every row.
    Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);
    Tensor sigmoid(const Tensor& a);
    Tensor tanh(const Tensor& a);
    Tensor relu(const Tensor& a);
    /// Rows of `table` (V x e) picked by indices -> (n, e).
    Tensor embedding_lookup(const Tensor& table, std::span<const int> indices);
    /// Mean of -log softmax(logits row)[target] over rows whose target != ignore_index.
    Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index = -1);
    /// T tensors of (B, h) -> (B, T, h) in batch-major row order.
    Tensor stack_time(std::span<const Tensor> steps);
    /// Pool (B, h) steps over the first lengths[b] steps of each row.
    Tensor mean_over_time(std::span<const Tensor> steps, std::span<const std::size_t> lengths);
    Tensor max_over_time(std::span<const Tensor> steps, std::span<const std::size_t> lengths);
    Tensor last_over_time(std::span<const Tensor> steps, std::span<const std::size_t> lengths);
    /// Inverted dropout: kept values scaled by 1/(1-p). Identity when !training or p == 0.
    Tensor dropout(const Tensor& a, double p, Pcg32& rng, bool training);
    /// One LSTM step. Gate pre-activations are x_proj + h_proj + bias with
    /// column blocks input, forget, cell, output; returns (B, 2h) = [h | c].
    Tensor lstm_cell(const Tensor& x_proj, const Tensor& h_proj, const Tensor& bias, const Tensor& c_prev);
    /// Per-column standardization. Training uses batch statistics and folds
    /// them into the running buffers (unbiased variance); eval uses the buffers.
    Tensor batch_norm(const Tensor& a, Tensor running_mean, Tensor running_var, bool training,
                      double momentum = 0.1, double eps = 1e-5);

    /// Seeds d(loss)/d(loss) = 1 and runs recorded ops in reverse. Leaf
    /// gradients accumulate; the tape is cleared afterwards.
    void backward(const Tensor& loss);

private:
    struct Node {
        const char* op;
        Tensor output;
        std::function<void(const Tensor& out)> backward;
    };

    bool needs_grad(std::initializer_list<const Tensor*> inputs) const;
    Tensor make_output(Shape shape, bool requires_grad, const char* op);
    void record(const char* op, Tensor out, std::function<void(const Tensor&)> fn);
    void check_finite(const Tensor& t, const char* op) const;

    std::vector<Node> nodes_;
    bool recording_ = true;
    std::uint64_t id_;
};

/// Accumulates `values` into t's gradient buffer, allocating it if needed.
void accumulate_grad(Tensor t, std::span<const double> values);

}  // namespace fitcls::ag
