#include "fitcls/autograd.hpp"

#include "fitcls/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fitcls::ag {

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // tape that produced this tensor, 0 for leaves
};

}  // namespace detail

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::atomic<std::uint64_t> g_next_tape_id{1};

#if defined(__GLIBC__)
// Step buffers are freed and reallocated constantly; keep big ones off mmap.
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();
#endif

std::size_t product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
    }
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
    throw ShapeError(std::string(op) + ": " + detail);
}

std::span<double> grad_buffer(Tensor t) {
    if (!t.has_grad()) t.zero_grad();
    return t.grad();
}

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

void check_steps(const char* op, std::span<const Tensor> steps, std::span<const std::size_t> lengths) {
    if (steps.empty()) shape_fail(op, "no time steps");
    const auto b = steps[0].rows();
    const auto h = steps[0].cols();
    for (const auto& s : steps) {
        if (s.rows() != b || s.cols() != h) {
            shape_fail(op, "time steps disagree: " + shape_string(steps[0].shape()) + " vs " +
                               shape_string(s.shape()));
        }
    }
    if (!lengths.empty()) {
        if (lengths.size() != b) {
            shape_fail(op, "lengths has " + std::to_string(lengths.size()) + " entries for batch " +
                               std::to_string(b));
        }
        for (auto len : lengths) {
            if (len == 0 || len > steps.size()) {
                shape_fail(op, "sequence length " + std::to_string(len) + " outside [1, " +
                                   std::to_string(steps.size()) + "]");
            }
        }
    }
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    validate_shape(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(product(shape), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    validate_shape(shape);
    if (values.size() != product(shape)) {
        throw ShapeError("tensor of shape " + shape_string(shape) + " given " + std::to_string(values.size()) +
                         " values");
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
std::size_t Tensor::cols() const { return impl_->shape.back(); }
std::size_t Tensor::rows() const { return size() / cols(); }
std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<double> Tensor::grad() { return impl_->grad; }
std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
    impl_->grad.assign(impl_->data.size(), 0.0);
}

void Tensor::clear_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const {
    return from(shape(), impl_->data, false);
}

void accumulate_grad(Tensor t, std::span<const double> values) {
    auto g = grad_buffer(t);
    if (g.size() != values.size()) throw ShapeError("gradient accumulation size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

// ---------------------------------------------------------------------------
// Tape bookkeeping

Tape::Tape() : Tape(true) {}

Tape::Tape(bool recording) : recording_(recording), id_(g_next_tape_id.fetch_add(1)) {}

void Tape::clear() {
    nodes_.clear();
    id_ = g_next_tape_id.fetch_add(1);
}

bool Tape::needs_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Tape::make_output(Shape shape, bool requires_grad, const char*) {
    return Tensor::zeros(std::move(shape), requires_grad);
}

void Tape::record(const char* op, Tensor out, std::function<void(const Tensor&)> fn) {
    out.impl_->tape_id = id_;
    nodes_.push_back(Node{op, std::move(out), std::move(fn)});
}

void Tape::check_finite(const Tensor& t, const char* op) const {
    for (double v : t.data()) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
    }
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ShapeError("backward: loss must be a scalar tensor");
    }
    if (loss.impl_->tape_id != id_ || nodes_.empty()) {
        throw Error("backward: loss was not produced on this tape (nothing recorded)");
    }
    Tensor seed = loss;
    seed.zero_grad();
    seed.grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) continue;
        it->backward(it->output);
    }
    clear();
}

// ---------------------------------------------------------------------------
// Primitives

Tensor Tape::matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (b.shape().size() != 2) shape_fail("matmul", "right operand must be 2-D, got " + shape_string(b.shape()));
    const std::size_t m = a.rows(), k = a.cols();
    const std::size_t bk = transpose_b ? b.cols() : b.rows();
    const std::size_t n = transpose_b ? b.rows() : b.cols();
    if (bk != k) {
        shape_fail("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()) +
                                 (transpose_b ? "^T" : "") + " inner dims differ");
    }
    Shape shape = a.shape();
    shape.back() = n;
    bool grad = needs_grad({&a, &b});
    Tensor out = make_output(shape, grad, "matmul");

    ConstMatMap A(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    ConstMatMap B(b.data().data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    MatMap O(out.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (transpose_b) {
        O.noalias() = A * B.transpose();
    } else {
        O.noalias() = A * B;
    }
    check_finite(out, "matmul");
    if (grad) {
        record("matmul", out, [a, b, m, k, n, transpose_b](const Tensor& o) mutable {
            ConstMatMap dO(o.grad().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
            ConstMatMap Bv(b.data().data(), static_cast<Eigen::Index>(b.rows()),
                           static_cast<Eigen::Index>(b.cols()));
            if (a.requires_grad()) {
                MatMap dA(grad_buffer(a).data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
                if (transpose_b) {
                    dA.noalias() += dO * Bv;
                } else {
                    dA.noalias() += dO * Bv.transpose();
                }
            }
            if (b.requires_grad()) {
                ConstMatMap Av(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
                MatMap dB(grad_buffer(b).data(), static_cast<Eigen::Index>(b.rows()),
                          static_cast<Eigen::Index>(b.cols()));
                if (transpose_b) {
                    dB.noalias() += dO.transpose() * Av;
                } else {
                    dB.noalias() += Av.transpose() * dO;
                }
            }
        });
    }
    return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool broadcast = !same && b.size() == a.cols() && b.rows() == 1;
    if (!same && !broadcast) {
        shape_fail("add", shape_string(a.shape()) + " + " + shape_string(b.shape()));
    }
    bool grad = needs_grad({&a, &b});
    Tensor out = make_output(a.shape(), grad, "add");
    auto o = out.data();
    auto av = a.data();
    auto bv = b.data();
    const std::size_t cols = a.cols();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[same ? i : i % cols];
    check_finite(out, "add");
    if (grad) {
        record("add", out, [a, b, same, cols](const Tensor& o) mutable {
            auto g = o.grad();
            if (a.requires_grad()) accumulate_grad(a, g);
            if (b.requires_grad()) {
                auto db = grad_buffer(b);
                if (same) {
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) db[i % cols] += g[i];
                }
            }
        });
    }
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("mul", shape_string(a.shape()) + " * " + shape_string(b.shape()));
    bool grad = needs_grad({&a, &b});
    Tensor out = make_output(a.shape(), grad, "mul");
    auto o = out.data();
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
    check_finite(out, "mul");
    if (grad) {
        record("mul", out, [a, b](const Tensor& o) mutable {
            auto g = o.grad();
            if (a.requires_grad()) {
                auto da = grad_buffer(a);
                auto bv = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
            }
            if (b.requires_grad()) {
                auto db = grad_buffer(b);
                auto av = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
            }
        });
    }
    return out;
}

Tensor Tape::scale(const Tensor& a, double factor) {
    bool grad = needs_grad({&a});
    Tensor out = make_output(a.shape(), grad, "scale");
    auto o = out.data();
    auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
    check_finite(out, "scale");
    if (grad) {
        record("scale", out, [a, factor](const Tensor& o) mutable {
            auto g = o.grad();
            auto da = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
        });
    }
    return out;
}

Tensor Tape::sum(const Tensor& a) {
    bool grad = needs_grad({&a});
    Tensor out = make_output({1}, grad, "sum");
    double s = 0.0;
    for (double v : a.data()) s += v;
    out.data()[0] = s;
    check_finite(out, "sum");
    if (grad) {
        record("sum", out, [a](const Tensor& o) mutable {
            double g = o.grad()[0];
            for (double& d : grad_buffer(a)) d += g;
        });
    }
    return out;
}

Tensor Tape::concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) shape_fail("concat", "no inputs");
    if (axis != 0 && axis != 1) shape_fail("concat", "axis must be 0 or 1");
    bool grad = false;
    for (const auto& p : parts) grad = grad || (recording_ && p.requires_grad());

    if (axis == 0) {
        const std::size_t cols = parts[0].cols();
        std::size_t rows = 0;
        for (const auto& p : parts) {
            if (p.cols() != cols) {
                shape_fail("concat", "axis 0 needs equal columns: " + shape_string(parts[0].shape()) + " vs " +
                                         shape_string(p.shape()));
            }
            rows += p.rows();
        }
        Tensor out = make_output({rows, cols}, grad, "concat");
        auto o = out.data();
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(off));
            off += p.size();
        }
        if (grad) {
            std::vector<Tensor> inputs(parts.begin(), parts.end());
            record("concat", out, [inputs](const Tensor& o) mutable {
                auto g = o.grad();
                std::size_t off = 0;
                for (auto& p : inputs) {
                    if (p.requires_grad()) accumulate_grad(p, g.subspan(off, p.size()));
                    off += p.size();
                }
            });
        }
        return out;
    }

    const std::size_t rows = parts[0].rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            shape_fail("concat", "axis 1 needs equal rows: " + shape_string(parts[0].shape()) + " vs " +
                                     shape_string(p.shape()));
        }
        cols += p.cols();
    }
    Tensor out = make_output({rows, cols}, grad, "concat");
    auto o = out.data();
    std::size_t col_off = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.cols();
        auto pv = p.data();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * pc), pc,
                        o.begin() + static_cast<std::ptrdiff_t>(r * cols + col_off));
        }
        col_off += pc;
    }
    if (grad) {
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        record("concat", out, [inputs, rows, cols](const Tensor& o) mutable {
            auto g = o.grad();
            std::size_t col_off = 0;
            for (auto& p : inputs) {
                const std::size_t pc = p.cols();
                if (p.requires_grad()) {
                    auto dp = grad_buffer(p);
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < pc; ++c) dp[r * pc + c] += g[r * cols + col_off + c];
                    }
                }
                col_off += pc;
            }
        });
    }
    return out;
}

Tensor Tape::slice(const Tensor& a, std::size_t begin, std::size_t end) {
    const std::size_t cols = a.cols();
    if (begin >= end || end > cols) {
        shape_fail("slice", "columns [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                                shape_string(a.shape()));
    }
    const std::size_t rows = a.rows();
    const std::size_t w = end - begin;
    Shape shape = a.shape();
    shape.back() = w;
    bool grad = needs_grad({&a});
    Tensor out = make_output(shape, grad, "slice");
    auto o = out.data();
    auto av = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(r * cols + begin), w,
                    o.begin() + static_cast<std::ptrdiff_t>(r * w));
    }
    if (grad) {
        record("slice", out, [a, rows, cols, begin, w](const Tensor& o) mutable {
            auto g = o.grad();
            auto da = grad_buffer(a);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < w; ++c) da[r * cols + begin + c] += g[r * w + c];
            }
        });
    }
    return out;
}

Tensor Tape::sigmoid(const Tensor& a) {
    bool grad = needs_grad({&a});
    Tensor out = make_output(a.shape(), grad, "sigmoid");
    auto o = out.data();
    auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = stable_sigmoid(av[i]);
    check_finite(out, "sigmoid");
    if (grad) {
        record("sigmoid", out, [a](const Tensor& o) mutable {
            auto g = o.grad();
            auto s = o.data();
            auto da = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s[i] * (1.0 - s[i]);
        });
    }
    return out;
}

Tensor Tape::tanh(const Tensor& a) {
    bool grad = needs_grad({&a});
    Tensor out = make_output(a.shape(), grad, "tanh");
    auto o = out.data();
    auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(av[i]);
    check_finite(out, "tanh");
    if (grad) {
        record("tanh", out, [a](const Tensor& o) mutable {
            auto g = o.grad();
            auto t = o.data();
            auto da = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - t[i] * t[i]);
        });
    }
    return out;
}

Tensor Tape::relu(const Tensor& a) {
    bool grad = needs_grad({&a});
    Tensor out = make_output(a.shape(), grad, "relu");
    auto o = out.data();
    auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] > 0.0 ? av[i] : 0.0;
    check_finite(out, "relu");
    if (grad) {
        record("relu", out, [a](const Tensor& o) mutable {
            auto g = o.grad();
            auto av = a.data();
            auto da = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (av[i] > 0.0) da[i] += g[i];
            }
        });
    }
    return out;
}

Tensor Tape::embedding_lookup(const Tensor& table, std::span<const int> indices) {
    if (table.shape().size() != 2) shape_fail("embedding_lookup", "table must be 2-D");
    if (indices.empty()) shape_fail("embedding_lookup", "no indices");
    const std::size_t v = table.rows(), e = table.cols();
    for (int idx : indices) {
        if (idx < 0 || static_cast<std::size_t>(idx) >= v) {
            shape_fail("embedding_lookup", "index " + std::to_string(idx) + " outside table of " +
                                               std::to_string(v) + " rows");
        }
    }
    bool grad = needs_grad({&table});
    Tensor out = make_output({indices.size(), e}, grad, "embedding_lookup");
    auto o = out.data();
    auto tv = table.data();
    for (std::size_t r = 0; r < indices.size(); ++r) {
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(indices[r]) * e), e,
                    o.begin() + static_cast<std::ptrdiff_t>(r * e));
    }
    if (grad) {
        std::vector<int> idx(indices.begin(), indices.end());
        record("embedding_lookup", out, [table, idx = std::move(idx), e](const Tensor& o) mutable {
            auto g = o.grad();
            auto dt = grad_buffer(table);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const std::size_t base = static_cast<std::size_t>(idx[r]) * e;
                for (std::size_t c = 0; c < e; ++c) dt[base + c] += g[r * e + c];
            }
        });
    }
    return out;
}

Tensor Tape::softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
    const std::size_t n = logits.rows(), v = logits.cols();
    if (targets.size() != n) {
        shape_fail("softmax_cross_entropy", std::to_string(targets.size()) + " targets for logits " +
                                                shape_string(logits.shape()));
    }
    std::size_t count = 0;
    for (int t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            shape_fail("softmax_cross_entropy", "target " + std::to_string(t) + " outside " + std::to_string(v) +
                                                    " classes");
        }
        ++count;
    }
    bool grad = needs_grad({&logits});
    Tensor out = make_output({1}, grad, "softmax_cross_entropy");
    std::vector<double> lse(n, 0.0);
    auto lv = logits.data();
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (targets[r] == ignore_index) continue;
        const double* row = lv.data() + r * v;
        double mx = *std::max_element(row, row + v);
        double s = 0.0;
        for (std::size_t c = 0; c < v; ++c) s += std::exp(row[c] - mx);
        lse[r] = mx + std::log(s);
        total += lse[r] - row[static_cast<std::size_t>(targets[r])];
    }
    out.data()[0] = count == 0 ? 0.0 : total / static_cast<double>(count);
    check_finite(out, "softmax_cross_entropy");
    if (grad && count > 0) {
        std::vector<int> tg(targets.begin(), targets.end());
        record("softmax_cross_entropy", out,
               [logits, tg = std::move(tg), lse = std::move(lse), n, v, count, ignore_index](const Tensor& o) mutable {
                   const double g = o.grad()[0] / static_cast<double>(count);
                   auto lv = logits.data();
                   auto dl = grad_buffer(logits);
                   for (std::size_t r = 0; r < n; ++r) {
                       if (tg[r] == ignore_index) continue;
                       for (std::size_t c = 0; c < v; ++c) {
                           dl[r * v + c] += g * std::exp(lv[r * v + c] - lse[r]);
                       }
                       dl[r * v + static_cast<std::size_t>(tg[r])] -= g;
                   }
               });
    }
    return out;
}

Tensor Tape::stack_time(std::span<const Tensor> steps) {
    check_steps("stack_time", steps, {});
    const std::size_t t_len = steps.size(), b = steps[0].rows(), h = steps[0].cols();
    bool grad = false;
    for (const auto& s : steps) grad = grad || (recording_ && s.requires_grad());
    Tensor out = make_output({b, t_len, h}, grad, "stack_time");
    auto o = out.data();
    for (std::size_t t = 0; t < t_len; ++t) {
        auto sv = steps[t].data();
        for (std::size_t r = 0; r < b; ++r) {
            std::copy_n(sv.begin() + static_cast<std::ptrdiff_t>(r * h), h,
                        o.begin() + static_cast<std::ptrdiff_t>((r * t_len + t) * h));
        }
    }
    if (grad) {
        std::vector<Tensor> inputs(steps.begin(), steps.end());
        record("stack_time", out, [inputs, t_len, b, h](const Tensor& o) mutable {
            auto g = o.grad();
            for (std::size_t t = 0; t < t_len; ++t) {
                if (!inputs[t].requires_grad()) continue;
                auto ds = grad_buffer(inputs[t]);
                for (std::size_t r = 0; r < b; ++r) {
                    for (std::size_t c = 0; c < h; ++c) ds[r * h + c] += g[(r * t_len + t) * h + c];
                }
            }
        });
    }
    return out;
}

Tensor Tape::mean_over_time(std::span<const Tensor> steps, std::span<const std::size_t> lengths) {
    check_steps("mean_over_time", steps, lengths);
    const std::size_t b = steps[0].rows(), h = steps[0].cols();
    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    if (lens.empty()) lens.assign(b, steps.size());
    bool grad = false;
    for (const auto& s : steps) grad = grad || (recording_ && s.requires_grad());
    Tensor out = make_output({b, h}, grad, "mean_over_time");
    auto o = out.data();
    for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t t = 0; t < lens[r]; ++t) {
            auto sv = steps[t].data();
            for (std::size_t c = 0; c < h; ++c) o[r * h + c] += sv[r * h + c];
        }
        for (std::size_t c = 0; c < h; ++c) o[r * h + c] /= static_cast<double>(lens[r]);
    }
    if (grad) {
        std::vector<Tensor> inputs(steps.begin(), steps.end());
        record("mean_over_time", out, [inputs, lens, b, h](const Tensor& o) mutable {
            auto g = o.grad();
            for (std::size_t r = 0; r < b; ++r) {
                const double inv = 1.0 / static_cast<double>(lens[r]);
                for (std::size_t t = 0; t < lens[r]; ++t) {
                    if (!inputs[t].requires_grad()) continue;
                    auto ds = grad_buffer(inputs[t]);
                    for (std::size_t c = 0; c < h; ++c) ds[r * h + c] += g[r * h + c] * inv;
                }
            }
        });
    }
    return out;
}

Tensor Tape::max_over_time(std::span<const Tensor> steps, std::span<const std::size_t> lengths) {
    check_steps("max_over_time", steps, lengths);
    const std::size_t b = steps[0].rows(), h = steps[0].cols();
    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    if (lens.empty()) lens.assign(b, steps.size());
    bool grad = false;
    for (const auto& s : steps) grad = grad || (recording_ && s.requires_grad());
    Tensor out = make_output({b, h}, grad, "max_over_time");
    auto o = out.data();
    std::vector<std::size_t> argmax(b * h, 0);
    for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t c = 0; c < h; ++c) {
            double best = steps[0].data()[r * h + c];
            std::size_t best_t = 0;
            for (std::size_t t = 1; t < lens[r]; ++t) {
                double v = steps[t].data()[r * h + c];
                if (v > best) {
                    best = v;
                    best_t = t;
                }
            }
            o[r * h + c] = best;
            argmax[r * h + c] = best_t;
        }
    }
    if (grad) {
        std::vector<Tensor> inputs(steps.begin(), steps.end());
        record("max_over_time", out, [inputs, argmax = std::move(argmax), b, h](const Tensor& o) mutable {
            auto g = o.grad();
            for (std::size_t i = 0; i < b * h; ++i) {
                auto& src = inputs[argmax[i]];
                if (src.requires_grad()) grad_buffer(src)[i] += g[i];
            }
        });
    }
    return out;
}

Tensor Tape::last_over_time(std::span<const Tensor> steps, std::span<const std::size_t> lengths) {
    check_steps("last_over_time", steps, lengths);
    const std::size_t b = steps[0].rows(), h = steps[0].cols();
    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    if (lens.empty()) lens.assign(b, steps.size());
    bool grad = false;
    for (const auto& s : steps) grad = grad || (recording_ && s.requires_grad());
    Tensor out = make_output({b, h}, grad, "last_over_time");
    auto o = out.data();
    for (std::size_t r = 0; r < b; ++r) {
        auto sv = steps[lens[r] - 1].data();
        std::copy_n(sv.begin() + static_cast<std::ptrdiff_t>(r * h), h, o.begin() + static_cast<std::ptrdiff_t>(r * h));
    }
    if (grad) {
        std::vector<Tensor> inputs(steps.begin(), steps.end());
        record("last_over_time", out, [inputs, lens, b, h](const Tensor& o) mutable {
            auto g = o.grad();
            for (std::size_t r = 0; r < b; ++r) {
                auto& src = inputs[lens[r] - 1];
                if (!src.requires_grad()) continue;
                auto ds = grad_buffer(src);
                for (std::size_t c = 0; c < h; ++c) ds[r * h + c] += g[r * h + c];
            }
        });
    }
    return out;
}

Tensor Tape::dropout(const Tensor& a, double p, Pcg32& rng, bool training) {
    if (!(p >= 0.0 && p < 1.0)) throw InputError("dropout probability must lie in [0, 1)");
    if (!training || p == 0.0) return a;
    bool grad = needs_grad({&a});
    Tensor out = make_output(a.shape(), grad, "dropout");
    std::vector<double> mask(a.size());
    const double keep_scale = 1.0 / (1.0 - p);
    for (double& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
    auto o = out.data();
    auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * mask[i];
    if (grad) {
        record("dropout", out, [a, mask = std::move(mask)](const Tensor& o) mutable {
            auto g = o.grad();
            auto da = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * mask[i];
        });
    }
    return out;
}

Tensor Tape::lstm_cell(const Tensor& x_proj, const Tensor& h_proj, const Tensor& bias, const Tensor& c_prev) {
    const std::size_t B = c_prev.rows(), H = c_prev.cols();
    if (x_proj.shape() != h_proj.shape() || x_proj.rows() != B || x_proj.cols() != 4 * H || bias.size() != 4 * H) {
        shape_fail("lstm_cell", shape_string(x_proj.shape()) + ", " + shape_string(h_proj.shape()) + ", bias " +
                                    shape_string(bias.shape()) + ", state " + shape_string(c_prev.shape()));
    }
    bool grad = needs_grad({&x_proj, &h_proj, &bias, &c_prev});
    Tensor out = make_output({B, 2 * H}, grad, "lstm_cell");
    // Per row: i, f, g, o, tanh(c) blocks of width H.
    std::vector<double> cache(B * 5 * H);
    auto xv = x_proj.data();
    auto hv = h_proj.data();
    auto bv = bias.data();
    auto cp = c_prev.data();
    auto o = out.data();
    for (std::size_t r = 0; r < B; ++r) {
        const double* zx = xv.data() + r * 4 * H;
        const double* zh = hv.data() + r * 4 * H;
        double* k = cache.data() + r * 5 * H;
        for (std::size_t j = 0; j < H; ++j) {
            const double i = stable_sigmoid(zx[j] + zh[j] + bv[j]);
            const double f = stable_sigmoid(zx[H + j] + zh[H + j] + bv[H + j]);
            const double g = std::tanh(zx[2 * H + j] + zh[2 * H + j] + bv[2 * H + j]);
            const double og = stable_sigmoid(zx[3 * H + j] + zh[3 * H + j] + bv[3 * H + j]);
            const double c = f * cp[r * H + j] + i * g;
            const double tc = std::tanh(c);
            k[j] = i;
            k[H + j] = f;
            k[2 * H + j] = g;
            k[3 * H + j] = og;
            k[4 * H + j] = tc;
            o[r * 2 * H + j] = og * tc;
            o[r * 2 * H + H + j] = c;
        }
    }
    check_finite(out, "lstm_cell");
    if (grad) {
        record("lstm_cell", out,
               [x_proj, h_proj, bias, c_prev, cache = std::move(cache), B, H](const Tensor& o) mutable {
                   auto g = o.grad();
                   auto cp = c_prev.data();
                   std::vector<double> dz(B * 4 * H);
                   std::vector<double> dcp(B * H);
                   for (std::size_t r = 0; r < B; ++r) {
                       const double* k = cache.data() + r * 5 * H;
                       for (std::size_t j = 0; j < H; ++j) {
                           const double i = k[j], f = k[H + j], gg = k[2 * H + j], og = k[3 * H + j];
                           const double tc = k[4 * H + j];
                           const double dh = g[r * 2 * H + j];
                           const double dc = g[r * 2 * H + H + j] + dh * og * (1.0 - tc * tc);
                           double* d = dz.data() + r * 4 * H;
                           d[j] = dc * gg * i * (1.0 - i);
                           d[H + j] = dc * cp[r * H + j] * f * (1.0 - f);
                           d[2 * H + j] = dc * i * (1.0 - gg * gg);
                           d[3 * H + j] = dh * tc * og * (1.0 - og);
                           dcp[r * H + j] = dc * f;
                       }
                   }
                   if (x_proj.requires_grad()) accumulate_grad(x_proj, dz);
                   if (h_proj.requires_grad()) accumulate_grad(h_proj, dz);
                   if (bias.requires_grad()) {
                       auto db = grad_buffer(bias);
                       for (std::size_t n = 0; n < dz.size(); ++n) db[n % (4 * H)] += dz[n];
                   }
                   if (c_prev.requires_grad()) accumulate_grad(c_prev, dcp);
               });
    }
    return out;
}

Tensor Tape::batch_norm(const Tensor& a, Tensor running_mean, Tensor running_var, bool training, double momentum,
                        double eps) {
    const std::size_t n = a.rows(), d = a.cols();
    if (running_mean.size() != d || running_var.size() != d) {
        shape_fail("batch_norm", "running statistics must have " + std::to_string(d) + " entries");
    }
    if (n == 0) shape_fail("batch_norm", "empty batch");
    bool grad = needs_grad({&a});
    Tensor out = make_output(a.shape(), grad, "batch_norm");
    auto x = a.data();
    auto y = out.data();
    std::vector<double> inv(d);
    if (training) {
        auto rm = running_mean.data();
        auto rv = running_var.data();
        for (std::size_t j = 0; j < d; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += x[i * d + j];
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i) var += (x[i * d + j] - mean) * (x[i * d + j] - mean);
            const double unbiased = n > 1 ? var / static_cast<double>(n - 1) : 0.0;
            var /= static_cast<double>(n);
            inv[j] = 1.0 / std::sqrt(var + eps);
            for (std::size_t i = 0; i < n; ++i) y[i * d + j] = (x[i * d + j] - mean) * inv[j];
            rm[j] = (1.0 - momentum) * rm[j] + momentum * mean;
            rv[j] = (1.0 - momentum) * rv[j] + momentum * unbiased;
        }
    } else {
        auto rm = running_mean.data();
        auto rv = running_var.data();
        for (std::size_t j = 0; j < d; ++j) {
            inv[j] = 1.0 / std::sqrt(rv[j] + eps);
            for (std::size_t i = 0; i < n; ++i) y[i * d + j] = (x[i * d + j] - rm[j]) * inv[j];
        }
    }
    check_finite(out, "batch_norm");
    if (grad) {
        record("batch_norm", out, [a, inv = std::move(inv), n, d, training](const Tensor& o) mutable {
            auto g = o.grad();
            auto yv = o.data();
            auto da = grad_buffer(a);
            for (std::size_t j = 0; j < d; ++j) {
                if (!training) {
                    for (std::size_t i = 0; i < n; ++i) da[i * d + j] += g[i * d + j] * inv[j];
                    continue;
                }
                // dx = inv/n * (n*g - sum(g) - y*sum(g*y))
                double sg = 0.0, sgy = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    sg += g[i * d + j];
                    sgy += g[i * d + j] * yv[i * d + j];
                }
                const double nn = static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                    da[i * d + j] += inv[j] / nn * (nn * g[i * d + j] - sg - yv[i * d + j] * sgy);
                }
            }
        });
    }
    return out;
}

}  // namespace fitcls::ag
