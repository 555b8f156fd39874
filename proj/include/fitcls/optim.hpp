#pragma once

#include "fitcls/autograd.hpp"

#include <span>
#include <unordered_map>
#include <vector>

namespace fitcls {

enum class OptimizerKind { Sgd, Adam };

OptimizerKind parse_optimizer(std::string_view name);
std::string_view to_string(OptimizerKind kind);

/// Plain gradient descent: w -= lr * g.
void sgd_step(std::span<ag::Tensor> params, double lr);

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment state and step counts are kept per
/// parameter, so parameters that sit out a step keep their state untouched.
class Adam {
public:
    explicit Adam(AdamOptions options = {}) : options_(options) {}

    void step(std::span<ag::Tensor> params, double lr);
    std::size_t steps_taken(const ag::Tensor& param) const;
    const AdamOptions& options() const { return options_; }

private:
    struct State {
        std::vector<double> m;
        std::vector<double> v;
        std::size_t t = 0;
    };
    AdamOptions options_;
    std::unordered_map<const void*, State> state_;
};

/// Either optimizer behind one interface, chosen by config.
class Optimizer {
public:
    explicit Optimizer(OptimizerKind kind, AdamOptions adam = {}) : kind_(kind), adam_(adam) {}
    void step(std::span<ag::Tensor> params, double lr);
    OptimizerKind kind() const { return kind_; }

private:
    OptimizerKind kind_;
    Adam adam_;
};

/// Scales all gradients so their joint L2 norm is at most max_norm. Returns the
/// norm before clipping. Parameters without a gradient buffer are skipped.
double clip_grad_norm(std::span<ag::Tensor> params, double max_norm);

void zero_grads(std::span<ag::Tensor> params);

}  // namespace fitcls
