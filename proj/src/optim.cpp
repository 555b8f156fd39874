#include "fitcls/optim.hpp"

#include "fitcls/error.hpp"

#include <cmath>
#include <string>

namespace fitcls {

namespace {

void require_grad(const ag::Tensor& p) {
    if (!p.has_grad()) {
        throw Error("optimizer step: trainable parameter of shape " + ag::shape_string(p.shape()) +
                    " has no gradient");
    }
}

}  // namespace

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adam") return OptimizerKind::Adam;
    throw InputError("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

std::string_view to_string(OptimizerKind kind) {
    return kind == OptimizerKind::Sgd ? "sgd" : "adam";
}

void sgd_step(std::span<ag::Tensor> params, double lr) {
    for (auto& p : params) require_grad(p);
    for (auto& p : params) {
        auto w = p.data();
        auto g = p.grad();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    }
}

void Adam::step(std::span<ag::Tensor> params, double lr) {
    for (auto& p : params) require_grad(p);
    const auto& o = options_;
    for (auto& p : params) {
        State& s = state_[p.key()];
        if (s.m.empty()) {
            s.m.assign(p.size(), 0.0);
            s.v.assign(p.size(), 0.0);
        }
        ++s.t;
        const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.t));
        const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.t));
        auto w = p.data();
        auto g = p.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            s.m[i] = o.beta1 * s.m[i] + (1.0 - o.beta1) * g[i];
            s.v[i] = o.beta2 * s.v[i] + (1.0 - o.beta2) * g[i] * g[i];
            const double m_hat = s.m[i] / bc1;
            const double v_hat = s.v[i] / bc2;
            w[i] -= lr * m_hat / (std::sqrt(v_hat) + o.eps);
        }
    }
}

std::size_t Adam::steps_taken(const ag::Tensor& param) const {
    auto it = state_.find(param.key());
    return it == state_.end() ? 0 : it->second.t;
}

void Optimizer::step(std::span<ag::Tensor> params, double lr) {
    if (kind_ == OptimizerKind::Sgd) {
        sgd_step(params, lr);
    } else {
        adam_.step(params, lr);
    }
}

double clip_grad_norm(std::span<ag::Tensor> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
    if (norm > max_norm && norm > 0.0) {
        const double f = max_norm / norm;
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.grad()) g *= f;
        }
    }
    return norm;
}

void zero_grads(std::span<ag::Tensor> params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace fitcls
