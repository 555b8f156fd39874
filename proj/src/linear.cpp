#include "fitcls/linear.hpp"

#include "fitcls/error.hpp"
#include "fitcls/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fitcls {

std::string_view to_string(FeatureKind kind) {
    return kind == FeatureKind::Tfidf ? "tfidf" : "mean_embedding";
}

FeatureKind parse_feature_kind(std::string_view name) {
    if (name == "tfidf") return FeatureKind::Tfidf;
    if (name == "mean_embedding") return FeatureKind::MeanEmbedding;
    throw InputError("unknown feature kind '" + std::string(name) + "'");
}

double cross_entropy(std::span<const double> logits, FitLabel label) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double z : logits) s += std::exp(z - mx);
    return mx + std::log(s) - logits[static_cast<std::size_t>(code(label))];
}

FitLabel argmax_label(std::span<const double> scores) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c) {
        if (scores[c] > scores[best]) best = c;
    }
    return label_from_code(static_cast<int>(best));
}

Logits softmax(std::span<const double> logits) {
    Logits p{};
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (std::size_t c = 0; c < kNumLabels; ++c) {
        p[c] = std::exp(logits[c] - mx);
        s += p[c];
    }
    for (double& v : p) v /= s;
    return p;
}

void LinearTrainConfig::validate() const {
    if (!(lr > 0.0)) throw InputError("linear: lr must be > 0");
    if (batch_size < 1) throw InputError("linear: batch_size must be >= 1");
    if (patience < 1) throw InputError("linear: patience must be >= 1");
    if (max_epochs < 1) throw InputError("linear: max_epochs must be >= 1");
    if (l2 < 0.0) throw InputError("linear: l2 must be >= 0");
}

// ---------------------------------------------------------------------------

LinearClassifier::LinearClassifier(std::size_t dim, FeatureKind kind)
    : dim_(dim), kind_(kind), w_(kNumLabels * dim, 0.0) {}

LinearClassifier::LinearClassifier(std::size_t dim, FeatureKind kind, std::vector<double> weights, Logits bias)
    : dim_(dim), kind_(kind), w_(std::move(weights)), b_(bias) {
    if (w_.size() != kNumLabels * dim_) throw ShapeError("linear classifier: weights are not 3 x D");
    for (double v : w_) {
        if (!std::isfinite(v)) throw NumericError("linear classifier: non-finite weight");
    }
}

Logits LinearClassifier::predict_logits(const SparseVector& x) const {
    if (x.dim != dim_) {
        throw ShapeError("linear classifier expects dimension " + std::to_string(dim_) + ", got " +
                         std::to_string(x.dim));
    }
    Logits z = b_;
    for (std::size_t c = 0; c < kNumLabels; ++c) {
        const double* row = w_.data() + c * dim_;
        double s = 0.0;
        for (std::size_t k = 0; k < x.indices.size(); ++k) s += row[x.indices[k]] * x.values[k];
        z[c] += s;
    }
    return z;
}

Logits LinearClassifier::predict_logits(std::span<const double> x) const {
    if (x.size() != dim_) {
        throw ShapeError("linear classifier expects dimension " + std::to_string(dim_) + ", got " +
                         std::to_string(x.size()));
    }
    Logits z = b_;
    for (std::size_t c = 0; c < kNumLabels; ++c) {
        const double* row = w_.data() + c * dim_;
        double s = 0.0;
        for (std::size_t j = 0; j < dim_; ++j) s += row[j] * x[j];
        z[c] += s;
    }
    return z;
}

FitLabel LinearClassifier::predict_label(const SparseVector& x) const {
    return argmax_label(predict_logits(x));
}

FitLabel LinearClassifier::predict_label(std::span<const double> x) const {
    return argmax_label(predict_logits(x));
}

// ---------------------------------------------------------------------------
// Training

std::string trace_jsonl(std::span<const LinearEpoch> trace) {
    std::string out;
    for (const auto& e : trace) {
        nlohmann::json j = {{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"val_loss", e.val_loss},
                            {"val_acc", e.val_acc}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

double mean_loss(const LinearClassifier& model, const LabeledFeatures& data) {
    if (data.size() == 0) throw InputError("mean_loss on an empty set");
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) total += cross_entropy(model.predict_logits(data.x[i]), data.y[i]);
    return total / static_cast<double>(data.size());
}

double accuracy(const LinearClassifier& model, const LabeledFeatures& data) {
    if (data.size() == 0) throw InputError("accuracy on an empty set");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct += model.predict_label(data.x[i]) == data.y[i];
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

double add_example_gradient(const LinearClassifier& model, const SparseVector& x, FitLabel y, double scale,
                            std::span<double> grad_w, Logits& grad_b) {
    const std::size_t dim = model.dim();
    if (grad_w.size() != kNumLabels * dim) throw ShapeError("linear: gradient buffer has the wrong size");
    Logits z = model.predict_logits(x);
    const double loss = cross_entropy(z, y);
    Logits p = softmax(z);
    p[static_cast<std::size_t>(code(y))] -= 1.0;
    for (std::size_t c = 0; c < kNumLabels; ++c) {
        const double d = p[c] * scale;
        grad_b[c] += d;
        double* g = grad_w.data() + c * dim;
        for (std::size_t k = 0; k < x.indices.size(); ++k) g[x.indices[k]] += d * x.values[k];
    }
    return loss;
}

namespace {

// Adam moments for W and b with a shared step counter; W columns are only
// touched when their feature is active in the batch.
struct LazyAdamState {
    std::vector<double> m_w, v_w;
    Logits m_b{}, v_b{};
    std::size_t t = 0;
};

void check_features(const LabeledFeatures& data, std::size_t dim, const char* which) {
    if (data.x.size() != data.y.size()) {
        throw InputError(std::string("linear: ") + which + " features and labels differ in length");
    }
    for (const auto& x : data.x) {
        if (x.dim != dim) {
            throw ShapeError(std::string("linear: ") + which + " feature of dimension " + std::to_string(x.dim) +
                             ", expected " + std::to_string(dim));
        }
    }
}

}  // namespace

LinearTrainResult train_linear(const LabeledFeatures& train, const LabeledFeatures& val, std::size_t dim,
                               FeatureKind kind, const LinearTrainConfig& cfg) {
    cfg.validate();
    if (train.size() == 0 || val.size() == 0) throw InputError("linear: train and validation sets must be non-empty");
    check_features(train, dim, "train");
    check_features(val, dim, "validation");

    LinearClassifier model(dim, kind);
    LinearTrainResult result{model, {}, 0};
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    Pcg32 rng = Pcg32::named(cfg.seed, "linear/shuffle");
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<double> grad_w(kNumLabels * dim, 0.0);
    std::vector<char> touched_mark(dim, 0);
    std::vector<std::uint32_t> touched;
    LazyAdamState adam;
    if (cfg.optimizer == OptimizerKind::Adam) {
        adam.m_w.assign(kNumLabels * dim, 0.0);
        adam.v_w.assign(kNumLabels * dim, 0.0);
    }
    const AdamOptions ao;
    auto& w = model.weights();
    auto& b = model.bias();

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(std::span(order));
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double inv_n = 1.0 / static_cast<double>(end - start);
            Logits grad_b{};
            touched.clear();
            for (std::size_t pos = start; pos < end; ++pos) {
                const SparseVector& x = train.x[order[pos]];
                const FitLabel y = train.y[order[pos]];
                epoch_loss += add_example_gradient(model, x, y, inv_n, grad_w, grad_b);
                for (auto idx : x.indices) {
                    if (!touched_mark[idx]) {
                        touched_mark[idx] = 1;
                        touched.push_back(idx);
                    }
                }
            }
            std::sort(touched.begin(), touched.end());

            if (cfg.optimizer == OptimizerKind::Sgd) {
                for (auto idx : touched) {
                    for (std::size_t c = 0; c < kNumLabels; ++c) {
                        const std::size_t at = c * dim + idx;
                        w[at] -= cfg.lr * (grad_w[at] + cfg.l2 * w[at]);
                    }
                }
                for (std::size_t c = 0; c < kNumLabels; ++c) b[c] -= cfg.lr * grad_b[c];
            } else {
                ++adam.t;
                const double bc1 = 1.0 - std::pow(ao.beta1, static_cast<double>(adam.t));
                const double bc2 = 1.0 - std::pow(ao.beta2, static_cast<double>(adam.t));
                auto update = [&](double& param, double& m, double& v, double g) {
                    m = ao.beta1 * m + (1.0 - ao.beta1) * g;
                    v = ao.beta2 * v + (1.0 - ao.beta2) * g * g;
                    param -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + ao.eps);
                };
                for (auto idx : touched) {
                    for (std::size_t c = 0; c < kNumLabels; ++c) {
                        const std::size_t at = c * dim + idx;
                        update(w[at], adam.m_w[at], adam.v_w[at], grad_w[at] + cfg.l2 * w[at]);
                    }
                }
                for (std::size_t c = 0; c < kNumLabels; ++c) update(b[c], adam.m_b[c], adam.v_b[c], grad_b[c]);
            }
            for (auto idx : touched) {
                touched_mark[idx] = 0;
                for (std::size_t c = 0; c < kNumLabels; ++c) grad_w[c * dim + idx] = 0.0;
            }
        }

        LinearEpoch rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(train.size());
        rec.val_loss = mean_loss(model, val);
        rec.val_acc = accuracy(model, val);
        result.trace.push_back(rec);
        if (!std::isfinite(rec.val_loss) || !std::isfinite(rec.train_loss)) {
            throw DivergenceError("linear training diverged at epoch " + std::to_string(epoch),
                                  trace_jsonl(result.trace));
        }
        if (rec.val_loss < best_val) {
            best_val = rec.val_loss;
            result.model = model;
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    return result;
}

}  // namespace fitcls
