#pragma once

#include "fitcls/corpus.hpp"
#include "fitcls/features.hpp"
#include "fitcls/optim.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fitcls {

enum class FeatureKind { Tfidf, MeanEmbedding };

std::string_view to_string(FeatureKind kind);
FeatureKind parse_feature_kind(std::string_view name);

using Logits = std::array<double, kNumLabels>;

/// -log softmax(logits)[label], via log-sum-exp.
double cross_entropy(std::span<const double> logits, FitLabel label);

/// Argmax; ties go to the lowest class code.
FitLabel argmax_label(std::span<const double> scores);

/// softmax(logits) computed with the max subtracted.
Logits softmax(std::span<const double> logits);

struct LinearTrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 50;
    std::size_t patience = 3;
    double l2 = 1e-6;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::Adam;

    void validate() const;
};

/// Multinomial logistic regression: logits = W x + b with W of shape 3 x D.
class LinearClassifier {
public:
    LinearClassifier() = default;
    LinearClassifier(std::size_t dim, FeatureKind kind);
    LinearClassifier(std::size_t dim, FeatureKind kind, std::vector<double> weights, Logits bias);

    std::size_t dim() const { return dim_; }
    FeatureKind feature_kind() const { return kind_; }
    /// Row-major 3 x D.
    const std::vector<double>& weights() const { return w_; }
    std::vector<double>& weights() { return w_; }
    const Logits& bias() const { return b_; }
    Logits& bias() { return b_; }

    Logits predict_logits(const SparseVector& x) const;
    Logits predict_logits(std::span<const double> x) const;
    FitLabel predict_label(const SparseVector& x) const;
    FitLabel predict_label(std::span<const double> x) const;

private:
    std::size_t dim_ = 0;
    FeatureKind kind_ = FeatureKind::Tfidf;
    std::vector<double> w_;
    Logits b_{};
};

struct LabeledFeatures {
    std::vector<SparseVector> x;
    std::vector<FitLabel> y;

    std::size_t size() const { return x.size(); }
};

struct LinearEpoch {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

struct LinearTrainResult {
    LinearClassifier model;
    std::vector<LinearEpoch> trace;
    std::size_t best_epoch = 0;
};

/// One JSON object per epoch: {"epoch","train_loss","val_loss","val_acc"}.
std::string trace_jsonl(std::span<const LinearEpoch> trace);

/// Adds scale * d cross_entropy / d(W, b) for one example into the buffers
/// (grad_w row-major 3 x D) and returns the example's loss.
double add_example_gradient(const LinearClassifier& model, const SparseVector& x, FitLabel y, double scale,
                            std::span<double> grad_w, Logits& grad_b);

/// Mean cross-entropy of the model over a labelled set.
double mean_loss(const LinearClassifier& model, const LabeledFeatures& data);
double accuracy(const LinearClassifier& model, const LabeledFeatures& data);

/// Minibatch training with early stopping on validation loss. Only the weight
/// columns of features active in a batch are updated (lazy Adam moments).
/// Returns the snapshot from the epoch with the lowest validation loss.
LinearTrainResult train_linear(const LabeledFeatures& train, const LabeledFeatures& val, std::size_t dim,
                               FeatureKind kind, const LinearTrainConfig& cfg);

}  // namespace fitcls
