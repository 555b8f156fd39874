#pragma once

#include "fitcls/autograd.hpp"
#include "fitcls/corpus.hpp"
#include "fitcls/langmodel.hpp"
#include "fitcls/linear.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fitcls {

/// Short linear warm-up to lr_max at cut = floor(cut_frac * T), then a long
/// linear decay back to lr_max / ratio at t = T.
struct SlantedTriangularSchedule {
    double lr_max = 0.02;
    double cut_frac = 0.1;
    double ratio = 32.0;
    std::size_t total_steps = 1;

    void validate() const;
    std::size_t cut() const;
};

double schedule_lr(const SlantedTriangularSchedule& sched, std::size_t t);

/// Learning rate of the top group; each group further from the output gets the
/// previous rate divided by `decay`.
struct DiscriminativeLrPlan {
    double base_lr = 0.02;
    double decay = 2.6;
};

/// [base, base/decay, base/decay/decay, ...], output group first.
std::vector<double> layer_lrs(const DiscriminativeLrPlan& plan, std::size_t n_layers);

/// Epoch k (1-based) trains the k groups closest to the output; every group
/// is trainable from epoch n_groups on.
struct UnfreezeSchedule {
    std::size_t n_groups = 1;

    std::size_t trainable_count(std::size_t epoch) const;
    std::vector<std::size_t> trainable_groups(std::size_t epoch) const;
};

/// concat(last, mean, max) of top-layer outputs -> batch norm -> Linear(hidden)
/// -> ReLU -> dropout -> Linear(3).
struct ClassifierHead {
    ag::Tensor norm_mean;  // (3h) running statistics, not trained
    ag::Tensor norm_var;   // (3h)
    ag::Tensor w1;  // (hidden, 3h)
    ag::Tensor b1;  // (hidden)
    ag::Tensor w2;  // (3, hidden)
    ag::Tensor b2;  // (3)
    double dropout = 0.1;

    static ClassifierHead create(std::size_t lm_hidden, std::size_t hidden, double dropout, std::uint64_t seed);

    std::size_t input_width() const { return w1.cols(); }
    std::vector<ag::Tensor> parameters() const { return {w1, b1, w2, b2}; }
    /// Parameters plus the running statistics, for checkpoints.
    std::vector<NamedTensor> named_parameters() const;
    ClassifierHead clone() const;
    /// pooled (B, 3h) -> logits (B, 3). rng null means eval mode; training mode
    /// also updates the running statistics.
    ag::Tensor forward(ag::Tape& tape, const ag::Tensor& pooled, Pcg32* rng) const;
};

struct UlmfitClassifier {
    Vocabulary vocab;
    LanguageModel lm;
    ClassifierHead head;
    std::size_t max_tokens = 400;

    UlmfitClassifier clone() const;
    /// Unfreezing groups, output first: [head, top LSTM, ..., bottom LSTM, embedding].
    std::vector<std::vector<ag::Tensor>> layer_groups() const;
};

struct LabeledDoc {
    std::vector<int> ids;  // truncated tokens followed by EOS
    FitLabel label = FitLabel::Fit;
};

/// Tokens truncated to max_tokens - 1, then EOS. Empty text becomes a lone EOS.
std::vector<int> encode_for_classifier(std::string_view text, const Vocabulary& vocab, std::size_t max_tokens);
std::vector<LabeledDoc> encode_labeled(std::span<const Review> reviews, const Vocabulary& vocab,
                                       std::size_t max_tokens);

/// Logits (B, 3) for a batch of documents padded with PAD.
ag::Tensor classifier_logits(ag::Tape& tape, const UlmfitClassifier& model, std::span<const std::vector<int>> docs,
                             DropoutStreams* lm_dropout, Pcg32* head_rng);

struct LmFineTuneConfig {
    LmTrainConfig train;        // lr is the peak of the triangular schedule
    double cut_frac = 0.1;
    double ratio = 32.0;
    double decay = 2.6;
};

/// Continues next-word training on target-domain text with discriminative
/// rates and the triangular schedule; early stopping on validation perplexity.
LmTrainResult finetune_lm(const LanguageModel& pretrained, std::span<const int> train_stream,
                          std::span<const int> val_stream, const LmFineTuneConfig& cfg);

struct FineTunePlan {
    double lr = 0.02;
    double cut_frac = 0.1;
    double ratio = 32.0;
    double decay = 2.6;
    std::size_t epochs = 8;
    std::size_t batch_size = 32;
    std::size_t patience = 2;
    double clip_norm = 5.0;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::Adam;

    void validate() const;
};

struct ClassifierEpoch {
    std::size_t epoch = 0;
    std::size_t trainable_groups = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

struct ClassifierTrainResult {
    UlmfitClassifier model;
    std::vector<ClassifierEpoch> trace;
    std::size_t best_epoch = 0;
};

std::string trace_jsonl(std::span<const ClassifierEpoch> trace);

/// Gradual unfreezing with triangular, per-group discriminative rates and
/// early stopping on validation loss. Returns the best-validation snapshot.
/// `on_epoch`, when set, runs after each epoch with the current model.
ClassifierTrainResult train_classifier(
    const UlmfitClassifier& init, std::span<const LabeledDoc> train, std::span<const LabeledDoc> val,
    const FineTunePlan& plan,
    const std::function<void(std::size_t epoch, const UlmfitClassifier&)>& on_epoch = {});

struct Classification {
    FitLabel label = FitLabel::Fit;
    Logits probabilities{};
};

Classification classify(const UlmfitClassifier& model, std::string_view text);
std::vector<Classification> classify_batch(const UlmfitClassifier& model, std::span<const std::vector<int>> docs,
                                           std::size_t batch_size = 64);
double mean_loss(const UlmfitClassifier& model, std::span<const LabeledDoc> docs, std::size_t batch_size = 64);

}  // namespace fitcls
