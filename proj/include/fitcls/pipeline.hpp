#pragma once

#include "fitcls/checkpoint.hpp"
#include "fitcls/config.hpp"
#include "fitcls/eval.hpp"
#include "fitcls/features.hpp"
#include "fitcls/finetune.hpp"
#include "fitcls/langmodel.hpp"
#include "fitcls/linear.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace fitcls {

// Checkpoint kinds.
inline constexpr std::string_view kKindTfidf = "tfidf_linear";
inline constexpr std::string_view kKindEmbedMean = "embed_mean_linear";
inline constexpr std::string_view kKindLm = "language_model";
inline constexpr std::string_view kKindUlmfit = "ulmfit_classifier";

/// How a vocabulary was derived from a training split; stored alongside it so
/// evaluation can rebuild and compare.
struct VocabSpec {
    std::size_t min_freq = 1;
    std::size_t max_size = 0;  // 0 = unlimited
};

Vocabulary make_vocabulary(std::span<const Review> train, const VocabSpec& spec);

struct TfidfPipeline {
    Vocabulary vocab;
    VocabSpec vocab_spec;
    TfidfModel tfidf;
    LinearClassifier classifier;

    SparseVector features(std::string_view text) const;
    FitLabel predict(std::string_view text) const;
};

struct EmbedMeanPipeline {
    Vocabulary vocab;
    VocabSpec vocab_spec;
    EmbeddingTable table;
    LinearClassifier classifier;

    std::vector<double> features(std::string_view text) const;
    FitLabel predict(std::string_view text) const;
};

struct UlmfitPipeline {
    UlmfitClassifier model;
    VocabSpec vocab_spec;
};

struct LmArtifact {
    LanguageModel lm;
    Vocabulary vocab;
    VocabSpec vocab_spec;
};

Checkpoint to_checkpoint(const TfidfPipeline& p, const nlohmann::json& config);
Checkpoint to_checkpoint(const EmbedMeanPipeline& p, const nlohmann::json& config);
Checkpoint to_checkpoint(const UlmfitPipeline& p, const nlohmann::json& config);
Checkpoint to_checkpoint(const LmArtifact& a, const nlohmann::json& config);

/// Each throws ArtifactError when the checkpoint is of another kind.
TfidfPipeline tfidf_from_checkpoint(const Checkpoint& c);
EmbedMeanPipeline embed_mean_from_checkpoint(const Checkpoint& c);
UlmfitPipeline ulmfit_from_checkpoint(const Checkpoint& c);
LmArtifact lm_from_checkpoint(const Checkpoint& c);

VocabSpec vocab_spec_of(const Checkpoint& c);

/// Hash of the vocabulary rebuilt from `train` with the checkpoint's settings.
std::uint64_t data_vocab_hash(const Checkpoint& c, std::span<const Review> train);

/// Labels a whole split with the model stored in the checkpoint.
BatchPredictFn predictor(const Checkpoint& c);

// ---------------------------------------------------------------------------
// Training flows

struct TfidfRun {
    TfidfPipeline pipeline;
    std::vector<LinearEpoch> trace;
    std::size_t best_epoch = 0;
};

TfidfRun train_tfidf(const SplitDataset& data, const Config& cfg);

struct EmbedMeanRun {
    EmbedMeanPipeline pipeline;
    std::vector<LinearEpoch> trace;
    std::size_t best_epoch = 0;
};

/// Reads cfg.features.embedding_path; when it is empty, a seeded random table
/// of cfg.features.embedding_dim columns is used instead.
EmbedMeanRun train_embed_mean(const SplitDataset& data, const Config& cfg);

struct UlmfitRun {
    UlmfitPipeline pipeline;
    LmArtifact pretrained;  // before LM fine-tuning
    LmArtifact finetuned;   // after LM fine-tuning
    std::vector<LmEpoch> pretrain_trace;
    std::vector<LmEpoch> finetune_trace;
    std::vector<ClassifierEpoch> classifier_trace;
    double pretrained_val_perplexity = 0.0;
    double finetuned_val_perplexity = 0.0;
};

struct UlmfitHooks {
    /// Start from this LM instead of pretraining one.
    std::optional<LmArtifact> resume_lm;
    std::function<void(const std::string& stage, const std::string& line)> progress;
};

/// Pretraining on the training split, LM fine-tuning, then classifier training.
UlmfitRun train_ulmfit(const SplitDataset& data, const Config& cfg, const UlmfitHooks& hooks = {});

}  // namespace fitcls
