#pragma once

#include "fitcls/corpus.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace fitcls {

/// Rows are gold labels, columns predictions.
struct ConfusionMatrix {
    std::array<std::array<std::size_t, kNumLabels>, kNumLabels> counts{};

    void add(FitLabel gold, FitLabel pred) { ++counts[code(gold)][code(pred)]; }
    std::size_t total() const;
    std::size_t trace() const;
    std::size_t row_sum(FitLabel gold) const;
    std::size_t col_sum(FitLabel pred) const;
};

ConfusionMatrix confusion(std::span<const FitLabel> preds, std::span<const FitLabel> golds);

/// Equals accuracy for single-label multiclass predictions.
double micro_f1(std::span<const FitLabel> preds, std::span<const FitLabel> golds);

struct ClassMetrics {
    double precision = 0.0;  // 0 when nothing was predicted as the class
    double recall = 0.0;     // 0 when the class never occurs
    std::size_t support = 0;
};

inline constexpr int kReportSchemaVersion = 1;

struct EvalReport {
    std::string dataset_id;
    std::string split_id;
    std::string model_id;
    double micro_f1 = 0.0;
    std::array<ClassMetrics, kNumLabels> per_class{};
    ConfusionMatrix confusion;
    std::size_t n = 0;
    std::string config_hash;
    std::string dataset_checksum;
    std::string timestamp;
    nlohmann::json config = nlohmann::json::object();
};

/// Fills metrics from predictions; identifiers are left to the caller.
EvalReport make_report(std::span<const FitLabel> preds, std::span<const FitLabel> golds);

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// Most frequent label; ties go to the lowest code.
FitLabel majority_label(std::span<const FitLabel> train_labels);
EvalReport majority_baseline(std::span<const FitLabel> train_labels, std::span<const FitLabel> eval_labels);

std::vector<FitLabel> labels_of(std::span<const Review> reviews);

/// Order-sensitive FNV-1a digest over ids, texts and labels, as 16 hex digits.
std::string dataset_checksum(std::span<const Review> reviews);
std::string hex64(std::uint64_t value);
std::string utc_timestamp();

using PredictFn = std::function<FitLabel(const Review&)>;

struct EvalContext {
    std::string dataset_id;
    std::string split_id;
    std::string model_id;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t model_vocab_hash = 0;
    std::uint64_t data_vocab_hash = 0;
};

/// Runs predict over the split in stored order. Throws ArtifactError when the
/// vocabulary hashes disagree.
EvalReport evaluate(const PredictFn& predict, std::span<const Review> split, const EvalContext& ctx);

/// Same contract with a predictor that labels the whole split at once.
using BatchPredictFn = std::function<std::vector<FitLabel>(std::span<const Review>)>;
EvalReport evaluate_batch(const BatchPredictFn& predict, std::span<const Review> split, const EvalContext& ctx);

/// Aligned text table: one row per model, one micro-F1 column per dataset.
std::string render_table(std::span<const EvalReport> reports);

}  // namespace fitcls
