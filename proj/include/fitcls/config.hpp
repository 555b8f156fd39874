#pragma once

#include "fitcls/corpus.hpp"
#include "fitcls/features.hpp"
#include "fitcls/finetune.hpp"
#include "fitcls/langmodel.hpp"
#include "fitcls/linear.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace fitcls {

struct DatasetSection {
    std::string path;
    std::string format = "modcloth";
};

struct SplitSection {
    std::uint64_t seed = 0;
    SplitRatios ratios;
};

struct FeaturesSection {
    std::size_t min_freq = 1;
    std::size_t max_vocab = 0;  // 0 = unlimited
    TfidfOptions tfidf;
    std::string embedding_path;
    std::size_t embedding_dim = 100;
};

/// Pretraining plus the LM fine-tuning stage.
struct LmSection {
    LmDims dims;  // vocab is filled from the data
    LmTrainConfig train;
    std::size_t min_freq = 2;
    std::size_t max_vocab = 8000;  // 0 = unlimited
    std::size_t finetune_epochs = 2;
    double finetune_lr = 0.02;
    std::size_t finetune_patience = 1;
};

struct ClassifierSection {
    FineTunePlan plan;
    std::size_t head_hidden = 50;
    double head_dropout = 0.1;
    std::size_t max_tokens = 400;
};

struct Config {
    DatasetSection dataset;
    SplitSection split;
    FeaturesSection features;
    LinearTrainConfig linear;
    LmSection lm;
    ClassifierSection finetune;
};

/// Missing keys take defaults; unknown keys at any level are an InputError.
Config config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Config& cfg);
Config load_config(const std::filesystem::path& path);

/// Hash of the fully resolved config.
std::string config_hash(const Config& cfg);

}  // namespace fitcls
