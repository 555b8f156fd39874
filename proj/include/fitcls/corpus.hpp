#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fitcls {

// Integer codes are stable: they index confusion matrices and head outputs.
enum class FitLabel : int { Fit = 0, Small = 1, Large = 2 };

inline constexpr std::size_t kNumLabels = 3;
inline constexpr std::array<FitLabel, kNumLabels> kAllLabels = {FitLabel::Fit, FitLabel::Small,
                                                                FitLabel::Large};

inline constexpr int code(FitLabel label) { return static_cast<int>(label); }
FitLabel label_from_code(int code);
std::string_view to_string(FitLabel label);
std::optional<FitLabel> parse_label(std::string_view text);

struct Review {
    std::string id;
    std::string text;
    FitLabel label = FitLabel::Fit;

    bool operator==(const Review&) const = default;
};

using LabelHistogram = std::array<std::size_t, kNumLabels>;

enum class DatasetFormat { ModCloth, Rtr };

DatasetFormat parse_format(std::string_view name);
std::string_view to_string(DatasetFormat format);

struct LoadOptions {
    // Prepend `review_summary` (plus a space) to `review_text` when present.
    bool prepend_summary = true;
};

struct LoadResult {
    std::vector<Review> reviews;
    std::size_t skipped = 0;  // records without a usable label or text
};

/// Reads a JSON-lines dump of the ModCloth or RentTheRunway fit datasets.
///
/// Both formats carry `fit`, `review_text` and optionally `review_summary`.
/// Records whose label is not one of fit/small/large, or whose text is empty
/// after trimming, are skipped and counted. Reviews are returned in file
/// order with ids "<format>:<line>".
LoadResult load_reviews(const std::filesystem::path& path, DatasetFormat format,
                        const LoadOptions& options = {});

/// Lowercases, splits on whitespace, keeps runs of letters/digits together and
/// emits every other printable character as its own token. Input is UTF-8;
/// code points above U+007F count as letters except general punctuation.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
public:
    static constexpr int kUnk = 0;
    static constexpr int kPad = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;
    static constexpr std::size_t kNumSpecials = 4;
    static constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

    Vocabulary();

    /// Builds from token streams. Tokens are ranked by (frequency desc, token
    /// asc), filtered by min_freq and truncated so that size() <= max_size.
    static Vocabulary build(std::span<const std::vector<std::string>> docs, std::size_t min_freq,
                            std::size_t max_size = kUnlimited);

    /// Rebuilds from a stored token list (specials first), e.g. from a checkpoint.
    static Vocabulary from_tokens(std::vector<std::string> tokens,
                                  std::vector<std::size_t> frequencies);

    std::size_t size() const { return tokens_.size(); }
    int index(std::string_view token) const;  // kUnk when absent
    bool contains(std::string_view token) const;
    const std::string& token(std::size_t index) const { return tokens_.at(index); }
    std::size_t frequency(std::size_t index) const { return frequencies_.at(index); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::vector<std::size_t>& frequencies() const { return frequencies_; }

    std::vector<int> encode(std::span<const std::string> tokens) const;
    std::vector<std::string> decode(std::span<const int> ids) const;

    /// FNV-1a over the ordered token list; identifies the index space.
    std::uint64_t hash() const;

private:
    std::vector<std::string> tokens_;
    std::vector<std::size_t> frequencies_;
    std::unordered_map<std::string, int> lookup_;
};

Vocabulary build_vocabulary(std::span<const Review> reviews, std::size_t min_freq,
                            std::size_t max_size = Vocabulary::kUnlimited);

struct SplitRatios {
    double test_frac = 0.20;
    double val_frac_of_train = 0.05;
};

struct SplitDataset {
    std::vector<Review> train;
    std::vector<Review> validation;
    std::vector<Review> test;
    std::uint64_t seed = 0;
    SplitRatios ratios;
};

inline constexpr std::size_t kMinSplitSize = 20;

/// Seeded Fisher-Yates shuffle, then test = first round(test_frac*N),
/// validation = next round(val_frac*(N-|test|)), train = the rest.
SplitDataset split(std::span<const Review> reviews, std::uint64_t seed,
                   const SplitRatios& ratios = {});

/// Templated reviews whose labels are revealed by fixed phrases
/// ("runs small", "too big", "true to size", ...) surrounded by neutral filler.
/// Classes are balanced to within one review.
std::vector<Review> generate_synthetic_corpus(std::size_t n, std::uint64_t seed);

/// Phrases that reveal each label in the synthetic corpus, indexed by label code.
const std::array<std::vector<std::string>, kNumLabels>& synthetic_label_phrases();

struct DatasetStats {
    std::size_t count = 0;
    double avg_tokens = 0.0;
    std::size_t vocab_size = 0;  // distinct tokens, specials excluded
    LabelHistogram label_histogram{};
};

DatasetStats dataset_stats(std::span<const Review> reviews);
LabelHistogram label_histogram(std::span<const Review> reviews);

// Prepared split directory: train.jsonl, val.jsonl, test.jsonl, meta.json.
void write_reviews_jsonl(const std::filesystem::path& path, std::span<const Review> reviews);
std::vector<Review> read_reviews_jsonl(const std::filesystem::path& path);
void write_prepared(const std::filesystem::path& dir, const SplitDataset& data,
                    std::string_view source);
SplitDataset read_prepared(const std::filesystem::path& dir);

/// Concatenated token ids with kEos after each document.
std::vector<int> token_stream(std::span<const Review> reviews, const Vocabulary& vocab);

}  // namespace fitcls
