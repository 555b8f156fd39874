#pragma once

#include "fitcls/corpus.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fitcls {

/// Sorted sparse vector. Indices strictly increase and are < dim.
struct SparseVector {
    std::size_t dim = 0;
    std::vector<std::uint32_t> indices;
    std::vector<double> values;

    std::size_t nnz() const { return indices.size(); }
    double norm() const;
    double dot(std::span<const double> dense) const;
    std::vector<double> to_dense() const;
};

/// Every coordinate of `dense` becomes an entry, zeros included.
SparseVector to_sparse(std::span<const double> dense);

struct TfidfOptions {
    bool sublinear_tf = false;  // 1 + ln(tf) instead of raw counts
    double max_df = 1.0;        // terms with df/N above this fraction get weight 0
};

/// Smoothed inverse document frequencies fitted on training documents:
/// idf(t) = ln((1 + N) / (1 + df(t))) + 1.
class TfidfModel {
public:
    static TfidfModel fit(std::span<const std::vector<int>> docs, std::size_t vocab_dim,
                          const TfidfOptions& options = {});
    /// Rebuilds a fitted model from persisted statistics.
    static TfidfModel from_stats(std::size_t doc_count, std::vector<std::size_t> df,
                                 const TfidfOptions& options = {});

    /// count(t) * idf(t) per distinct term, L2-normalized. Empty doc -> zero vector.
    SparseVector transform(std::span<const int> doc) const;

    std::size_t dim() const { return idf_.size(); }
    std::size_t doc_count() const { return doc_count_; }
    const std::vector<std::size_t>& df() const { return df_; }
    const std::vector<double>& idf() const { return idf_; }
    const TfidfOptions& options() const { return options_; }

private:
    std::size_t doc_count_ = 0;
    std::vector<std::size_t> df_;
    std::vector<double> idf_;
    TfidfOptions options_;
};

/// Dense V x d table aligned with a vocabulary. Rows of tokens missing from
/// the source file (and of the special tokens) are exactly zero.
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(std::size_t rows, std::size_t dim, std::vector<double> data, double coverage = 0.0);

    std::size_t rows() const { return rows_; }
    std::size_t dim() const { return dim_; }
    double coverage() const { return coverage_; }
    std::span<const double> row(std::size_t i) const;
    std::span<double> row(std::size_t i);
    const std::vector<double>& data() const { return data_; }

private:
    std::size_t rows_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> data_;
    double coverage_ = 0.0;
};

/// Reads a plain-text vector file ("token v1 ... vd" per line). Every line is
/// validated against `dim`; only tokens in `vocab` are kept, first occurrence wins.
EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                               std::size_t dim);

/// Writes non-zero, non-special rows in the same text format. Values are
/// printed with 17 significant digits so a reload is bit-identical.
void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table,
                     const Vocabulary& vocab);

/// Gaussian vectors for every non-special vocabulary token, N(0, 1/d).
/// Stand-in for pretrained vectors in self-contained runs.
EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed);

/// Element-wise mean of the doc's embedding rows (zero rows count). Empty doc -> zeros.
std::vector<double> mean_pool(std::span<const int> doc, const EmbeddingTable& table);

}  // namespace fitcls
