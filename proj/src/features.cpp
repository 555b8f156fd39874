#include "fitcls/features.hpp"

#include "fitcls/error.hpp"
#include "fitcls/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace fitcls {

double SparseVector::norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
}

double SparseVector::dot(std::span<const double> dense) const {
    if (dense.size() != dim) {
        throw ShapeError("sparse dot: dim " + std::to_string(dim) + " vs dense " +
                         std::to_string(dense.size()));
    }
    double s = 0.0;
    for (std::size_t k = 0; k < indices.size(); ++k) s += values[k] * dense[indices[k]];
    return s;
}

std::vector<double> SparseVector::to_dense() const {
    std::vector<double> out(dim, 0.0);
    for (std::size_t k = 0; k < indices.size(); ++k) out[indices[k]] = values[k];
    return out;
}

SparseVector to_sparse(std::span<const double> dense) {
    SparseVector v;
    v.dim = dense.size();
    v.indices.resize(dense.size());
    v.values.assign(dense.begin(), dense.end());
    for (std::size_t i = 0; i < dense.size(); ++i) v.indices[i] = static_cast<std::uint32_t>(i);
    return v;
}

// ---------------------------------------------------------------------------
// TF-IDF

namespace {

std::vector<double> smoothed_idf(std::size_t n, const std::vector<std::size_t>& df,
                                 const TfidfOptions& options) {
    std::vector<double> idf(df.size());
    const double nd = static_cast<double>(n);
    for (std::size_t t = 0; t < df.size(); ++t) {
        double d = static_cast<double>(df[t]);
        if (options.max_df < 1.0 && n > 0 && d / nd > options.max_df) {
            idf[t] = 0.0;
        } else {
            idf[t] = std::log((1.0 + nd) / (1.0 + d)) + 1.0;
        }
    }
    return idf;
}

}  // namespace

TfidfModel TfidfModel::fit(std::span<const std::vector<int>> docs, std::size_t vocab_dim,
                           const TfidfOptions& options) {
    bool any = std::any_of(docs.begin(), docs.end(), [](const auto& d) { return !d.empty(); });
    if (!any) throw InputError("TF-IDF fit needs at least one non-empty document");

    std::vector<std::size_t> df(vocab_dim, 0);
    std::vector<int> seen;
    for (const auto& doc : docs) {
        seen.assign(doc.begin(), doc.end());
        std::sort(seen.begin(), seen.end());
        seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
        for (int t : seen) {
            if (t < 0 || static_cast<std::size_t>(t) >= vocab_dim) {
                throw ShapeError("TF-IDF fit: token index " + std::to_string(t) + " outside vocabulary of " +
                                 std::to_string(vocab_dim));
            }
            ++df[static_cast<std::size_t>(t)];
        }
    }
    return from_stats(docs.size(), std::move(df), options);
}

TfidfModel TfidfModel::from_stats(std::size_t doc_count, std::vector<std::size_t> df,
                                  const TfidfOptions& options) {
    for (auto d : df) {
        if (d > doc_count) throw InputError("TF-IDF statistics: df exceeds document count");
    }
    TfidfModel m;
    m.doc_count_ = doc_count;
    m.options_ = options;
    m.idf_ = smoothed_idf(doc_count, df, options);
    m.df_ = std::move(df);
    return m;
}

SparseVector TfidfModel::transform(std::span<const int> doc) const {
    std::map<int, std::size_t> counts;
    for (int t : doc) {
        if (t < 0 || static_cast<std::size_t>(t) >= idf_.size()) {
            throw ShapeError("TF-IDF transform: token index " + std::to_string(t) + " outside vocabulary");
        }
        ++counts[t];
    }
    SparseVector v;
    v.dim = idf_.size();
    for (auto [t, c] : counts) {
        double tf = options_.sublinear_tf ? 1.0 + std::log(static_cast<double>(c)) : static_cast<double>(c);
        double w = tf * idf_[static_cast<std::size_t>(t)];
        if (w == 0.0) continue;
        v.indices.push_back(static_cast<std::uint32_t>(t));
        v.values.push_back(w);
    }
    double n = v.norm();
    if (n > 0.0) {
        for (double& w : v.values) w /= n;
    }
    return v;
}

// ---------------------------------------------------------------------------
// Embeddings

EmbeddingTable::EmbeddingTable(std::size_t rows, std::size_t dim, std::vector<double> data, double coverage)
    : rows_(rows), dim_(dim), data_(std::move(data)), coverage_(coverage) {
    if (data_.size() != rows_ * dim_) throw ShapeError("embedding table data does not match rows x dim");
    for (double v : data_) {
        if (!std::isfinite(v)) throw NumericError("embedding table holds a non-finite value");
    }
}

std::span<const double> EmbeddingTable::row(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * dim_, dim_);
}

std::span<double> EmbeddingTable::row(std::size_t i) {
    return std::span<double>(data_).subspan(i * dim_, dim_);
}

EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab,
                               std::size_t dim) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read embedding file " + path.string());
    if (dim == 0) throw InputError("embedding dimension must be positive");

    std::vector<double> data(vocab.size() * dim, 0.0);
    std::vector<bool> filled(vocab.size(), false);
    std::size_t found = 0;
    std::string line;
    std::size_t line_no = 0;
    std::vector<double> values;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::istringstream fields(line);
        std::string token;
        fields >> token;
        values.clear();
        std::string field;
        while (fields >> field) {
            double x = 0.0;
            auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), x);
            if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(x)) {
                throw InputError(path.string() + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
            }
            values.push_back(x);
        }
        if (values.size() != dim) {
            throw InputError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                             std::to_string(dim) + " values, found " + std::to_string(values.size()));
        }
        int idx = vocab.index(token);
        if (idx < static_cast<int>(Vocabulary::kNumSpecials) || !vocab.contains(token)) continue;
        auto row = static_cast<std::size_t>(idx);
        if (filled[row]) continue;
        filled[row] = true;
        ++found;
        std::copy(values.begin(), values.end(), data.begin() + static_cast<std::ptrdiff_t>(row * dim));
    }
    std::size_t regular = vocab.size() - Vocabulary::kNumSpecials;
    double coverage = regular == 0 ? 0.0 : static_cast<double>(found) / static_cast<double>(regular);
    return EmbeddingTable(vocab.size(), dim, std::move(data), coverage);
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table,
                     const Vocabulary& vocab) {
    if (table.rows() != vocab.size()) throw ShapeError("embedding table rows do not match vocabulary");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    char buf[64];
    for (std::size_t i = Vocabulary::kNumSpecials; i < table.rows(); ++i) {
        auto row = table.row(i);
        if (std::all_of(row.begin(), row.end(), [](double v) { return v == 0.0; })) continue;
        out << vocab.token(i);
        for (double v : row) {
            auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
            out << ' ' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
        }
        out << '\n';
    }
    if (!out) throw InputError("write failed for " + path.string());
}

EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed) {
    Pcg32 rng = Pcg32::named(seed, "features/random_embeddings");
    std::vector<double> data(vocab.size() * dim, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (std::size_t i = Vocabulary::kNumSpecials; i < vocab.size(); ++i) {
        for (std::size_t j = 0; j < dim; ++j) data[i * dim + j] = scale * rng.normal();
    }
    return EmbeddingTable(vocab.size(), dim, std::move(data), 1.0);
}

std::vector<double> mean_pool(std::span<const int> doc, const EmbeddingTable& table) {
    std::vector<double> out(table.dim(), 0.0);
    if (doc.empty()) return out;
    for (int t : doc) {
        if (t < 0 || static_cast<std::size_t>(t) >= table.rows()) {
            throw ShapeError("mean_pool: token index " + std::to_string(t) + " outside embedding table");
        }
        auto row = table.row(static_cast<std::size_t>(t));
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += row[j];
    }
    const double n = static_cast<double>(doc.size());
    for (double& v : out) v /= n;
    return out;
}

}  // namespace fitcls
