#include "fitcls/error.hpp"
#include "fitcls/features.hpp"
#include "fitcls/rng.hpp"
#include "tmpdir.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace fitcls;
using fitcls::testing::TempDir;

namespace {

// Vocab indices used below: 4 = "small", 5 = "dress", 6 = "never seen".
const std::vector<std::vector<int>> kTwoDocs = {{4, 5}, {5}};

std::vector<std::vector<int>> random_corpus(Pcg32& rng, std::size_t docs, std::size_t vocab) {
    std::vector<std::vector<int>> out(docs);
    for (auto& d : out) {
        const auto len = rng.below(12);
        for (std::size_t i = 0; i < len; ++i) d.push_back(static_cast<int>(4 + rng.below(vocab - 4)));
    }
    out[0].push_back(4);
    return out;
}

}  // namespace

TEST_CASE("idf values") {
    auto m = TfidfModel::fit(kTwoDocs, 7);
    CHECK(m.doc_count() == 2);
    CHECK(m.idf()[5] == doctest::Approx(std::log(3.0 / 3.0) + 1.0).epsilon(1e-12));
    CHECK(m.idf()[4] == doctest::Approx(std::log(3.0 / 2.0) + 1.0).epsilon(1e-12));
    CHECK(m.idf()[4] == doctest::Approx(1.405465).epsilon(1e-6));
    CHECK(m.idf()[6] == doctest::Approx(2.098612).epsilon(1e-6));
    for (double v : m.idf()) CHECK((std::isfinite(v) && v >= 0.0));
    for (auto df : m.df()) CHECK(df <= m.doc_count());
}

TEST_CASE("tfidf transform example") {
    auto m = TfidfModel::fit(kTwoDocs, 7);
    auto v = m.transform(std::vector<int>{4, 4, 5});
    const double a = 2.0 * (std::log(1.5) + 1.0), b = 1.0;
    const double norm = std::sqrt(a * a + b * b);
    REQUIRE(v.indices == std::vector<std::uint32_t>{4, 5});
    CHECK(v.values[0] == doctest::Approx(a / norm).epsilon(1e-12));
    CHECK(v.values[1] == doctest::Approx(b / norm).epsilon(1e-12));
    CHECK(v.values[0] == doctest::Approx(0.94215).epsilon(1e-5));
    CHECK(v.values[1] == doctest::Approx(0.33518).epsilon(1e-4));
    CHECK(norm == doctest::Approx(2.98350).epsilon(1e-5));
    CHECK(v.norm() == doctest::Approx(1.0).epsilon(1e-12));

    auto empty = m.transform(std::vector<int>{});
    CHECK(empty.nnz() == 0);
    CHECK(empty.norm() == 0.0);
}

TEST_CASE("tfidf is invariant to scaling counts") {
    auto m = TfidfModel::fit(kTwoDocs, 7);
    auto once = m.transform(std::vector<int>{4, 5, 5});
    auto thrice = m.transform(std::vector<int>{4, 5, 5, 4, 5, 5, 4, 5, 5});
    REQUIRE(once.indices == thrice.indices);
    for (std::size_t i = 0; i < once.nnz(); ++i) CHECK(once.values[i] == doctest::Approx(thrice.values[i]));
}

TEST_CASE("tfidf rejects all-empty training docs") {
    std::vector<std::vector<int>> empty(3);
    CHECK_THROWS_AS(TfidfModel::fit(empty, 5), InputError);
}

TEST_CASE("idf is non-increasing in df and outputs stay sparse") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Pcg32 rng(seed);
        auto docs = random_corpus(rng, 30, 40);
        auto m = TfidfModel::fit(docs, 40);
        for (std::size_t i = 0; i < 40; ++i) {
            for (std::size_t j = 0; j < 40; ++j) {
                if (m.df()[i] <= m.df()[j]) CHECK(m.idf()[i] >= m.idf()[j]);
            }
        }
        for (const auto& d : docs) {
            auto v = m.transform(d);
            std::set<int> distinct(d.begin(), d.end());
            CHECK(v.nnz() <= distinct.size());
            for (std::size_t k = 0; k < v.nnz(); ++k) {
                CHECK(distinct.count(static_cast<int>(v.indices[k])) == 1);
                if (k > 0) CHECK(v.indices[k] > v.indices[k - 1]);
                CHECK(v.indices[k] < v.dim);
            }
            const double n = v.norm();
            CHECK((n == 0.0 || std::abs(n - 1.0) < 1e-9));
        }
    }
}

TEST_CASE("embedding loader") {
    TempDir dir;
    std::vector<std::vector<std::string>> docs = {{"dress", "fits", "skirt"}};
    auto vocab = Vocabulary::build(docs, 1);
    auto path = dir.write("vec.txt", "dress 0.1 0.2 0.3\nunrelated 1 1 1\nfits -1 0 2.5\ndress 9 9 9\n");
    auto table = load_embeddings(path, vocab, 3);
    CHECK(table.rows() == vocab.size());
    CHECK(table.dim() == 3);
    auto dress = table.row(static_cast<std::size_t>(vocab.index("dress")));
    CHECK(std::vector<double>(dress.begin(), dress.end()) == std::vector<double>{0.1, 0.2, 0.3});
    auto skirt = table.row(static_cast<std::size_t>(vocab.index("skirt")));
    CHECK(std::all_of(skirt.begin(), skirt.end(), [](double x) { return x == 0.0; }));
    for (std::size_t s = 0; s < Vocabulary::kNumSpecials; ++s) {
        auto r = table.row(s);
        CHECK(std::all_of(r.begin(), r.end(), [](double x) { return x == 0.0; }));
    }
    CHECK(table.coverage() == doctest::Approx(2.0 / 3.0));

    auto bad = dir.write("bad.txt", "dress 0.1 0.2 0.3\nfits 0.1 0.2\n");
    try {
        load_embeddings(bad, vocab, 3);
        FAIL("expected a dimension error");
    } catch (const InputError& e) {
        CHECK(std::string(e.what()).find(".txt:2:") != std::string::npos);
    }
    CHECK_THROWS_AS(load_embeddings(dir / "nope.txt", vocab, 3), InputError);
}

TEST_CASE("embedding save/load is bit-identical") {
    TempDir dir;
    std::vector<std::vector<std::string>> docs = {{"a", "b", "c", "d"}};
    auto vocab = Vocabulary::build(docs, 1);
    auto table = random_embeddings(vocab, 7, 3);
    save_embeddings(dir / "t.txt", table, vocab);
    auto back = load_embeddings(dir / "t.txt", vocab, 7);
    CHECK(back.data() == table.data());
}

TEST_CASE("mean pool") {
    std::vector<double> data = {0, 0, 0, 0, 0, 0, 0, 0,  // specials
                                1.5, -2.0, 0.25, 4.0};
    EmbeddingTable t(6, 2, data);
    auto rep = mean_pool(std::vector<int>{4, 4, 4, 4, 4}, t);
    CHECK(rep == std::vector<double>{1.5, -2.0});
    auto two = mean_pool(std::vector<int>{4, 5}, t);
    CHECK(two[0] == doctest::Approx((1.5 + 0.25) / 2));
    CHECK(two[1] == doctest::Approx((-2.0 + 4.0) / 2));
    auto with_zero = mean_pool(std::vector<int>{4, 0}, t);
    CHECK(with_zero[0] == doctest::Approx(0.75));
    CHECK(mean_pool(std::vector<int>{}, t) == std::vector<double>{0.0, 0.0});
}

TEST_CASE("mean pool is permutation invariant and scale equivariant") {
    std::vector<std::vector<std::string>> docs = {{"a", "b", "c", "d", "e"}};
    auto vocab = Vocabulary::build(docs, 1);
    auto table = random_embeddings(vocab, 5, 1);
    std::vector<double> scaled = table.data();
    for (double& x : scaled) x *= 3.0;
    EmbeddingTable t3(table.rows(), table.dim(), scaled);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Pcg32 rng(seed);
        std::vector<int> doc;
        for (int i = 0; i < 9; ++i) doc.push_back(static_cast<int>(rng.below(vocab.size())));
        auto base = mean_pool(doc, table);
        auto perm = doc;
        rng.shuffle(std::span(perm));
        auto p = mean_pool(perm, table);
        auto k = mean_pool(doc, t3);
        for (std::size_t j = 0; j < base.size(); ++j) {
            CHECK(p[j] == doctest::Approx(base[j]).epsilon(1e-12));
            CHECK(k[j] == doctest::Approx(3.0 * base[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("sparse vector helpers") {
    std::vector<double> dense = {0.0, 2.0, 0.0, -1.0};
    auto s = to_sparse(dense);
    CHECK(s.to_dense() == dense);
    CHECK(s.dot(std::vector<double>{1, 1, 1, 1}) == doctest::Approx(1.0));
}
