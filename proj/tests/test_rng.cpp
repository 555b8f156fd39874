#include "fitcls/rng.hpp"

#include <doctest.h>

#include <array>
#include <cmath>
#include <numeric>
#include <vector>

using fitcls::fnv1a64;
using fitcls::Pcg32;

TEST_CASE("pcg32 matches the reference stream") {
    // pcg32-demo output for initstate 42, initseq 54.
    Pcg32 rng(42, 54);
    const std::array<std::uint32_t, 6> expected = {0xa15c02b7, 0x7b47f409, 0xba1d3330,
                                                   0x83d2f293, 0xbfa4784b, 0xcbed606e};
    for (auto e : expected) CHECK(rng.next_u32() == e);
}

TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("named streams are reproducible and distinct") {
    auto a = Pcg32::named(5, "lm/init");
    auto b = Pcg32::named(5, "lm/init");
    auto c = Pcg32::named(5, "lm/shuffle");
    auto d = Pcg32::named(6, "lm/init");
    bool differs_c = false, differs_d = false;
    for (int i = 0; i < 16; ++i) {
        auto x = a.next_u32();
        CHECK(x == b.next_u32());
        differs_c |= x != c.next_u32();
        differs_d |= x != d.next_u32();
    }
    CHECK(differs_c);
    CHECK(differs_d);
}

TEST_CASE("uniform and bounded draws stay in range") {
    Pcg32 rng(9);
    for (int i = 0; i < 10000; ++i) {
        double u = rng.uniform();
        CHECK((u >= 0.0 && u < 1.0));
        double v = rng.uniform(-2.0, 3.0);
        CHECK((v >= -2.0 && v < 3.0));
        CHECK(rng.below(7) < 7);
    }
}

TEST_CASE("bounded draws are close to uniform") {
    Pcg32 rng(11);
    std::array<int, 6> counts{};
    const int n = 60000;
    for (int i = 0; i < n; ++i) ++counts[rng.below(6)];
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - n / 6.0) * (c - n / 6.0) / (n / 6.0);
    CHECK(chi2 < 20.5);  // 5 dof, p ~ 0.001
}

TEST_CASE("normal draws have unit moments") {
    Pcg32 rng(13);
    const int n = 100000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.02);
    CHECK(std::abs(s2 / n - 1.0) < 0.03);
}

TEST_CASE("shuffle is a seeded permutation") {
    std::vector<int> a(50), b(50);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), 0);
    Pcg32 r1(3), r2(3);
    r1.shuffle(std::span(a));
    r2.shuffle(std::span(b));
    CHECK(a == b);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> ident(50);
    std::iota(ident.begin(), ident.end(), 0);
    CHECK(sorted == ident);
    CHECK(a != ident);
}
