#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "cubemask/core.hpp"

using namespace cubemask;

TEST_CASE("flat_index basics") {
    const Shape3 s(2, 2, 3);
    CHECK(flat_index(s, 0, 0, 0) == 0);
    CHECK(flat_index(s, 1, 1, 2) == 11);
    CHECK(flat_index(Shape3(16, 16, 768), 0, 1, 0) == 768);
    CHECK_THROWS_AS(flat_index(s, 2, 0, 0), ShapeError);
    CHECK_THROWS_AS(flat_index(s, 0, 2, 0), ShapeError);
    CHECK_THROWS_AS(flat_index(s, 0, 0, 3), ShapeError);
}

TEST_CASE("flat_index is a bijection over the shape") {
    const Shape3 s(3, 5, 7);
    std::set<size_t> seen;
    for (uint32_t x = 0; x < s.h; ++x)
        for (uint32_t y = 0; y < s.w; ++y)
            for (uint32_t i = 0; i < s.d; ++i) seen.insert(flat_index(s, x, y, i));
    CHECK(seen.size() == s.total());
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == s.total() - 1);
}

TEST_CASE("shape validation") {
    CHECK_THROWS_AS(Shape3(0, 1, 1), ShapeError);
    CHECK_THROWS_AS(Shape3(1, 0, 1), ShapeError);
    CHECK_THROWS_AS(Shape3(1, 1, 0), ShapeError);
}

TEST_CASE("count_masked") {
    const Shape3 s(2, 2, 2);
    CHECK(count_masked(MaskTensor(s)) == 0);
    CHECK(count_masked(MaskTensor::full(s)) == 8);
    MaskTensor m(s);
    m.flags[0] = 1;
    m.flags[5] = 1;
    CHECK(count_masked(m) == 2);
}

TEST_CASE("tensor invariants are enforced") {
    const Shape3 s(2, 2, 2);
    CHECK_THROWS_AS(FeatureTensor(s, std::vector<float>(7, 0.f)), ShapeError);
    CHECK_THROWS_AS(TokenTensor(s, 4, std::vector<uint16_t>(8, 4)), DataError);
    CHECK_THROWS_AS(MaskTensor(s, std::vector<uint8_t>(9, 0)), ShapeError);
    FeatureTensor z = FeatureTensor::zeros(s);
    z.values[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(z.validate_finite(), DataError);
}

TEST_CASE("rng streams are reproducible per seed") {
    SeededRng a(12345), b(12345), c(54321);
    bool equal = true, different = false;
    for (int i = 0; i < 1000000; ++i) {
        const uint64_t va = a.next_u64();
        equal = equal && va == b.next_u64();
        different = different || va != c.next_u64();
    }
    CHECK(equal);
    CHECK(different);
}

TEST_CASE("rng state round-trips") {
    SeededRng a(99);
    for (int i = 0; i < 17; ++i) a.next_u64();
    SeededRng b = SeededRng::from_state(a.state());
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("uniform_below is unbiased over a small range") {
    SeededRng rng(7);
    std::array<uint64_t, 5> counts{};
    const int n = 200000;
    for (int i = 0; i < n; ++i) ++counts[rng.uniform_below(5)];
    for (uint64_t c : counts) {
        CHECK(c > n / 5 - 3 * std::sqrt(n * 0.2 * 0.8));
        CHECK(c < n / 5 + 3 * std::sqrt(n * 0.2 * 0.8));
    }
}

TEST_CASE("normal draws have roughly standard moments") {
    SeededRng rng(11);
    double sum = 0, sq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}
