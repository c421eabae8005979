#include <doctest.h>

#include <cmath>

#include "cubemask/masking.hpp"

using namespace cubemask;

namespace {

// quadrature oracle for the truncated-normal mean over [0,1] with mu = 1
double truncnorm_mean_oracle(double sigma) {
    const int n = 20000;  // Simpson, even panel count
    const double h = 1.0 / n;
    auto density = [&](double x) {
        const double z = (x - 1.0) / sigma;
        return std::exp(-0.5 * z * z);
    };
    double num = 0.0, den = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = i * h;
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        num += w * x * density(x);
        den += w * density(x);
    }
    return num / den;
}

}  // namespace

TEST_CASE("ratio sampling stays inside [0,1] and collapses as sigma -> 0") {
    SeededRng rng(5);
    const MaskRatioDist wide(0.8);
    for (int i = 0; i < 20000; ++i) {
        const double r = sample_ratio(wide, rng);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
    }
    const MaskRatioDist narrow(1e-9);
    for (int i = 0; i < 100; ++i) CHECK(sample_ratio(narrow, rng) == doctest::Approx(1.0));
}

TEST_CASE("ratio sampling matches the integrated truncated-normal mean") {
    const double oracle = truncnorm_mean_oracle(0.10);
    CHECK(oracle == doctest::Approx(0.9202).epsilon(1e-3));
    SeededRng rng(42);
    const MaskRatioDist dist(0.10);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) sum += sample_ratio(dist, rng);
    CHECK(std::abs(sum / n - oracle) < 0.005);
}

TEST_CASE("mask cardinality endpoints") {
    SeededRng rng(9);
    const Shape3 s(2, 2, 2);
    for (auto strat : {MaskStrategy::PerElement, MaskStrategy::PerSpatial, MaskStrategy::PerDim}) {
        CHECK(count_masked(sample_mask(s, 1.0, strat, rng)) == 8);
        CHECK(count_masked(sample_mask(s, 0.0, strat, rng)) == 0);
    }
}

TEST_CASE("per-spatial masks whole positions") {
    SeededRng rng(10);
    const Shape3 s(2, 2, 4);
    const MaskTensor m = sample_mask(s, 0.5, MaskStrategy::PerSpatial, rng);
    CHECK(count_masked(m) == 8);  // floor(0.5*4)=2 positions x 4 dims
    for (size_t p = 0; p < s.spatial(); ++p)
        for (uint32_t i = 1; i < s.d; ++i) CHECK(m.flags[p * s.d + i] == m.flags[p * s.d]);
}

TEST_CASE("mask cardinality and structure over random cases") {
    SeededRng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const Shape3 s(1 + (uint32_t)rng.uniform_below(5), 1 + (uint32_t)rng.uniform_below(5),
                       1 + (uint32_t)rng.uniform_below(8));
        const double ratio = rng.uniform();
        const auto strat = static_cast<MaskStrategy>(rng.uniform_below(3));
        const MaskTensor m = sample_mask(s, ratio, strat, rng);
        size_t expected = 0;
        switch (strat) {
            case MaskStrategy::PerElement:
                expected = static_cast<size_t>(ratio * (double)s.total());
                break;
            case MaskStrategy::PerSpatial:
                expected = static_cast<size_t>(ratio * (double)s.spatial()) * s.d;
                for (size_t p = 0; p < s.spatial(); ++p)
                    for (uint32_t i = 1; i < s.d; ++i)
                        CHECK(m.flags[p * s.d + i] == m.flags[p * s.d]);
                break;
            case MaskStrategy::PerDim:
                expected = static_cast<size_t>(ratio * (double)s.d) * s.spatial();
                for (uint32_t i = 0; i < s.d; ++i)
                    for (size_t p = 1; p < s.spatial(); ++p)
                        CHECK(m.flags[p * s.d + i] == m.flags[i]);
                break;
        }
        CHECK(count_masked(m) == expected);
    }
}

TEST_CASE("per-element masks are marginally uniform") {
    SeededRng rng(13);
    const Shape3 s(2, 2, 4);
    std::vector<uint64_t> hits(s.total(), 0);
    const int trials = 20000;
    const double ratio = 0.5;
    for (int t = 0; t < trials; ++t) {
        const MaskTensor m = sample_mask(s, ratio, MaskStrategy::PerElement, rng);
        for (size_t k = 0; k < s.total(); ++k) hits[k] += m.flags[k];
    }
    const double p = std::floor(ratio * (double)s.total()) / (double)s.total();
    const double sd = std::sqrt(p * (1 - p) * trials);
    for (uint64_t h : hits) CHECK(std::abs((double)h - p * trials) < 4 * sd);
}

TEST_CASE("cosine schedule endpoints and the N=100 cases") {
    const UnmaskSchedule one = cosine_schedule(100, 1);
    REQUIRE(one.unmask.size() == 1);
    CHECK(one.unmask[0] == 100);

    const UnmaskSchedule two = cosine_schedule(100, 2);
    REQUIRE(two.unmask.size() == 2);
    CHECK(two.unmask[0] == 29);  // ceil(100*cos(pi/4)) = 71 masked after step 1
    CHECK(two.unmask[1] == 71);

    const UnmaskSchedule tight = cosine_schedule(8, 8);
    uint64_t sum = 0;
    for (uint64_t u : tight.unmask) sum += u;
    CHECK(sum == 8);
}

TEST_CASE("cosine schedule conservation over random cases") {
    SeededRng rng(15);
    for (int trial = 0; trial < 100; ++trial) {
        const uint64_t n = 1 + rng.uniform_below(100000);
        const uint64_t t = 1 + rng.uniform_below(n);
        const UnmaskSchedule sched = cosine_schedule(n, t);
        REQUIRE(sched.unmask.size() == t);
        uint64_t sum = 0;
        for (uint64_t u : sched.unmask) sum += u;  // u >= 0 by type; masked counts nonincreasing
        CHECK(sum == n);
    }
}

TEST_CASE("cosine schedule rejects invalid step counts") {
    CHECK_THROWS_AS(cosine_schedule(10, 0), ConfigError);
    CHECK_THROWS_AS(cosine_schedule(10, 11), ConfigError);
    CHECK_THROWS_AS(cosine_schedule(0, 1), ConfigError);
}

TEST_CASE("select_unmask endpoints and errors") {
    SeededRng rng(19);
    const std::vector<size_t> masked = {3, 7, 11, 40};
    CHECK(select_unmask(masked, 4, rng) == masked);
    CHECK(select_unmask(masked, 0, rng).empty());
    CHECK_THROWS_AS(select_unmask(masked, 5, rng), ConfigError);
}

TEST_CASE("select_unmask picks uniformly") {
    SeededRng rng(21);
    const std::vector<size_t> masked = {0, 1, 2, 3};
    std::array<uint64_t, 4> hits{};
    const int trials = 100000;
    for (int t = 0; t < trials; ++t)
        for (size_t idx : select_unmask(masked, 2, rng)) ++hits[idx];
    for (uint64_t h : hits) CHECK(std::abs((double)h / trials - 0.5) < 0.01);
}
