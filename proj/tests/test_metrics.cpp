#include <doctest.h>

#include <cmath>

#include "asymtok/metrics.hpp"
#include "asymtok/rng.hpp"

using namespace asymtok;

namespace {

// Independent evaluation in 128-bit arithmetic, term by term.
unsigned __int128 flops_oracle(uint64_t n, uint64_t d, uint64_t m) {
    const unsigned __int128 nn = n, dd = d, mm = m;
    return 4 * nn * dd * dd + 2 * nn * nn * dd + 3 * nn * dd * mm;
}

CostModel phi_like() {
    CostModel c;
    c.hidden_dim = 3072;
    c.ffn_dim = 8192;
    c.num_layers = 32;
    c.num_heads = 32;
    return c;
}

}  // namespace

TEST_CASE("flops formula unit case: n=d=m=1 gives 9 per layer") {
    CostModel c;
    c.hidden_dim = 1;
    c.ffn_dim = 1;
    c.num_layers = 3;
    c.num_heads = 1;
    CHECK(flops_per_layer(1, c) == 9);
    CHECK(flops_total(1, c) == 27);
    CHECK_THROWS_AS(flops_per_layer(0, c), InputError);
}

TEST_CASE("flops matches the independent 128-bit evaluation") {
    const CostModel c = phi_like();
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const uint64_t n = 1 + rng.below(5000);
        const unsigned __int128 expect = flops_oracle(n, 3072, 8192);
        CHECK(static_cast<unsigned __int128>(flops_per_layer(n, c)) == expect);
    }
    // the DocVQA-shaped case used in the parity check
    CHECK(static_cast<unsigned __int128>(flops_per_layer(2267, c)) ==
          flops_oracle(2267, 3072, 8192));
}

TEST_CASE("flops is strictly increasing and convex in n") {
    const CostModel c = phi_like();
    uint64_t prev = 0;
    uint64_t prev_delta = 0;
    for (uint64_t n = 1; n <= 200; ++n) {
        const uint64_t f = flops_per_layer(n, c);
        CHECK(f > prev);
        if (n >= 2) {
            const uint64_t delta = f - prev;
            CHECK(delta >= prev_delta);  // convexity: increments grow
            prev_delta = delta;
        }
        prev = f;
    }
    // superlinearity: doubling n more than doubles the flops
    CHECK(flops_per_layer(2000, c) > 2 * flops_per_layer(1000, c));
}

TEST_CASE("flops_saved boundaries and monotonicity") {
    const CostModel c = phi_like();
    CHECK(flops_saved(2267, 2267, c) == doctest::Approx(0.0));
    double prev = 1.0;
    for (uint64_t kept = 100; kept <= 2267; kept += 100) {
        const double s = flops_saved(2267, kept, c);
        CHECK(s <= prev);
        prev = s;
    }
    CHECK_THROWS_AS(flops_saved(100, 0, c), InputError);
    CHECK_THROWS_AS(flops_saved(100, 101, c), InputError);
}

TEST_CASE("flops_saved tracks the token reduction when the quadratic term is removed") {
    // With the n^2 attention term subtracted analytically the model is linear
    // in n, so the saving equals the token reduction fraction exactly.
    const uint64_t d = 3072, m = 8192;
    auto linear_part = [&](uint64_t n) {
        return static_cast<double>(4 * n * d * d + 3 * n * d * m);
    };
    const double saving = 1.0 - linear_part(1151) / linear_part(2267);
    CHECK(saving == doctest::Approx(1.0 - 1151.0 / 2267.0).epsilon(1e-12));
}

TEST_CASE("kv_bytes is exactly linear in n") {
    CostModel c;
    c.hidden_dim = 64;
    c.ffn_dim = 256;
    c.num_layers = 4;
    c.num_heads = 4;
    c.bytes_per_element = 2;
    CHECK(kv_bytes(0, c) == 0);
    CHECK(kv_bytes(10, c) == 10ull * 4 * 2 * 64 * 2);
    CHECK(kv_bytes(20, c) == 2 * kv_bytes(10, c));
    // pruned/full ratio equals the token ratio exactly
    const double ratio = static_cast<double>(kv_bytes(36, c)) / static_cast<double>(kv_bytes(72, c));
    CHECK(ratio == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("usage_report ties the fields together") {
    const CostModel c = CostModel::from_config(ModelConfig{});
    const UsageReport r = usage_report(40, 24, 40, c);
    CHECK(r.flops_saved ==
          doctest::Approx(1.0 - static_cast<double>(r.flops_pruned) /
                                    static_cast<double>(r.flops_full)));
    CHECK(r.kv_bytes_pruned < r.kv_bytes_full);
    CHECK(r.peak_token_count == 40);
}

TEST_CASE("reference-dims parity: savings land near the reported table") {
    // d=3072, m=8192, n_full = 2231 vision + 36 query tokens.
    const CostModel c = phi_like();
    const uint64_t vision = 2231, query = 36;
    const uint64_t n_full = vision + query;
    auto saved_at = [&](double keep) {
        const uint64_t kept =
            static_cast<uint64_t>(std::floor(static_cast<double>(vision) * keep + 1e-9));
        return flops_saved(n_full, kept + query, c);
    };
    CHECK(std::abs(saved_at(0.75) - 0.28) < 0.06);
    CHECK(std::abs(saved_at(0.65) - 0.39) < 0.06);
    CHECK(std::abs(saved_at(0.50) - 0.54) < 0.06);
}
