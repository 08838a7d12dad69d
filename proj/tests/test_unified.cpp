#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ctr/unified.hpp"
#include "test_util.hpp"

using namespace ctr;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

constexpr std::size_t K = 2, T = 3, N = 5, C = 3, CO = 4;

std::vector<double> dense_topology(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::vector<double> a(n * n);
    for (double& v : a) v = unit(rng);
    return a;
}

const ConstraintReport& find(const std::vector<ConstraintReport>& reports, int id) {
    for (const auto& r : reports)
        if (r.constraint_id == id) return r;
    REQUIRE(false);
    return reports.front();
}

void expect_pattern(const std::vector<ConstraintReport>& reports,
                    const std::vector<bool>& holds) {
    REQUIRE(reports.size() == 5);
    for (int id = 1; id <= 5; ++id) {
        const ConstraintReport& r = find(reports, id);
        INFO("constraint ", id, ": ", r.describe());
        CHECK(r.holds == holds[id - 1]);
        CHECK_FALSE(r.inconclusive);
        if (!holds[id - 1]) CHECK(r.worst_violation > kViolationFailTol);
    }
}

} // namespace

TEST_CASE("proportionality gap: scaling, sign, zeros, genuine violation") {
    std::vector<double> a = {1, 2, 3};
    std::vector<double> b = {-2, -4, -6};
    bool deg = true;
    CHECK(proportionality_gap(a.data(), b.data(), 3, &deg) < 1e-15);
    CHECK_FALSE(deg);

    std::vector<double> z = {0, 0, 0};
    CHECK(proportionality_gap(a.data(), z.data(), 3, &deg) == 0.0);
    CHECK(deg);

    std::vector<double> c = {1, 2, 4};
    CHECK(proportionality_gap(a.data(), c.data(), 3, &deg) > 1e-2);
}

TEST_CASE("generalized weight: shared topology scales the whole matrix") {
    std::mt19937_64 rng(61);
    std::vector<double> topo = dense_topology(rng, N);
    topo[0 * N + 1] = 0.0;
    topo[0 * N + 2] = 2.0;
    StGcLayer st = make_st_gc(rng, C, CO, topo, N, false, false);
    Tensor x = random_tensor(rng, {K, T, N, C});

    GeneralizedWeight zero = generalized_weight(st, x, 0, 0, 1);
    for (std::size_t idx = 0; idx < C * CO; ++idx) CHECK(zero.E.data()[idx] == 0.0);

    GeneralizedWeight doubled = generalized_weight(st, x, 1, 0, 2);
    for (std::size_t idx = 0; idx < C * CO; ++idx)
        CHECK(doubled.E.data()[idx] == 2.0 * st.transform.weight.data()[idx]);

    CHECK_THROWS_AS(generalized_weight(st, x, K, 0, 0), range_error);
    StGcLayer biased = make_st_gc(rng, C, CO, topo, N, false, true);
    CHECK_THROWS_AS(generalized_weight(biased, x, 0, 0, 0), configuration_error);
}

TEST_CASE("generalized weight: channel-wise columns carry the refined relation") {
    std::mt19937_64 rng(62);
    CtrGcLayer ctr = make_ctr_gc(rng, C, CO, N, 2, CorrFn::m1, Activation::tanh,
                                 dense_topology(rng, N), "random", true, false);
    ctr.alpha.data()[0] = 0.6;
    Tensor x = random_tensor(rng, {K, T, N, C});
    Tensor refined = infer_topologies(ctr, x); // [K,N,N,CO]
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j) {
                GeneralizedWeight gw = generalized_weight(ctr, x, k, i, j);
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t o = 0; o < CO; ++o) {
                        double r = refined.data()[((k * N + i) * N + j) * CO + o];
                        double want = r * ctr.transform.weight.data()[c * CO + o];
                        CHECK(std::fabs(gw.E.data()[c * CO + o] - want) < 1e-12);
                    }
            }
}

TEST_CASE("evaluation through generalized weights matches every forward pass") {
    std::mt19937_64 rng(63);
    std::vector<double> topo = dense_topology(rng, N);
    Tensor x = random_tensor(rng, {K, T, N, C});

    StGcLayer st = make_st_gc(rng, C, CO, topo, N, false, false);
    CHECK(max_abs_diff(st_gc_forward(st, x), evaluate_via_generalized(st, x)) < 1e-12);

    AgcLayer agc = make_agc(rng, C, CO, 2, topo, N, false);
    CHECK(max_abs_diff(agc_forward(agc, x), evaluate_via_generalized(agc, x)) < 1e-9);

    DcGcLayer dc = make_dc_gc(rng, C, CO, N, 2, topo, false, false);
    for (std::size_t g = 0; g < 2 * N * N; ++g)
        dc.topologies.data()[g] += 0.1 * static_cast<double>(g % 7);
    CHECK(max_abs_diff(dc_gc_forward(dc, x), evaluate_via_generalized(dc, x)) < 1e-9);

    CtrGcLayer ctr = make_ctr_gc(rng, C, CO, N, 2, CorrFn::m1, Activation::tanh,
                                 topo, "random", true, false);
    ctr.alpha.data()[0] = 0.5;
    CHECK(max_abs_diff(ctr_gc_forward(ctr, x), evaluate_via_generalized(ctr, x)) < 1e-9);
}

TEST_CASE("audit: shared static topology satisfies every constraint") {
    std::mt19937_64 rng(64);
    StGcLayer st = make_st_gc(rng, C, CO, dense_topology(rng, N), N, false, false);
    Tensor x = random_tensor(rng, {K, T, N, C});
    expect_pattern(audit_constraints(st, x), {true, true, true, true, true});
}

TEST_CASE("audit: attention relaxes sample sharing only") {
    std::mt19937_64 rng(65);
    AgcLayer agc = make_agc(rng, C, CO, 2, dense_topology(rng, N), N, false);
    Tensor x = random_tensor(rng, {K, T, N, C});
    expect_pattern(audit_constraints(agc, x), {false, true, true, true, true});
}

TEST_CASE("audit: grouped topologies relax channel sharing only") {
    std::mt19937_64 rng(66);
    DcGcLayer dc = make_dc_gc(rng, C, CO, N, 2, dense_topology(rng, N), false, false);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (std::size_t g = 0; g < 2 * N * N; ++g) dc.topologies.data()[g] = unit(rng);
    Tensor x = random_tensor(rng, {K, T, N, C});
    expect_pattern(audit_constraints(dc, x), {true, false, true, true, true});
}

TEST_CASE("audit: channel-wise refinement keeps only the column constraints") {
    std::mt19937_64 rng(67);
    CtrGcLayer ctr = make_ctr_gc(rng, C, CO, N, 2, CorrFn::m1, Activation::tanh,
                                 dense_topology(rng, N), "random", true, false);
    ctr.alpha.data()[0] = 1.0;
    Tensor x = random_tensor(rng, {K, T, N, C});
    expect_pattern(audit_constraints(ctr, x), {false, false, false, true, true});
}

TEST_CASE("audit: zeroed channel lift collapses back to a shared topology") {
    std::mt19937_64 rng(68);
    CtrGcLayer ctr = make_ctr_gc(rng, C, CO, N, 2, CorrFn::m1, Activation::tanh,
                                 dense_topology(rng, N), "random", true, false);
    ctr.alpha.data()[0] = 1.0;
    for (double& v : *ctr.xi.weight.data_) v = 0.0;
    Tensor x = random_tensor(rng, {K, T, N, C});
    auto reports = audit_constraints(ctr, x);
    expect_pattern(reports, {true, true, true, true, true});
}

TEST_CASE("audit: verdicts are scale invariant") {
    std::mt19937_64 rng(69);
    DcGcLayer dc = make_dc_gc(rng, C, CO, N, 2, dense_topology(rng, N), false, false);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (std::size_t g = 0; g < 2 * N * N; ++g) dc.topologies.data()[g] = unit(rng);
    Tensor x = random_tensor(rng, {K, T, N, C});
    auto before = audit_constraints(dc, x);
    // scaling the weight scales every E by the same nonzero constant
    for (double& v : *dc.transform.weight.data_) v *= 37.0;
    auto after = audit_constraints(dc, x);
    for (int id = 2; id <= 5; ++id) {
        CHECK(find(before, id).holds == find(after, id).holds);
        CHECK(std::fabs(find(before, id).worst_violation -
                        find(after, id).worst_violation) < 1e-9);
    }
}

TEST_CASE("audit: degenerate probe is inconclusive, not a failure") {
    std::mt19937_64 rng(70);
    StGcLayer st = make_st_gc(rng, C, CO, std::vector<double>(N * N, 0.0), N, false, false);
    for (double& v : *st.transform.weight.data_) v = 0.0;
    Tensor x = random_tensor(rng, {K, T, N, C});
    auto reports = audit_constraints(st, x);
    for (int id = 2; id <= 5; ++id) {
        CHECK(find(reports, id).inconclusive);
        CHECK_FALSE(find(reports, id).holds);
    }
    CHECK_THROWS_AS(audit_constraints(st, random_tensor(rng, {1, T, N, C})),
                    configuration_error);
}

TEST_CASE("equivalence suite: 100 random trials stay below 1e-9") {
    EquivalenceReport rep = equivalence_suite(1, 100);
    CHECK(rep.trials == 100);
    CHECK(rep.worst() < 1e-9);
    CHECK(rep.describe().find("overall worst_diff=") != std::string::npos);
    CHECK_THROWS_AS(equivalence_suite(1, 0), configuration_error);
}

TEST_CASE("equivalence: single output channel and zero input degenerate cleanly") {
    std::mt19937_64 rng(71);
    std::vector<double> topo = dense_topology(rng, N);
    CtrGcLayer ctr = make_ctr_gc(rng, C, 1, N, 2, CorrFn::m1, Activation::tanh,
                                 topo, "random", true, false);
    ctr.alpha.data()[0] = 0.3;
    Tensor x = random_tensor(rng, {K, T, N, C});
    CHECK(max_abs_diff(ctr_gc_forward(ctr, x), evaluate_via_generalized(ctr, x)) < 1e-12);

    Tensor zero = Tensor::zeros({K, T, N, C});
    Tensor out = ctr_gc_forward(ctr, zero);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == 0.0);
}
