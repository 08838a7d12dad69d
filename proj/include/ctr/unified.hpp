#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctr/graph_conv.hpp"
#include "ctr/tensor.hpp"

namespace ctr {

/// The effective per-pair weight matrix E of one (sample, vertex i, vertex j)
/// triple: z_i = sum_j x_j E_ij. Every layer family reduces to this form.
struct GeneralizedWeight {
    std::size_t sample = 0;
    std::size_t i = 0;
    std::size_t j = 0;
    Tensor E; // [C, C']
};

struct ConstraintWitness {
    long k1 = -1, k2 = -1; // sample indices (k2 < 0 when only one is involved)
    long i = -1;
    long j1 = -1, j2 = -1;
    long column = -1; // < 0 for whole-matrix comparisons
};

struct ConstraintReport {
    int constraint_id = 0;
    bool holds = false;
    bool inconclusive = false; // dead band or all-zero comparisons
    double worst_violation = 0.0;
    ConstraintWitness witness;
    std::string describe() const;
};

// Audit thresholds: a constraint holds below the tight tolerance and fails
// above the loose one; the gap in between is reported as inconclusive so a
// borderline instance can never flip the classification.
inline constexpr double kEqualityHoldTol = 1e-9;
inline constexpr double kProportionalHoldTol = 1e-6;
inline constexpr double kViolationFailTol = 1e-3;

/// Gap between two equal-length vectors after unit-norm, sign-aligned
/// scaling; 0 means exactly proportional. Zero vectors are proportional to
/// anything and set *degenerate.
double proportionality_gap(const double* a, const double* b, std::size_t n,
                           bool* degenerate);

// x is a probe batch [K,T,N,C]; layers must be bias-free so the output is a
// pure weighted sum of input features.
GeneralizedWeight generalized_weight(const StGcLayer& layer, const Tensor& x,
                                     std::size_t k, std::size_t i, std::size_t j);
GeneralizedWeight generalized_weight(const AgcLayer& layer, const Tensor& x,
                                     std::size_t k, std::size_t i, std::size_t j);
GeneralizedWeight generalized_weight(const DcGcLayer& layer, const Tensor& x,
                                     std::size_t k, std::size_t i, std::size_t j);
GeneralizedWeight generalized_weight(const CtrGcLayer& layer, const Tensor& x,
                                     std::size_t k, std::size_t i, std::size_t j);

/// Recomputes the layer output purely as z_i = sum_j x_j E_ij with plain
/// loops — an independent path used as an oracle against the forward pass.
Tensor evaluate_via_generalized(const StGcLayer& layer, const Tensor& x);
Tensor evaluate_via_generalized(const AgcLayer& layer, const Tensor& x);
Tensor evaluate_via_generalized(const DcGcLayer& layer, const Tensor& x);
Tensor evaluate_via_generalized(const CtrGcLayer& layer, const Tensor& x);

// Five structural constraints on the generalized weights:
//   1: E^{k1}_ij == E^{k2}_ij               (sample-shared)
//   2: E^k_{ij1} proportional to E^k_{ij2}  (channel-shared across pairs)
//   3: E^{k1}_ij proportional to E^{k2}_ij  (channel-shared across samples)
//   4: columns of E^k_{ij1}, E^k_{ij2} proportional column by column
//   5: columns of E^{k1}_ij, E^{k2}_ij proportional column by column
std::vector<ConstraintReport> audit_constraints(const StGcLayer& layer, const Tensor& x);
std::vector<ConstraintReport> audit_constraints(const AgcLayer& layer, const Tensor& x);
std::vector<ConstraintReport> audit_constraints(const DcGcLayer& layer, const Tensor& x);
std::vector<ConstraintReport> audit_constraints(const CtrGcLayer& layer, const Tensor& x);

struct EquivalenceReport {
    std::size_t trials = 0;
    double worst_shared = 0.0;      // shared-topology forward vs E-form
    double worst_attention = 0.0;   // attention forward vs E-form
    double worst_grouped = 0.0;     // grouped forward vs column-scaled E-form
    double worst_channelwise = 0.0; // channel-wise forward vs E-form
    double worst() const;
    std::string describe() const;
};

/// Random-instance cross-check of every family's forward pass against its
/// generalized-weight evaluation; dims are redrawn each trial.
EquivalenceReport equivalence_suite(std::uint64_t seed, std::size_t trials);

} // namespace ctr
