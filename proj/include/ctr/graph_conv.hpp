#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctr/skeleton.hpp"
#include "ctr/tensor.hpp"

namespace ctr {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

/// Per-site channel map x -> xW (+ bias), applied along the last axis.
struct LinearMap {
    Tensor weight; // [Cin, Cout]
    Tensor bias;   // [Cout], may be undefined

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    std::size_t in_channels() const { return weight.shape()[0]; }
    std::size_t out_channels() const { return weight.shape()[1]; }
    void collect_params(const std::string& prefix, ParamList& out) const;
};

LinearMap make_linear(std::mt19937_64& rng, std::size_t in, std::size_t out,
                      bool with_bias = true);

struct SharedTopology {
    Tensor A; // [N,N]
    std::string init_partition; // "identity" | "inward" | "outward" | other
};

enum class CorrFn { m1, m1plus, m2 };

struct CtrGcLayer {
    LinearMap transform;       // C -> C'
    LinearMap phi, psi;        // C -> Cr
    LinearMap xi;              // Cr -> C'
    LinearMap mlp_hidden, mlp_out; // M2 only: 2Cr -> Cr -> Cr
    SharedTopology shared;
    Tensor alpha;              // trainable scalar, initialized to 0
    CorrFn corr_fn = CorrFn::m1;
    Activation sigma = Activation::tanh;
    std::size_t reduction = 8;

    std::size_t in_channels() const { return transform.in_channels(); }
    std::size_t out_channels() const { return transform.out_channels(); }
    std::size_t reduced_channels() const { return phi.out_channels(); }
    std::size_t num_joints() const { return shared.A.shape()[0]; }
    void collect_params(const std::string& prefix, ParamList& out) const;
};

struct StGcLayer {
    LinearMap transform;
    Tensor A; // [N,N]; trainable only when constructed so
    void collect_params(const std::string& prefix, ParamList& out) const;
};

struct AgcLayer {
    LinearMap transform;
    LinearMap theta, phi_att; // C -> C_inter
    Tensor A;                 // trainable shared topology
    void collect_params(const std::string& prefix, ParamList& out) const;
};

struct DcGcLayer {
    LinearMap transform;
    Tensor topologies;          // [G,N,N], trainable
    std::size_t groups = 1;
    bool aggregate_input = false; // decouple the input channels instead of C'
    void collect_params(const std::string& prefix, ParamList& out) const;
};

std::size_t reduced_channel_count(std::size_t channels, std::size_t reduction);

CtrGcLayer make_ctr_gc(std::mt19937_64& rng, std::size_t in, std::size_t out,
                       std::size_t joints, std::size_t reduction, CorrFn corr,
                       Activation sigma, const std::vector<double>& shared_init,
                       const std::string& partition_name, bool trainable_topology = true,
                       bool with_bias = true);
StGcLayer make_st_gc(std::mt19937_64& rng, std::size_t in, std::size_t out,
                     const std::vector<double>& topology, std::size_t joints,
                     bool trainable_topology, bool with_bias = true);
AgcLayer make_agc(std::mt19937_64& rng, std::size_t in, std::size_t out,
                  std::size_t inter, const std::vector<double>& topology,
                  std::size_t joints, bool with_bias = true);
DcGcLayer make_dc_gc(std::mt19937_64& rng, std::size_t in, std::size_t out,
                     std::size_t joints, std::size_t groups,
                     const std::vector<double>& topology, bool aggregate_input,
                     bool with_bias = true);

// ---- CTR-GC pipeline stages ----

Tensor feature_transform(const CtrGcLayer& layer, const Tensor& x);
/// Mean over the frame axis of x[M,T,N,C] -> [M,N,C].
Tensor temporal_context(const Tensor& x);
Tensor correlation_m1(const CtrGcLayer& layer, const Tensor& pooled);
Tensor correlation_m1plus(const CtrGcLayer& layer, const Tensor& pooled);
Tensor correlation_m2(const CtrGcLayer& layer, const Tensor& pooled);
Tensor channel_correlations(const CtrGcLayer& layer, const Tensor& raw);
Tensor refine_topology(const SharedTopology& shared, const Tensor& q, const Tensor& alpha);
Tensor channelwise_aggregate(const Tensor& transformed, const Tensor& refined);

/// Channel-wise topologies R[M,N,N,C'] inferred for the input (frames pooled).
Tensor infer_topologies(const CtrGcLayer& layer, const Tensor& x);

// ---- full forwards, x of shape [M,T,N,C] ----

Tensor ctr_gc_forward(const CtrGcLayer& layer, const Tensor& x);
Tensor st_gc_forward(const StGcLayer& layer, const Tensor& x);
Tensor agc_forward(const AgcLayer& layer, const Tensor& x);
Tensor dc_gc_forward(const DcGcLayer& layer, const Tensor& x);

} // namespace ctr
