#include "ctr/graph_conv.hpp"

#include <cmath>

namespace ctr {

namespace {

Tensor uniform_tensor(std::mt19937_64& rng, Shape shape, double bound, bool requires_grad) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

} // namespace

void LinearMap::collect_params(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

LinearMap make_linear(std::mt19937_64& rng, std::size_t in, std::size_t out, bool with_bias) {
    LinearMap m;
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    m.weight = uniform_tensor(rng, {in, out}, bound, true);
    if (with_bias) m.bias = uniform_tensor(rng, {out}, bound, true);
    return m;
}

std::size_t reduced_channel_count(std::size_t channels, std::size_t reduction) {
    if (reduction == 0) throw configuration_error("reduction rate must be positive");
    return std::max<std::size_t>(1, channels / reduction);
}

void CtrGcLayer::collect_params(const std::string& prefix, ParamList& out) const {
    transform.collect_params(prefix + ".transform", out);
    phi.collect_params(prefix + ".phi", out);
    psi.collect_params(prefix + ".psi", out);
    xi.collect_params(prefix + ".xi", out);
    if (corr_fn == CorrFn::m2) {
        mlp_hidden.collect_params(prefix + ".mlp_hidden", out);
        mlp_out.collect_params(prefix + ".mlp_out", out);
    }
    if (shared.A.requires_grad()) out.emplace_back(prefix + ".shared_topology", shared.A);
    out.emplace_back(prefix + ".alpha", alpha);
}

void StGcLayer::collect_params(const std::string& prefix, ParamList& out) const {
    transform.collect_params(prefix + ".transform", out);
    if (A.requires_grad()) out.emplace_back(prefix + ".topology", A);
}

void AgcLayer::collect_params(const std::string& prefix, ParamList& out) const {
    transform.collect_params(prefix + ".transform", out);
    theta.collect_params(prefix + ".theta", out);
    phi_att.collect_params(prefix + ".phi_att", out);
    out.emplace_back(prefix + ".topology", A);
}

void DcGcLayer::collect_params(const std::string& prefix, ParamList& out) const {
    transform.collect_params(prefix + ".transform", out);
    out.emplace_back(prefix + ".topologies", topologies);
}

CtrGcLayer make_ctr_gc(std::mt19937_64& rng, std::size_t in, std::size_t out,
                       std::size_t joints, std::size_t reduction, CorrFn corr,
                       Activation sigma, const std::vector<double>& shared_init,
                       const std::string& partition_name, bool trainable_topology,
                       bool with_bias) {
    std::size_t cr = reduced_channel_count(in, reduction);
    CtrGcLayer l;
    l.transform = make_linear(rng, in, out, with_bias);
    l.phi = make_linear(rng, in, cr, with_bias);
    l.psi = make_linear(rng, in, cr, with_bias);
    l.xi = make_linear(rng, cr, out, with_bias);
    if (corr == CorrFn::m2) {
        l.mlp_hidden = make_linear(rng, 2 * cr, cr, with_bias);
        l.mlp_out = make_linear(rng, cr, cr, with_bias);
    }
    l.shared.A = Tensor::from_data({joints, joints}, shared_init, trainable_topology);
    l.shared.init_partition = partition_name;
    l.alpha = Tensor::scalar(0.0, true);
    l.corr_fn = corr;
    l.sigma = sigma;
    l.reduction = reduction;
    return l;
}

StGcLayer make_st_gc(std::mt19937_64& rng, std::size_t in, std::size_t out,
                     const std::vector<double>& topology, std::size_t joints,
                     bool trainable_topology, bool with_bias) {
    StGcLayer l;
    l.transform = make_linear(rng, in, out, with_bias);
    l.A = Tensor::from_data({joints, joints}, topology, trainable_topology);
    return l;
}

AgcLayer make_agc(std::mt19937_64& rng, std::size_t in, std::size_t out,
                  std::size_t inter, const std::vector<double>& topology,
                  std::size_t joints, bool with_bias) {
    AgcLayer l;
    l.transform = make_linear(rng, in, out, with_bias);
    l.theta = make_linear(rng, in, inter, with_bias);
    l.phi_att = make_linear(rng, in, inter, with_bias);
    l.A = Tensor::from_data({joints, joints}, topology, true);
    return l;
}

DcGcLayer make_dc_gc(std::mt19937_64& rng, std::size_t in, std::size_t out,
                     std::size_t joints, std::size_t groups,
                     const std::vector<double>& topology, bool aggregate_input,
                     bool with_bias) {
    std::size_t decoupled = aggregate_input ? in : out;
    if (groups == 0 || decoupled % groups != 0)
        throw configuration_error("dc_gc: channel count " + std::to_string(decoupled) +
                                  " not divisible by " + std::to_string(groups) + " groups");
    DcGcLayer l;
    l.transform = make_linear(rng, in, out, with_bias);
    std::vector<double> stack;
    stack.reserve(groups * joints * joints);
    for (std::size_t g = 0; g < groups; ++g)
        stack.insert(stack.end(), topology.begin(), topology.end());
    l.topologies = Tensor::from_data({groups, joints, joints}, std::move(stack), true);
    l.groups = groups;
    l.aggregate_input = aggregate_input;
    return l;
}

// ---- CTR-GC pipeline ----

Tensor feature_transform(const CtrGcLayer& layer, const Tensor& x) {
    if (x.rank() != 4 || x.shape()[3] != layer.in_channels())
        throw dimension_error("feature_transform: expected x[M,T,N," +
                              std::to_string(layer.in_channels()) + "]");
    return layer.transform(x);
}

Tensor temporal_context(const Tensor& x) {
    if (x.rank() != 4) throw dimension_error("temporal_context expects x[M,T,N,C]");
    return reduce(Reduce::mean, x, 1);
}

namespace {

// pairwise core over reduced features ps/ph of shape [M,N,Cr]
Tensor correlation_core(const CtrGcLayer& layer, const Tensor& ps, const Tensor& ph) {
    std::size_t m = ps.shape()[0], n = ps.shape()[1], cr = ps.shape()[2];
    Tensor pi = reshape(ps, {m, n, 1, cr});
    Tensor pj = reshape(ph, {m, 1, n, cr});
    switch (layer.corr_fn) {
        case CorrFn::m1:
            return activation(layer.sigma, sub(pi, pj));
        case CorrFn::m1plus:
            return activation(layer.sigma, add(pi, pj));
        case CorrFn::m2: {
            if (!layer.mlp_hidden.weight.defined())
                throw configuration_error("correlation M2 requires an MLP");
            Tensor bi = broadcast_to(pi, {m, n, n, cr});
            Tensor bj = broadcast_to(pj, {m, n, n, cr});
            Tensor cat = concat({bi, bj}, 3);
            Tensor hidden = activation(layer.sigma, layer.mlp_hidden(cat));
            return layer.mlp_out(hidden);
        }
    }
    throw configuration_error("unknown correlation function");
}

} // namespace

Tensor correlation_m1(const CtrGcLayer& layer, const Tensor& pooled) {
    CtrGcLayer l = layer;
    l.corr_fn = CorrFn::m1;
    return correlation_core(l, layer.psi(pooled), layer.phi(pooled));
}

Tensor correlation_m1plus(const CtrGcLayer& layer, const Tensor& pooled) {
    CtrGcLayer l = layer;
    l.corr_fn = CorrFn::m1plus;
    return correlation_core(l, layer.psi(pooled), layer.phi(pooled));
}

Tensor correlation_m2(const CtrGcLayer& layer, const Tensor& pooled) {
    CtrGcLayer l = layer;
    l.corr_fn = CorrFn::m2;
    return correlation_core(l, layer.psi(pooled), layer.phi(pooled));
}

Tensor channel_correlations(const CtrGcLayer& layer, const Tensor& raw) {
    if (raw.rank() != 4 || raw.shape()[3] != layer.xi.in_channels())
        throw dimension_error("channel_correlations: raw channel mismatch");
    return layer.xi(raw);
}

Tensor refine_topology(const SharedTopology& shared, const Tensor& q, const Tensor& alpha) {
    std::size_t n = shared.A.shape()[0];
    if (q.rank() != 4 || q.shape()[1] != n || q.shape()[2] != n)
        throw dimension_error("refine_topology: Q joint dims do not match A");
    Tensor a3 = reshape(shared.A, {n, n, 1});
    return add(a3, mul(alpha, q));
}

Tensor channelwise_aggregate(const Tensor& transformed, const Tensor& refined) {
    return topo_aggregate(transformed, refined);
}

Tensor infer_topologies(const CtrGcLayer& layer, const Tensor& x) {
    // psi/phi run on every frame, then temporal pooling aggregates them;
    // both maps are linear so this matches correlating pooled features.
    Tensor ps = reduce(Reduce::mean, layer.psi(x), 1);
    Tensor ph = reduce(Reduce::mean, layer.phi(x), 1);
    Tensor raw = correlation_core(layer, ps, ph);
    Tensor q = channel_correlations(layer, raw);
    return refine_topology(layer.shared, q, layer.alpha);
}

Tensor ctr_gc_forward(const CtrGcLayer& layer, const Tensor& x) {
    Tensor refined = infer_topologies(layer, x);
    Tensor transformed = feature_transform(layer, x);
    return channelwise_aggregate(transformed, refined);
}

Tensor st_gc_forward(const StGcLayer& layer, const Tensor& x) {
    return topo_aggregate(layer.transform(x), layer.A);
}

Tensor agc_forward(const AgcLayer& layer, const Tensor& x) {
    Tensor pooled = temporal_context(x);
    Tensor th = layer.theta(pooled);   // [M,N,Ci]
    Tensor ph = layer.phi_att(pooled); // [M,N,Ci]
    Tensor logits = batch_matmul(th, permute(ph, {0, 2, 1})); // [M,N,N]
    Tensor attention = activation(Activation::softmax_lastdim, logits);
    Tensor per_sample = add(attention, layer.A);
    return topo_aggregate(layer.transform(x), per_sample);
}

Tensor dc_gc_forward(const DcGcLayer& layer, const Tensor& x) {
    std::size_t n = layer.topologies.shape()[1];
    std::size_t g = layer.groups;
    auto grouped = [&](const Tensor& feat) {
        std::size_t c = feat.shape()[3];
        if (c % g != 0)
            throw configuration_error("dc_gc_forward: channels not divisible by groups");
        std::size_t width = c / g;
        std::vector<Tensor> parts;
        parts.reserve(g);
        for (std::size_t k = 0; k < g; ++k) {
            Tensor topo = reshape(slice_axis(layer.topologies, 0, k, 1), {n, n});
            parts.push_back(topo_aggregate(slice_axis(feat, 3, k * width, width), topo));
        }
        return concat(parts, 3);
    };
    if (layer.aggregate_input) return layer.transform(grouped(x));
    return grouped(layer.transform(x));
}

} // namespace ctr
