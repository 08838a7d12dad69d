#include "ctr/unified.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

namespace ctr {

namespace {

void require_bias_free(const LinearMap& m, const char* what) {
    if (m.bias.defined())
        throw configuration_error(std::string("generalized-weight analysis requires a "
                                              "bias-free ") + what);
}

void check_probe(const Tensor& x, std::size_t joints, std::size_t channels,
                 std::size_t k, std::size_t i, std::size_t j) {
    if (x.rank() != 4 || x.shape()[2] != joints || x.shape()[3] != channels)
        throw dimension_error("probe must be [K,T," + std::to_string(joints) + "," +
                              std::to_string(channels) + "], got " + shape_str(x.shape()));
    if (k >= x.shape()[0] || i >= joints || j >= joints)
        throw range_error("generalized_weight: index out of range");
}

// mean over frames of sample k, plain loops -> [N, C]
std::vector<double> pooled_sample(const Tensor& x, std::size_t k) {
    std::size_t t = x.shape()[1], n = x.shape()[2], c = x.shape()[3];
    std::vector<double> out(n * c, 0.0);
    const double* base = x.data() + k * t * n * c;
    for (std::size_t f = 0; f < t; ++f)
        for (std::size_t idx = 0; idx < n * c; ++idx)
            out[idx] += base[f * n * c + idx] / static_cast<double>(t);
    return out;
}

std::vector<double> apply_map(const LinearMap& m, const double* x) {
    std::size_t in = m.in_channels(), out = m.out_channels();
    std::vector<double> y(out, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
        if (m.bias.defined()) y[o] = m.bias.data()[o];
        for (std::size_t c = 0; c < in; ++c)
            y[o] += x[c] * m.weight.data()[c * out + o];
    }
    return y;
}

double scalar_act(Activation kind, double v) {
    switch (kind) {
        case Activation::tanh: return std::tanh(v);
        case Activation::sigmoid: return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                                : std::exp(v) / (1.0 + std::exp(v));
        case Activation::relu: return v > 0 ? v : 0.0;
        default:
            throw configuration_error("correlation activation must be elementwise");
    }
}

// r_ij for one (sample, i, j) of a channel-wise layer -> [C']
std::vector<double> channelwise_relation(const CtrGcLayer& layer, const Tensor& x,
                                         std::size_t k, std::size_t i, std::size_t j) {
    std::size_t c = layer.in_channels(), cr = layer.reduced_channels();
    std::vector<double> pooled = pooled_sample(x, k);
    std::vector<double> ps = apply_map(layer.psi, pooled.data() + i * c);
    std::vector<double> ph = apply_map(layer.phi, pooled.data() + j * c);
    std::vector<double> raw(cr);
    switch (layer.corr_fn) {
        case CorrFn::m1:
            for (std::size_t u = 0; u < cr; ++u)
                raw[u] = scalar_act(layer.sigma, ps[u] - ph[u]);
            break;
        case CorrFn::m1plus:
            for (std::size_t u = 0; u < cr; ++u)
                raw[u] = scalar_act(layer.sigma, ps[u] + ph[u]);
            break;
        case CorrFn::m2: {
            std::vector<double> cat(ps);
            cat.insert(cat.end(), ph.begin(), ph.end());
            std::vector<double> hidden = apply_map(layer.mlp_hidden, cat.data());
            for (double& h : hidden) h = scalar_act(layer.sigma, h);
            raw = apply_map(layer.mlp_out, hidden.data());
            break;
        }
    }
    std::vector<double> q = apply_map(layer.xi, raw.data());
    std::size_t n = layer.num_joints();
    double a = layer.shared.A.data()[i * n + j];
    double alpha = layer.alpha.data()[0];
    for (double& v : q) v = a + alpha * v;
    return q;
}

// attention + shared topology for one sample -> [N,N]
std::vector<double> attention_relation(const AgcLayer& layer, const Tensor& x,
                                       std::size_t k) {
    std::size_t n = x.shape()[2];
    std::size_t inter = layer.theta.out_channels();
    std::vector<double> pooled = pooled_sample(x, k);
    std::vector<double> th(n * inter), ph(n * inter);
    for (std::size_t v = 0; v < n; ++v) {
        std::vector<double> tv = apply_map(layer.theta, pooled.data() + v * layer.theta.in_channels());
        std::vector<double> pv = apply_map(layer.phi_att, pooled.data() + v * layer.phi_att.in_channels());
        std::copy(tv.begin(), tv.end(), th.begin() + v * inter);
        std::copy(pv.begin(), pv.end(), ph.begin() + v * inter);
    }
    std::vector<double> rel(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -1e300;
        std::vector<double> row(n);
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t u = 0; u < inter; ++u)
                dot += th[i * inter + u] * ph[j * inter + u];
            row[j] = dot;
            mx = std::max(mx, dot);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < n; ++j)
            rel[i * n + j] = std::exp(row[j] - mx) / denom + layer.A.data()[i * n + j];
    }
    return rel;
}

Tensor scale_columns(const Tensor& weight, const std::vector<double>& col_scale) {
    std::size_t c = weight.shape()[0], cp = weight.shape()[1];
    Tensor e = Tensor::zeros({c, cp});
    for (std::size_t r = 0; r < c; ++r)
        for (std::size_t o = 0; o < cp; ++o)
            e.data()[r * cp + o] = weight.data()[r * cp + o] * col_scale[o];
    return e;
}

Tensor scale_matrix(const Tensor& weight, double s) {
    std::vector<double> col(weight.shape()[1], s);
    return scale_columns(weight, col);
}

// z[k,t,i,:] = sum_j x[k,t,j,:] E^k_ij
template <typename MakeE>
Tensor evaluate_with(const Tensor& x, std::size_t out_channels, MakeE&& make_e) {
    std::size_t kk = x.shape()[0], t = x.shape()[1], n = x.shape()[2], c = x.shape()[3];
    Tensor z = Tensor::zeros({kk, t, n, out_channels});
    for (std::size_t k = 0; k < kk; ++k)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                Tensor e = make_e(k, i, j);
                for (std::size_t f = 0; f < t; ++f) {
                    const double* xj = x.data() + ((k * t + f) * n + j) * c;
                    double* zi = z.data() + ((k * t + f) * n + i) * out_channels;
                    for (std::size_t r = 0; r < c; ++r)
                        for (std::size_t o = 0; o < out_channels; ++o)
                            zi[o] += xj[r] * e.data()[r * out_channels + o];
                }
            }
    return z;
}

struct Accum {
    double worst = 0.0;
    ConstraintWitness witness;
    std::size_t compared = 0;

    void feed(double violation, const ConstraintWitness& w) {
        ++compared;
        if (violation > worst) {
            worst = violation;
            witness = w;
        }
    }
    ConstraintReport report(int id, double hold_tol) const {
        ConstraintReport r;
        r.constraint_id = id;
        r.worst_violation = worst;
        r.witness = witness;
        r.holds = compared > 0 && worst <= hold_tol;
        r.inconclusive =
            compared == 0 || (!r.holds && worst <= kViolationFailTol);
        return r;
    }
};

std::vector<ConstraintReport> audit_impl(
    std::size_t samples, std::size_t joints, std::size_t c, std::size_t cp,
    const std::function<Tensor(std::size_t, std::size_t, std::size_t)>& make_e) {
    if (samples < 2 || joints < 2)
        throw configuration_error("constraint audit needs >= 2 samples and >= 2 joints");

    // materialize every E^k_ij once
    std::vector<std::vector<double>> e(samples * joints * joints);
    auto at = [&](std::size_t k, std::size_t i, std::size_t j) -> std::vector<double>& {
        return e[(k * joints + i) * joints + j];
    };
    for (std::size_t k = 0; k < samples; ++k)
        for (std::size_t i = 0; i < joints; ++i)
            for (std::size_t j = 0; j < joints; ++j) {
                Tensor t = make_e(k, i, j);
                at(k, i, j).assign(t.data(), t.data() + t.size());
            }

    Accum a1, a2, a3, a4, a5;
    auto prop = [&](const std::vector<double>& u, const std::vector<double>& v) {
        bool deg = false;
        double gap = proportionality_gap(u.data(), v.data(), u.size(), &deg);
        return std::make_pair(gap, deg);
    };
    auto col_prop = [&](const std::vector<double>& u, const std::vector<double>& v,
                        std::size_t col) {
        std::vector<double> uc(c), vc(c);
        for (std::size_t r = 0; r < c; ++r) {
            uc[r] = u[r * cp + col];
            vc[r] = v[r * cp + col];
        }
        bool deg = false;
        double gap = proportionality_gap(uc.data(), vc.data(), c, &deg);
        return std::make_pair(gap, deg);
    };

    for (std::size_t i = 0; i < joints; ++i) {
        for (std::size_t k1 = 0; k1 < samples; ++k1) {
            // across neighbor pairs, one sample
            for (std::size_t j1 = 0; j1 < joints; ++j1)
                for (std::size_t j2 = j1 + 1; j2 < joints; ++j2) {
                    const auto& u = at(k1, i, j1);
                    const auto& v = at(k1, i, j2);
                    ConstraintWitness w;
                    w.k1 = static_cast<long>(k1);
                    w.i = static_cast<long>(i);
                    w.j1 = static_cast<long>(j1);
                    w.j2 = static_cast<long>(j2);
                    auto [gap, deg] = prop(u, v);
                    if (!deg) a2.feed(gap, w);
                    for (std::size_t col = 0; col < cp; ++col) {
                        auto [g, d] = col_prop(u, v, col);
                        if (d) continue;
                        ConstraintWitness wc = w;
                        wc.column = static_cast<long>(col);
                        a4.feed(g, wc);
                    }
                }
            // across sample pairs, one neighbor
            for (std::size_t k2 = k1 + 1; k2 < samples; ++k2)
                for (std::size_t j = 0; j < joints; ++j) {
                    const auto& u = at(k1, i, j);
                    const auto& v = at(k2, i, j);
                    ConstraintWitness w;
                    w.k1 = static_cast<long>(k1);
                    w.k2 = static_cast<long>(k2);
                    w.i = static_cast<long>(i);
                    w.j1 = static_cast<long>(j);
                    double diff = 0.0;
                    for (std::size_t idx = 0; idx < u.size(); ++idx)
                        diff = std::max(diff, std::fabs(u[idx] - v[idx]));
                    a1.feed(diff, w);
                    auto [gap, deg] = prop(u, v);
                    if (!deg) a3.feed(gap, w);
                    for (std::size_t col = 0; col < cp; ++col) {
                        auto [g, d] = col_prop(u, v, col);
                        if (d) continue;
                        ConstraintWitness wc = w;
                        wc.column = static_cast<long>(col);
                        a5.feed(g, wc);
                    }
                }
        }
    }

    return {
        a1.report(1, kEqualityHoldTol),
        a2.report(2, kProportionalHoldTol),
        a3.report(3, kProportionalHoldTol),
        a4.report(4, kProportionalHoldTol),
        a5.report(5, kProportionalHoldTol),
    };
}

} // namespace

std::string ConstraintReport::describe() const {
    std::ostringstream os;
    os << "constraint=" << constraint_id << " holds=" << (holds ? "yes" : "no");
    if (inconclusive) os << " inconclusive=yes";
    os << " worst_violation=" << worst_violation << " witness=(k1=" << witness.k1;
    if (witness.k2 >= 0) os << ",k2=" << witness.k2;
    os << ",i=" << witness.i << ",j1=" << witness.j1;
    if (witness.j2 >= 0) os << ",j2=" << witness.j2;
    if (witness.column >= 0) os << ",col=" << witness.column;
    os << ")";
    return os.str();
}

double proportionality_gap(const double* a, const double* b, std::size_t n,
                           bool* degenerate) {
    double na = 0.0, nb = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        na += a[i] * a[i];
        nb += b[i] * b[i];
        dot += a[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (degenerate) *degenerate = na == 0.0 || nb == 0.0;
    if (na == 0.0 || nb == 0.0) return 0.0; // zero is proportional to anything
    double sign = dot < 0.0 ? -1.0 : 1.0;
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        worst = std::max(worst, std::fabs(a[i] / na - sign * b[i] / nb));
    return worst;
}

GeneralizedWeight generalized_weight(const StGcLayer& layer, const Tensor& x,
                                     std::size_t k, std::size_t i, std::size_t j) {
    require_bias_free(layer.transform, "feature transform");
    std::size_t n = layer.A.shape()[0];
    check_probe(x, n, layer.transform.in_channels(), k, i, j);
    return {k, i, j, scale_matrix(layer.transform.weight, layer.A.data()[i * n + j])};
}

GeneralizedWeight generalized_weight(const AgcLayer& layer, const Tensor& x,
                                     std::size_t k, std::size_t i, std::size_t j) {
    require_bias_free(layer.transform, "feature transform");
    require_bias_free(layer.theta, "attention map");
    require_bias_free(layer.phi_att, "attention map");
    std::size_t n = layer.A.shape()[0];
    check_probe(x, n, layer.transform.in_channels(), k, i, j);
    std::vector<double> rel = attention_relation(layer, x, k);
    return {k, i, j, scale_matrix(layer.transform.weight, rel[i * n + j])};
}

GeneralizedWeight generalized_weight(const DcGcLayer& layer, const Tensor& x,
                                     std::size_t k, std::size_t i, std::size_t j) {
    require_bias_free(layer.transform, "feature transform");
    if (layer.aggregate_input)
        throw configuration_error(
            "input-side grouped layers do not factor into column-scaled weights");
    std::size_t n = layer.topologies.shape()[1];
    std::size_t cp = layer.transform.out_channels();
    check_probe(x, n, layer.transform.in_channels(), k, i, j);
    std::size_t width = cp / layer.groups;
    std::vector<double> col(cp);
    for (std::size_t c = 0; c < cp; ++c)
        col[c] = layer.topologies.data()[((c / width) * n + i) * n + j];
    return {k, i, j, scale_columns(layer.transform.weight, col)};
}

GeneralizedWeight generalized_weight(const CtrGcLayer& layer, const Tensor& x,
                                     std::size_t k, std::size_t i, std::size_t j) {
    require_bias_free(layer.transform, "feature transform");
    std::size_t n = layer.num_joints();
    check_probe(x, n, layer.in_channels(), k, i, j);
    std::vector<double> rel = channelwise_relation(layer, x, k, i, j);
    return {k, i, j, scale_columns(layer.transform.weight, rel)};
}

Tensor evaluate_via_generalized(const StGcLayer& layer, const Tensor& x) {
    return evaluate_with(x, layer.transform.out_channels(),
                         [&](std::size_t k, std::size_t i, std::size_t j) {
                             return generalized_weight(layer, x, k, i, j).E;
                         });
}

Tensor evaluate_via_generalized(const AgcLayer& layer, const Tensor& x) {
    // the per-sample relation is expensive; hoist it out of the pair loop
    require_bias_free(layer.transform, "feature transform");
    require_bias_free(layer.theta, "attention map");
    require_bias_free(layer.phi_att, "attention map");
    std::size_t n = layer.A.shape()[0];
    check_probe(x, n, layer.transform.in_channels(), 0, 0, 0);
    std::vector<std::vector<double>> rel(x.shape()[0]);
    for (std::size_t k = 0; k < x.shape()[0]; ++k) rel[k] = attention_relation(layer, x, k);
    return evaluate_with(x, layer.transform.out_channels(),
                         [&](std::size_t k, std::size_t i, std::size_t j) {
                             return scale_matrix(layer.transform.weight,
                                                 rel[k][i * n + j]);
                         });
}

Tensor evaluate_via_generalized(const DcGcLayer& layer, const Tensor& x) {
    return evaluate_with(x, layer.transform.out_channels(),
                         [&](std::size_t k, std::size_t i, std::size_t j) {
                             return generalized_weight(layer, x, k, i, j).E;
                         });
}

Tensor evaluate_via_generalized(const CtrGcLayer& layer, const Tensor& x) {
    return evaluate_with(x, layer.out_channels(),
                         [&](std::size_t k, std::size_t i, std::size_t j) {
                             return generalized_weight(layer, x, k, i, j).E;
                         });
}

std::vector<ConstraintReport> audit_constraints(const StGcLayer& layer, const Tensor& x) {
    return audit_impl(x.shape()[0], layer.A.shape()[0], layer.transform.in_channels(),
                      layer.transform.out_channels(),
                      [&](std::size_t k, std::size_t i, std::size_t j) {
                          return generalized_weight(layer, x, k, i, j).E;
                      });
}

std::vector<ConstraintReport> audit_constraints(const AgcLayer& layer, const Tensor& x) {
    return audit_impl(x.shape()[0], layer.A.shape()[0], layer.transform.in_channels(),
                      layer.transform.out_channels(),
                      [&](std::size_t k, std::size_t i, std::size_t j) {
                          return generalized_weight(layer, x, k, i, j).E;
                      });
}

std::vector<ConstraintReport> audit_constraints(const DcGcLayer& layer, const Tensor& x) {
    return audit_impl(x.shape()[0], layer.topologies.shape()[1],
                      layer.transform.in_channels(), layer.transform.out_channels(),
                      [&](std::size_t k, std::size_t i, std::size_t j) {
                          return generalized_weight(layer, x, k, i, j).E;
                      });
}

std::vector<ConstraintReport> audit_constraints(const CtrGcLayer& layer, const Tensor& x) {
    return audit_impl(x.shape()[0], layer.num_joints(), layer.in_channels(),
                      layer.out_channels(),
                      [&](std::size_t k, std::size_t i, std::size_t j) {
                          return generalized_weight(layer, x, k, i, j).E;
                      });
}

double EquivalenceReport::worst() const {
    return std::max(std::max(worst_shared, worst_attention),
                    std::max(worst_grouped, worst_channelwise));
}

std::string EquivalenceReport::describe() const {
    std::ostringstream os;
    os << "trials=" << trials << "\n"
       << "shared_topology worst_diff=" << worst_shared << "\n"
       << "attention worst_diff=" << worst_attention << "\n"
       << "grouped worst_diff=" << worst_grouped << "\n"
       << "channelwise worst_diff=" << worst_channelwise << "\n"
       << "overall worst_diff=" << worst();
    return os.str();
}

EquivalenceReport equivalence_suite(std::uint64_t seed, std::size_t trials) {
    if (trials < 1) throw configuration_error("equivalence_suite needs trials >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    EquivalenceReport rep;
    rep.trials = trials;
    auto diff = [](const Tensor& a, const Tensor& b) {
        double worst = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
        return worst;
    };
    for (std::size_t trial = 0; trial < trials; ++trial) {
        std::size_t n = 3 + rng() % 6;
        std::size_t c = 2 + rng() % 7;
        std::size_t cp = 2 + rng() % 7;
        std::size_t r = 1 + rng() % 2;
        std::vector<double> topo(n * n);
        for (double& v : topo) v = unit(rng);

        std::vector<double> xv(2 * 3 * n * c);
        for (double& v : xv) v = unit(rng);
        Tensor x = Tensor::from_data({2, 3, n, c}, std::move(xv));

        StGcLayer st = make_st_gc(rng, c, cp, topo, n, false, false);
        rep.worst_shared = std::max(
            rep.worst_shared, diff(st_gc_forward(st, x), evaluate_via_generalized(st, x)));

        std::size_t inter = 1 + rng() % 3;
        AgcLayer agc = make_agc(rng, c, cp, inter, topo, n, false);
        rep.worst_attention = std::max(
            rep.worst_attention, diff(agc_forward(agc, x), evaluate_via_generalized(agc, x)));

        std::vector<std::size_t> divisors;
        for (std::size_t g = 1; g <= cp; ++g)
            if (cp % g == 0) divisors.push_back(g);
        std::size_t groups = divisors[rng() % divisors.size()];
        DcGcLayer dc = make_dc_gc(rng, c, cp, n, groups, topo, false, false);
        for (double& v : *dc.topologies.data_) v = unit(rng);
        rep.worst_grouped = std::max(
            rep.worst_grouped, diff(dc_gc_forward(dc, x), evaluate_via_generalized(dc, x)));

        CorrFn corr = trial % 3 == 0   ? CorrFn::m1
                      : trial % 3 == 1 ? CorrFn::m1plus
                                       : CorrFn::m2;
        CtrGcLayer ctr = make_ctr_gc(rng, c, cp, n, r, corr, Activation::tanh, topo,
                                     "random", true, false);
        ctr.alpha.data()[0] = unit(rng);
        rep.worst_channelwise = std::max(
            rep.worst_channelwise,
            diff(ctr_gc_forward(ctr, x), evaluate_via_generalized(ctr, x)));
    }
    return rep;
}

} // namespace ctr
