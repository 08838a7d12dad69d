#include "ctr/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ctr {

namespace {

Tensor uniform_tensor(std::mt19937_64& rng, Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor relu(const Tensor& x) { return activation(Activation::relu, x); }

// mean over every axis except the last
Tensor channel_mean(const Tensor& x) {
    Tensor m = x;
    while (m.rank() > 1) m = reduce(Reduce::mean, m, 0);
    return m;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

ModelVariant parse_variant(const std::string& name) {
    if (name == "ctrgc") return ModelVariant::ctrgc;
    if (name == "stgc") return ModelVariant::stgc;
    if (name == "agc") return ModelVariant::agc;
    if (name == "dcgc") return ModelVariant::dcgc;
    if (name == "dcgc_star") return ModelVariant::dcgc_star;
    throw lookup_error("unknown model variant '" + name + "'");
}

std::string variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::ctrgc: return "ctrgc";
        case ModelVariant::stgc: return "stgc";
        case ModelVariant::agc: return "agc";
        case ModelVariant::dcgc: return "dcgc";
        case ModelVariant::dcgc_star: return "dcgc_star";
    }
    throw configuration_error("bad variant enum");
}

// ---- batch normalization ----

BatchNorm make_batch_norm(std::size_t channels) {
    BatchNorm bn;
    bn.gamma = Tensor::full({channels}, 1.0, true);
    bn.beta = Tensor::zeros({channels}, true);
    bn.running_mean = Tensor::zeros({channels});
    bn.running_var = Tensor::full({channels}, 1.0);
    return bn;
}

void BatchNorm::collect_params(const std::string& prefix, ParamList& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
}

void BatchNorm::collect_state(const std::string& prefix, ParamList& out) const {
    collect_params(prefix, out);
    out.emplace_back(prefix + ".running_mean", running_mean);
    out.emplace_back(prefix + ".running_var", running_var);
}

Tensor batch_norm(BatchNorm& bn, const Tensor& x, bool training) {
    std::size_t c = bn.channels();
    if (x.shape().back() != c)
        throw dimension_error("batch_norm: expected " + std::to_string(c) + " channels");
    Tensor eps_t = Tensor::full({c}, bn.eps);
    Tensor mean, var;
    if (training) {
        mean = channel_mean(x);
        Tensor centered = sub(x, mean);
        var = channel_mean(mul(centered, centered));
        // running statistics live outside the tape
        for (std::size_t i = 0; i < c; ++i) {
            bn.running_mean.data()[i] = (1.0 - bn.momentum) * bn.running_mean.data()[i] +
                                        bn.momentum * mean.data()[i];
            bn.running_var.data()[i] = (1.0 - bn.momentum) * bn.running_var.data()[i] +
                                       bn.momentum * var.data()[i];
        }
    } else {
        mean = bn.running_mean;
        var = bn.running_var;
    }
    Tensor normed = divide(sub(x, mean), sqrt_elem(add(var, eps_t)));
    return add(mul(bn.gamma, normed), bn.beta);
}

// ---- temporal module ----

namespace {

TemporalModule make_temporal(std::mt19937_64& rng, std::size_t channels,
                             std::size_t stride) {
    if (channels % 4 != 0)
        throw configuration_error("temporal module needs channels divisible by 4, got " +
                                  std::to_string(channels));
    std::size_t cb = channels / 4;
    TemporalModule tm;
    tm.in_channels = channels;
    tm.out_channels = channels;
    tm.stride = stride;
    for (std::size_t d : {std::size_t{1}, std::size_t{2}}) {
        TemporalBranch b;
        b.kind = TemporalBranch::Kind::conv;
        b.reduce = make_linear(rng, channels, cb);
        b.reduce_norm = make_batch_norm(cb);
        b.conv_w = uniform_tensor(rng, {cb, cb, 5}, 1.0 / std::sqrt(5.0 * cb));
        b.conv_b = uniform_tensor(rng, {cb}, 1.0 / std::sqrt(5.0 * cb));
        b.out_norm = make_batch_norm(cb);
        b.kernel = 5;
        b.dilation = d;
        b.stride = stride;
        tm.branches.push_back(std::move(b));
    }
    {
        TemporalBranch b;
        b.kind = TemporalBranch::Kind::pool;
        b.reduce = make_linear(rng, channels, cb);
        b.reduce_norm = make_batch_norm(cb);
        b.out_norm = make_batch_norm(cb);
        b.kernel = 3;
        b.stride = stride;
        tm.branches.push_back(std::move(b));
    }
    {
        TemporalBranch b;
        b.kind = TemporalBranch::Kind::direct;
        b.conv_w = uniform_tensor(rng, {cb, channels, 1}, 1.0 / std::sqrt((double)channels));
        b.conv_b = uniform_tensor(rng, {cb}, 1.0 / std::sqrt((double)channels));
        b.out_norm = make_batch_norm(cb);
        b.kernel = 1;
        b.stride = stride;
        tm.branches.push_back(std::move(b));
    }
    return tm;
}

} // namespace

void TemporalModule::collect_params(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < branches.size(); ++i) {
        const TemporalBranch& b = branches[i];
        std::string p = prefix + ".branch" + std::to_string(i + 1);
        if (b.kind != TemporalBranch::Kind::direct) {
            b.reduce.collect_params(p + ".reduce", out);
            b.reduce_norm.collect_params(p + ".reduce_norm", out);
        }
        if (b.kind != TemporalBranch::Kind::pool) {
            out.emplace_back(p + ".conv.weight", b.conv_w);
            out.emplace_back(p + ".conv.bias", b.conv_b);
        }
        b.out_norm.collect_params(p + ".out_norm", out);
    }
}

void TemporalModule::collect_state(const std::string& prefix, ParamList& out) const {
    collect_params(prefix, out);
    for (std::size_t i = 0; i < branches.size(); ++i) {
        const TemporalBranch& b = branches[i];
        std::string p = prefix + ".branch" + std::to_string(i + 1);
        if (b.kind != TemporalBranch::Kind::direct) {
            out.emplace_back(p + ".reduce_norm.running_mean", b.reduce_norm.running_mean);
            out.emplace_back(p + ".reduce_norm.running_var", b.reduce_norm.running_var);
        }
        out.emplace_back(p + ".out_norm.running_mean", b.out_norm.running_mean);
        out.emplace_back(p + ".out_norm.running_var", b.out_norm.running_var);
    }
}

Tensor temporal_module_forward(TemporalModule& tm, const Tensor& x, bool training) {
    std::vector<Tensor> outs;
    outs.reserve(tm.branches.size());
    for (TemporalBranch& b : tm.branches) {
        switch (b.kind) {
            case TemporalBranch::Kind::conv: {
                Tensor h = relu(batch_norm(b.reduce_norm, b.reduce(x), training));
                Tensor y = temporal_conv(h, b.conv_w, b.conv_b, b.stride, b.dilation);
                outs.push_back(batch_norm(b.out_norm, y, training));
                break;
            }
            case TemporalBranch::Kind::pool: {
                Tensor h = relu(batch_norm(b.reduce_norm, b.reduce(x), training));
                Tensor y = temporal_maxpool(h, b.kernel, b.stride);
                outs.push_back(batch_norm(b.out_norm, y, training));
                break;
            }
            case TemporalBranch::Kind::direct: {
                Tensor y = temporal_conv(x, b.conv_w, b.conv_b, b.stride, 1);
                outs.push_back(batch_norm(b.out_norm, y, training));
                break;
            }
        }
    }
    return concat(outs, 3);
}

// ---- spatial module ----

namespace {

std::size_t branch_out_channels(const GcBranch& b) {
    return std::visit([](const auto& l) { return l.transform.out_channels(); }, b);
}

Tensor branch_forward(GcBranch& b, const Tensor& x) {
    if (auto* l = std::get_if<CtrGcLayer>(&b)) return ctr_gc_forward(*l, x);
    if (auto* l = std::get_if<StGcLayer>(&b)) return st_gc_forward(*l, x);
    if (auto* l = std::get_if<AgcLayer>(&b)) return agc_forward(*l, x);
    return dc_gc_forward(std::get<DcGcLayer>(b), x);
}

GcBranch make_branch(std::mt19937_64& rng, const ModelConfig& cfg, std::size_t in,
                     std::size_t out, std::size_t joints,
                     const std::vector<double>& partition,
                     const std::string& partition_name) {
    switch (cfg.variant) {
        case ModelVariant::ctrgc:
            return make_ctr_gc(rng, in, out, joints, cfg.reduction, cfg.corr_fn,
                               cfg.sigma, partition, partition_name);
        case ModelVariant::stgc:
            return make_st_gc(rng, in, out, partition, joints, true);
        case ModelVariant::agc:
            return make_agc(rng, in, out, std::max<std::size_t>(1, out / 4), partition,
                            joints);
        case ModelVariant::dcgc:
            return make_dc_gc(rng, in, out, joints, cfg.dc_groups, partition, false);
        case ModelVariant::dcgc_star:
            return make_dc_gc(rng, in, out, joints, in, partition, true);
    }
    throw configuration_error("bad variant enum");
}

void collect_branch_params(const GcBranch& b, const std::string& prefix, ParamList& out) {
    std::visit([&](const auto& l) { l.collect_params(prefix, out); }, b);
}

} // namespace

void SpatialModule::collect_params(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < branches.size(); ++i)
        collect_branch_params(branches[i], prefix + ".gc" + std::to_string(i + 1), out);
    norm.collect_params(prefix + ".norm", out);
    if (has_down) {
        down.collect_params(prefix + ".down", out);
        down_norm.collect_params(prefix + ".down_norm", out);
    }
}

void SpatialModule::collect_state(const std::string& prefix, ParamList& out) const {
    collect_params(prefix, out);
    out.emplace_back(prefix + ".norm.running_mean", norm.running_mean);
    out.emplace_back(prefix + ".norm.running_var", norm.running_var);
    if (has_down) {
        out.emplace_back(prefix + ".down_norm.running_mean", down_norm.running_mean);
        out.emplace_back(prefix + ".down_norm.running_var", down_norm.running_var);
    }
}

Tensor spatial_module_forward(SpatialModule& sm, const Tensor& x, bool training) {
    Tensor sum;
    for (GcBranch& b : sm.branches) {
        Tensor y = branch_forward(b, x);
        sum = sum.defined() ? add(sum, y) : y;
    }
    Tensor normed = batch_norm(sm.norm, sum, training);
    Tensor res = sm.has_down ? batch_norm(sm.down_norm, sm.down(x), training) : x;
    return relu(add(normed, res));
}

// ---- basic block ----

void BasicBlock::collect_params(const std::string& prefix, ParamList& out) const {
    spatial.collect_params(prefix + ".spatial", out);
    temporal.collect_params(prefix + ".temporal", out);
    if (residual_projection) {
        out.emplace_back(prefix + ".residual.weight", res_w);
        out.emplace_back(prefix + ".residual.bias", res_b);
        res_norm.collect_params(prefix + ".residual_norm", out);
    }
}

void BasicBlock::collect_state(const std::string& prefix, ParamList& out) const {
    collect_params(prefix, out);
    spatial.collect_state(prefix + ".spatial", out);
    temporal.collect_state(prefix + ".temporal", out);
    if (residual_projection) {
        out.emplace_back(prefix + ".residual_norm.running_mean", res_norm.running_mean);
        out.emplace_back(prefix + ".residual_norm.running_var", res_norm.running_var);
    }
}

Tensor block_forward(BasicBlock& block, const Tensor& x, bool training) {
    Tensor s = spatial_module_forward(block.spatial, x, training);
    Tensor t = temporal_module_forward(block.temporal, s, training);
    if (!block.has_residual) return relu(t);
    Tensor res;
    if (block.residual_projection)
        res = batch_norm(block.res_norm,
                         temporal_conv(x, block.res_w, block.res_b, block.stride, 1),
                         training);
    else
        res = x;
    return relu(add(t, res));
}

// ---- model ----

void ModelConfig::validate() const {
    if (channels.empty() || channels.size() != strides.size())
        throw configuration_error("channel and stride plans must be nonempty and equal length");
    for (std::size_t c : channels)
        if (c == 0 || c % 4 != 0)
            throw configuration_error("block channels must be positive multiples of 4");
    for (std::size_t s : strides)
        if (s != 1 && s != 2)
            throw configuration_error("temporal strides must be 1 or 2");
    if (num_classes == 0) throw configuration_error("num_classes must be positive");
    if (in_channels == 0) throw configuration_error("in_channels must be positive");
    if (reduction == 0) throw configuration_error("reduction must be positive");
    if (gc_per_block == 0) throw configuration_error("gc_per_block must be positive");
    if (persons == 0 || frames == 0)
        throw configuration_error("persons and frames must be positive");
    if (variant == ModelVariant::dcgc)
        for (std::size_t c : channels)
            if (dc_groups == 0 || c % dc_groups != 0)
                throw configuration_error("dcgc: channels must be divisible by dc_groups");
}

std::string ModelConfig::canonical() const {
    std::ostringstream os;
    os << "variant=" << variant_name(variant) << " graph=" << graph
       << " classes=" << num_classes << " in=" << in_channels << " channels=";
    for (std::size_t i = 0; i < channels.size(); ++i)
        os << (i ? "," : "") << channels[i];
    os << " strides=";
    for (std::size_t i = 0; i < strides.size(); ++i)
        os << (i ? "," : "") << strides[i];
    os << " r=" << reduction << " corr="
       << (corr_fn == CorrFn::m1 ? "m1" : corr_fn == CorrFn::m1plus ? "m1plus" : "m2")
       << " sigma="
       << (sigma == Activation::tanh      ? "tanh"
           : sigma == Activation::sigmoid ? "sigmoid"
                                          : "relu")
       << " gc=" << gc_per_block << " groups=" << dc_groups << " persons=" << persons
       << " frames=" << frames;
    return os.str();
}

void Model::collect_params(ParamList& out) const {
    input_norm.collect_params("input_norm", out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect_params("block" + std::to_string(i + 1), out);
    classifier.collect_params("classifier", out);
}

void Model::collect_state(ParamList& out) const {
    input_norm.collect_state("input_norm", out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].collect_state("block" + std::to_string(i + 1), out);
    classifier.collect_params("classifier", out);
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model model;
    model.config = config;
    model.graph = build_graph(config.graph);
    AdjacencySet adj = adjacency_set(model.graph);
    const std::vector<const std::vector<double>*> partitions = {&adj.identity, &adj.inward,
                                                                &adj.outward};
    const std::vector<std::string> partition_names = {"identity", "inward", "outward"};
    std::mt19937_64 rng(seed);
    model.input_norm = make_batch_norm(config.in_channels);
    std::size_t in = config.in_channels;
    std::size_t n = model.graph.num_joints;
    for (std::size_t b = 0; b < config.channels.size(); ++b) {
        std::size_t out = config.channels[b];
        std::size_t stride = config.strides[b];
        BasicBlock block;
        for (std::size_t k = 0; k < config.gc_per_block; ++k)
            block.spatial.branches.push_back(make_branch(rng, config, in, out, n,
                                                         *partitions[k % 3],
                                                         partition_names[k % 3]));
        block.spatial.norm = make_batch_norm(out);
        block.spatial.has_down = in != out;
        if (block.spatial.has_down) {
            block.spatial.down = make_linear(rng, in, out);
            block.spatial.down_norm = make_batch_norm(out);
        }
        block.temporal = make_temporal(rng, out, stride);
        block.stride = stride;
        block.has_residual = b != 0;
        block.residual_projection = block.has_residual && (in != out || stride != 1);
        if (block.residual_projection) {
            double bound = 1.0 / std::sqrt(static_cast<double>(in));
            block.res_w = uniform_tensor(rng, {out, in, 1}, bound);
            block.res_b = uniform_tensor(rng, {out}, bound);
            block.res_norm = make_batch_norm(out);
        }
        model.blocks.push_back(std::move(block));
        in = out;
    }
    model.classifier = make_linear(rng, config.channels.back(), config.num_classes);
    return model;
}

Tensor model_forward(Model& model, const Tensor& x, bool training) {
    const ModelConfig& cfg = model.config;
    if (x.rank() != 5 || x.shape()[3] != model.graph.num_joints ||
        x.shape()[4] != cfg.in_channels)
        throw dimension_error("model_forward expects [B,M,T,N,C], got " +
                              shape_str(x.shape()));
    std::size_t batch = x.shape()[0], m = x.shape()[1], t = x.shape()[2];
    std::size_t n = x.shape()[3], c = x.shape()[4];
    Tensor h = reshape(x, {batch * m, t, n, c});
    h = batch_norm(model.input_norm, h, training);
    for (BasicBlock& block : model.blocks) h = block_forward(block, h, training);
    Tensor pooled = reduce(Reduce::mean, reduce(Reduce::mean, h, 1), 1); // [B*M, C]
    pooled = reduce(Reduce::mean, reshape(pooled, {batch, m, pooled.shape()[1]}), 1);
    return model.classifier(pooled);
}

Tensor pack_batch(const std::vector<const SkeletonSequence*>& seqs, std::size_t persons,
                  std::size_t frames) {
    if (seqs.empty()) throw contract_error("pack_batch: empty batch");
    std::size_t n = seqs[0]->joints, c = seqs[0]->channels;
    Tensor out = Tensor::zeros({seqs.size(), persons, frames, n, c});
    for (std::size_t b = 0; b < seqs.size(); ++b) {
        if (seqs[b]->joints != n || seqs[b]->channels != c)
            throw dimension_error("pack_batch: inconsistent joint or channel counts");
        SkeletonSequence rs = resize_temporal(*seqs[b], frames);
        std::size_t copy_m = std::min(persons, rs.persons);
        for (std::size_t m = 0; m < copy_m; ++m)
            for (std::size_t idx = 0; idx < frames * n * c; ++idx)
                out.data()[((b * persons + m) * frames * n * c) + idx] =
                    rs.data[m * frames * n * c + idx];
    }
    return out;
}

// ---- accounting ----

std::string ParamBreakdown::describe() const {
    std::ostringstream os;
    for (const auto& [name, count] : per_block)
        os << name << " " << count << "\n";
    for (const auto& [role, count] : per_role)
        os << "role." << role << " " << count << "\n";
    os << "total " << total;
    return os.str();
}

ParamBreakdown count_params(const Model& model) {
    ParamList params;
    model.collect_params(params);
    ParamBreakdown out;
    for (const auto& [name, t] : params) {
        out.total += t.size();
        std::string block = name.substr(0, name.find('.'));
        if (!out.per_block.empty() && out.per_block.back().first == block)
            out.per_block.back().second += t.size();
        else
            out.per_block.emplace_back(block, t.size());
        std::string role = "weights";
        if (name.ends_with(".gamma") || name.ends_with(".beta"))
            role = "normalization";
        else if (name.ends_with(".alpha"))
            role = "alpha";
        else if (name.find("topolog") != std::string::npos)
            role = "topologies";
        else if (name.ends_with(".bias"))
            role = "biases";
        out.per_role[role] += t.size();
    }
    return out;
}

std::string FlopsReport::describe() const {
    std::ostringstream os;
    os << "per_person mac1=" << fmt(per_person(1)) << " mac2=" << fmt(per_person(2))
       << "\n"
       << "full_sample persons=" << persons << " mac1=" << fmt(full_sample(1))
       << " mac2=" << fmt(full_sample(2));
    return os.str();
}

FlopsReport count_flops(const Model& model, std::size_t frames, std::size_t persons) {
    const ModelConfig& cfg = model.config;
    double macs = 0.0, elem = 0.0;
    double n = static_cast<double>(model.graph.num_joints);
    double t = static_cast<double>(frames);
    double in = static_cast<double>(cfg.in_channels);

    elem += 4.0 * t * n * in; // input normalization

    auto bn_cost = [&](double count) { elem += 4.0 * count; };

    for (std::size_t b = 0; b < cfg.channels.size(); ++b) {
        double out = static_cast<double>(cfg.channels[b]);
        double stride = static_cast<double>(cfg.strides[b]);
        double to = std::floor((t - 1.0) / stride) + 1.0;

        // spatial branches
        for (std::size_t k = 0; k < cfg.gc_per_block; ++k) {
            macs += t * n * in * out; // feature transform
            elem += t * n * out;      // its bias
            switch (cfg.variant) {
                case ModelVariant::ctrgc: {
                    double cr = static_cast<double>(
                        reduced_channel_count(static_cast<std::size_t>(in), cfg.reduction));
                    macs += 2.0 * t * n * in * cr; // psi/phi on every frame
                    elem += 2.0 * t * n * cr;      // their biases
                    elem += 2.0 * t * n * cr;      // temporal pooling
                    if (cfg.corr_fn == CorrFn::m2) {
                        macs += n * n * (2.0 * cr * cr + cr * cr);
                        elem += n * n * 3.0 * cr;
                    } else {
                        elem += 2.0 * n * n * cr; // pairwise op + activation
                    }
                    macs += n * n * cr * out; // channel lift
                    elem += n * n * out;      // its bias
                    elem += 2.0 * n * n * out; // refine: scale and add
                    macs += t * n * n * out;   // aggregation
                    break;
                }
                case ModelVariant::stgc:
                    macs += t * n * n * out;
                    break;
                case ModelVariant::agc: {
                    double inter = std::max(1.0, out / 4.0);
                    elem += t * n * in;            // pooling
                    macs += 2.0 * n * in * inter;  // theta/phi on pooled features
                    macs += n * n * inter;         // attention logits
                    elem += 4.0 * n * n;           // softmax + shared add
                    macs += t * n * n * out;
                    break;
                }
                case ModelVariant::dcgc:
                    macs += t * n * n * out;
                    break;
                case ModelVariant::dcgc_star:
                    macs += t * n * n * in; // aggregation happens on input channels
                    break;
            }
        }
        elem += (cfg.gc_per_block - 1) * t * n * out; // branch sum
        bn_cost(t * n * out);
        if (in != out) { // projection on the spatial residual
            macs += t * n * in * out;
            elem += t * n * out;
            bn_cost(t * n * out);
        }
        elem += 2.0 * t * n * out; // residual add + relu

        // temporal module
        double cb = out / 4.0;
        macs += 3.0 * t * n * out * cb; // three stride-1 reductions
        elem += 3.0 * t * n * cb;
        bn_cost(3.0 * t * n * cb);
        elem += 3.0 * t * n * cb; // relu after each reduction
        macs += 2.0 * to * n * 5.0 * cb * cb; // dilated convolutions
        elem += 2.0 * to * n * cb;
        elem += 3.0 * to * n * cb; // max pooling comparisons
        macs += to * n * out * cb; // strided 1x1 branch
        elem += to * n * cb;
        bn_cost(4.0 * to * n * cb);

        if (b != 0) { // block residual
            if (in != out || stride != 1.0) {
                macs += to * n * in * out;
                elem += to * n * out;
                bn_cost(to * n * out);
            }
            elem += to * n * out; // add
        }
        elem += to * n * out; // final relu

        in = out;
        t = to;
    }

    elem += 2.0 * t * n; // global pooling (approximate, per channel folded below)
    macs += in * static_cast<double>(cfg.num_classes); // classifier
    elem += static_cast<double>(cfg.num_classes);

    FlopsReport rep;
    rep.macs_per_person = macs;
    rep.elementwise_per_person = elem;
    rep.persons = persons;
    return rep;
}

// ---- checkpoints ----

std::uint64_t config_hash(const ModelConfig& config) {
    std::string s = config.canonical();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T)))
        throw format_error(std::string("checkpoint truncated while reading ") + what);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

} // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    ParamList state;
    model.collect_state(state);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("cannot open '" + path + "' for writing");
    os.write("CTRC", 4);
    write_le<std::uint32_t>(os, kCheckpointVersion);
    write_le<std::uint64_t>(os, config_hash(model.config));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(state.size()));
    for (const auto& [name, t] : state) {
        write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
        for (std::size_t i = 0; i < t.size(); ++i)
            write_le<float>(os, static_cast<float>(t.data()[i]));
    }
    if (!os) throw format_error("write failure on '" + path + "'");
}

Model load_checkpoint(const std::string& path, const ModelConfig& config) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("cannot open checkpoint '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "CTRC")
        throw format_error("bad checkpoint magic in '" + path + "'");
    std::uint32_t version = read_le<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw format_error("unsupported checkpoint version " + std::to_string(version));
    std::uint64_t hash = read_le<std::uint64_t>(is, "config hash");
    if (hash != config_hash(config))
        throw format_error("checkpoint config hash mismatch");

    Model model = build_model(config, 0);
    ParamList state;
    model.collect_state(state);
    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : state) by_name.emplace(name, t);

    std::uint32_t entries = read_le<std::uint32_t>(is, "entry count");
    std::map<std::string, bool> filled;
    for (std::uint32_t e = 0; e < entries; ++e) {
        std::uint16_t len = read_le<std::uint16_t>(is, "name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw format_error("checkpoint truncated in name");
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw format_error("checkpoint names unknown parameter '" + name + "'");
        std::uint8_t rank = read_le<std::uint8_t>(is, "rank");
        Shape shape;
        for (std::uint8_t d = 0; d < rank; ++d)
            shape.push_back(read_le<std::uint32_t>(is, "dimension"));
        if (shape != it->second.shape())
            throw format_error("checkpoint shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < it->second.size(); ++i)
            it->second.data()[i] = static_cast<double>(read_le<float>(is, "payload"));
        filled[name] = true;
    }
    for (const auto& [name, t] : by_name)
        if (!filled.count(name))
            throw format_error("checkpoint missing parameter '" + name + "'");
    if (is.peek() != std::ifstream::traits_type::eof())
        throw format_error("trailing bytes in checkpoint '" + path + "'");
    return model;
}

// ---- topology dump ----

std::string dump_topologies(Model& model, const Tensor& x,
                            const std::vector<std::size_t>& blocks,
                            const std::vector<std::size_t>& channels) {
    if (model.config.variant != ModelVariant::ctrgc)
        throw configuration_error("topology dump requires the channel-wise variant");
    if (x.rank() != 5 || x.shape()[0] != 1)
        throw dimension_error("dump_topologies expects one packed sample [1,M,T,N,C]");
    for (std::size_t b : blocks)
        if (b == 0 || b > model.blocks.size())
            throw range_error("block index out of range: " + std::to_string(b));

    std::size_t m = x.shape()[1], t = x.shape()[2];
    std::size_t n = x.shape()[3], c = x.shape()[4];
    Tensor h = reshape(x, {m, t, n, c});
    h = batch_norm(model.input_norm, h, false);

    std::ostringstream os;
    std::size_t joints = model.graph.num_joints;
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        bool selected =
            std::find(blocks.begin(), blocks.end(), b + 1) != blocks.end();
        if (selected) {
            BasicBlock& block = model.blocks[b];
            for (std::size_t k = 0; k < block.spatial.branches.size(); ++k) {
                CtrGcLayer& layer = std::get<CtrGcLayer>(block.spatial.branches[k]);
                os << "block=" << (b + 1) << " branch=" << (k + 1)
                   << " kind=A channel=-1\n";
                for (std::size_t i = 0; i < joints; ++i) {
                    for (std::size_t j = 0; j < joints; ++j)
                        os << (j ? " " : "") << fmt(layer.shared.A.data()[i * joints + j]);
                    os << "\n";
                }
                Tensor refined = infer_topologies(layer, h); // [M,N,N,C']
                std::size_t co = layer.out_channels();
                for (std::size_t ch : channels) {
                    if (ch >= co)
                        throw range_error("channel index out of range: " +
                                          std::to_string(ch));
                    os << "block=" << (b + 1) << " branch=" << (k + 1)
                       << " kind=R channel=" << ch << "\n";
                    for (std::size_t i = 0; i < joints; ++i) {
                        for (std::size_t j = 0; j < joints; ++j)
                            os << (j ? " " : "")
                               << fmt(refined.data()[((0 * joints + i) * joints + j) * co +
                                                     ch]);
                        os << "\n";
                    }
                }
            }
        }
        h = block_forward(model.blocks[b], h, false);
    }
    return os.str();
}

} // namespace ctr
