#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "ctr/graph_conv.hpp"
#include "ctr/skeleton.hpp"
#include "ctr/tensor.hpp"

namespace ctr {

enum class ModelVariant { ctrgc, stgc, agc, dcgc, dcgc_star };

ModelVariant parse_variant(const std::string& name);
std::string variant_name(ModelVariant v);

/// Per-channel batch normalization over the trailing axis; running statistics
/// are updated in training mode and used verbatim in evaluation mode.
struct BatchNorm {
    Tensor gamma, beta;              // [C], trainable
    Tensor running_mean, running_var; // [C], not trainable
    double momentum = 0.1;
    double eps = 1e-5;

    std::size_t channels() const { return gamma.shape()[0]; }
    void collect_params(const std::string& prefix, ParamList& out) const;
    void collect_state(const std::string& prefix, ParamList& out) const;
};

BatchNorm make_batch_norm(std::size_t channels);
Tensor batch_norm(BatchNorm& bn, const Tensor& x, bool training);

struct TemporalBranch {
    enum class Kind { conv, pool, direct };
    Kind kind = Kind::conv;
    LinearMap reduce;      // 1x1 channel reduction (conv/pool branches)
    BatchNorm reduce_norm;
    Tensor conv_w, conv_b; // [Cb,Cb,K] (conv branches) or [Cb,C,1] (direct)
    BatchNorm out_norm;
    std::size_t kernel = 5;
    std::size_t dilation = 1;
    std::size_t stride = 1;
};

/// Four parallel temporal branches, each producing out/4 channels:
/// two dilated convolutions, one max pool, one plain 1x1.
struct TemporalModule {
    std::vector<TemporalBranch> branches;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t stride = 1;
    void collect_params(const std::string& prefix, ParamList& out) const;
    void collect_state(const std::string& prefix, ParamList& out) const;
};

using GcBranch = std::variant<CtrGcLayer, StGcLayer, AgcLayer, DcGcLayer>;

struct SpatialModule {
    std::vector<GcBranch> branches; // summed
    BatchNorm norm;
    bool has_down = false;          // 1x1 projection when channels change
    LinearMap down;
    BatchNorm down_norm;
    void collect_params(const std::string& prefix, ParamList& out) const;
    void collect_state(const std::string& prefix, ParamList& out) const;
};

struct BasicBlock {
    SpatialModule spatial;
    TemporalModule temporal;
    std::size_t stride = 1;
    bool has_residual = true;       // the first block runs without one
    bool residual_projection = false;
    Tensor res_w, res_b;            // [Cout,Cin,1] strided 1x1
    BatchNorm res_norm;
    void collect_params(const std::string& prefix, ParamList& out) const;
    void collect_state(const std::string& prefix, ParamList& out) const;
};

struct ModelConfig {
    std::string graph = "ntu25";
    std::size_t num_classes = 60;
    ModelVariant variant = ModelVariant::ctrgc;
    std::vector<std::size_t> channels = {64, 64, 64, 64, 128, 128, 128, 256, 256, 256};
    std::vector<std::size_t> strides = {1, 1, 1, 1, 2, 1, 1, 2, 1, 1};
    std::size_t in_channels = 3;
    std::size_t reduction = 8;
    CorrFn corr_fn = CorrFn::m1;
    Activation sigma = Activation::tanh;
    std::size_t gc_per_block = 3;
    std::size_t dc_groups = 16;
    std::size_t persons = 2;
    std::size_t frames = 64;

    void validate() const;
    std::string canonical() const; // stable key=value text, feeds the config hash
};

struct Model {
    ModelConfig config;
    SkeletonGraph graph;
    BatchNorm input_norm;
    std::vector<BasicBlock> blocks;
    LinearMap classifier;

    void collect_params(ParamList& out) const;            // trainables
    void collect_state(ParamList& out) const;             // + running statistics
};

Model build_model(const ModelConfig& config, std::uint64_t seed);

Tensor spatial_module_forward(SpatialModule& sm, const Tensor& x, bool training);
Tensor temporal_module_forward(TemporalModule& tm, const Tensor& x, bool training);
Tensor block_forward(BasicBlock& block, const Tensor& x, bool training);

/// x is [B,M,T,N,C]; persons are folded into the batch, run through the
/// blocks independently, pooled over (T,N) and averaged, then classified.
Tensor model_forward(Model& model, const Tensor& x, bool training);

/// Stacks sequences into [B,persons,frames,N,C], resampling frames and
/// padding or truncating the person axis.
Tensor pack_batch(const std::vector<const SkeletonSequence*>& seqs,
                  std::size_t persons, std::size_t frames);

struct ParamBreakdown {
    std::size_t total = 0;
    std::vector<std::pair<std::string, std::size_t>> per_block;
    std::map<std::string, std::size_t> per_role;
    std::string describe() const;
};

ParamBreakdown count_params(const Model& model);

struct FlopsReport {
    double macs_per_person = 0.0;
    double elementwise_per_person = 0.0;
    std::size_t persons = 1;
    double per_person(int flops_per_mac) const {
        return flops_per_mac * macs_per_person + elementwise_per_person;
    }
    double full_sample(int flops_per_mac) const {
        return per_person(flops_per_mac) * static_cast<double>(persons);
    }
    std::string describe() const;
};

FlopsReport count_flops(const Model& model, std::size_t frames, std::size_t persons);

std::uint64_t config_hash(const ModelConfig& config);
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path, const ModelConfig& config);

/// Text dump of shared and refined topologies for offline plotting; x is one
/// packed sample [1,M,T,N,C], channels index the refined output channels.
std::string dump_topologies(Model& model, const Tensor& x,
                            const std::vector<std::size_t>& blocks,
                            const std::vector<std::size_t>& channels);

} // namespace ctr
