#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctr/network.hpp"
#include "ctr/skeleton.hpp"
#include "ctr/tensor.hpp"

namespace ctr {

struct Schedule {
    double base_lr = 0.1;
    std::size_t warmup_epochs = 5;
    std::vector<std::size_t> decay_epochs = {35, 55};
    double decay_factor = 0.1;
    std::size_t total_epochs = 65;

    void validate() const;
};

/// Linear warmup to base_lr over the warmup epochs, then a step decay at
/// each decay epoch.
double lr_at(const Schedule& schedule, std::size_t epoch);

struct OptimizerState {
    double momentum = 0.9;
    double weight_decay = 0.0004;
    double lr = 0.1;
    std::vector<std::vector<double>> velocity; // mirrors the parameter list
};

OptimizerState make_optimizer(const ParamList& params, double momentum = 0.9,
                              double weight_decay = 0.0004);

/// Classical momentum SGD with the decay folded into the gradient:
/// v <- momentum*v + g + weight_decay*p; p <- p - lr*v.
void sgd_step(OptimizerState& opt, ParamList& params);

struct EpochStats {
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    std::string line() const; // "epoch=<e> lr=<v> loss=<v> train_acc=<v> test_acc=<v>"
};

struct TrainOptions {
    Schedule schedule;
    std::size_t epochs = 65; // may be shorter than the schedule for quick runs
    std::size_t batch_size = 16;
    double momentum = 0.9;
    double weight_decay = 0.0004;
    std::string checkpoint_path; // best-test checkpoint, empty to skip
    bool verbose = false;        // echo each epoch line to stdout
};

struct TrainResult {
    std::vector<EpochStats> log;
    double best_test_acc = 0.0;
    std::string log_text() const;
};

enum class Modality { joint, bone, joint_motion, bone_motion };

Modality parse_modality(const std::string& name);
std::string modality_name(Modality m);

/// Applies the modality derivation to every sample of a dataset.
DatasetDescriptor derive_modality(const DatasetDescriptor& ds, Modality modality);

TrainResult train(Model& model, const DatasetDescriptor& dataset,
                  const TrainOptions& options, std::uint64_t seed);

struct EvalResult {
    double top1 = 0.0;
    std::vector<double> per_class;
    std::vector<std::vector<double>> logits; // one row per sample, split order
    std::vector<std::size_t> sample_ids;     // dataset indices, same order
};

EvalResult evaluate(Model& model, const DatasetDescriptor& dataset, bool test_split,
                    std::size_t batch_size = 16);

struct StreamScores {
    std::string modality;
    std::vector<std::size_t> sample_ids;
    std::vector<std::vector<double>> scores; // raw logits, softmaxed during fusion
};

void save_scores(const StreamScores& s, const std::string& path);
StreamScores load_scores(const std::string& path);

struct FusionResult {
    std::vector<std::size_t> sample_ids;
    std::vector<std::size_t> predictions;
    std::vector<std::vector<double>> fused;
};

/// fused = sum_s weight_s * softmax(logits_s); prediction is the argmax.
FusionResult fuse_scores(const std::vector<StreamScores>& streams,
                         const std::vector<double>& weights);

} // namespace ctr
