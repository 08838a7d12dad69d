#include "ctr/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace ctr {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<double> softmax_row(const std::vector<double>& row) {
    double mx = *std::max_element(row.begin(), row.end());
    std::vector<double> out(row.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) denom += out[i] = std::exp(row[i] - mx);
    for (double& v : out) v /= denom;
    return out;
}

std::size_t argmax(const std::vector<double>& row) {
    return static_cast<std::size_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
}

} // namespace

void Schedule::validate() const {
    if (base_lr <= 0.0 || decay_factor <= 0.0)
        throw configuration_error("schedule rates must be positive");
    if (warmup_epochs > total_epochs)
        throw configuration_error("warmup longer than the schedule");
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
        if (decay_epochs[i] >= total_epochs)
            throw configuration_error("decay epoch beyond the schedule");
        if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
            throw configuration_error("decay epochs must be strictly increasing");
    }
}

double lr_at(const Schedule& schedule, std::size_t epoch) {
    schedule.validate();
    if (epoch >= schedule.total_epochs)
        throw contract_error("epoch " + std::to_string(epoch) + " outside the schedule");
    if (epoch < schedule.warmup_epochs)
        return schedule.base_lr * static_cast<double>(epoch + 1) /
               static_cast<double>(schedule.warmup_epochs);
    double lr = schedule.base_lr;
    for (std::size_t d : schedule.decay_epochs)
        if (epoch >= d) lr *= schedule.decay_factor;
    return lr;
}

OptimizerState make_optimizer(const ParamList& params, double momentum,
                              double weight_decay) {
    OptimizerState opt;
    opt.momentum = momentum;
    opt.weight_decay = weight_decay;
    opt.velocity.reserve(params.size());
    for (const auto& [name, t] : params) opt.velocity.emplace_back(t.size(), 0.0);
    return opt;
}

void sgd_step(OptimizerState& opt, ParamList& params) {
    if (opt.velocity.size() != params.size())
        throw dimension_error("optimizer state does not mirror the parameter list");
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p].second;
        std::vector<double>& v = opt.velocity[p];
        if (v.size() != t.size())
            throw dimension_error("velocity shape mismatch for " + params[p].first);
        const std::vector<double>& g = t.grad();
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = opt.momentum * v[i] + g[i] + opt.weight_decay * t.data()[i];
            t.data()[i] -= opt.lr * v[i];
        }
    }
}

std::string EpochStats::line() const {
    return "epoch=" + std::to_string(epoch) + " lr=" + fmt(lr) + " loss=" + fmt(loss) +
           " train_acc=" + fmt(train_acc) + " test_acc=" + fmt(test_acc);
}

std::string TrainResult::log_text() const {
    std::string out;
    for (const EpochStats& e : log) out += e.line() + "\n";
    return out;
}

Modality parse_modality(const std::string& name) {
    if (name == "joint") return Modality::joint;
    if (name == "bone") return Modality::bone;
    if (name == "joint_motion") return Modality::joint_motion;
    if (name == "bone_motion") return Modality::bone_motion;
    throw lookup_error("unknown modality '" + name + "'");
}

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::joint: return "joint";
        case Modality::bone: return "bone";
        case Modality::joint_motion: return "joint_motion";
        case Modality::bone_motion: return "bone_motion";
    }
    throw configuration_error("bad modality enum");
}

DatasetDescriptor derive_modality(const DatasetDescriptor& ds, Modality modality) {
    DatasetDescriptor out = ds;
    for (SkeletonSequence& s : out.samples) {
        switch (modality) {
            case Modality::joint: break;
            case Modality::bone: s = derive_bone(s, ds.graph); break;
            case Modality::joint_motion: s = derive_motion(s); break;
            case Modality::bone_motion: s = derive_motion(derive_bone(s, ds.graph)); break;
        }
    }
    return out;
}

TrainResult train(Model& model, const DatasetDescriptor& dataset,
                  const TrainOptions& options, std::uint64_t seed) {
    options.schedule.validate();
    if (dataset.samples.empty()) throw contract_error("train: empty dataset");
    if (options.batch_size == 0) throw configuration_error("batch size must be positive");
    std::vector<std::size_t> train_idx = dataset.split_indices(true);
    if (train_idx.empty()) throw contract_error("train: empty training split");

    ParamList params;
    model.collect_params(params);
    OptimizerState opt = make_optimizer(params, options.momentum, options.weight_decay);
    std::mt19937_64 rng(seed);

    TrainResult result;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        opt.lr = lr_at(options.schedule, epoch);
        std::shuffle(train_idx.begin(), train_idx.end(), rng);

        double loss_sum = 0.0;
        std::size_t seen = 0, correct = 0;
        for (std::size_t start = 0; start < train_idx.size();
             start += options.batch_size) {
            std::size_t stop = std::min(start + options.batch_size, train_idx.size());
            std::vector<const SkeletonSequence*> seqs;
            std::vector<int> labels;
            for (std::size_t b = start; b < stop; ++b) {
                seqs.push_back(&dataset.samples[train_idx[b]]);
                labels.push_back(static_cast<int>(dataset.samples[train_idx[b]].label));
            }
            Tensor x = pack_batch(seqs, model.config.persons, model.config.frames);
            for (auto& [name, t] : params) t.zero_grad();
            Tape tape;
            Tensor logits = model_forward(model, x, true);
            Tensor loss = cross_entropy(logits, labels);
            tape.backward(loss);
            sgd_step(opt, params);

            std::size_t classes = model.config.num_classes;
            for (std::size_t b = 0; b < seqs.size(); ++b) {
                const double* row = logits.data() + b * classes;
                std::size_t best = static_cast<std::size_t>(
                    std::max_element(row, row + classes) - row);
                correct += best == static_cast<std::size_t>(labels[b]);
            }
            loss_sum += loss.item() * static_cast<double>(seqs.size());
            seen += seqs.size();
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = opt.lr;
        stats.loss = loss_sum / static_cast<double>(seen);
        stats.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        if (!dataset.split_indices(false).empty())
            stats.test_acc = evaluate(model, dataset, true, options.batch_size).top1;
        result.log.push_back(stats);
        if (options.verbose) std::puts(stats.line().c_str());
        if (stats.test_acc >= result.best_test_acc) {
            result.best_test_acc = stats.test_acc;
            if (!options.checkpoint_path.empty())
                save_checkpoint(model, options.checkpoint_path);
        }
    }
    return result;
}

EvalResult evaluate(Model& model, const DatasetDescriptor& dataset, bool test_split,
                    std::size_t batch_size) {
    std::vector<std::size_t> idx = dataset.split_indices(!test_split);
    if (idx.empty()) throw contract_error("evaluate: empty split");
    if (batch_size == 0) throw configuration_error("batch size must be positive");

    EvalResult out;
    std::size_t classes = model.config.num_classes;
    std::vector<std::size_t> class_total(classes, 0), class_correct(classes, 0);
    std::size_t correct = 0;
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        std::size_t stop = std::min(start + batch_size, idx.size());
        std::vector<const SkeletonSequence*> seqs;
        for (std::size_t b = start; b < stop; ++b)
            seqs.push_back(&dataset.samples[idx[b]]);
        Tensor x = pack_batch(seqs, model.config.persons, model.config.frames);
        Tensor logits = model_forward(model, x, false);
        for (std::size_t b = 0; b < seqs.size(); ++b) {
            const double* row = logits.data() + b * classes;
            std::vector<double> rowv(row, row + classes);
            std::size_t best = argmax(rowv);
            std::size_t label = seqs[b]->label;
            ++class_total[label];
            if (best == label) {
                ++correct;
                ++class_correct[label];
            }
            out.logits.push_back(std::move(rowv));
            out.sample_ids.push_back(idx[start + b]);
        }
    }
    out.top1 = static_cast<double>(correct) / static_cast<double>(idx.size());
    for (std::size_t k = 0; k < classes; ++k)
        out.per_class.push_back(class_total[k] == 0
                                    ? 0.0
                                    : static_cast<double>(class_correct[k]) /
                                          static_cast<double>(class_total[k]));
    return out;
}

void save_scores(const StreamScores& s, const std::string& path) {
    if (s.sample_ids.size() != s.scores.size())
        throw contract_error("score rows and sample ids must align");
    std::ofstream os(path);
    if (!os) throw format_error("cannot open '" + path + "' for writing");
    for (std::size_t r = 0; r < s.scores.size(); ++r) {
        os << s.sample_ids[r];
        for (double v : s.scores[r]) os << " " << fmt(v);
        os << "\n";
    }
    if (!os) throw format_error("write failure on '" + path + "'");
}

StreamScores load_scores(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("cannot open scores '" + path + "'");
    StreamScores s;
    std::string line;
    std::size_t width = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::size_t id;
        if (!(ls >> id)) throw format_error("malformed score line: " + line);
        std::vector<double> row;
        double v;
        while (ls >> v) row.push_back(v);
        if (row.empty() || (width != 0 && row.size() != width))
            throw format_error("inconsistent score row width: " + line);
        width = row.size();
        s.sample_ids.push_back(id);
        s.scores.push_back(std::move(row));
    }
    if (s.scores.empty()) throw format_error("empty score file '" + path + "'");
    return s;
}

FusionResult fuse_scores(const std::vector<StreamScores>& streams,
                         const std::vector<double>& weights) {
    if (streams.empty() || streams.size() != weights.size())
        throw contract_error("fusion needs one weight per stream");
    double total_weight = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw contract_error("fusion weights must be nonnegative");
        total_weight += w;
    }
    if (total_weight == 0.0) throw contract_error("fusion weights must not all be zero");
    const StreamScores& first = streams.front();
    for (const StreamScores& s : streams) {
        if (s.sample_ids != first.sample_ids)
            throw contract_error("fusion streams cover different sample sets");
        if (s.scores.size() != first.scores.size())
            throw contract_error("fusion streams have different lengths");
    }

    FusionResult out;
    out.sample_ids = first.sample_ids;
    for (std::size_t r = 0; r < first.scores.size(); ++r) {
        std::vector<double> fused(first.scores[r].size(), 0.0);
        for (std::size_t s = 0; s < streams.size(); ++s) {
            std::vector<double> p = softmax_row(streams[s].scores[r]);
            if (p.size() != fused.size())
                throw contract_error("fusion streams disagree on class count");
            for (std::size_t k = 0; k < fused.size(); ++k) fused[k] += weights[s] * p[k];
        }
        out.predictions.push_back(argmax(fused));
        out.fused.push_back(std::move(fused));
    }
    return out;
}

} // namespace ctr
