// Command-line front end: dataset generation, training, evaluation, score
// fusion, cost accounting, constraint auditing, equivalence and gradient
// checking, and topology dumping. Exit status: 0 success, 1 validation or
// usage error, 2 runtime/format/numerical error.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "ctr/grad_check.hpp"
#include "ctr/network.hpp"
#include "ctr/skeleton.hpp"
#include "ctr/training.hpp"
#include "ctr/unified.hpp"

namespace fs = std::filesystem;
using namespace ctr;

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// A numerical check that prints its result but misses its tolerance is a
// runtime failure, not a usage error.
struct check_failed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelFlags {
    std::string variant = "ctrgc";
    std::string graph;       // default: the dataset's graph
    std::size_t classes = 0; // default: the dataset's class count
    std::vector<std::size_t> channels;
    std::vector<std::size_t> strides;
    std::size_t frames = 64;
    std::size_t persons = 1;
    std::size_t reduction = 8;
    std::string corr = "m1";
    std::size_t dc_groups = 16;
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf, bool with_io_dims,
                     const std::string& channels_flag = "--channels") {
    cmd->add_option("--variant", mf.variant, "Graph-convolution family")
        ->check(CLI::IsMember({"ctrgc", "stgc", "agc", "dcgc", "dcgc_star"}));
    cmd->add_option("--graph", mf.graph, "Skeleton graph name");
    cmd->add_option("--classes", mf.classes, "Number of action classes");
    cmd->add_option(channels_flag, mf.channels, "Per-block output channels")
        ->delimiter(',');
    cmd->add_option("--strides", mf.strides, "Per-block temporal strides")
        ->delimiter(',');
    cmd->add_option("--reduction", mf.reduction, "Correlation branch channel reduction");
    cmd->add_option("--corr", mf.corr, "Correlation function")
        ->check(CLI::IsMember({"m1", "m1plus", "m2"}));
    cmd->add_option("--dc-groups", mf.dc_groups, "Channel groups for the dcgc variant");
    if (with_io_dims) {
        cmd->add_option("--frames", mf.frames, "Frames per model input");
        cmd->add_option("--persons", mf.persons, "Person slots per model input");
    }
}

ModelConfig make_config(const ModelFlags& mf) {
    ModelConfig cfg;
    cfg.variant = parse_variant(mf.variant);
    if (!mf.graph.empty()) cfg.graph = mf.graph;
    if (mf.classes > 0) cfg.num_classes = mf.classes;
    if (!mf.channels.empty()) {
        cfg.channels = mf.channels;
        cfg.strides.assign(mf.channels.size(), 1);
    }
    if (!mf.strides.empty()) cfg.strides = mf.strides;
    cfg.frames = mf.frames;
    cfg.persons = mf.persons;
    cfg.reduction = mf.reduction;
    cfg.dc_groups = mf.dc_groups;
    if (mf.corr == "m1plus")
        cfg.corr_fn = CorrFn::m1plus;
    else if (mf.corr == "m2")
        cfg.corr_fn = CorrFn::m2;
    cfg.validate();
    return cfg;
}

std::string manifest_path(const std::string& data) {
    fs::path p(data);
    if (fs::is_directory(p)) p /= "manifest.txt";
    return p.string();
}

std::vector<double> dense_topology(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> t(n * n);
    for (double& v : t) v = u(rng);
    return t;
}

void print_audit(const std::string& variant,
                 const std::vector<ConstraintReport>& reports) {
    std::cout << "variant=" << variant << "\n";
    for (const ConstraintReport& r : reports) std::cout << r.describe() << "\n";
}

StreamScores scores_from_eval(const std::string& modality, const EvalResult& ev) {
    StreamScores s;
    s.modality = modality;
    s.sample_ids = ev.sample_ids;
    s.scores = ev.logits;
    return s;
}

int run(int argc, char** argv) {
    CLI::App app{"Channel-wise topology-refined graph convolution toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Flat key = value options file; flags override it");
    std::size_t threads = 1;
    app.add_option("--threads", threads, "Worker thread bound (accepted; execution is serial)")
        ->check(CLI::PositiveNumber);

    std::uint64_t seed = 1;
    auto add_seed = [&seed](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "PRNG seed")->envname("CTR_SEED");
    };

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "Synthesize a labeled skeleton dataset");
    SynthSpec synth;
    std::string out_dir;
    gen->add_option("--classes", synth.num_classes, "Number of classes");
    gen->add_option("--per-class", synth.samples_per_class, "Samples per class");
    gen->add_option("--graph", synth.graph_name, "Skeleton graph name");
    gen->add_option("--frames", synth.frames, "Frames per sequence");
    gen->add_option("--persons", synth.persons, "Persons per sequence");
    gen->add_option("--noise", synth.noise_sigma, "Gaussian noise level");
    gen->add_option("--out", out_dir, "Output directory")->required();
    add_seed(gen);
    gen->callback([&] {
        DatasetDescriptor ds = synthesize_dataset(synth, seed);
        save_dataset(ds, out_dir);
        std::cout << "wrote " << ds.samples.size() << " samples ("
                  << ds.num_classes << " classes) to " << out_dir << "\n";
    });

    // ---- derive ----
    auto* der = app.add_subcommand("derive", "Derive a modality stream from a dataset");
    std::string data, modality = "joint";
    der->add_option("--data", data, "Dataset directory or manifest")->required();
    der->add_option("--modality", modality, "Input modality")
        ->check(CLI::IsMember({"joint", "bone", "joint_motion", "bone_motion"}))
        ->required();
    der->add_option("--out", out_dir, "Output directory")->required();
    der->callback([&] {
        DatasetDescriptor ds = load_dataset(manifest_path(data));
        DatasetDescriptor derived = derive_modality(ds, parse_modality(modality));
        save_dataset(derived, out_dir);
        std::cout << "wrote " << modality << " stream (" << derived.samples.size()
                  << " samples) to " << out_dir << "\n";
    });

    // ---- train ----
    auto* tr = app.add_subcommand("train", "Train a model and checkpoint the best epoch");
    ModelFlags train_mf;
    TrainOptions topt;
    double base_lr = 0.1;
    std::size_t warmup = 5;
    std::vector<std::size_t> decay;
    tr->add_option("--data", data, "Dataset directory or manifest")->required();
    tr->add_option("--out", out_dir, "Output directory for log/checkpoint/scores")
        ->required();
    tr->add_option("--modality", modality, "Input modality")
        ->check(CLI::IsMember({"joint", "bone", "joint_motion", "bone_motion"}));
    add_model_flags(tr, train_mf, true);
    tr->add_option("--epochs", topt.epochs, "Training epochs");
    tr->add_option("--batch-size", topt.batch_size, "Minibatch size");
    tr->add_option("--lr", base_lr, "Base learning rate");
    tr->add_option("--warmup", warmup, "Linear warmup epochs");
    tr->add_option("--decay", decay, "Epochs at which the rate steps down")
        ->delimiter(',');
    tr->add_option("--momentum", topt.momentum, "SGD momentum");
    tr->add_option("--weight-decay", topt.weight_decay, "L2 weight decay");
    add_seed(tr);
    tr->callback([&] {
        DatasetDescriptor ds = load_dataset(manifest_path(data));
        ds = derive_modality(ds, parse_modality(modality));
        if (train_mf.graph.empty()) train_mf.graph = ds.graph.name;
        if (train_mf.classes == 0) train_mf.classes = ds.num_classes;
        ModelConfig cfg = make_config(train_mf);
        Model model = build_model(cfg, seed);

        topt.schedule.base_lr = base_lr;
        topt.schedule.warmup_epochs = warmup;
        topt.schedule.total_epochs = topt.epochs;
        topt.schedule.decay_epochs.clear();
        if (decay.empty()) {
            for (std::size_t d : {std::size_t{35}, std::size_t{55}})
                if (d < topt.epochs) topt.schedule.decay_epochs.push_back(d);
        } else {
            topt.schedule.decay_epochs = decay;
        }
        topt.schedule.validate();
        fs::create_directories(out_dir);
        topt.checkpoint_path = (fs::path(out_dir) / "model.ctrc").string();
        topt.verbose = true;

        TrainResult result = train(model, ds, topt, seed);
        std::ofstream log(fs::path(out_dir) / "train.log");
        log << result.log_text();

        Model best = load_checkpoint(topt.checkpoint_path, cfg);
        EvalResult ev = evaluate(best, ds, true, topt.batch_size);
        save_scores(scores_from_eval(modality, ev),
                    (fs::path(out_dir) / (modality + ".scores")).string());
        std::cout << "best_test_acc=" << fmt(result.best_test_acc) << "\n";
    });

    // ---- eval ----
    auto* ev_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    ModelFlags eval_mf;
    std::string ckpt, scores_out;
    std::size_t eval_batch = 16;
    bool eval_train_split = false;
    ev_cmd->add_option("--data", data, "Dataset directory or manifest")->required();
    ev_cmd->add_option("--checkpoint", ckpt, "Model checkpoint")->required();
    ev_cmd->add_option("--modality", modality, "Input modality")
        ->check(CLI::IsMember({"joint", "bone", "joint_motion", "bone_motion"}));
    add_model_flags(ev_cmd, eval_mf, true);
    ev_cmd->add_option("--batch-size", eval_batch, "Evaluation batch size");
    ev_cmd->add_flag("--train-split", eval_train_split, "Evaluate the training split");
    ev_cmd->add_option("--scores", scores_out, "Write per-sample logits here");
    ev_cmd->callback([&] {
        DatasetDescriptor ds = load_dataset(manifest_path(data));
        ds = derive_modality(ds, parse_modality(modality));
        if (eval_mf.graph.empty()) eval_mf.graph = ds.graph.name;
        if (eval_mf.classes == 0) eval_mf.classes = ds.num_classes;
        ModelConfig cfg = make_config(eval_mf);
        Model model = load_checkpoint(ckpt, cfg);
        EvalResult ev = evaluate(model, ds, !eval_train_split, eval_batch);
        std::cout << "top1=" << fmt(ev.top1) << "\n";
        for (std::size_t c = 0; c < ev.per_class.size(); ++c)
            std::cout << "class=" << c << " acc=" << fmt(ev.per_class[c]) << "\n";
        if (!scores_out.empty())
            save_scores(scores_from_eval(modality, ev), scores_out);
    });

    // ---- fuse ----
    auto* fu = app.add_subcommand("fuse", "Fuse per-stream score files");
    std::vector<std::string> stream_paths;
    std::vector<double> weights;
    fu->add_option("--streams", stream_paths, "Score files, one per stream")
        ->required()
        ->expected(1, 16);
    fu->add_option("--weights", weights, "Per-stream fusion weights (default 1)")
        ->delimiter(',');
    fu->add_option("--data", data, "Dataset directory or manifest (for labels)")
        ->required();
    fu->callback([&] {
        std::vector<StreamScores> streams;
        for (const std::string& p : stream_paths) streams.push_back(load_scores(p));
        if (weights.empty()) weights.assign(streams.size(), 1.0);
        FusionResult fused = fuse_scores(streams, weights);

        DatasetDescriptor ds = load_dataset(manifest_path(data));
        auto accuracy = [&](const std::vector<std::size_t>& ids,
                            const std::vector<std::size_t>& preds) {
            std::size_t hit = 0;
            for (std::size_t i = 0; i < ids.size(); ++i)
                if (preds[i] == ds.samples.at(ids[i]).label) ++hit;
            return static_cast<double>(hit) / static_cast<double>(ids.size());
        };
        for (std::size_t s = 0; s < streams.size(); ++s) {
            std::vector<std::size_t> preds;
            for (const std::vector<double>& row : streams[s].scores) {
                std::size_t best = 0;
                for (std::size_t k = 1; k < row.size(); ++k)
                    if (row[k] > row[best]) best = k;
                preds.push_back(best);
            }
            std::cout << "stream=" << stream_paths[s]
                      << " acc=" << fmt(accuracy(streams[s].sample_ids, preds)) << "\n";
        }
        std::cout << "fused_acc=" << fmt(accuracy(fused.sample_ids, fused.predictions))
                  << "\n";
    });

    // ---- count-params ----
    auto* cp = app.add_subcommand("count-params", "Report trainable parameter counts");
    ModelFlags cp_mf;
    add_model_flags(cp, cp_mf, false);
    add_seed(cp);
    cp->callback([&] {
        Model model = build_model(make_config(cp_mf), seed);
        std::cout << count_params(model).describe() << "\n";
    });

    // ---- count-flops ----
    auto* cf = app.add_subcommand("count-flops", "Report forward-pass cost");
    ModelFlags cf_mf;
    add_model_flags(cf, cf_mf, true);
    add_seed(cf);
    cf->callback([&] {
        Model model = build_model(make_config(cf_mf), seed);
        std::cout << count_flops(model, cf_mf.frames, cf_mf.persons).describe() << "\n";
    });

    // ---- audit-constraints ----
    auto* au = app.add_subcommand("audit-constraints",
                                  "Classify a family against the five structural constraints");
    std::string audit_variant = "ctrgc";
    au->add_option("--variant", audit_variant, "Graph-convolution family")
        ->check(CLI::IsMember({"ctrgc", "stgc", "agc", "dcgc", "dcgc_star"}))
        ->required();
    add_seed(au);
    au->callback([&] {
        std::mt19937_64 rng(seed);
        const std::size_t N = 5, C = 4, CO = 6, K = 3, T = 4;
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        Tensor x = Tensor::zeros({K, T, N, C});
        for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
        std::vector<double> topo = dense_topology(rng, N);
        ModelVariant v = parse_variant(audit_variant);
        if (v == ModelVariant::stgc) {
            StGcLayer l = make_st_gc(rng, C, CO, topo, N, false, false);
            print_audit(audit_variant, audit_constraints(l, x));
        } else if (v == ModelVariant::agc) {
            AgcLayer l = make_agc(rng, C, CO, 2, topo, N, false);
            print_audit(audit_variant, audit_constraints(l, x));
        } else if (v == ModelVariant::dcgc || v == ModelVariant::dcgc_star) {
            // the input-side grouped family has no generalized-weight form,
            // which audit_constraints reports by refusing the layer
            DcGcLayer l = make_dc_gc(rng, C, CO, N, 2, topo,
                                     v == ModelVariant::dcgc_star, false);
            print_audit(audit_variant, audit_constraints(l, x));
        } else {
            CtrGcLayer l = make_ctr_gc(rng, C, CO, N, 2, CorrFn::m1, Activation::tanh,
                                       topo, "dense", true, false);
            l.alpha.data()[0] = 0.5;
            print_audit(audit_variant, audit_constraints(l, x));
        }
    });

    // ---- check-equivalence ----
    auto* eq = app.add_subcommand("check-equivalence",
                                  "Cross-check every family's forward pass against its "
                                  "generalized-weight form");
    std::size_t trials = 100;
    eq->add_option("--trials", trials, "Random trials");
    add_seed(eq);
    eq->callback([&] {
        EquivalenceReport rep = equivalence_suite(seed, trials);
        std::cout << rep.describe() << "\n";
        if (rep.worst() >= 1e-9)
            throw check_failed("equivalence worst diff " + fmt(rep.worst()) +
                               " reached 1e-9");
    });

    // ---- grad-check ----
    auto* gc = app.add_subcommand("grad-check",
                                  "Compare reverse-mode gradients against finite differences");
    std::string scope = "layer";
    gc->add_option("--scope", scope, "What to differentiate")
        ->check(CLI::IsMember({"ops", "layer", "model"}))
        ->required();
    add_seed(gc);
    gc->callback([&] {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        auto rand_tensor = [&](Shape shape, bool rg) {
            Tensor t = Tensor::zeros(std::move(shape), rg);
            for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
            return t;
        };
        auto scalar = [](Tensor t) {
            while (t.shape().size() > 1) t = reduce(Reduce::sum, t, 0);
            return reduce(Reduce::sum, t, 0);
        };
        double worst = 0.0, tol = 0.0;
        if (scope == "ops") {
            tol = 1e-6;
            Tensor a = rand_tensor({3, 4}, true);
            Tensor w = rand_tensor({4, 5}, true);
            Tensor b = rand_tensor({5}, true);
            Tensor topo = rand_tensor({2, 6, 6, 5}, true);
            Tensor feat = rand_tensor({2, 3, 6, 5}, true);
            Tensor sig = rand_tensor({2, 4, 8, 3}, true);
            Tensor kern = rand_tensor({3, 3, 5}, true);
            std::vector<std::function<Tensor()>> cases = {
                [&] { return scalar(activation(Activation::relu, linear(a, w, b))); },
                [&] { return scalar(activation(Activation::sigmoid, matmul(a, w))); },
                [&] { return scalar(topo_aggregate(feat, topo)); },
                [&] { return scalar(temporal_conv(sig, kern, Tensor(), 1, 1)); },
                [&] { return cross_entropy(matmul(a, w), {0, 2, 4}); },
            };
            std::vector<std::vector<Tensor>> params = {
                {a, w, b}, {a, w}, {feat, topo}, {sig, kern}, {a, w}};
            for (std::size_t i = 0; i < cases.size(); ++i)
                worst = std::max(worst, grad_check(cases[i], params[i], 1e-5).max_rel_err);
        } else if (scope == "layer") {
            tol = 1e-5;
            CtrGcLayer layer = make_ctr_gc(rng, 3, 4, 5, 2, CorrFn::m1, Activation::tanh,
                                           dense_topology(rng, 5), "dense", true, true);
            layer.alpha.data()[0] = 0.3;
            Tensor x = rand_tensor({2, 3, 5, 3}, true);
            ParamList params;
            layer.collect_params("layer", params);
            std::vector<Tensor> tensors = {x};
            for (auto& [name, t] : params) tensors.push_back(t);
            auto f = [&] { return scalar(ctr_gc_forward(layer, x)); };
            worst = grad_check(f, tensors, 1e-5).max_rel_err;
        } else {
            tol = 1e-4;
            ModelConfig cfg;
            cfg.graph = "chain5";
            cfg.num_classes = 3;
            cfg.channels = {8, 16};
            cfg.strides = {1, 1};
            cfg.frames = 8;
            cfg.persons = 1;
            Model model = build_model(cfg, seed);
            Tensor x = rand_tensor({2, 1, 8, 5, 3}, false);
            std::vector<int> labels = {0, 2};
            ParamList params;
            model.collect_params(params);
            std::vector<Tensor> tensors;
            for (auto& [name, t] : params) tensors.push_back(t);
            auto f = [&] { return cross_entropy(model_forward(model, x, true), labels); };
            worst = grad_check(f, tensors, 1e-5).max_rel_err;
        }
        std::cout << "scope=" << scope << " max_rel_err=" << fmt(worst)
                  << " threshold=" << fmt(tol) << "\n";
        if (worst > tol)
            throw check_failed("gradient check exceeded its tolerance");
    });

    // ---- dump-topology ----
    auto* dt = app.add_subcommand("dump-topology",
                                  "Print shared and refined topology matrices");
    ModelFlags dt_mf;
    std::vector<std::size_t> dt_blocks, dt_channels;
    std::string dt_ckpt, dt_out;
    dt->add_option("--data", data, "Dataset directory or manifest (probe sample)");
    dt->add_option("--checkpoint", dt_ckpt, "Model checkpoint (default: fresh model)");
    dt->add_option("--block", dt_blocks, "1-based block indices")
        ->delimiter(',')
        ->required();
    dt->add_option("--channels", dt_channels, "Refined output channels to print")
        ->delimiter(',')
        ->required();
    dt->add_option("--modality", modality, "Input modality")
        ->check(CLI::IsMember({"joint", "bone", "joint_motion", "bone_motion"}));
    add_model_flags(dt, dt_mf, true, "--channel-plan");
    dt->add_option("--out", dt_out, "Write the dump here instead of stdout");
    add_seed(dt);
    dt->callback([&] {
        Tensor x;
        if (!data.empty()) {
            DatasetDescriptor ds = load_dataset(manifest_path(data));
            ds = derive_modality(ds, parse_modality(modality));
            if (dt_mf.graph.empty()) dt_mf.graph = ds.graph.name;
            if (dt_mf.classes == 0) dt_mf.classes = ds.num_classes;
            std::vector<std::size_t> test = ds.split_indices(false);
            std::size_t pick = test.empty() ? 0 : test.front();
            x = pack_batch({&ds.samples.at(pick)}, dt_mf.persons, dt_mf.frames);
        }
        ModelConfig cfg = make_config(dt_mf);
        if (data.empty()) {
            SkeletonGraph g = build_graph(cfg.graph);
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            std::mt19937_64 rng(seed);
            x = Tensor::zeros({1, cfg.persons, cfg.frames, g.num_joints, cfg.in_channels});
            for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
        }
        Model model = dt_ckpt.empty() ? build_model(cfg, seed)
                                      : load_checkpoint(dt_ckpt, cfg);
        std::string dump = dump_topologies(model, x, dt_blocks, dt_channels);
        if (dt_out.empty()) {
            std::cout << dump;
        } else {
            std::ofstream os(dt_out);
            if (!os) throw format_error("cannot open '" + dt_out + "' for writing");
            os << dump;
        }
    });

    // top-level flags (--config, --threads) remain usable after a subcommand
    for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1; // usage problems are validation errors
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const format_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const check_failed& e) {
        std::cerr << "check failed: " << e.what() << "\n";
        return 2;
    } catch (const error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
