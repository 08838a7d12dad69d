#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ctr/training.hpp"
#include "test_util.hpp"

using namespace ctr;
using testutil::max_abs_diff;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(std::size_t classes) {
    ModelConfig cfg;
    cfg.graph = "chain5";
    cfg.num_classes = classes;
    cfg.channels = {8, 16};
    cfg.strides = {1, 1};
    cfg.frames = 8;
    cfg.persons = 1;
    return cfg;
}

DatasetDescriptor tiny_dataset(std::size_t classes, std::size_t per_class,
                               std::uint64_t seed) {
    SynthSpec spec;
    spec.num_classes = classes;
    spec.samples_per_class = per_class;
    spec.persons = 1;
    spec.frames = 8;
    spec.graph_name = "chain5";
    return synthesize_dataset(spec, seed);
}

} // namespace

TEST_CASE("learning rate: warmup then step decay") {
    Schedule s;
    CHECK(lr_at(s, 0) == doctest::Approx(0.02).epsilon(1e-12));
    CHECK(lr_at(s, 4) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(lr_at(s, 5) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(lr_at(s, 10) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(lr_at(s, 34) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(lr_at(s, 40) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(lr_at(s, 55) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK(lr_at(s, 64) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(s, 65), contract_error);

    // piecewise constant between landmarks
    for (std::size_t e = s.warmup_epochs; e + 1 < s.total_epochs; ++e) {
        bool boundary = false;
        for (std::size_t d : s.decay_epochs) boundary |= (e + 1 == d);
        if (!boundary) CHECK(lr_at(s, e) == lr_at(s, e + 1));
    }

    Schedule bad;
    bad.decay_epochs = {70};
    CHECK_THROWS_AS(bad.validate(), configuration_error);
}

TEST_CASE("sgd: momentum and decoupled-free weight decay recurrences") {
    ParamList params;
    Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
    params.emplace_back("p", p);

    SUBCASE("zero gradient with zero decay leaves parameters alone") {
        OptimizerState opt = make_optimizer(params, 0.9, 0.0);
        opt.lr = 0.5;
        p.grad().assign(2, 0.0);
        sgd_step(opt, params);
        CHECK(p.data()[0] == 1.0);
        CHECK(p.data()[1] == -2.0);
    }

    SUBCASE("zero momentum reduces to plain gradient descent with decay") {
        OptimizerState opt = make_optimizer(params, 0.0, 0.1);
        opt.lr = 0.5;
        p.grad() = {4.0, 2.0};
        sgd_step(opt, params);
        // p - lr*(g + wd*p)
        CHECK(p.data()[0] == doctest::Approx(1.0 - 0.5 * (4.0 + 0.1)).epsilon(1e-15));
        CHECK(p.data()[1] == doctest::Approx(-2.0 - 0.5 * (2.0 - 0.2)).epsilon(1e-15));
    }

    SUBCASE("two constant-gradient steps accumulate velocity") {
        OptimizerState opt = make_optimizer(params, 0.9, 0.0);
        opt.lr = 0.1;
        p.grad() = {1.0, 1.0};
        sgd_step(opt, params); // v = g, p -= lr*g
        CHECK(p.data()[0] == doctest::Approx(0.9).epsilon(1e-15));
        p.grad() = {1.0, 1.0};
        sgd_step(opt, params); // v = 1.9g
        CHECK(p.data()[0] == doctest::Approx(0.9 - 0.1 * 1.9).epsilon(1e-15));
    }

    SUBCASE("learning rate zero is a no-op even with decay") {
        OptimizerState opt = make_optimizer(params, 0.9, 0.05);
        opt.lr = 0.0;
        p.grad() = {3.0, 3.0};
        sgd_step(opt, params);
        CHECK(p.data()[0] == 1.0);
    }
}

TEST_CASE("modality derivation maps every sample consistently") {
    DatasetDescriptor ds = tiny_dataset(2, 3, 5);
    DatasetDescriptor joint = derive_modality(ds, Modality::joint);
    REQUIRE(joint.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        CHECK(joint.samples[i].data == ds.samples[i].data);

    DatasetDescriptor bone = derive_modality(ds, Modality::bone);
    DatasetDescriptor bm = derive_modality(ds, Modality::bone_motion);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        SkeletonSequence want = derive_bone(ds.samples[i], ds.graph);
        CHECK(bone.samples[i].data == want.data);
        CHECK(bone.samples[i].label == ds.samples[i].label);
        CHECK(bm.samples[i].data == derive_motion(want).data);
    }
    CHECK(bone.is_train == ds.is_train);

    CHECK(parse_modality("joint_motion") == Modality::joint_motion);
    CHECK(modality_name(Modality::bone) == "bone");
    CHECK_THROWS_AS(parse_modality("velocity"), lookup_error);
}

TEST_CASE("one optimizer step at a small rate lowers the batch loss") {
    DatasetDescriptor ds = tiny_dataset(2, 3, 7);
    Model m = build_model(tiny_config(2), 17);
    std::vector<const SkeletonSequence*> batch;
    std::vector<int> labels;
    for (const SkeletonSequence& s : ds.samples) {
        batch.push_back(&s);
        labels.push_back(static_cast<int>(s.label));
    }
    Tensor x = pack_batch(batch, 1, 8);

    ParamList params;
    m.collect_params(params);
    OptimizerState opt = make_optimizer(params, 0.0, 0.0);
    opt.lr = 1e-3;

    double before;
    {
        Tape tape;
        Tensor loss = cross_entropy(model_forward(m, x, true), labels);
        before = loss.data()[0];
        backward(loss);
    }
    sgd_step(opt, params);
    Tensor after = cross_entropy(model_forward(m, x, true), labels);
    CHECK(after.data()[0] < before);
}

TEST_CASE("train: empty runs, determinism, and logging format") {
    DatasetDescriptor ds = tiny_dataset(2, 5, 11);
    TrainOptions opt;
    opt.epochs = 0;
    Model m = build_model(tiny_config(2), 19);
    TrainResult r0 = train(m, ds, opt, 1);
    CHECK(r0.log.empty());
    CHECK(r0.best_test_acc == 0.0);

    opt.epochs = 2;
    opt.batch_size = 4;
    opt.schedule.base_lr = 0.02;
    Model a = build_model(tiny_config(2), 19);
    Model b = build_model(tiny_config(2), 19);
    TrainResult ra = train(a, ds, opt, 23);
    TrainResult rb = train(b, ds, opt, 23);
    CHECK(ra.log_text() == rb.log_text());
    REQUIRE(ra.log.size() == 2);
    CHECK(ra.log[0].line().rfind("epoch=0 lr=", 0) == 0);
    CHECK(ra.log[0].line().find(" loss=") != std::string::npos);
    CHECK(ra.log[0].line().find(" train_acc=") != std::string::npos);
    CHECK(ra.log[0].line().find(" test_acc=") != std::string::npos);
    CHECK(ra.log[1].lr == doctest::Approx(lr_at(opt.schedule, 1)).epsilon(1e-15));

    Model c = build_model(tiny_config(2), 19);
    TrainResult rc = train(c, ds, opt, 24);
    CHECK(ra.log_text() != rc.log_text()); // the seed drives the batch order

    DatasetDescriptor empty;
    CHECK_THROWS_AS(train(m, empty, opt, 1), contract_error);
}

TEST_CASE("train: a short run memorizes the toy dataset and checkpoints it") {
    DatasetDescriptor ds = tiny_dataset(2, 6, 13);
    Model m = build_model(tiny_config(2), 29);
    TrainOptions opt;
    opt.epochs = 12;
    opt.batch_size = 4;
    opt.schedule.base_lr = 0.05;
    opt.schedule.warmup_epochs = 2;
    opt.schedule.decay_epochs = {9};
    opt.schedule.total_epochs = 12;
    fs::path ckpt = fs::temp_directory_path() / "train_best.ctrc";
    opt.checkpoint_path = ckpt.string();
    TrainResult r = train(m, ds, opt, 31);
    REQUIRE(r.log.size() == 12);
    CHECK(r.log.back().train_acc >= 0.9);
    CHECK(r.best_test_acc >= 0.5);
    double best = 0.0;
    for (const EpochStats& e : r.log) best = std::max(best, e.test_acc);
    CHECK(r.best_test_acc == best);

    REQUIRE(fs::exists(ckpt));
    Model restored = load_checkpoint(ckpt.string(), tiny_config(2));
    EvalResult ev = evaluate(restored, ds, true, 4);
    CHECK(ev.top1 == doctest::Approx(r.best_test_acc).epsilon(1e-12));
    fs::remove(ckpt);
}

TEST_CASE("evaluate: prevalence baseline, per-class accounting, empty split") {
    DatasetDescriptor ds = tiny_dataset(3, 5, 37);
    Model m = build_model(tiny_config(3), 41);
    ParamList params;
    m.collect_params(params);
    for (auto& [name, t] : params)
        if (name == "classifier.weight")
            for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.0;
        else if (name == "classifier.bias") {
            t.data()[0] = 5.0; // force every prediction to class 0
            t.data()[1] = 0.0;
            t.data()[2] = 0.0;
        }
    EvalResult ev = evaluate(m, ds, false, 4);
    std::vector<std::size_t> train_idx = ds.split_indices(true);
    CHECK(ev.sample_ids == train_idx);
    REQUIRE(ev.per_class.size() == 3);
    CHECK(ev.per_class[0] == 1.0);
    CHECK(ev.per_class[1] == 0.0);
    CHECK(ev.per_class[2] == 0.0);
    CHECK(ev.top1 == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    REQUIRE(!ev.logits.empty());
    CHECK(ev.logits[0].size() == 3);

    DatasetDescriptor all_train = ds;
    all_train.is_train.assign(all_train.samples.size(), true);
    CHECK_THROWS_AS(evaluate(m, all_train, true, 4), contract_error);
}

TEST_CASE("score files survive a byte-exact roundtrip") {
    StreamScores s;
    s.modality = "bone";
    s.sample_ids = {4, 0, 9};
    s.scores = {{0.125, -3.5, 1.0 / 3.0}, {1e-17, 2.0, -0.0}, {7.0, 8.0, 9.0}};
    fs::path p = fs::temp_directory_path() / "scores_a.txt";
    fs::path p2 = fs::temp_directory_path() / "scores_b.txt";
    save_scores(s, p.string());
    StreamScores r = load_scores(p.string());
    CHECK(r.sample_ids == s.sample_ids);
    REQUIRE(r.scores.size() == 3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 3; ++k)
            CHECK(r.scores[i][k] == s.scores[i][k]);
    save_scores(r, p2.string());
    std::ifstream f1(p, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);

    fs::path empty = fs::temp_directory_path() / "scores_empty.txt";
    std::ofstream(empty).close();
    CHECK_THROWS_AS(load_scores(empty.string()), format_error);
    fs::path ragged = fs::temp_directory_path() / "scores_ragged.txt";
    {
        std::ofstream out(ragged);
        out << "0 1 2 3\n1 4 5\n";
    }
    CHECK_THROWS_AS(load_scores(ragged.string()), format_error);
    for (const fs::path& q : {p, p2, empty, ragged}) fs::remove(q);
}

TEST_CASE("fusion: identities, invariances, and complementary streams") {
    StreamScores a;
    a.sample_ids = {0, 1, 2};
    a.scores = {{2.0, 0.0}, {0.0, 1.0}, {3.0, 1.0}};

    SUBCASE("one stream predicts its own argmax") {
        FusionResult f = fuse_scores({a}, {1.0});
        CHECK(f.predictions == std::vector<std::size_t>{0, 1, 0});
        CHECK(f.sample_ids == a.sample_ids);
    }

    SUBCASE("duplicating a stream or scaling weights changes nothing") {
        FusionResult one = fuse_scores({a}, {1.0});
        FusionResult two = fuse_scores({a, a}, {0.5, 0.5});
        FusionResult scaled = fuse_scores({a}, {10.0});
        CHECK(two.predictions == one.predictions);
        CHECK(scaled.predictions == one.predictions);
    }

    SUBCASE("a confident correct stream outvotes a weakly wrong one") {
        StreamScores b = a;
        b.scores = {{0.0, 0.4}, {0.0, 0.4}, {0.0, 0.4}}; // mildly prefers class 1
        StreamScores c = a;
        c.scores = {{6.0, 0.0}, {0.0, 6.0}, {6.0, 0.0}}; // confident
        FusionResult f = fuse_scores({b, c}, {1.0, 1.0});
        CHECK(f.predictions == std::vector<std::size_t>{0, 1, 0});
    }

    SUBCASE("contract violations") {
        StreamScores misaligned = a;
        misaligned.sample_ids = {0, 1, 5};
        CHECK_THROWS_AS(fuse_scores({a, misaligned}, {1.0, 1.0}), contract_error);
        CHECK_THROWS_AS(fuse_scores({a}, {1.0, 1.0}), contract_error);
        CHECK_THROWS_AS(fuse_scores({a}, {-1.0}), contract_error);
        CHECK_THROWS_AS(fuse_scores({a, a}, {0.0, 0.0}), contract_error);
        CHECK_THROWS_AS(fuse_scores({}, {}), contract_error);
    }
}
