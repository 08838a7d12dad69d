#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "ctr/skeleton.hpp"

using namespace ctr;
namespace fs = std::filesystem;

namespace {

SkeletonSequence random_sequence(std::mt19937_64& rng, std::size_t m, std::size_t t,
                                 std::size_t n, std::size_t c, double quantum = 0.0) {
    SkeletonSequence s;
    s.persons = m;
    s.frames = t;
    s.joints = n;
    s.channels = c;
    s.data.resize(m * t * n * c);
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    for (float& v : s.data) {
        double x = dist(rng);
        if (quantum > 0.0) x = std::round(x / quantum) * quantum;
        v = static_cast<float>(x);
    }
    s.label = 3;
    s.dataset = "ntu25";
    return s;
}

} // namespace

TEST_CASE("graphs: joint counts and tree invariants") {
    for (const char* name : {"ntu25", "nwucla20"}) {
        SkeletonGraph g = build_graph(name);
        CHECK(g.num_joints == (std::string(name) == "ntu25" ? 25 : 20));
        CHECK(g.edges.size() == g.num_joints - 1);
        g.validate();

        // every non-root joint appears exactly once as a child
        std::set<std::size_t> children;
        for (auto [c, p] : g.edges) {
            CHECK(children.insert(c).second);
            CHECK(c != g.root);
            CHECK(p < g.num_joints);
        }
        CHECK(children.size() == g.num_joints - 1);
    }
    CHECK_THROWS_AS(build_graph("coco17"), lookup_error);
}

TEST_CASE("graphs: validate rejects broken trees") {
    SkeletonGraph g = build_graph("ntu25");
    g.edges.pop_back();
    CHECK_THROWS_AS(g.validate(), configuration_error);

    SkeletonGraph cyc;
    cyc.name = "cyc";
    cyc.num_joints = 3;
    cyc.root = 0;
    cyc.edges = {{1, 2}, {2, 1}};
    CHECK_THROWS_AS(cyc.validate(), configuration_error);
}

TEST_CASE("adjacency: identity exact, rows normalized, support matches edges") {
    SkeletonGraph g = build_graph("ntu25");
    AdjacencySet a = adjacency_set(g);
    const std::size_t n = g.num_joints;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            CHECK(a.identity[i * n + j] == (i == j ? 1.0 : 0.0));

    auto check_rows = [&](const std::vector<double>& m) {
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0.0;
            bool any = false;
            for (std::size_t j = 0; j < n; ++j) {
                CHECK(m[i * n + j] >= 0.0);
                row += m[i * n + j];
                any = any || m[i * n + j] != 0.0;
            }
            if (any) CHECK(std::fabs(row - 1.0) < 1e-12);
        }
    };
    check_rows(a.inward);
    check_rows(a.outward);

    // inward[p][c] and outward[c][p] nonzero exactly on tree edges
    for (auto [c, p] : g.edges) {
        CHECK(a.inward[p * n + c] > 0.0);
        CHECK(a.outward[c * n + p] > 0.0);
    }
    std::size_t nz_in = 0, nz_out = 0;
    for (double v : a.inward) nz_in += v != 0.0;
    for (double v : a.outward) nz_out += v != 0.0;
    CHECK(nz_in == g.edges.size());
    CHECK(nz_out == g.edges.size());
}

TEST_CASE("resize_temporal: identity, constant signal, linear ramp") {
    std::mt19937_64 rng(31);
    SkeletonSequence s = random_sequence(rng, 2, 10, 4, 3);
    SkeletonSequence same = resize_temporal(s, 10);
    CHECK(same.data == s.data);

    SkeletonSequence c = random_sequence(rng, 1, 1, 4, 3);
    c.frames = 6;
    c.data.resize(1 * 6 * 4 * 3);
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t i = 0; i < 12; ++i) c.data[t * 12 + i] = 1.5f;
    SkeletonSequence cr = resize_temporal(c, 11);
    CHECK(cr.frames == 11);
    for (float v : cr.data) CHECK(v == 1.5f);

    // a ramp stays a ramp under linear interpolation
    SkeletonSequence ramp;
    ramp.persons = 1;
    ramp.frames = 5;
    ramp.joints = 1;
    ramp.channels = 1;
    ramp.data = {0, 1, 2, 3, 4};
    SkeletonSequence r2 = resize_temporal(ramp, 9);
    for (std::size_t t = 0; t < 9; ++t)
        CHECK(std::fabs(r2.data[t] - 4.0 * t / 8.0) < 1e-6);
}

TEST_CASE("bone: root zero, edges are differences, translation invariant") {
    std::mt19937_64 rng(32);
    SkeletonGraph g = build_graph("ntu25");
    // dyadic coordinates keep float arithmetic exact
    SkeletonSequence s = random_sequence(rng, 2, 6, 25, 3, 1.0 / 256.0);
    SkeletonSequence b = derive_bone(s, g);
    for (std::size_t m = 0; m < 2; ++m)
        for (std::size_t t = 0; t < 6; ++t) {
            for (std::size_t c = 0; c < 3; ++c)
                CHECK(b.at(m, t, g.root, c) == 0.0f);
            for (auto [ch, pa] : g.edges)
                for (std::size_t c = 0; c < 3; ++c)
                    CHECK(b.at(m, t, ch, c) == s.at(m, t, ch, c) - s.at(m, t, pa, c));
        }

    SkeletonSequence shifted = s;
    for (std::size_t i = 0; i < shifted.data.size(); ++i) shifted.data[i] += 4.0f;
    SkeletonSequence b2 = derive_bone(shifted, g);
    CHECK(b2.data == b.data);
}

TEST_CASE("motion: frame differences, zero tail, constant sequence vanishes") {
    std::mt19937_64 rng(33);
    SkeletonSequence s = random_sequence(rng, 1, 5, 3, 2, 1.0 / 256.0);
    SkeletonSequence m = derive_motion(s);
    for (std::size_t t = 0; t + 1 < 5; ++t)
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(m.data[t * 6 + i] == s.data[(t + 1) * 6 + i] - s.data[t * 6 + i]);
    for (std::size_t i = 0; i < 6; ++i) CHECK(m.data[4 * 6 + i] == 0.0f);

    SkeletonSequence c = s;
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t i = 0; i < 6; ++i) c.data[t * 6 + i] = c.data[i];
    for (float v : derive_motion(c).data) CHECK(v == 0.0f);
}

TEST_CASE("bone and motion commute") {
    std::mt19937_64 rng(34);
    SkeletonGraph g = build_graph("nwucla20");
    SkeletonSequence s = random_sequence(rng, 1, 7, 20, 3, 1.0 / 256.0);
    SkeletonSequence ab = derive_motion(derive_bone(s, g));
    SkeletonSequence ba = derive_bone(derive_motion(s), g);
    CHECK(ab.data == ba.data);
}

TEST_CASE("sequence io: byte-exact roundtrip") {
    std::mt19937_64 rng(35);
    SkeletonSequence s = random_sequence(rng, 2, 9, 25, 3);
    s.label = 17;
    fs::path p = fs::temp_directory_path() / "seq_roundtrip.skl";
    save_sequence(s, p.string());
    SkeletonSequence r = load_sequence(p.string());
    CHECK(r.persons == s.persons);
    CHECK(r.frames == s.frames);
    CHECK(r.joints == s.joints);
    CHECK(r.channels == s.channels);
    CHECK(r.label == s.label);
    CHECK(r.dataset == s.dataset);
    CHECK(r.data == s.data);
    fs::remove(p);
}

TEST_CASE("sequence io: malformed files are format errors") {
    fs::path dir = fs::temp_directory_path();
    auto write_bytes = [&](const fs::path& p, const std::string& bytes) {
        std::ofstream out(p, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    };
    fs::path bad_magic = dir / "bad_magic.skl";
    write_bytes(bad_magic, "XKL1....................");
    CHECK_THROWS_AS(load_sequence(bad_magic.string()), format_error);

    fs::path truncated = dir / "truncated.skl";
    write_bytes(truncated, "SKL1\x01\x00");
    CHECK_THROWS_AS(load_sequence(truncated.string()), format_error);

    std::mt19937_64 rng(36);
    SkeletonSequence s = random_sequence(rng, 1, 2, 3, 3);
    fs::path extra = dir / "extra.skl";
    save_sequence(s, extra.string());
    {
        std::ofstream out(extra, std::ios::binary | std::ios::app);
        out.put('\0');
    }
    CHECK_THROWS_AS(load_sequence(extra.string()), format_error);

    CHECK_THROWS_AS(load_sequence((dir / "does_not_exist.skl").string()), format_error);
    for (const fs::path& p : {bad_magic, truncated, extra}) fs::remove(p);
}

TEST_CASE("synthesis: shapes, determinism, balanced split") {
    SynthSpec spec;
    spec.num_classes = 3;
    spec.samples_per_class = 10;
    spec.persons = 2;
    spec.frames = 16;
    DatasetDescriptor ds = synthesize_dataset(spec, 99);
    CHECK(ds.num_classes == 3);
    CHECK(ds.samples.size() == 30);
    CHECK(ds.graph.num_joints == 25);
    for (const auto& s : ds.samples) {
        CHECK(s.persons == 2);
        CHECK(s.frames == 16);
        CHECK(s.joints == 25);
        CHECK(s.channels == 3);
        CHECK(s.label < 3);
        // only the first person carries motion
        for (std::size_t i = s.frames * s.joints * s.channels; i < s.data.size(); ++i)
            CHECK(s.data[i] == 0.0f);
    }

    DatasetDescriptor again = synthesize_dataset(spec, 99);
    for (std::size_t i = 0; i < 30; ++i) CHECK(again.samples[i].data == ds.samples[i].data);
    DatasetDescriptor other = synthesize_dataset(spec, 100);
    bool differs = false;
    for (std::size_t i = 0; i < 30; ++i)
        differs = differs || other.samples[i].data != ds.samples[i].data;
    CHECK(differs);

    // 80/20 split per class
    std::vector<std::size_t> train_per_class(3, 0), total_per_class(3, 0);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        ++total_per_class[ds.samples[i].label];
        if (ds.is_train[i]) ++train_per_class[ds.samples[i].label];
    }
    for (std::size_t k = 0; k < 3; ++k) {
        CHECK(total_per_class[k] == 10);
        CHECK(train_per_class[k] == 8);
    }
    CHECK(ds.split_indices(true).size() == 24);
    CHECK(ds.split_indices(false).size() == 6);
}

TEST_CASE("synthesis: classes are separable by construction") {
    SynthSpec spec;
    spec.num_classes = 2;
    spec.samples_per_class = 6;
    spec.frames = 32;
    DatasetDescriptor ds = synthesize_dataset(spec, 7);
    // mean pose trajectory should differ across classes far more than noise
    auto class_mean = [&](std::uint32_t label) {
        std::vector<double> acc(ds.samples[0].data.size(), 0.0);
        std::size_t cnt = 0;
        for (const auto& s : ds.samples)
            if (s.label == label) {
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s.data[i];
                ++cnt;
            }
        for (double& v : acc) v /= static_cast<double>(cnt);
        return acc;
    };
    std::vector<double> m0 = class_mean(0), m1 = class_mean(1);
    double dist = 0.0;
    for (std::size_t i = 0; i < m0.size(); ++i) dist += (m0[i] - m1[i]) * (m0[i] - m1[i]);
    CHECK(std::sqrt(dist / m0.size()) > 5.0 * spec.noise_sigma / std::sqrt(6.0));
}

TEST_CASE("dataset io: manifest roundtrip") {
    SynthSpec spec;
    spec.num_classes = 2;
    spec.samples_per_class = 5;
    spec.frames = 8;
    DatasetDescriptor ds = synthesize_dataset(spec, 5);
    fs::path dir = fs::temp_directory_path() / "ctr_ds_io_test";
    fs::remove_all(dir);
    save_dataset(ds, dir.string());
    DatasetDescriptor r = load_dataset((dir / "manifest.txt").string());
    CHECK(r.num_classes == ds.num_classes);
    CHECK(r.graph.name == ds.graph.name);
    REQUIRE(r.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < r.samples.size(); ++i) {
        CHECK(r.samples[i].label == ds.samples[i].label);
        CHECK(r.samples[i].data == ds.samples[i].data);
        CHECK(r.is_train[i] == ds.is_train[i]);
    }
    CHECK_THROWS_AS(load_dataset((dir / "missing.txt").string()), format_error);
    fs::remove_all(dir);
}
