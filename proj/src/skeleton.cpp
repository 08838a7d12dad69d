#include "ctr/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace ctr {

namespace {

constexpr double kPi = 3.14159265358979323846;

// (child, parent) pairs, 1-based, oriented toward the root.
// Kinect-v2 25-joint skeleton, rooted at joint 2 (middle of the spine).
const std::vector<std::pair<int, int>> kNtu25Edges = {
    {1, 2},   {21, 2},  {3, 21},  {4, 3},   {5, 21},  {6, 5},
    {7, 6},   {8, 7},   {9, 21},  {10, 9},  {11, 10}, {12, 11},
    {13, 1},  {14, 13}, {15, 14}, {16, 15}, {17, 1},  {18, 17},
    {19, 18}, {20, 19}, {22, 23}, {23, 8},  {24, 25}, {25, 12}};

// Kinect-v1 20-joint skeleton, rooted at joint 1 (hip center).
const std::vector<std::pair<int, int>> kNwucla20Edges = {
    {2, 1},   {3, 2},   {4, 3},   {5, 3},   {6, 5},   {7, 6},  {8, 7},
    {9, 3},   {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13}, {15, 14},
    {16, 15}, {17, 1},  {18, 17}, {19, 18}, {20, 19}};

SkeletonGraph make_graph(const std::string& name, std::size_t n,
                         const std::vector<std::pair<int, int>>& edges_1based,
                         int root_1based) {
    SkeletonGraph g;
    g.name = name;
    g.num_joints = n;
    g.root = static_cast<std::size_t>(root_1based - 1);
    for (auto [c, p] : edges_1based)
        g.edges.emplace_back(static_cast<std::size_t>(c - 1), static_cast<std::size_t>(p - 1));
    g.validate();
    return g;
}

} // namespace

void SkeletonGraph::validate() const {
    if (num_joints == 0) throw configuration_error("graph has no joints");
    if (edges.size() != num_joints - 1)
        throw configuration_error("graph must be a spanning tree (N-1 edges)");
    std::vector<int> child_count(num_joints, 0);
    for (auto [c, p] : edges) {
        if (c >= num_joints || p >= num_joints)
            throw configuration_error("edge index out of range");
        ++child_count[c];
    }
    std::size_t roots = 0;
    for (std::size_t j = 0; j < num_joints; ++j) {
        if (child_count[j] == 0) {
            ++roots;
            if (j != root) throw configuration_error("declared root is not the tree root");
        } else if (child_count[j] != 1) {
            throw configuration_error("joint has multiple parents");
        }
    }
    if (roots != 1) throw configuration_error("graph must have exactly one root");
    // connectivity: walk every joint up to the root
    std::vector<std::size_t> parent(num_joints, num_joints);
    for (auto [c, p] : edges) parent[c] = p;
    for (std::size_t j = 0; j < num_joints; ++j) {
        std::size_t cur = j, hops = 0;
        while (cur != root) {
            cur = parent[cur];
            if (++hops > num_joints) throw configuration_error("graph contains a cycle");
        }
    }
}

SkeletonGraph build_graph(const std::string& name) {
    if (name == "ntu25") return make_graph("ntu25", 25, kNtu25Edges, 2);
    if (name == "nwucla20") return make_graph("nwucla20", 20, kNwucla20Edges, 1);
    // "chainN": a path of N joints rooted at joint 0, handy for small tests
    if (name.rfind("chain", 0) == 0) {
        std::size_t n = 0;
        try {
            n = std::stoul(name.substr(5));
        } catch (const std::exception&) {
            throw lookup_error("unknown skeleton graph '" + name + "'");
        }
        if (n < 2 || n > 1024)
            throw lookup_error("unknown skeleton graph '" + name + "'");
        SkeletonGraph g;
        g.name = name;
        g.num_joints = n;
        g.root = 0;
        for (std::size_t j = 1; j < n; ++j) g.edges.emplace_back(j, j - 1);
        g.validate();
        return g;
    }
    throw lookup_error("unknown skeleton graph '" + name + "'");
}

AdjacencySet adjacency_set(const SkeletonGraph& graph) {
    graph.validate();
    std::size_t n = graph.num_joints;
    AdjacencySet adj;
    adj.num_joints = n;
    adj.identity.assign(n * n, 0.0);
    adj.inward.assign(n * n, 0.0);
    adj.outward.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) adj.identity[i * n + i] = 1.0;
    // inward[parent][child]: features flow along the edge toward the root;
    // outward is the transposed pattern. Both row-normalized.
    for (auto [c, p] : graph.edges) {
        adj.inward[p * n + c] = 1.0;
        adj.outward[c * n + p] = 1.0;
    }
    auto row_normalize = [n](std::vector<double>& m) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += m[i * n + j];
            if (s > 0.0)
                for (std::size_t j = 0; j < n; ++j) m[i * n + j] /= s;
        }
    };
    row_normalize(adj.inward);
    row_normalize(adj.outward);
    return adj;
}

SkeletonSequence resize_temporal(const SkeletonSequence& seq, std::size_t target_frames) {
    if (seq.frames == 0 || target_frames == 0)
        throw dimension_error("resize_temporal: frame counts must be positive");
    if (target_frames == seq.frames) return seq;
    SkeletonSequence out = seq;
    out.frames = target_frames;
    out.data.assign(seq.persons * target_frames * seq.joints * seq.channels, 0.0f);
    std::size_t site = seq.joints * seq.channels;
    for (std::size_t m = 0; m < seq.persons; ++m) {
        for (std::size_t t = 0; t < target_frames; ++t) {
            double pos = target_frames == 1
                             ? 0.0
                             : static_cast<double>(t) * static_cast<double>(seq.frames - 1) /
                                   static_cast<double>(target_frames - 1);
            std::size_t lo = static_cast<std::size_t>(pos);
            std::size_t hi = std::min(lo + 1, seq.frames - 1);
            double w = pos - static_cast<double>(lo);
            const float* a = seq.data.data() + (m * seq.frames + lo) * site;
            const float* b = seq.data.data() + (m * seq.frames + hi) * site;
            float* o = out.data.data() + (m * target_frames + t) * site;
            for (std::size_t i = 0; i < site; ++i)
                o[i] = static_cast<float>((1.0 - w) * a[i] + w * b[i]);
        }
    }
    return out;
}

SkeletonSequence derive_bone(const SkeletonSequence& seq, const SkeletonGraph& graph) {
    if (seq.joints != graph.num_joints)
        throw dimension_error("derive_bone: sequence joints do not match graph");
    SkeletonSequence out = seq;
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    for (std::size_t m = 0; m < seq.persons; ++m)
        for (std::size_t t = 0; t < seq.frames; ++t)
            for (auto [c, p] : graph.edges)
                for (std::size_t ch = 0; ch < seq.channels; ++ch)
                    out.at(m, t, c, ch) = seq.at(m, t, c, ch) - seq.at(m, t, p, ch);
    return out;
}

SkeletonSequence derive_motion(const SkeletonSequence& seq) {
    SkeletonSequence out = seq;
    std::size_t site = seq.joints * seq.channels;
    for (std::size_t m = 0; m < seq.persons; ++m) {
        for (std::size_t t = 0; t < seq.frames; ++t) {
            float* o = out.data.data() + (m * seq.frames + t) * site;
            if (t + 1 == seq.frames) {
                std::fill(o, o + site, 0.0f);
            } else {
                const float* a = seq.data.data() + (m * seq.frames + t) * site;
                const float* b = seq.data.data() + (m * seq.frames + t + 1) * site;
                for (std::size_t i = 0; i < site; ++i) o[i] = b[i] - a[i];
            }
        }
    }
    return out;
}

std::vector<std::size_t> DatasetDescriptor::split_indices(bool train) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (is_train[i] == train) out.push_back(i);
    return out;
}

DatasetDescriptor synthesize_dataset(const SynthSpec& spec, std::uint64_t seed) {
    if (spec.num_classes == 0 || spec.samples_per_class == 0 || spec.persons == 0 ||
        spec.frames == 0)
        throw configuration_error("synthesize_dataset: all dimensions must be positive");
    DatasetDescriptor ds;
    ds.num_classes = spec.num_classes;
    ds.graph = build_graph(spec.graph_name);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::uniform_real_distribution<double> amp_dist(0.1, 0.6);
    std::uniform_real_distribution<double> freq_dist(0.5, 3.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::size_t n = ds.graph.num_joints;
    std::size_t channels = 3;
    std::size_t train_cut = (spec.samples_per_class * 4 + 4) / 5; // 80% up-rounded

    for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
        // class template: per-joint base pose plus two sinusoidal modes
        std::vector<double> base(n * channels), amp1(n * channels), amp2(n * channels);
        std::vector<double> ph1(n * channels), ph2(n * channels);
        double f1 = freq_dist(rng), f2 = freq_dist(rng);
        for (auto* v : {&base, &amp1, &amp2, &ph1, &ph2})
            for (double& x : *v)
                x = (v == &base) ? unit(rng)
                    : (v == &ph1 || v == &ph2) ? unit(rng) * kPi
                                               : amp_dist(rng);
        std::vector<double> tmpl(spec.frames * n * channels);
        for (std::size_t t = 0; t < spec.frames; ++t) {
            double tau = static_cast<double>(t) / static_cast<double>(spec.frames);
            for (std::size_t i = 0; i < n * channels; ++i)
                tmpl[t * n * channels + i] =
                    base[i] + amp1[i] * std::sin(2.0 * kPi * f1 * tau + ph1[i]) +
                    amp2[i] * std::sin(2.0 * kPi * f2 * tau + ph2[i]);
        }
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            SkeletonSequence seq;
            seq.persons = spec.persons;
            seq.frames = spec.frames;
            seq.joints = n;
            seq.channels = channels;
            seq.label = static_cast<std::uint32_t>(cls);
            seq.dataset = ds.graph.name;
            seq.data.assign(spec.persons * spec.frames * n * channels, 0.0f);
            // person 0 carries the action; extra person slices stay zero
            for (std::size_t i = 0; i < spec.frames * n * channels; ++i)
                seq.data[i] = static_cast<float>(
                    tmpl[i] + spec.noise_sigma * (spec.noise_sigma > 0.0 ? gauss(rng) : 0.0));
            ds.samples.push_back(std::move(seq));
            ds.is_train.push_back(s < train_cut);
        }
    }
    return ds;
}

// ---- binary I/O ----

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, std::size_t& offset) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw format_error("truncated file at byte offset " + std::to_string(offset));
    offset += 4;
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void save_sequence(const SkeletonSequence& seq, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("cannot open '" + path + "' for writing");
    os.write("SKL1", 4);
    write_u32(os, static_cast<std::uint32_t>(seq.persons));
    write_u32(os, static_cast<std::uint32_t>(seq.frames));
    write_u32(os, static_cast<std::uint32_t>(seq.joints));
    write_u32(os, static_cast<std::uint32_t>(seq.channels));
    write_u32(os, seq.label);
    write_u32(os, static_cast<std::uint32_t>(seq.dataset.size()));
    os.write(seq.dataset.data(), static_cast<std::streamsize>(seq.dataset.size()));
    for (float v : seq.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        write_u32(os, bits);
    }
    if (!os) throw format_error("write failure on '" + path + "'");
}

SkeletonSequence load_sequence(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("cannot open '" + path + "'");
    std::size_t offset = 0;
    char magic[4];
    if (!is.read(magic, 4)) throw format_error("truncated file at byte offset 0");
    offset = 4;
    if (std::memcmp(magic, "SKL1", 4) != 0)
        throw format_error("bad magic at byte offset 0 in '" + path + "'");
    SkeletonSequence seq;
    seq.persons = read_u32(is, offset);
    seq.frames = read_u32(is, offset);
    seq.joints = read_u32(is, offset);
    seq.channels = read_u32(is, offset);
    seq.label = read_u32(is, offset);
    std::uint32_t name_len = read_u32(is, offset);
    constexpr std::uint64_t kMaxElems = 1ull << 30;
    std::uint64_t count = static_cast<std::uint64_t>(seq.persons) * seq.frames *
                          seq.joints * seq.channels;
    if (seq.persons == 0 || seq.frames == 0 || seq.joints == 0 || seq.channels == 0 ||
        count > kMaxElems || name_len > 4096)
        throw format_error("dimension overflow in header at byte offset 4");
    seq.dataset.resize(name_len);
    if (name_len && !is.read(seq.dataset.data(), name_len))
        throw format_error("truncated file at byte offset " + std::to_string(offset));
    offset += name_len;
    seq.data.resize(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < seq.data.size(); ++i) {
        std::uint32_t bits = read_u32(is, offset);
        std::memcpy(&seq.data[i], &bits, 4);
    }
    char extra;
    if (is.read(&extra, 1))
        throw format_error("trailing bytes at offset " + std::to_string(offset));
    return seq;
}

void save_dataset(const DatasetDescriptor& ds, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
    if (!manifest) throw format_error("cannot write manifest in '" + out_dir + "'");
    manifest << "classes " << ds.num_classes << " graph " << ds.graph.name << "\n";
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%05zu.skl", i);
        save_sequence(ds.samples[i], (fs::path(out_dir) / name).string());
        manifest << name << ' ' << ds.samples[i].label << ' '
                 << (ds.is_train[i] ? "train" : "test") << "\n";
    }
}

DatasetDescriptor load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream is(manifest_path);
    if (!is) throw format_error("cannot open manifest '" + manifest_path + "'");
    fs::path dir = fs::path(manifest_path).parent_path();
    DatasetDescriptor ds;
    std::string header, kw_classes, kw_graph, graph_name;
    std::getline(is, header);
    std::istringstream hs(header);
    if (!(hs >> kw_classes >> ds.num_classes >> kw_graph >> graph_name) ||
        kw_classes != "classes" || kw_graph != "graph")
        throw format_error("malformed manifest header");
    ds.graph = build_graph(graph_name);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string file, split;
        std::uint32_t label;
        if (!(ls >> file >> label >> split) || (split != "train" && split != "test"))
            throw format_error("malformed manifest line: " + line);
        SkeletonSequence seq = load_sequence((dir / file).string());
        if (seq.joints != ds.graph.num_joints)
            throw format_error("sample joints do not match manifest graph: " + file);
        if (seq.label >= ds.num_classes)
            throw format_error("label out of range in " + file);
        ds.samples.push_back(std::move(seq));
        ds.is_train.push_back(split == "train");
    }
    return ds;
}

} // namespace ctr
