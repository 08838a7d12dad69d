#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctr/errors.hpp"

namespace ctr {

/// Skeleton as a rooted spanning tree: every edge points child -> parent
/// toward the root joint.
struct SkeletonGraph {
    std::string name;
    std::size_t num_joints = 0;
    std::vector<std::pair<std::size_t, std::size_t>> edges; // (child, parent)
    std::size_t root = 0;

    void validate() const; // spanning-tree invariants
};

/// Dense adjacency prior split into the identity / inward / outward
/// partitions, inward and outward row-normalized.
struct AdjacencySet {
    std::size_t num_joints = 0;
    std::vector<double> identity; // N*N row-major
    std::vector<double> inward;
    std::vector<double> outward;
};

struct SkeletonSequence {
    std::size_t persons = 0;
    std::size_t frames = 0;
    std::size_t joints = 0;
    std::size_t channels = 0;
    std::vector<float> data; // [person][frame][joint][channel]
    std::uint32_t label = 0;
    std::string dataset;

    std::size_t index(std::size_t m, std::size_t t, std::size_t n, std::size_t c) const {
        return ((m * frames + t) * joints + n) * channels + c;
    }
    float& at(std::size_t m, std::size_t t, std::size_t n, std::size_t c) {
        return data[index(m, t, n, c)];
    }
    float at(std::size_t m, std::size_t t, std::size_t n, std::size_t c) const {
        return data[index(m, t, n, c)];
    }
};

struct DatasetDescriptor {
    std::size_t num_classes = 0;
    SkeletonGraph graph;
    std::vector<SkeletonSequence> samples;
    std::vector<bool> is_train; // parallel to samples

    std::vector<std::size_t> split_indices(bool train) const;
};

struct SynthSpec {
    std::size_t num_classes = 4;
    std::size_t samples_per_class = 50;
    std::size_t persons = 1;
    std::size_t frames = 64;
    std::string graph_name = "ntu25";
    double noise_sigma = 0.05;
};

SkeletonGraph build_graph(const std::string& name);
AdjacencySet adjacency_set(const SkeletonGraph& graph);

SkeletonSequence resize_temporal(const SkeletonSequence& seq, std::size_t target_frames);
SkeletonSequence derive_bone(const SkeletonSequence& seq, const SkeletonGraph& graph);
SkeletonSequence derive_motion(const SkeletonSequence& seq);

DatasetDescriptor synthesize_dataset(const SynthSpec& spec, std::uint64_t seed);

void save_sequence(const SkeletonSequence& seq, const std::string& path);
SkeletonSequence load_sequence(const std::string& path);

/// Writes <out_dir>/<stem>NNNN.skl files plus a manifest listing
/// "path label split" per line.
void save_dataset(const DatasetDescriptor& ds, const std::string& out_dir);
DatasetDescriptor load_dataset(const std::string& manifest_path);

} // namespace ctr
