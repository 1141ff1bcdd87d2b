#pragma once

// Synthetic paired neuron images and their on-disk form.
//
// A pair renders one random neuron (soma ellipse, random-walk fibers, a few
// neighbouring somas) twice: modality A ("two-photon-like") is dimmer and
// noisier, modality B ("fMOST-like") is blurred and slightly mis-registered.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neuromatch/tensor.hpp"

namespace neuromatch {

inline constexpr std::size_t image_side = 150;

struct PairedSample {
    std::int64_t pair_id = 0;
    Tensor image_a;  // image_side x image_side, values in [0, 1]
    Tensor image_b;
};

enum class SplitName { train, validation, test };

const char* split_label(SplitName s);  // "train" | "val" | "test"
SplitName parse_split_label(const std::string& label);

struct DatasetSplit {
    std::vector<PairedSample> train;
    std::vector<PairedSample> validation;
    std::vector<PairedSample> test;

    std::vector<PairedSample>& part(SplitName s);
    const std::vector<PairedSample>& part(SplitName s) const;
    std::size_t total() const { return train.size() + validation.size() + test.size(); }
};

template <class T>
struct Range {
    T lo;
    T hi;
};

struct SynthesisParams {
    Range<double> soma_radius{6.0, 14.0};
    Range<int> fiber_count{2, 6};
    double fiber_wander = 0.3;  // heading change per step, radians (std-dev)
    Range<int> neighbor_count{0, 5};
    double modality_a_noise = 0.08;
    double modality_b_noise = 0.02;
    double modality_b_blur = 1.5;
    double contrast_gap = 0.8;  // modality A intensity relative to modality B
    double soma_jitter = 10.0;  // max soma offset from the image centre, px
    int misalignment = 10;      // max integer shift of modality B against A, px
    std::uint64_t seed = 0;

    void validate() const;
};

// Relative split weights (train : validation : test).
struct SplitRatios {
    double train = 190.0;
    double validation = 30.0;
    double test = 53.0;
};

struct SplitSizes {
    std::size_t train = 0;
    std::size_t validation = 0;
    std::size_t test = 0;
};

// Largest-remainder apportionment of n pairs; every split receives at least one.
SplitSizes split_sizes(std::size_t n_pairs, const SplitRatios& ratios = {});

PairedSample generate_pair(const SynthesisParams& params, std::int64_t pair_id);

// Pair ids 0..n-1, assigned in order to train, validation, test.
DatasetSplit generate_dataset(const SynthesisParams& params, std::size_t n_pairs, const SplitRatios& ratios = {});

// Binary 8-bit PGM ("P5").
Tensor read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

// Writes images/<id>_a.pgm, images/<id>_b.pgm and manifest.jsonl into
// `directory`; returns the manifest path.
std::filesystem::path save_manifest(const DatasetSplit& split, const std::filesystem::path& directory);

// Accepts a manifest file or a directory containing manifest.jsonl. Relative
// image paths resolve against the manifest's directory.
DatasetSplit load_manifest(const std::filesystem::path& path);

}  // namespace neuromatch
