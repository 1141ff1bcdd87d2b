#pragma once

// Batches, fine-tuning partitions, Adam and the training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "neuromatch/dataset.hpp"
#include "neuromatch/encoder.hpp"
#include "neuromatch/objective.hpp"

namespace neuromatch {

enum class LossKind { circle, triplet };
enum class Sampling { mined, standard };

const char* loss_kind_name(LossKind k);
LossKind parse_loss_kind(const std::string& name);
const char* sampling_name(Sampling s);
Sampling parse_sampling(const std::string& name);

struct AdamSettings {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_pairs = 8;
    AdamSettings adam;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::circle;
    Sampling sampling = Sampling::mined;
    MinerConfig miner;
    CircleLossParams circle;
    double triplet_margin = 0.2;
    // Per pair and step: one random dihedral transform applied to both
    // images, then independent random shifts of up to augment_shift pixels.
    bool augment = true;
    std::size_t augment_shift = 0;
    // Keep the parameters of the epoch with the best validation Top-1
    // (latest epoch wins ties) instead of the last epoch.
    bool keep_best = true;
    std::size_t save_every = 0;  // epochs between checkpoints; 0 disables
    std::filesystem::path checkpoint_dir;

    void validate() const;
};

struct Batch {
    std::vector<Tensor> images;         // a0, b0, a1, b1, ...
    std::vector<std::int64_t> labels;   // pair ids, each twice
};

// batch_pairs distinct pairs drawn uniformly without replacement.
Batch build_batch(const std::vector<PairedSample>& pairs, std::size_t batch_pairs, std::mt19937_64& rng);

// One shuffled pass: every pair appears in exactly one batch, except that a
// short final batch is topped up with other pairs so all batches are full.
std::vector<Batch> epoch_batches(const std::vector<PairedSample>& pairs, std::size_t batch_pairs,
                                 std::mt19937_64& rng);

// k in 0..7: k % 4 quarter turns, then a horizontal mirror when k >= 4.
Tensor dihedral(const Tensor& image, int k);
// Shift by (dy, dx) pixels, replicating the border.
Tensor translate(const Tensor& image, int dy, int dx);
void augment_batch(Batch& batch, const TrainConfig& config, std::mt19937_64& rng);

struct ParameterPartition {
    std::string policy;
    std::set<std::string> trainable;
    std::set<std::string> frozen;
};

// original, linear, partial, lora_r4, lora_r8, lora_r16, full, proposed.
const std::vector<std::string>& policy_names();
ParameterPartition make_partition(const DualEncoder& model, const std::string& policy);
// LoRA rank a policy name asks for, or 0.
std::size_t policy_lora_rank(const std::string& policy);

struct AdamState {
    std::size_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

// Bias-corrected Adam update of the trainable parameters that have a gradient.
void optimizer_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
                    const AdamSettings& settings, const std::set<std::string>& trainable);

// Embeddings of a batch as rows plus the scalar batch loss. Parameters named
// in `trainable` are expected to be tracked on the active tape by the caller.
struct BatchLoss {
    Tensor embeddings;
    Tensor loss;
    MinedPairs pairs;
};
BatchLoss batch_loss(const Batch& batch, const ModelParams& params, const EncoderConfig& config,
                     const LoraSettings& lora, const TrainConfig& train);

// Loss and gradients for the trainable parameters on one batch.
struct StepResult {
    double loss = 0.0;
    std::map<std::string, Tensor> grads;
};
StepResult compute_step(const Batch& batch, const DualEncoder& model, const ParameterPartition& partition,
                        const TrainConfig& train);

// Top-1 retrieval accuracy of modality-A queries against the modality-B gallery.
double retrieval_top1(const std::vector<PairedSample>& pairs, const DualEncoder& model);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double loss = 0.0;      // mean batch loss
    double val_top1 = 0.0;
};

struct TrainResult {
    DualEncoder model;
    std::vector<EpochRecord> history;
    std::size_t selected_epoch = 0;  // 0: initial parameters
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const DualEncoder& model, const DatasetSplit& split, const TrainConfig& config,
                  const ParameterPartition& partition, const EpochCallback& on_epoch = {});

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

// Grid runs. Each entry trains from `base` (or a fresh encoder where the
// variant changes the architecture) and is evaluated by the caller.
struct GridRun {
    std::string name;
    EncoderConfig encoder;
    TrainConfig train;
    std::string policy;
};

// proposed, standard_sampling, triplet_loss, local_only, global_only.
std::vector<GridRun> ablation_grid(const EncoderConfig& encoder, const TrainConfig& train);
// original, linear, partial, lora (r4, or r4/r8/r16 with all_ranks), full, proposed.
std::vector<GridRun> finetune_grid(const EncoderConfig& encoder, const TrainConfig& train, bool all_ranks);

// Model ready for training under `policy`: LoRA factors injected when needed.
DualEncoder prepare_model(const DualEncoder& base, const std::string& policy, std::uint64_t seed);

}  // namespace neuromatch
