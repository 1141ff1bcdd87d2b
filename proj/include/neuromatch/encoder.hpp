#pragma once

// Dual-channel attention encoder.
//
// The local channel sees a centre crop (the soma region); the global channel
// sees the whole image behind a per-token spatial gate. Each channel is a
// stack of pre-norm multi-head self-attention blocks, mean-pooled and
// projected to embed_dim. A learned elementwise sigmoid gate mixes the two
// channel features and the result is L2-normalised.
//
// Parameters live in a flat, ordered table keyed by dotted names such as
// "global.block3.attn.query.weight". Linear layers compute y = x W + b with
// x a row of tokens, so W is d_in x d_out.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "neuromatch/tensor.hpp"

namespace neuromatch {

enum class ChannelMode { dual, local_only, global_only };

const char* channel_mode_name(ChannelMode m);
ChannelMode parse_channel_mode(const std::string& name);

struct EncoderConfig {
    std::size_t image_size = 150;
    std::size_t patch_size = 15;
    std::size_t token_dim = 64;
    std::size_t n_blocks_local = 4;
    std::size_t n_blocks_global = 4;
    std::size_t n_heads = 4;
    std::size_t embed_dim = 64;
    std::size_t local_crop = 60;
    std::size_t mlp_hidden = 128;
    ChannelMode channels = ChannelMode::dual;
    // Each channel rescales its input (crop or full image) to zero mean and unit variance.
    bool standardize = true;

    void validate() const;
    bool uses_local() const { return channels != ChannelMode::global_only; }
    bool uses_global() const { return channels != ChannelMode::local_only; }
};

class ModelParams {
public:
    void add(std::string name, Tensor value);
    bool contains(const std::string& name) const { return index_.contains(name); }
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    void set(const std::string& name, Tensor value);

    std::vector<std::string> names() const;
    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t scalar_count() const;

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct LoraSettings {
    std::size_t rank = 0;  // 0: no adapters
    double alpha = 0.0;
};

struct DualEncoder {
    EncoderConfig config;
    ModelParams params;
    LoraSettings lora;
};

// Random initialisation, deterministic in seed.
DualEncoder make_encoder(const EncoderConfig& config, std::uint64_t seed);

// Names and shapes the config (and LoRA settings) require, in storage order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const EncoderConfig& config, const LoraSettings& lora = {});

// Names of the attention linears that receive LoRA factors.
std::vector<std::string> attention_linear_names(const EncoderConfig& config);

// Adds A (d_in x r, small random) and B (r x d_out, zero) to every attention
// query/key/value/output linear. Effective weight: W + (alpha / r) A B.
void inject_lora(DualEncoder& model, std::size_t rank, double alpha, std::uint64_t seed);

// Optional capture of intermediate tensors during a forward pass.
struct ForwardTrace {
    Tensor local_tokens;   // final local block output, n_local x token_dim
    Tensor global_tokens;  // final global block output, n_global x token_dim
    Tensor local_feature;  // 1 x embed_dim
    Tensor global_feature;
    Tensor gate;           // 1 x embed_dim
    Tensor fused;          // pre-normalisation embedding
    std::vector<Tensor> attention;  // softmax weights, one per (block, head), local first
};

// Flattened non-overlapping patches: (side/patch)^2 x patch^2.
Tensor patch_matrix(const Tensor& image, std::size_t patch_size);
Tensor center_crop(const Tensor& image, std::size_t side);

// Linear projection of the flattened patches plus positional encoding.
Tensor patchify(const Tensor& image, std::size_t patch_size, const Tensor& weight, const Tensor& bias,
                const Tensor& positional);

// y = x W + b, plus the LoRA term when "<name>.lora_a" is present.
Tensor linear(const Tensor& x, const ModelParams& params, const std::string& name, const LoraSettings& lora);

// Pre-norm multi-head self-attention followed by a GELU MLP, both residual.
Tensor attention_block(const Tensor& tokens, const ModelParams& params, const std::string& prefix,
                       const EncoderConfig& config, const LoraSettings& lora, ForwardTrace* trace = nullptr);

Tensor local_channel(const Tensor& image, const ModelParams& params, const EncoderConfig& config,
                     const LoraSettings& lora, ForwardTrace* trace = nullptr);
Tensor global_channel(const Tensor& image, const ModelParams& params, const EncoderConfig& config,
                      const LoraSettings& lora, ForwardTrace* trace = nullptr);

// g = sigmoid([f_local ; f_global] W_g + b_g); returns normalize(g f_local + (1 - g) f_global).
Tensor gate_fuse(const Tensor& f_local, const Tensor& f_global, const Tensor& weight, const Tensor& bias,
                 ForwardTrace* trace = nullptr);

// Unit-norm 1 x embed_dim embedding. Uses `params` as given, so tracked
// parameter copies put the whole forward pass on the active tape.
Tensor embed(const Tensor& image, const ModelParams& params, const EncoderConfig& config, const LoraSettings& lora,
             ForwardTrace* trace = nullptr);
Tensor embed(const Tensor& image, const DualEncoder& model, ForwardTrace* trace = nullptr);

// Embeddings of many images as rows, computed without a tape.
Tensor embed_all(const std::vector<const Tensor*>& images, const DualEncoder& model);

// Checkpoint: one line of JSON header, then float32 little-endian parameter data.
void save_checkpoint(const DualEncoder& model, const std::filesystem::path& path);
DualEncoder load_checkpoint(const std::filesystem::path& path);

}  // namespace neuromatch
