#include <algorithm>
#include <cmath>
#include <numeric>

#include "neuromatch/encoder.hpp"

namespace neuromatch {

const char* channel_mode_name(ChannelMode m) {
    switch (m) {
        case ChannelMode::dual: return "dual";
        case ChannelMode::local_only: return "local";
        case ChannelMode::global_only: return "global";
    }
    return "?";
}

ChannelMode parse_channel_mode(const std::string& name) {
    if (name == "dual") return ChannelMode::dual;
    if (name == "local") return ChannelMode::local_only;
    if (name == "global") return ChannelMode::global_only;
    throw ConfigError("unknown channel mode \"" + name + "\" (expected dual, local or global)");
}

void EncoderConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid encoder config: " + what); };
    if (patch_size == 0 || image_size == 0 || token_dim == 0 || n_heads == 0 || embed_dim == 0 || mlp_hidden == 0)
        fail("dimensions must be positive");
    if (image_size % patch_size != 0) fail("image_size not divisible by patch_size");
    if (local_crop == 0 || local_crop > image_size || local_crop % patch_size != 0)
        fail("local_crop must be a positive multiple of patch_size no larger than the image");
    if (token_dim % n_heads != 0) fail("token_dim not divisible by n_heads");
    if (uses_local() && n_blocks_local == 0) fail("local channel needs at least one block");
    if (uses_global() && n_blocks_global == 0) fail("global channel needs at least one block");
}

void ModelParams::add(std::string name, Tensor value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
}

const Tensor& ModelParams::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second].second;
}

Tensor& ModelParams::get(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second].second;
}

void ModelParams::set(const std::string& name, Tensor value) {
    Tensor& slot = get(name);
    if (slot.shape() != value.shape())
        throw ShapeError("parameter " + name + " expects " + shape_string(slot.shape()) + ", got " +
                         shape_string(value.shape()));
    slot = std::move(value);
}

std::vector<std::string> ModelParams::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
}

std::size_t ModelParams::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
}

namespace {

const char* const attention_linears[] = {"query", "key", "value", "output"};

std::size_t token_count(std::size_t side, std::size_t patch) { return (side / patch) * (side / patch); }

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void channel_layout(std::vector<std::pair<std::string, Shape>>& out, const std::string& ch, std::size_t side,
                    std::size_t n_blocks, const EncoderConfig& c, const LoraSettings& lora) {
    const std::size_t d = c.token_dim;
    out.push_back({ch + ".patch.weight", {c.patch_size * c.patch_size, d}});
    out.push_back({ch + ".patch.bias", {1, d}});
    out.push_back({ch + ".pos", {token_count(side, c.patch_size), d}});
    if (ch == "global") {
        out.push_back({"global.spatial.weight", {d, 1}});
        out.push_back({"global.spatial.bias", {1, 1}});
    }
    for (std::size_t b = 0; b < n_blocks; ++b) {
        const std::string p = ch + ".block" + std::to_string(b);
        out.push_back({p + ".norm1.gain", {1, d}});
        out.push_back({p + ".norm1.bias", {1, d}});
        for (const char* lin : attention_linears) {
            const std::string name = p + ".attn." + lin;
            out.push_back({name + ".weight", {d, d}});
            out.push_back({name + ".bias", {1, d}});
            if (lora.rank > 0) {
                out.push_back({name + ".lora_a", {d, lora.rank}});
                out.push_back({name + ".lora_b", {lora.rank, d}});
            }
        }
        out.push_back({p + ".norm2.gain", {1, d}});
        out.push_back({p + ".norm2.bias", {1, d}});
        out.push_back({p + ".mlp.fc1.weight", {d, c.mlp_hidden}});
        out.push_back({p + ".mlp.fc1.bias", {1, c.mlp_hidden}});
        out.push_back({p + ".mlp.fc2.weight", {c.mlp_hidden, d}});
        out.push_back({p + ".mlp.fc2.bias", {1, d}});
    }
    out.push_back({ch + ".norm.gain", {1, d}});
    out.push_back({ch + ".norm.bias", {1, d}});
    out.push_back({ch + ".head.weight", {d, c.embed_dim}});
    out.push_back({ch + ".head.bias", {1, c.embed_dim}});
}

Tensor initial_value(const std::string& name, const Shape& shape, std::mt19937_64& rng) {
    if (ends_with(name, ".gain")) return Tensor(shape, 1.0);
    if (ends_with(name, ".bias") || ends_with(name, ".lora_b")) return Tensor(shape, 0.0);
    if (ends_with(name, ".pos")) return Tensor::randn(shape, rng, 1.0);
    return Tensor::randn(shape, rng, 1.0 / std::sqrt(static_cast<double>(shape[0])));
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const EncoderConfig& config, const LoraSettings& lora) {
    config.validate();
    std::vector<std::pair<std::string, Shape>> out;
    if (config.uses_local()) channel_layout(out, "local", config.local_crop, config.n_blocks_local, config, lora);
    if (config.uses_global()) channel_layout(out, "global", config.image_size, config.n_blocks_global, config, lora);
    if (config.channels == ChannelMode::dual) {
        out.push_back({"fusion.gate.weight", {2 * config.embed_dim, config.embed_dim}});
        out.push_back({"fusion.gate.bias", {1, config.embed_dim}});
    }
    return out;
}

std::vector<std::string> attention_linear_names(const EncoderConfig& config) {
    std::vector<std::string> out;
    auto channel = [&](const std::string& ch, std::size_t n) {
        for (std::size_t b = 0; b < n; ++b)
            for (const char* lin : attention_linears) out.push_back(ch + ".block" + std::to_string(b) + ".attn." + lin);
    };
    if (config.uses_local()) channel("local", config.n_blocks_local);
    if (config.uses_global()) channel("global", config.n_blocks_global);
    return out;
}

DualEncoder make_encoder(const EncoderConfig& config, std::uint64_t seed) {
    DualEncoder model{config, {}, {}};
    std::mt19937_64 rng(seed);
    for (const auto& [name, shape] : parameter_layout(config)) model.params.add(name, initial_value(name, shape, rng));
    return model;
}

void inject_lora(DualEncoder& model, std::size_t rank, double alpha, std::uint64_t seed) {
    if (model.lora.rank > 0) throw ConfigError("model already carries LoRA factors");
    const std::size_t d = model.config.token_dim;
    if (rank < 1 || rank >= d)
        throw ConfigError("LoRA rank must satisfy 1 <= r < " + std::to_string(d) + ", got " + std::to_string(rank));
    if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
    // Rebuild the table so adapters sit next to the weight they modify.
    const LoraSettings lora{rank, alpha};
    std::mt19937_64 rng(seed);
    ModelParams next;
    for (const auto& [name, shape] : parameter_layout(model.config, lora)) {
        if (ends_with(name, ".lora_a"))
            next.add(name, Tensor::randn(shape, rng, 1.0 / std::sqrt(static_cast<double>(shape[0]))));
        else if (ends_with(name, ".lora_b"))
            next.add(name, Tensor(shape, 0.0));
        else
            next.add(name, model.params.get(name));
    }
    model.params = std::move(next);
    model.lora = lora;
}

Tensor patch_matrix(const Tensor& image, std::size_t patch) {
    if (image.rank() != 2 || image.rows() != image.cols())
        throw ShapeError("patch_matrix: expected a square image, got " + shape_string(image.shape()));
    const std::size_t side = image.rows();
    if (patch == 0 || side % patch != 0)
        throw ShapeError("patch_matrix: side " + std::to_string(side) + " not divisible by patch " + std::to_string(patch));
    const std::size_t grid = side / patch;
    Tensor out({grid * grid, patch * patch});
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
            double* dst = out.values().data() + (gy * grid + gx) * patch * patch;
            for (std::size_t y = 0; y < patch; ++y)
                std::copy_n(image.values().data() + (gy * patch + y) * side + gx * patch, patch, dst + y * patch);
        }
    return out;
}

Tensor center_crop(const Tensor& image, std::size_t side) {
    if (image.rank() != 2 || side > image.rows() || side > image.cols())
        throw ShapeError("center_crop: crop " + std::to_string(side) + " larger than " + shape_string(image.shape()));
    const std::size_t r0 = (image.rows() - side) / 2, c0 = (image.cols() - side) / 2;
    Tensor out({side, side});
    for (std::size_t r = 0; r < side; ++r)
        std::copy_n(image.values().data() + (r0 + r) * image.cols() + c0, side, out.values().data() + r * side);
    return out;
}

Tensor patchify(const Tensor& image, std::size_t patch_size, const Tensor& weight, const Tensor& bias,
                const Tensor& positional) {
    const Tensor patches = patch_matrix(image, patch_size);
    Tensor tokens = add(matmul(patches, weight), bias);
    return add(tokens, positional);
}

Tensor linear(const Tensor& x, const ModelParams& params, const std::string& name, const LoraSettings& lora) {
    Tensor y = add(matmul(x, params.get(name + ".weight")), params.get(name + ".bias"));
    if (lora.rank > 0 && params.contains(name + ".lora_a")) {
        const Tensor low = matmul(matmul(x, params.get(name + ".lora_a")), params.get(name + ".lora_b"));
        y = add(y, scale(low, lora.alpha / static_cast<double>(lora.rank)));
    }
    return y;
}

Tensor attention_block(const Tensor& tokens, const ModelParams& params, const std::string& prefix,
                       const EncoderConfig& config, const LoraSettings& lora, ForwardTrace* trace) {
    const std::size_t d = config.token_dim;
    if (tokens.rank() != 2 || tokens.cols() != d)
        throw ShapeError("attention_block: expected n x " + std::to_string(d) + " tokens, got " +
                         shape_string(tokens.shape()));
    const std::size_t n = tokens.rows();
    const std::size_t heads = config.n_heads;
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    const Tensor h = layer_norm(tokens, params.get(prefix + ".norm1.gain"), params.get(prefix + ".norm1.bias"));
    const Tensor q = linear(h, params, prefix + ".attn.query", lora);
    const Tensor kt = transpose2d(linear(h, params, prefix + ".attn.key", lora));
    const Tensor v = linear(h, params, prefix + ".attn.value", lora);

    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t i = 0; i < heads; ++i) {
        const Tensor qh = slice(q, Window{0, n, i * dh, (i + 1) * dh});
        const Tensor kh = slice(kt, Window{i * dh, (i + 1) * dh, 0, n});
        const Tensor vh = slice(v, Window{0, n, i * dh, (i + 1) * dh});
        const Tensor weights = softmax_rows(scale(matmul(qh, kh), inv_sqrt));
        if (trace != nullptr) trace->attention.push_back(weights);
        head_out.push_back(matmul(weights, vh));
    }
    const Tensor mixed = heads == 1 ? head_out[0] : concat_last_dim(head_out);
    const Tensor x = add(tokens, linear(mixed, params, prefix + ".attn.output", lora));

    const Tensor h2 = layer_norm(x, params.get(prefix + ".norm2.gain"), params.get(prefix + ".norm2.bias"));
    const Tensor hidden = gelu(linear(h2, params, prefix + ".mlp.fc1", lora));
    return add(x, linear(hidden, params, prefix + ".mlp.fc2", lora));
}

namespace {

Tensor run_channel(Tensor tokens, const ModelParams& params, const std::string& ch, std::size_t n_blocks,
                   const EncoderConfig& config, const LoraSettings& lora, ForwardTrace* trace, Tensor* final_tokens) {
    for (std::size_t b = 0; b < n_blocks; ++b)
        tokens = attention_block(tokens, params, ch + ".block" + std::to_string(b), config, lora, trace);
    if (final_tokens != nullptr) *final_tokens = tokens;
    const Tensor normed = layer_norm(tokens, params.get(ch + ".norm.gain"), params.get(ch + ".norm.bias"));
    return linear(mean_rows(normed), params, ch + ".head", lora);
}

Tensor standardized(Tensor image) {
    const double n = static_cast<double>(image.size());
    double mean = 0.0;
    for (double v : image.values()) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : image.values()) var += (v - mean) * (v - mean);
    const double inv = 1.0 / (std::sqrt(var / n) + 1e-6);
    for (double& v : image.values()) v = (v - mean) * inv;
    return image;
}

void check_image(const Tensor& image, const EncoderConfig& config) {
    if (image.rank() != 2 || image.rows() != config.image_size || image.cols() != config.image_size)
        throw ShapeError("expected a " + std::to_string(config.image_size) + "x" + std::to_string(config.image_size) +
                         " image, got " + shape_string(image.shape()));
}

}  // namespace

Tensor local_channel(const Tensor& image, const ModelParams& params, const EncoderConfig& config,
                     const LoraSettings& lora, ForwardTrace* trace) {
    check_image(image, config);
    Tensor crop = center_crop(image, config.local_crop);
    if (config.standardize) crop = standardized(std::move(crop));
    Tensor tokens = patchify(crop, config.patch_size, params.get("local.patch.weight"), params.get("local.patch.bias"),
                             params.get("local.pos"));
    Tensor feature = run_channel(std::move(tokens), params, "local", config.n_blocks_local, config, lora, trace,
                                 trace ? &trace->local_tokens : nullptr);
    if (trace != nullptr) trace->local_feature = feature;
    return feature;
}

Tensor global_channel(const Tensor& image, const ModelParams& params, const EncoderConfig& config,
                      const LoraSettings& lora, ForwardTrace* trace) {
    check_image(image, config);
    const Tensor input = config.standardize ? standardized(image) : image;
    Tensor tokens = patchify(input, config.patch_size, params.get("global.patch.weight"),
                             params.get("global.patch.bias"), params.get("global.pos"));
    const Tensor spatial = sigmoid(linear(tokens, params, "global.spatial", lora));
    tokens = mul(tokens, spatial);
    Tensor feature = run_channel(std::move(tokens), params, "global", config.n_blocks_global, config, lora, trace,
                                 trace ? &trace->global_tokens : nullptr);
    if (trace != nullptr) trace->global_feature = feature;
    return feature;
}

Tensor gate_fuse(const Tensor& f_local, const Tensor& f_global, const Tensor& weight, const Tensor& bias,
                 ForwardTrace* trace) {
    if (f_local.shape() != f_global.shape() || f_local.rank() != 2 || f_local.rows() != 1)
        throw ShapeError("gate_fuse: features must be matching 1 x d rows");
    const Tensor g = sigmoid(add(matmul(concat_last_dim({f_local, f_global}), weight), bias));
    const Tensor fused = add(f_global, mul(g, subtract(f_local, f_global)));
    if (trace != nullptr) {
        trace->gate = g;
        trace->fused = fused;
    }
    return l2_normalize_rows(fused);
}

Tensor embed(const Tensor& image, const ModelParams& params, const EncoderConfig& config, const LoraSettings& lora,
             ForwardTrace* trace) {
    switch (config.channels) {
        case ChannelMode::local_only: {
            Tensor f = local_channel(image, params, config, lora, trace);
            if (trace != nullptr) trace->fused = f;
            return l2_normalize_rows(f);
        }
        case ChannelMode::global_only: {
            Tensor f = global_channel(image, params, config, lora, trace);
            if (trace != nullptr) trace->fused = f;
            return l2_normalize_rows(f);
        }
        case ChannelMode::dual: break;
    }
    const Tensor fl = local_channel(image, params, config, lora, trace);
    const Tensor fg = global_channel(image, params, config, lora, trace);
    return gate_fuse(fl, fg, params.get("fusion.gate.weight"), params.get("fusion.gate.bias"), trace);
}

Tensor embed(const Tensor& image, const DualEncoder& model, ForwardTrace* trace) {
    return embed(image, model.params, model.config, model.lora, trace);
}

Tensor embed_all(const std::vector<const Tensor*>& images, const DualEncoder& model) {
    if (images.empty()) throw ShapeError("embed_all: no images");
    TapeScope no_tape(nullptr);
    const std::size_t e = model.config.embed_dim;
    Tensor out({images.size(), e});
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Tensor v = embed(*images[i], model);
        std::copy_n(v.values().data(), e, out.values().data() + i * e);
    }
    return out;
}

}  // namespace neuromatch
