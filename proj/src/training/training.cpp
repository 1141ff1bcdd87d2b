#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "neuromatch/training.hpp"

namespace neuromatch {

namespace fs = std::filesystem;

const char* loss_kind_name(LossKind k) { return k == LossKind::circle ? "circle" : "triplet"; }

LossKind parse_loss_kind(const std::string& name) {
    if (name == "circle") return LossKind::circle;
    if (name == "triplet") return LossKind::triplet;
    throw ConfigError("unknown loss \"" + name + "\" (expected circle or triplet)");
}

const char* sampling_name(Sampling s) { return s == Sampling::mined ? "mined" : "standard"; }

Sampling parse_sampling(const std::string& name) {
    if (name == "mined") return Sampling::mined;
    if (name == "standard") return Sampling::standard;
    throw ConfigError("unknown sampling \"" + name + "\" (expected mined or standard)");
}

void TrainConfig::validate() const {
    if (batch_pairs < 2) throw ConfigError("batch_pairs must be >= 2");
    if (!(adam.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be > 0");
    if (!(miner.alpha >= 0.0)) throw ConfigError("miner alpha must be >= 0");
    if (!(triplet_margin >= 0.0)) throw ConfigError("triplet margin must be >= 0");
    circle.validate();
}

namespace {

void add_pair(Batch& batch, const PairedSample& p) {
    batch.images.push_back(p.image_a);
    batch.images.push_back(p.image_b);
    batch.labels.push_back(p.pair_id);
    batch.labels.push_back(p.pair_id);
}

void check_batch_size(std::size_t available, std::size_t batch_pairs) {
    if (batch_pairs < 2) throw ConfigError("batch_pairs must be >= 2");
    if (batch_pairs > available)
        throw DataError("batch of " + std::to_string(batch_pairs) + " pairs requested from " +
                        std::to_string(available) + " training pairs");
}

}  // namespace

Batch build_batch(const std::vector<PairedSample>& pairs, std::size_t batch_pairs, std::mt19937_64& rng) {
    check_batch_size(pairs.size(), batch_pairs);
    std::vector<std::size_t> idx(pairs.size());
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates: the first batch_pairs entries are a uniform sample.
    for (std::size_t i = 0; i < batch_pairs; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    Batch batch;
    for (std::size_t i = 0; i < batch_pairs; ++i) add_pair(batch, pairs[idx[i]]);
    return batch;
}

std::vector<Batch> epoch_batches(const std::vector<PairedSample>& pairs, std::size_t batch_pairs,
                                 std::mt19937_64& rng) {
    check_batch_size(pairs.size(), batch_pairs);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_pairs) {
        const std::size_t end = std::min(order.size(), start + batch_pairs);
        std::vector<std::size_t> chosen(order.begin() + static_cast<std::ptrdiff_t>(start),
                                        order.begin() + static_cast<std::ptrdiff_t>(end));
        if (chosen.size() < batch_pairs) {
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < pairs.size(); ++i)
                if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) rest.push_back(i);
            std::shuffle(rest.begin(), rest.end(), rng);
            chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(batch_pairs - chosen.size()));
        }
        Batch batch;
        for (std::size_t i : chosen) add_pair(batch, pairs[i]);
        out.push_back(std::move(batch));
    }
    return out;
}

Tensor dihedral(const Tensor& image, int k) {
    if (image.rank() != 2 || image.rows() != image.cols()) throw ShapeError("dihedral: expected a square image");
    if (k < 0 || k > 7) throw ConfigError("dihedral index must be in 0..7");
    const std::size_t n = image.rows();
    Tensor out({n, n});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            std::size_t sr = r, sc = k >= 4 ? n - 1 - c : c;
            for (int q = 0; q < k % 4; ++q) {
                const std::size_t t = sr;
                sr = n - 1 - sc;
                sc = t;
            }
            out.at(r, c) = image.at(sr, sc);
        }
    return out;
}

Tensor translate(const Tensor& image, int dy, int dx) {
    if (image.rank() != 2) throw ShapeError("translate: expected a rank-2 image");
    const auto rows = static_cast<std::ptrdiff_t>(image.rows()), cols = static_cast<std::ptrdiff_t>(image.cols());
    Tensor out(image.shape());
    for (std::ptrdiff_t r = 0; r < rows; ++r)
        for (std::ptrdiff_t c = 0; c < cols; ++c) {
            const auto sr = std::clamp<std::ptrdiff_t>(r - dy, 0, rows - 1);
            const auto sc = std::clamp<std::ptrdiff_t>(c - dx, 0, cols - 1);
            out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
                image.at(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc));
        }
    return out;
}

void augment_batch(Batch& batch, const TrainConfig& config, std::mt19937_64& rng) {
    if (!config.augment) return;
    std::uniform_int_distribution<int> pick(0, 7);
    const int s = static_cast<int>(config.augment_shift);
    std::uniform_int_distribution<int> shift(-s, s);
    for (std::size_t i = 0; i + 1 < batch.images.size(); i += 2) {
        const int k = pick(rng);
        for (std::size_t j = i; j < i + 2; ++j) {
            batch.images[j] = dihedral(batch.images[j], k);
            if (s > 0) {
                const int dy = shift(rng), dx = shift(rng);
                batch.images[j] = translate(batch.images[j], dy, dx);
            }
        }
    }
}

const std::vector<std::string>& policy_names() {
    static const std::vector<std::string> names{"original", "linear",   "partial", "lora_r4",
                                                "lora_r8",  "lora_r16", "full",    "proposed"};
    return names;
}

std::size_t policy_lora_rank(const std::string& policy) {
    if (policy == "lora_r4") return 4;
    if (policy == "lora_r8") return 8;
    if (policy == "lora_r16") return 16;
    return 0;
}

namespace {

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

bool is_head(const std::string& name) {
    return starts_with(name, "local.head.") || starts_with(name, "global.head.") || starts_with(name, "fusion.gate.");
}

bool is_late_block(const std::string& name, const EncoderConfig& c) {
    auto late = [&](const std::string& ch, std::size_t n) {
        for (std::size_t b = n - n / 2; b < n; ++b)
            if (starts_with(name, ch + ".block" + std::to_string(b) + ".")) return true;
        return false;
    };
    return (c.uses_local() && late("local", c.n_blocks_local)) || (c.uses_global() && late("global", c.n_blocks_global));
}

}  // namespace

ParameterPartition make_partition(const DualEncoder& model, const std::string& policy) {
    if (std::find(policy_names().begin(), policy_names().end(), policy) == policy_names().end())
        throw ConfigError("unknown policy \"" + policy + "\"");
    const std::size_t rank = policy_lora_rank(policy);
    if (rank > 0 && model.lora.rank == 0)
        throw ConfigError("policy " + policy + " needs a model with LoRA factors");
    if (rank > 0 && model.lora.rank != rank)
        throw ConfigError("policy " + policy + " expects LoRA rank " + std::to_string(rank) + ", model has " +
                          std::to_string(model.lora.rank));

    ParameterPartition p;
    p.policy = policy;
    for (const auto& name : model.params.names()) {
        bool train = false;
        if (policy == "full" || policy == "proposed")
            train = true;
        else if (policy == "linear")
            train = is_head(name);
        else if (policy == "partial")
            train = is_head(name) || is_late_block(name, model.config);
        else if (rank > 0)
            train = is_head(name) || name.find(".lora_") != std::string::npos;
        (train ? p.trainable : p.frozen).insert(name);
    }
    return p;
}

void optimizer_step(ModelParams& params, const std::map<std::string, Tensor>& grads, AdamState& state,
                    const AdamSettings& s, const std::set<std::string>& trainable) {
    for (const auto& [name, g] : grads) {
        if (!params.contains(name)) throw ConfigError("gradient for unknown parameter " + name);
        if (g.shape() != params.get(name).shape())
            throw ShapeError("gradient for " + name + " has shape " + shape_string(g.shape()) + ", parameter " +
                             shape_string(params.get(name).shape()));
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
    for (const auto& name : trainable) {
        Tensor& w = params.get(name);
        auto [mit, fresh] = state.m.try_emplace(name, Tensor(w.shape(), 0.0));
        Tensor& m = mit->second;
        Tensor& v = state.v.try_emplace(name, Tensor(w.shape(), 0.0)).first->second;
        const auto git = grads.find(name);
        const bool zero = git == grads.end() ||
                          std::all_of(git->second.values().begin(), git->second.values().end(), [](double x) { return x == 0.0; });
        if (zero) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] *= s.beta1;
                v[i] *= s.beta2;
            }
            continue;
        }
        const Tensor& g = git->second;
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
            w[i] -= s.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.eps);
        }
    }
}

namespace {

Tensor stack_rows(const std::vector<Tensor>& rows) {
    std::vector<Tensor> cols;
    cols.reserve(rows.size());
    for (const auto& r : rows) cols.push_back(transpose2d(r));
    return transpose2d(concat_last_dim(cols));
}

Tensor distances(const Tensor& embeddings, std::span<const IndexPair> pairs) {
    return add(scale(pair_similarities(embeddings, pairs), -1.0), Tensor::scalar(1.0));
}

}  // namespace

BatchLoss batch_loss(const Batch& batch, const ModelParams& params, const EncoderConfig& config,
                     const LoraSettings& lora, const TrainConfig& train) {
    std::vector<Tensor> rows;
    rows.reserve(batch.images.size());
    for (const Tensor& image : batch.images) rows.push_back(embed(image, params, config, lora));
    BatchLoss out;
    out.embeddings = stack_rows(rows);
    out.pairs = train.sampling == Sampling::mined ? mine_hard_negatives(out.embeddings, batch.labels, train.miner)
                                                  : all_pairs(batch.labels);
    if (train.loss == LossKind::circle) {
        const auto [sp, sn] = pair_similarities(out.embeddings, out.pairs);
        out.loss = circle_loss(sp, sn, train.circle);
        return out;
    }
    // Triplets: each positive pair in both anchor orders, against every
    // selected negative that shares the anchor.
    std::vector<IndexPair> ap, an;
    for (const auto& [i, j] : out.pairs.positives)
        for (const auto& [anchor, positive] : {IndexPair{i, j}, IndexPair{j, i}})
            for (const auto& [a, b] : out.pairs.negatives) {
                if (a != anchor && b != anchor) continue;
                ap.emplace_back(anchor, positive);
                an.emplace_back(anchor, a == anchor ? b : a);
            }
    if (ap.empty()) {
        out.loss = Tensor::scalar(0.0);
        return out;
    }
    out.loss = triplet_loss(distances(out.embeddings, ap), distances(out.embeddings, an), train.triplet_margin);
    return out;
}

StepResult compute_step(const Batch& batch, const DualEncoder& model, const ParameterPartition& partition,
                        const TrainConfig& train) {
    StepResult result;
    if (partition.trainable.empty()) {
        TapeScope no_tape(nullptr);
        result.loss = batch_loss(batch, model.params, model.config, model.lora, train).loss.item();
    } else {
        Tape tape;
        TapeScope scope(&tape);
        ModelParams params = model.params;
        for (const auto& name : partition.trainable) {
            Tensor& slot = params.get(name);
            slot = tape.watch(std::move(slot));
        }
        const BatchLoss bl = batch_loss(batch, params, model.config, model.lora, train);
        result.loss = bl.loss.item();
        if (std::isfinite(result.loss) && tape.owns(bl.loss)) {
            const Gradients grads = tape.backprop(bl.loss);
            for (const auto& name : partition.trainable) result.grads.emplace(name, grads.of(params.get(name)));
        }
    }
    if (!std::isfinite(result.loss)) throw DivergenceError("training loss became non-finite");
    return result;
}

double retrieval_top1(const std::vector<PairedSample>& pairs, const DualEncoder& model) {
    if (pairs.empty()) return 0.0;
    std::vector<const Tensor*> a, b;
    for (const auto& p : pairs) {
        a.push_back(&p.image_a);
        b.push_back(&p.image_b);
    }
    const Tensor qa = embed_all(a, model), gb = embed_all(b, model);
    const std::size_t n = pairs.size(), d = qa.cols();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_s = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += qa.at(i, c) * gb.at(j, c);
            if (s > best_s) {
                best_s = s;
                best = j;
            }
        }
        hits += best == i;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

namespace {

void check_partition(const DualEncoder& model, const ParameterPartition& partition) {
    std::set<std::string> all;
    for (const auto& name : model.params.names()) all.insert(name);
    std::set<std::string> joined = partition.trainable;
    for (const auto& name : partition.frozen)
        if (!joined.insert(name).second) throw ConfigError("parameter " + name + " is both trainable and frozen");
    if (joined != all) throw ConfigError("partition " + partition.policy + " does not match the model's parameters");
}

}  // namespace

TrainResult train(const DualEncoder& model, const DatasetSplit& split, const TrainConfig& config,
                  const ParameterPartition& partition, const EpochCallback& on_epoch) {
    config.validate();
    check_partition(model, partition);
    TrainResult result{model, {}, 0};
    if (config.epochs == 0) return result;
    if (split.train.empty()) throw DataError("training split is empty");

    std::mt19937_64 rng(config.seed);
    AdamState state;
    DualEncoder current = model;
    double best = config.keep_best ? retrieval_top1(split.validation, current) : 0.0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        double total = 0.0;
        auto batches = epoch_batches(split.train, config.batch_pairs, rng);
        for (auto& batch : batches) {
            augment_batch(batch, config, rng);
            const StepResult step = compute_step(batch, current, partition, config);
            total += step.loss;
            if (!partition.trainable.empty())
                optimizer_step(current.params, step.grads, state, config.adam, partition.trainable);
        }
        EpochRecord rec{epoch, total / static_cast<double>(batches.size()), retrieval_top1(split.validation, current)};
        result.history.push_back(rec);
        if (config.keep_best && rec.val_top1 >= best) {
            best = rec.val_top1;
            result.model = current;
            result.selected_epoch = epoch;
        }
        if (config.save_every > 0 && epoch % config.save_every == 0) {
            std::ostringstream name;
            name << "epoch_" << std::setw(4) << std::setfill('0') << epoch << ".ckpt";
            save_checkpoint(current, config.checkpoint_dir / name.str());
        }
        if (on_epoch) on_epoch(rec);
    }
    if (!config.keep_best) {
        result.model = std::move(current);
        result.selected_epoch = config.epochs;
    }
    return result;
}

void write_history_csv(const std::vector<EpochRecord>& history, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,loss,val_top1\n" << std::setprecision(10);
    for (const auto& r : history) out << r.epoch << ',' << r.loss << ',' << r.val_top1 << '\n';
}

std::vector<GridRun> ablation_grid(const EncoderConfig& encoder, const TrainConfig& train) {
    std::vector<GridRun> runs;
    EncoderConfig dual = encoder;
    dual.channels = ChannelMode::dual;
    TrainConfig proposed = train;
    proposed.sampling = Sampling::mined;
    proposed.loss = LossKind::circle;
    runs.push_back({"proposed", dual, proposed, "proposed"});

    TrainConfig standard = proposed;
    standard.sampling = Sampling::standard;
    runs.push_back({"standard_sampling", dual, standard, "full"});

    TrainConfig triplet = proposed;
    triplet.loss = LossKind::triplet;
    runs.push_back({"triplet_loss", dual, triplet, "full"});

    EncoderConfig local = dual;
    local.channels = ChannelMode::local_only;
    runs.push_back({"local_only", local, proposed, "full"});

    EncoderConfig global = dual;
    global.channels = ChannelMode::global_only;
    runs.push_back({"global_only", global, proposed, "full"});
    return runs;
}

std::vector<GridRun> finetune_grid(const EncoderConfig& encoder, const TrainConfig& train, bool all_ranks) {
    EncoderConfig dual = encoder;
    dual.channels = ChannelMode::dual;
    TrainConfig baseline = train;
    baseline.sampling = Sampling::standard;
    baseline.loss = LossKind::circle;
    TrainConfig proposed = train;
    proposed.sampling = Sampling::mined;
    proposed.loss = LossKind::circle;

    std::vector<GridRun> runs;
    runs.push_back({"original", dual, baseline, "original"});
    runs.push_back({"linear", dual, baseline, "linear"});
    runs.push_back({"partial", dual, baseline, "partial"});
    if (all_ranks) {
        for (const char* p : {"lora_r4", "lora_r8", "lora_r16"}) runs.push_back({p, dual, baseline, p});
    } else {
        runs.push_back({"lora_r4", dual, baseline, "lora_r4"});
    }
    runs.push_back({"full", dual, baseline, "full"});
    runs.push_back({"proposed", dual, proposed, "proposed"});
    return runs;
}

DualEncoder prepare_model(const DualEncoder& base, const std::string& policy, std::uint64_t seed) {
    DualEncoder model = base;
    const std::size_t rank = policy_lora_rank(policy);
    if (rank > 0 && model.lora.rank == 0) inject_lora(model, rank, 2.0 * static_cast<double>(rank), seed ^ 0x10a);
    return model;
}

}  // namespace neuromatch
