#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <regex>
#include <set>

#include "neuromatch/training.hpp"

using namespace neuromatch;
namespace fs = std::filesystem;

namespace {

EncoderConfig small_config() {
    EncoderConfig c;
    c.token_dim = 16;
    c.n_heads = 2;
    c.embed_dim = 16;
    c.mlp_hidden = 32;
    c.n_blocks_local = 2;
    c.n_blocks_global = 2;
    return c;
}

const DatasetSplit& small_split() {
    static const DatasetSplit split = [] {
        SynthesisParams p;
        p.seed = 3;
        return generate_dataset(p, 20, SplitRatios{7, 1, 2});
    }();
    return split;
}

TrainConfig quick_train() {
    TrainConfig t;
    t.epochs = 1;
    t.batch_pairs = 4;
    t.seed = 5;
    t.circle.gamma = 8.0;
    return t;
}

bool same_values(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::ranges::equal(a.values(), b.values());
}

std::set<std::string> trained_blocks(const ParameterPartition& p) {
    std::set<std::string> blocks;
    const std::regex re(R"(^(local|global)\.block(\d+)\.)");
    for (const auto& name : p.trainable) {
        std::smatch m;
        if (std::regex_search(name, m, re)) blocks.insert(m[1].str() + m[2].str());
    }
    return blocks;
}

}  // namespace

TEST_CASE("batches pair both modalities under one label") {
    const auto& train = small_split().train;
    std::mt19937_64 rng(1);
    const Batch b = build_batch(train, 4, rng);
    REQUIRE(b.images.size() == 8);
    REQUIRE(b.labels.size() == 8);
    std::map<std::int64_t, int> seen;
    for (std::size_t i = 0; i < 8; i += 2) {
        CHECK(b.labels[i] == b.labels[i + 1]);
        const auto it = std::find_if(train.begin(), train.end(), [&](const auto& p) { return p.pair_id == b.labels[i]; });
        REQUIRE(it != train.end());
        CHECK(same_values(b.images[i], it->image_a));
        CHECK(same_values(b.images[i + 1], it->image_b));
    }
    for (auto l : b.labels) ++seen[l];
    CHECK(seen.size() == 4);
    for (const auto& [label, n] : seen) CHECK(n == 2);

    std::mt19937_64 r1(9), r2(9);
    CHECK(build_batch(train, 3, r1).labels == build_batch(train, 3, r2).labels);
    CHECK_THROWS_AS(build_batch(train, train.size() + 1, r1), DataError);
}

TEST_CASE("an epoch covers every training pair") {
    const auto& train = small_split().train;
    std::mt19937_64 rng(2);
    const auto batches = epoch_batches(train, 4, rng);
    CHECK(batches.size() == (train.size() + 3) / 4);
    std::set<std::int64_t> covered;
    for (const auto& b : batches) {
        CHECK(b.images.size() == 8);
        std::set<std::int64_t> labels(b.labels.begin(), b.labels.end());
        CHECK(labels.size() == 4);
        covered.insert(labels.begin(), labels.end());
    }
    CHECK(covered.size() == train.size());
}

TEST_CASE("dihedral transforms and translation") {
    const Tensor sq({2, 2}, {1, 2, 3, 4});
    CHECK(same_values(dihedral(sq, 0), sq));
    Tensor turned = sq;
    for (int i = 0; i < 4; ++i) turned = dihedral(turned, 1);
    CHECK(same_values(turned, sq));
    CHECK(same_values(dihedral(dihedral(sq, 4), 4), sq));
    std::set<std::vector<double>> distinct;
    for (int k = 0; k < 8; ++k) {
        const Tensor t = dihedral(sq, k);
        std::vector<double> v(t.values().begin(), t.values().end());
        std::vector<double> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == std::vector<double>{1, 2, 3, 4});
        distinct.insert(v);
    }
    CHECK(distinct.size() == 8);
    CHECK_THROWS_AS(dihedral(Tensor({2, 3}), 1), ShapeError);

    const Tensor img({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const Tensor right = translate(img, 0, 1);
    CHECK(right.at(0, 0) == 1.0);
    CHECK(right.at(0, 1) == 1.0);
    CHECK(right.at(0, 2) == 2.0);
    const Tensor down = translate(img, 1, 0);
    CHECK(down.at(0, 2) == 3.0);
    CHECK(down.at(1, 2) == 3.0);
    CHECK(down.at(2, 2) == 6.0);
    CHECK(same_values(translate(img, 0, 0), img));
}

TEST_CASE("partitions follow the policy table") {
    const DualEncoder model = make_encoder(EncoderConfig{}, 1);
    const auto names = model.params.names();
    const std::set<std::string> all(names.begin(), names.end());
    for (const auto& policy : policy_names()) {
        if (policy_lora_rank(policy) > 0) continue;
        const ParameterPartition p = make_partition(model, policy);
        std::set<std::string> both = p.trainable;
        both.insert(p.frozen.begin(), p.frozen.end());
        CHECK(both == all);
        for (const auto& n : p.trainable) CHECK_FALSE(p.frozen.count(n));
    }
    CHECK(make_partition(model, "original").trainable.empty());
    CHECK(make_partition(model, "full").frozen.empty());
    CHECK(make_partition(model, "proposed").trainable == all);

    const ParameterPartition linear = make_partition(model, "linear");
    CHECK(trained_blocks(linear).empty());
    for (const auto& n : linear.trainable)
        CHECK((n.rfind("local.head.", 0) == 0 || n.rfind("global.head.", 0) == 0 || n.rfind("fusion.gate.", 0) == 0));

    const ParameterPartition partial = make_partition(model, "partial");
    CHECK(trained_blocks(partial) == std::set<std::string>{"local2", "local3", "global2", "global3"});
    for (const auto& n : linear.trainable) CHECK(partial.trainable.count(n));
    CHECK_FALSE(partial.trainable.count("global.patch.weight"));

    CHECK_THROWS_AS(make_partition(model, "lora_r4"), ConfigError);
    CHECK_THROWS_AS(make_partition(model, "everything"), ConfigError);
}

TEST_CASE("LoRA partitions train only the factors and the head") {
    const DualEncoder base = make_encoder(EncoderConfig{}, 1);
    const std::size_t head = make_partition(base, "linear").trainable.size();
    std::size_t head_scalars = 0;
    for (const auto& n : make_partition(base, "linear").trainable) head_scalars += base.params.get(n).size();
    for (std::size_t r : {4u, 8u, 16u}) {
        const std::string policy = "lora_r" + std::to_string(r);
        const DualEncoder model = prepare_model(base, policy, 3);
        CHECK(model.lora.rank == r);
        CHECK(model.lora.alpha == 2.0 * r);
        const ParameterPartition p = make_partition(model, policy);

        // Enumerate the layout: every attention linear gets A (d_in x r) and B (r x d_out).
        std::size_t expected = head_scalars, factors = 0;
        for (const auto& [name, shape] : parameter_layout(model.config, model.lora)) {
            if (name.find(".lora_") == std::string::npos) continue;
            ++factors;
            expected += shape[0] * shape[1];
        }
        std::size_t scalars = 0;
        for (const auto& n : p.trainable) scalars += model.params.get(n).size();
        CHECK(p.trainable.size() == head + factors);
        CHECK(scalars == expected);
        CHECK(scalars - head_scalars == 32 * r * 128);
        for (const auto& n : p.trainable)
            if (n.find(".lora_") == std::string::npos) CHECK(make_partition(base, "linear").trainable.count(n));
        CHECK_THROWS_AS(make_partition(model, r == 4 ? "lora_r8" : "lora_r4"), ConfigError);
    }
}

TEST_CASE("adam matches the scalar recurrence") {
    ModelParams params;
    params.add("w", Tensor({1, 1}, 1.0));
    AdamState state;
    AdamSettings s;
    s.learning_rate = 0.1;
    double w = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 100; ++t) {
        const double g = 2.0 * params.get("w")[0];
        optimizer_step(params, {{"w", Tensor({1, 1}, g)}}, state, s, {"w"});
        const double og = 2.0 * w;
        m = 0.9 * m + 0.1 * og;
        v = 0.999 * v + 0.001 * og * og;
        const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
        w -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        CHECK(params.get("w")[0] == doctest::Approx(w).epsilon(1e-12));
    }
    CHECK(std::abs(params.get("w")[0]) < 0.01);
}

TEST_CASE("adam leaves zero-gradient and frozen parameters untouched") {
    ModelParams params;
    params.add("a", Tensor({1, 2}, {0.5, -0.5}));
    params.add("b", Tensor({1, 1}, 2.0));
    AdamState state;
    AdamSettings s;
    optimizer_step(params, {{"a", Tensor({1, 2}, {1.0, 1.0})}, {"b", Tensor({1, 1}, 3.0)}}, state, s, {"a"});
    CHECK(params.get("b")[0] == 2.0);
    const double m_before = state.m.at("a")[0];
    const Tensor a_before = params.get("a");
    optimizer_step(params, {{"a", Tensor({1, 2}, 0.0)}}, state, s, {"a"});
    CHECK(same_values(params.get("a"), a_before));
    CHECK(state.m.at("a")[0] == doctest::Approx(0.9 * m_before));
    CHECK_THROWS_AS(optimizer_step(params, {{"a", Tensor({2, 2}, 1.0)}}, state, s, {"a"}), ShapeError);
}

TEST_CASE("one step never touches frozen parameters") {
    const DualEncoder base = make_encoder(small_config(), 4);
    std::mt19937_64 rng(6);
    const Batch batch = build_batch(small_split().train, 3, rng);
    TrainConfig t = quick_train();
    t.miner.alpha = 2.5;
    for (const auto& policy : {"original", "linear", "partial", "lora_r4", "full", "proposed"}) {
        CAPTURE(policy);
        DualEncoder model = prepare_model(base, policy, 2);
        const ParameterPartition p = make_partition(model, policy);
        const ModelParams before = model.params;
        const StepResult step = compute_step(batch, model, p, t);
        CHECK(std::isfinite(step.loss));
        for (const auto& [name, g] : step.grads) CHECK(p.trainable.count(name));
        AdamState state;
        optimizer_step(model.params, step.grads, state, t.adam, p.trainable);
        std::size_t changed = 0;
        for (const auto& [name, value] : model.params) {
            if (p.frozen.count(name)) CHECK(same_values(value, before.get(name)));
            else if (!same_values(value, before.get(name))) ++changed;
        }
        if (std::string(policy) == "original") CHECK(changed == 0);
        else CHECK(changed > 0);
    }
}

TEST_CASE("mined sampling with a vacuous threshold equals standard sampling") {
    const DualEncoder model = make_encoder(small_config(), 8);
    const ParameterPartition p = make_partition(model, "full");
    std::mt19937_64 rng(3);
    const Batch batch = build_batch(small_split().train, 4, rng);
    TrainConfig mined = quick_train();
    mined.miner.alpha = 2.0;
    TrainConfig standard = mined;
    standard.sampling = Sampling::standard;
    const StepResult a = compute_step(batch, model, p, mined);
    const StepResult b = compute_step(batch, model, p, standard);
    CHECK(a.loss == b.loss);
    for (const auto& [name, g] : a.grads) CHECK(same_values(g, b.grads.at(name)));
}

TEST_CASE("training loop contract") {
    const DualEncoder model = make_encoder(small_config(), 2);
    const auto& split = small_split();

    SUBCASE("zero epochs") {
        TrainConfig t = quick_train();
        t.epochs = 0;
        const TrainResult r = train(model, split, t, make_partition(model, "proposed"));
        CHECK(r.history.empty());
        for (const auto& [name, value] : r.model.params) CHECK(same_values(value, model.params.get(name)));
    }
    SUBCASE("original policy does not move") {
        TrainConfig t = quick_train();
        t.epochs = 2;
        const TrainResult r = train(model, split, t, make_partition(model, "original"));
        REQUIRE(r.history.size() == 2);
        CHECK(r.history[0].val_top1 == r.history[1].val_top1);
        CHECK(retrieval_top1(split.validation, r.model) == retrieval_top1(split.validation, model));
    }
    SUBCASE("loss decreases and runs are reproducible") {
        TrainConfig t = quick_train();
        t.epochs = 30;
        t.keep_best = false;
        const fs::path dir = fs::temp_directory_path() / "neuromatch_train_ckpt";
        fs::remove_all(dir);
        t.save_every = 10;
        t.checkpoint_dir = dir;
        std::size_t calls = 0;
        const TrainResult r = train(model, split, t, make_partition(model, "proposed"), [&](const EpochRecord&) { ++calls; });
        REQUIRE(r.history.size() == 30);
        CHECK(calls == 30);
        CHECK(r.history.back().loss < r.history.front().loss);
        CHECK(r.selected_epoch == 30);
        for (const char* f : {"epoch_0010.ckpt", "epoch_0020.ckpt", "epoch_0030.ckpt"}) CHECK(fs::exists(dir / f));

        t.save_every = 0;
        t.epochs = 3;
        const TrainResult x = train(model, split, t, make_partition(model, "proposed"));
        const TrainResult y = train(model, split, t, make_partition(model, "proposed"));
        for (const auto& [name, value] : x.model.params) CHECK(same_values(value, y.model.params.get(name)));
        CHECK(x.history[2].loss == y.history[2].loss);

        write_history_csv(r.history, dir / "history.csv");
        std::ifstream in(dir / "history.csv");
        std::string header;
        std::getline(in, header);
        CHECK(header == "epoch,loss,val_top1");
    }
}

TEST_CASE("grids and configuration checks") {
    const EncoderConfig e;
    const TrainConfig t;
    const auto ablation = ablation_grid(e, t);
    std::vector<std::string> names;
    for (const auto& r : ablation) names.push_back(r.name);
    CHECK(names == std::vector<std::string>{"proposed", "standard_sampling", "triplet_loss", "local_only", "global_only"});
    CHECK(ablation[1].train.sampling == Sampling::standard);
    CHECK(ablation[2].train.loss == LossKind::triplet);
    CHECK(ablation[3].encoder.channels == ChannelMode::local_only);
    CHECK(ablation[4].encoder.channels == ChannelMode::global_only);

    CHECK(finetune_grid(e, t, false).size() == 6);
    const auto all = finetune_grid(e, t, true);
    CHECK(all.size() == 8);
    CHECK(all.back().name == "proposed");
    CHECK(all.back().train.sampling == Sampling::mined);

    TrainConfig bad;
    bad.batch_pairs = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.adam.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(parse_loss_kind("triplet") == LossKind::triplet);
    CHECK(parse_sampling(sampling_name(Sampling::standard)) == Sampling::standard);
    CHECK_THROWS_AS(parse_sampling("random"), ConfigError);
}
