#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cli.hpp"
#include "neuromatch/training.hpp"
#include "neuromatch/visualization.hpp"
#include "run_manifest.hpp"

namespace neuromatch::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Flat "key = value" lines; '#' starts a comment. Keys are long flag names
// without the leading dashes. Values apply only to flags not given on the
// command line.
void apply_config_file(CLI::App& app, const std::string& path) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        CLI::Option* opt = app.get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config")
            throw UsageError(path + ":" + std::to_string(line_no) + ": unknown key \"" + key + "\" for " +
                             app.get_name());
        if (opt->count() > 0) continue;
        opt->add_result(value);
        opt->run_callback();
    }
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw UsageError(std::string("missing required option ") + flag);
}

struct EncoderOptions {
    EncoderConfig config;
    std::string channels = "dual";

    void add(CLI::App* app) {
        app->add_option("--patch-size", config.patch_size, "patch side in pixels");
        app->add_option("--token-dim", config.token_dim, "token width");
        app->add_option("--blocks-local", config.n_blocks_local, "attention blocks in the local channel");
        app->add_option("--blocks-global", config.n_blocks_global, "attention blocks in the global channel");
        app->add_option("--heads", config.n_heads, "attention heads");
        app->add_option("--embed-dim", config.embed_dim, "embedding width");
        app->add_option("--local-crop", config.local_crop, "centre crop side for the local channel");
        app->add_option("--mlp-hidden", config.mlp_hidden, "MLP hidden width");
        app->add_option("--channels", channels, "dual | local | global");
    }

    EncoderConfig resolve() const {
        EncoderConfig c = config;
        c.channels = parse_channel_mode(channels);
        c.validate();
        return c;
    }
};

struct TrainOptions {
    TrainConfig config;
    std::string loss = "circle";
    std::string sampling = "mined";
    std::string init;

    void add(CLI::App* app) {
        app->add_option("--epochs", config.epochs, "training epochs");
        app->add_option("--batch-pairs", config.batch_pairs, "pairs per batch");
        app->add_option("--lr", config.adam.learning_rate, "Adam learning rate");
        app->add_option("--seed", config.seed, "seed for initialisation, batching and augmentation");
        app->add_option("--loss", loss, "circle | triplet");
        app->add_option("--sampling", sampling, "mined | standard");
        app->add_option("--gamma", config.circle.gamma, "circle-loss scale");
        app->add_option("--margin", config.circle.m, "circle-loss margin");
        app->add_option("--alpha", config.miner.alpha, "miner distance threshold");
        app->add_option("--triplet-margin", config.triplet_margin, "triplet-loss margin");
        app->add_flag("--augment,!--no-augment", config.augment, "dihedral augmentation of training pairs");
        app->add_option("--augment-shift", config.augment_shift, "max random shift per image, pixels");
        app->add_flag("--keep-best,!--no-keep-best", config.keep_best, "keep the best validation epoch");
        app->add_option("--save-every", config.save_every, "epochs between checkpoints (0: off)");
        app->add_option("--init", init, "start from this checkpoint instead of a random encoder");
    }

    TrainConfig resolve() const {
        TrainConfig c = config;
        c.loss = parse_loss_kind(loss);
        c.sampling = parse_sampling(sampling);
        c.validate();
        return c;
    }
};

ordered_json encoder_json(const EncoderConfig& c) {
    return {{"image_size", c.image_size}, {"patch_size", c.patch_size},         {"token_dim", c.token_dim},
            {"n_blocks_local", c.n_blocks_local}, {"n_blocks_global", c.n_blocks_global}, {"n_heads", c.n_heads},
            {"embed_dim", c.embed_dim},   {"local_crop", c.local_crop},         {"mlp_hidden", c.mlp_hidden},
            {"channels", channel_mode_name(c.channels)}, {"standardize", c.standardize}};
}

ordered_json train_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_pairs", c.batch_pairs},
            {"learning_rate", c.adam.learning_rate},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"eps", c.adam.eps},
            {"seed", c.seed},
            {"loss", loss_kind_name(c.loss)},
            {"sampling", sampling_name(c.sampling)},
            {"alpha", c.miner.alpha},
            {"gamma", c.circle.gamma},
            {"margin", c.circle.m},
            {"triplet_margin", c.triplet_margin},
            {"augment", c.augment},
            {"augment_shift", c.augment_shift},
            {"keep_best", c.keep_best},
            {"save_every", c.save_every}};
}

// Copies every parameter of `source` that the target architecture also has.
DualEncoder adapt_to(const DualEncoder& source, const EncoderConfig& target, std::uint64_t seed) {
    EncoderConfig want = target;
    EncoderConfig have = source.config;
    want.channels = have.channels = ChannelMode::dual;
    if (encoder_json(want) != encoder_json(have))
        throw ConfigError("initial checkpoint does not match the requested encoder dimensions");
    DualEncoder model = make_encoder(target, seed);
    for (auto& [name, value] : model.params)
        if (source.params.contains(name)) value = source.params.get(name);
    return model;
}

std::size_t scalar_count(const DualEncoder& model, const std::set<std::string>& names) {
    std::size_t n = 0;
    for (const auto& name : names) n += model.params.get(name).size();
    return n;
}

struct Outputs {
    fs::path dir;
    std::vector<fs::path> files;

    fs::path add(const fs::path& relative) {
        files.push_back(dir / relative);
        return files.back();
    }
};

void emit_report(const EvalReport& report, const std::string& prefix, Outputs& out,
                 const std::vector<Curve>& extra_curves = {}) {
    write_report_json(report, out.add(prefix + "report.json"));
    write_topk_csv(report.topk, out.add(prefix + "topk.csv"));
    write_kde_csv(report.kde_pos, out.add(prefix + "kde_pos.csv"));
    write_kde_csv(report.kde_neg, out.add(prefix + "kde_neg.csv"));
    write_matrix_csv(report.similarity, out.add(prefix + "similarity.csv"));

    PlotData plot;
    plot.title = report.scorer + " similarity (test, A x B)";
    plot.matrix = report.similarity;
    export_plot(PlotKind::similarity_heatmap, plot, out.add(prefix + "similarity_heatmap.svg"));
    plot.title = report.scorer + " similarity of positive and negative pairs";
    plot.positive = report.kde_pos;
    plot.negative = report.kde_neg;
    export_plot(PlotKind::kde_pair, plot, out.add(prefix + "kde.svg"));
    plot.title = "Top-k accuracy";
    plot.curves = {{report.scorer, report.topk}};
    plot.curves.insert(plot.curves.end(), extra_curves.begin(), extra_curves.end());
    export_plot(PlotKind::topk_curve, plot, out.add(prefix + "topk.svg"));
}

std::string format_rate(const std::optional<double>& v) {
    if (!v) return "n/a";
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << *v;
    return s.str();
}

void print_report(const EvalReport& r, std::ostream& os) {
    os << std::fixed << std::setprecision(4) << r.scorer << ": top1 " << r.topk[0]
       << " top5 " << r.topk[std::min<std::size_t>(4, r.topk.size() - 1)] << " recall " << format_rate(r.rates.recall)
       << " specificity " << format_rate(r.rates.specificity) << " diag-dominance " << r.diagonal_dominance
       << " (threshold " << r.threshold << " from " << r.threshold_source << ")\n";
}

// ---------------------------------------------------------------- commands

struct GenerateCmd {
    std::size_t pairs = 273;
    std::uint64_t seed = 0;
    std::string out;
    std::string ratios = "190:30:53";
    SynthesisParams params;

    void add(CLI::App* app) {
        app->add_option("--pairs", pairs, "number of pairs");
        app->add_option("--seed", seed, "generator seed");
        app->add_option("--out", out, "output directory");
        app->add_option("--ratios", ratios, "train:validation:test weights");
        app->add_option("--misalignment", params.misalignment, "max shift of modality B, pixels");
        app->add_option("--soma-jitter", params.soma_jitter, "max soma offset from the centre, pixels");
        app->add_option("--noise-a", params.modality_a_noise, "modality A noise sigma");
        app->add_option("--noise-b", params.modality_b_noise, "modality B noise sigma");
        app->add_option("--blur-b", params.modality_b_blur, "modality B blur sigma");
        app->add_option("--contrast", params.contrast_gap, "modality A intensity relative to B");
    }

    SplitRatios parse_ratios() const {
        SplitRatios r;
        char c1 = 0, c2 = 0;
        std::istringstream s(ratios);
        if (!(s >> r.train >> c1 >> r.validation >> c2 >> r.test) || c1 != ':' || c2 != ':')
            throw UsageError("--ratios expects train:validation:test, got \"" + ratios + "\"");
        return r;
    }

    int run() {
        require(out, "--out");
        const auto t0 = Clock::now();
        SynthesisParams p = params;
        p.seed = seed;
        const SplitRatios r = parse_ratios();
        const DatasetSplit split = generate_dataset(p, pairs, r);
        Outputs o{out, {}};
        const fs::path manifest = save_manifest(split, out);
        o.files.push_back(manifest);
        std::cout << "generated " << split.total() << " pairs: " << split.train.size() << " train / "
                  << split.validation.size() << " validation / " << split.test.size() << " test -> " << manifest
                  << '\n';
        RunManifest m{"generate-data",
                      {{"pairs", pairs},
                       {"ratios", ratios},
                       {"misalignment", p.misalignment},
                       {"soma_jitter", p.soma_jitter},
                       {"noise_a", p.modality_a_noise},
                       {"noise_b", p.modality_b_noise},
                       {"blur_b", p.modality_b_blur},
                       {"contrast", p.contrast_gap}},
                      seed,
                      {},
                      o.files,
                      seconds_since(t0)};
        write_run_manifest(m, out);
        return 0;
    }
};

struct TrainCmd {
    std::string data, out, policy = "proposed";
    EncoderOptions encoder;
    TrainOptions train;

    void add(CLI::App* app) {
        app->add_option("--data", data, "dataset directory or manifest");
        app->add_option("--out", out, "output directory");
        app->add_option("--policy", policy, "original | linear | partial | lora_r4 | lora_r8 | lora_r16 | full | proposed");
        encoder.add(app);
        train.add(app);
    }

    int run() {
        require(data, "--data");
        require(out, "--out");
        const auto t0 = Clock::now();
        TrainConfig tc = train.resolve();
        const DatasetSplit split = load_manifest(data);
        const DualEncoder base = train.init.empty() ? make_encoder(encoder.resolve(), tc.seed)
                                                    : adapt_to(load_checkpoint(train.init), encoder.resolve(), tc.seed);
        const DualEncoder model = prepare_model(base, policy, tc.seed);
        const ParameterPartition partition = make_partition(model, policy);
        Outputs o{out, {}};
        if (tc.save_every > 0) tc.checkpoint_dir = fs::path(out) / "checkpoints";

        std::cout << "training " << policy << ": " << scalar_count(model, partition.trainable) << " of "
                  << model.params.scalar_count() << " parameters trainable, " << split.train.size()
                  << " training pairs\n";
        const TrainResult result = neuromatch::train(model, split, tc, partition, [](const EpochRecord& r) {
            std::cout << "epoch " << r.epoch << " loss " << std::setprecision(6) << r.loss << " val_top1 "
                      << r.val_top1 << std::endl;
        });
        save_checkpoint(result.model, o.add("model.ckpt"));
        write_history_csv(result.history, o.add("history.csv"));
        if (tc.save_every > 0)
            for (std::size_t e = tc.save_every; e <= tc.epochs; e += tc.save_every) {
                std::ostringstream name;
                name << "checkpoints/epoch_" << std::setw(4) << std::setfill('0') << e << ".ckpt";
                o.add(name.str());
            }
        std::cout << "selected epoch " << result.selected_epoch << " -> " << (fs::path(out) / "model.ckpt") << '\n';

        ordered_json cfg = {{"policy", policy},
                            {"init", train.init},
                            {"encoder", encoder_json(model.config)},
                            {"train", train_json(tc)},
                            {"selected_epoch", result.selected_epoch}};
        std::vector<fs::path> inputs = {data};
        if (!train.init.empty()) inputs.emplace_back(train.init);
        write_run_manifest({"train", cfg, tc.seed, inputs, o.files, seconds_since(t0)}, out);
        return 0;
    }
};

struct EvaluateCmd {
    std::string model, data, out;
    EvalOptions options;
    bool classical = false;

    void add(CLI::App* app) {
        app->add_option("--model", model, "checkpoint");
        app->add_option("--data", data, "dataset directory or manifest");
        app->add_option("--out", out, "output directory");
        app->add_option("--seed", options.seed, "seed for the random negatives");
        app->add_option("--k-max", options.k_max, "largest k of the Top-k curve");
        app->add_flag("--classical", classical, "also evaluate the five classical image similarities");
    }

    int run() {
        require(model, "--model");
        require(data, "--data");
        require(out, "--out");
        const auto t0 = Clock::now();
        const DualEncoder m = load_checkpoint(model);
        const DatasetSplit split = load_manifest(data);
        Outputs o{out, {}};
        const EvalReport report = evaluate_model(m, split, options);
        print_report(report, std::cout);

        std::vector<Curve> curves;
        if (classical) {
            for (ClassicalKind k : classical_kinds()) {
                const EvalReport r = evaluate_classical(k, split, options);
                print_report(r, std::cout);
                emit_report(r, std::string("classical/") + classical_name(k) + "/", o);
                curves.push_back({classical_name(k), r.topk});
            }
        }
        emit_report(report, "", o, curves);
        ordered_json cfg = {{"k_max", options.k_max}, {"classical", classical}};
        write_run_manifest({"evaluate", cfg, options.seed, {model, data}, o.files, seconds_since(t0)}, out);
        return 0;
    }
};

struct RetrieveCmd {
    std::string model, data, out, split_name = "test";
    std::int64_t query_id = -1;
    std::size_t topk = 5;

    void add(CLI::App* app) {
        app->add_option("--model", model, "checkpoint");
        app->add_option("--data", data, "dataset directory or manifest");
        app->add_option("--query-id", query_id, "pair id of the modality-A query");
        app->add_option("--topk", topk, "number of gallery entries to list");
        app->add_option("--split", split_name, "train | val | test (gallery = modality B of this split)");
        app->add_option("--out", out, "optional output directory for retrieval.json");
    }

    int run() {
        require(model, "--model");
        require(data, "--data");
        if (query_id < 0) throw UsageError("missing required option --query-id");
        const auto t0 = Clock::now();
        const DualEncoder m = load_checkpoint(model);
        const DatasetSplit split = load_manifest(data);
        const auto& pairs = split.part(parse_split_label(split_name));
        const auto it = std::find_if(pairs.begin(), pairs.end(), [&](const auto& p) { return p.pair_id == query_id; });
        if (it == pairs.end())
            throw DataError("pair id " + std::to_string(query_id) + " is not in the " + split_name + " split");
        if (topk == 0 || topk > pairs.size())
            throw ConfigError("--topk must lie in 1.." + std::to_string(pairs.size()));

        const Tensor query = embed(it->image_a, m);
        std::vector<const Tensor*> gallery_images;
        for (const auto& p : pairs) gallery_images.push_back(&p.image_b);
        const Tensor gallery = embed_all(gallery_images, m);
        const Tensor sims = similarity_matrix(query, gallery);
        const auto ranked = rank_rows(sims)[0];

        ordered_json results = ordered_json::array();
        std::cout << "query pair " << query_id << " (modality A) against " << pairs.size() << " modality-B images\n";
        for (std::size_t r = 0; r < topk; ++r) {
            const auto& hit = pairs[ranked[r]];
            const double s = sims.at(0, ranked[r]);
            std::cout << std::setw(3) << r + 1 << "  pair " << std::setw(5) << hit.pair_id << "  similarity "
                      << std::fixed << std::setprecision(6) << s << (hit.pair_id == query_id ? "  <- match" : "")
                      << '\n';
            results.push_back({{"rank", r + 1}, {"pair_id", hit.pair_id}, {"similarity", s}});
        }
        if (!out.empty()) {
            Outputs o{out, {}};
            fs::create_directories(out);
            std::ofstream f(o.add("retrieval.json"));
            f << ordered_json{{"query_id", query_id}, {"split", split_name}, {"results", results}}.dump(2) << '\n';
            f.close();
            write_run_manifest({"retrieve",
                                {{"query_id", query_id}, {"topk", topk}, {"split", split_name}},
                                0,
                                {model, data},
                                o.files,
                                seconds_since(t0)},
                               out);
        }
        return 0;
    }
};

struct GridCmd {
    std::string command;
    std::string data, out;
    bool all_ranks = false;
    std::uint64_t eval_seed = 0;
    EncoderOptions encoder;
    TrainOptions train;

    void add(CLI::App* app) {
        app->add_option("--data", data, "dataset directory or manifest");
        app->add_option("--out", out, "output directory");
        app->add_option("--eval-seed", eval_seed, "seed for the random evaluation negatives");
        if (command == "finetune-compare") app->add_flag("--all-ranks", all_ranks, "run LoRA at r = 4, 8 and 16");
        encoder.add(app);
        train.add(app);
    }

    int run() {
        require(data, "--data");
        require(out, "--out");
        const auto t0 = Clock::now();
        const TrainConfig tc = train.resolve();
        const EncoderConfig ec = encoder.resolve();
        const DatasetSplit split = load_manifest(data);
        std::optional<DualEncoder> init;
        if (!train.init.empty()) init = load_checkpoint(train.init);
        const auto runs = command == "ablate" ? ablation_grid(ec, tc) : finetune_grid(ec, tc, all_ranks);

        Outputs o{out, {}};
        std::ofstream summary;
        fs::create_directories(out);
        summary.open(o.add("summary.csv"));
        summary << "name,policy,channels,loss,sampling,trainable_parameters,selected_epoch,top1,top5,recall,"
                   "specificity,precision,diagonal_dominance\n";
        std::vector<Curve> curves;
        ordered_json run_list = ordered_json::array();
        for (const GridRun& run : runs) {
            const auto r0 = Clock::now();
            const DualEncoder base =
                init ? adapt_to(*init, run.encoder, run.train.seed) : make_encoder(run.encoder, run.train.seed);
            const DualEncoder model = prepare_model(base, run.policy, run.train.seed);
            const ParameterPartition partition = make_partition(model, run.policy);
            TrainResult result{model, {}, 0};
            if (!partition.trainable.empty()) result = neuromatch::train(model, split, run.train, partition);
            const EvalReport report = evaluate_model(result.model, split, {eval_seed, 10});

            const std::string prefix = run.name + "/";
            save_checkpoint(result.model, o.add(prefix + "model.ckpt"));
            write_history_csv(result.history, o.add(prefix + "history.csv"));
            write_report_json(report, o.add(prefix + "report.json"));
            write_topk_csv(report.topk, o.add(prefix + "topk.csv"));
            curves.push_back({run.name, report.topk});

            const std::size_t trainable = scalar_count(model, partition.trainable);
            summary << run.name << ',' << run.policy << ',' << channel_mode_name(run.encoder.channels) << ','
                    << loss_kind_name(run.train.loss) << ',' << sampling_name(run.train.sampling) << ',' << trainable
                    << ',' << result.selected_epoch << ',' << std::setprecision(10) << report.topk[0] << ','
                    << report.topk[std::min<std::size_t>(4, report.topk.size() - 1)] << ','
                    << format_rate(report.rates.recall) << ',' << format_rate(report.rates.specificity) << ','
                    << format_rate(report.rates.precision) << ',' << report.diagonal_dominance << '\n';
            std::cout << std::left << std::setw(18) << run.name << std::right;
            print_report(report, std::cout);
            std::cout << "  (" << trainable << " trainable, " << std::fixed << std::setprecision(1)
                      << seconds_since(r0) << " s)\n";
            run_list.push_back({{"name", run.name},
                                {"policy", run.policy},
                                {"encoder", encoder_json(run.encoder)},
                                {"train", train_json(run.train)}});
        }
        summary.close();
        PlotData plot;
        plot.title = command == "ablate" ? "Ablation: Top-k accuracy" : "Fine-tuning policies: Top-k accuracy";
        plot.curves = curves;
        export_plot(PlotKind::topk_curve, plot, o.add("topk.svg"));

        std::vector<fs::path> inputs = {data};
        if (!train.init.empty()) inputs.emplace_back(train.init);
        write_run_manifest({command, {{"runs", run_list}, {"eval_seed", eval_seed}}, tc.seed, inputs, o.files,
                            seconds_since(t0)},
                           out);
        return 0;
    }
};

struct VisualizeCmd {
    std::string model, data, out, kind, split_name = "test";
    double alpha = 0.5;
    std::size_t limit = 4;
    double perplexity = 0.0;
    std::uint64_t seed = 0;

    void add(CLI::App* app) {
        app->add_option("--model", model, "checkpoint");
        app->add_option("--data", data, "dataset directory or manifest");
        app->add_option("--out", out, "output directory");
        app->add_option("--kind", kind, "gradcam | tsne");
        app->add_option("--split", split_name, "train | val | test");
        app->add_option("--alpha", alpha, "overlay blend weight of the heatmap");
        app->add_option("--limit", limit, "Grad-CAM: number of pairs to render (0: all)");
        app->add_option("--perplexity", perplexity, "t-SNE perplexity (default: 10, capped by the point count)");
        app->add_option("--seed", seed, "t-SNE seed");
    }

    int run() {
        require(model, "--model");
        require(data, "--data");
        require(out, "--out");
        require(kind, "--kind");
        if (kind != "gradcam" && kind != "tsne") throw UsageError("--kind must be gradcam or tsne");
        const auto t0 = Clock::now();
        const DualEncoder m = load_checkpoint(model);
        const DatasetSplit split = load_manifest(data);
        const auto& pairs = split.part(parse_split_label(split_name));
        if (pairs.empty()) throw DataError("the " + split_name + " split is empty");
        Outputs o{out, {}};
        fs::create_directories(out);

        if (kind == "gradcam") {
            std::vector<CamChannel> channels;
            if (m.config.uses_local()) channels.push_back(CamChannel::local);
            if (m.config.uses_global()) channels.push_back(CamChannel::global);
            const std::size_t n = limit == 0 ? pairs.size() : std::min(limit, pairs.size());
            for (std::size_t i = 0; i < n; ++i) {
                for (int side = 0; side < 2; ++side) {
                    const Tensor& image = side == 0 ? pairs[i].image_a : pairs[i].image_b;
                    for (CamChannel c : channels) {
                        const Tensor heat = grad_cam(m, image, c);
                        std::ostringstream stem;
                        stem << "pair_" << std::setw(4) << std::setfill('0') << pairs[i].pair_id << '_'
                             << (side == 0 ? 'a' : 'b') << '_' << cam_channel_name(c);
                        write_pgm(o.add(stem.str() + "_heatmap.pgm"), heat);
                        write_ppm(o.add(stem.str() + "_overlay.ppm"), overlay(heat, image, alpha));
                    }
                }
            }
            std::cout << "wrote Grad-CAM maps for " << n << " pairs to " << out << '\n';
        } else {
            std::vector<const Tensor*> images;
            std::vector<int> modality;
            std::vector<std::int64_t> ids;
            for (const auto& p : pairs) {
                images.push_back(&p.image_a);
                modality.push_back(0);
                ids.push_back(p.pair_id);
                images.push_back(&p.image_b);
                modality.push_back(1);
                ids.push_back(p.pair_id);
            }
            const Tensor features = embed_all(images, m);
            TsneConfig tc;
            tc.seed = seed;
            const double cap = (static_cast<double>(images.size()) - 1.0) / 3.0;
            tc.perplexity = perplexity > 0.0 ? perplexity : std::min(10.0, 0.95 * cap);
            const TsneResult r = tsne(features, tc);
            write_tsne_csv(o.add("tsne.csv"), r.coordinates, modality, ids);
            PlotData plot;
            plot.title = "t-SNE of embeddings (" + split_name + ")";
            plot.points = r.coordinates;
            plot.modality = modality;
            plot.pair_ids = ids;
            export_plot(PlotKind::tsne_pairs, plot, o.add("tsne.svg"));
            std::cout << "t-SNE of " << images.size() << " embeddings (perplexity " << tc.perplexity << ", final KL "
                      << r.kl.back() << ") -> " << out << '\n';
            perplexity = tc.perplexity;
        }
        write_run_manifest({"visualize",
                            {{"kind", kind}, {"split", split_name}, {"alpha", alpha}, {"limit", limit},
                             {"perplexity", perplexity}},
                            seed,
                            {model, data},
                            o.files,
                            seconds_since(t0)},
                           out);
        return 0;
    }
};

int report_error(const char* kind, const std::exception& e, int code) {
    std::cerr << "neuromatch: " << kind << ": " << e.what() << '\n';
    return code;
}

}  // namespace

int dispatch(int argc, char** argv) {
    CLI::App app{"Cross-modal neuron matching: data generation, training, evaluation and figures."};
    app.name("neuromatch");
    app.require_subcommand(1);

    GenerateCmd generate;
    TrainCmd train_cmd;
    EvaluateCmd evaluate;
    RetrieveCmd retrieve;
    GridCmd ablate;
    ablate.command = "ablate";
    GridCmd finetune;
    finetune.command = "finetune-compare";
    VisualizeCmd visualize;
    std::map<CLI::App*, std::function<int()>> handlers;
    std::map<CLI::App*, std::string> config_paths;

    auto sub = [&](const char* name, const char* help, auto& cmd) {
        CLI::App* s = app.add_subcommand(name, help);
        cmd.add(s);
        s->add_option("--config", config_paths[s], "flat key = value file; flags override it");
        handlers[s] = [&cmd] { return cmd.run(); };
    };
    sub("generate-data", "generate a synthetic paired dataset", generate);
    sub("train", "train an encoder", train_cmd);
    sub("evaluate", "evaluate a checkpoint on the test split", evaluate);
    sub("retrieve", "rank the gallery for one query", retrieve);
    sub("ablate", "train and evaluate the ablation grid", ablate);
    sub("finetune-compare", "train and evaluate the fine-tuning policies", finetune);
    sub("visualize", "Grad-CAM maps or a t-SNE plot", visualize);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        for (auto& [s, handler] : handlers) {
            if (!s->parsed()) continue;
            apply_config_file(*s, config_paths[s]);
            return handler();
        }
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "neuromatch: " << e.what() << "\nRun with --help for more information.\n";
        return 1;
    } catch (const ConfigError& e) {
        return report_error("configuration error", e, 1);
    } catch (const DataError& e) {
        return report_error("data error", e, 2);
    } catch (const ShapeError& e) {
        return report_error("shape error", e, 2);
    } catch (const DivergenceError& e) {
        return report_error("training diverged", e, 3);
    } catch (const DomainError& e) {
        return report_error("numeric error", e, 3);
    } catch (const fs::filesystem_error& e) {
        return report_error("file system error", e, 2);
    }
}

}  // namespace neuromatch::cli
