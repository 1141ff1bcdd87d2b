#include "reference_run.hpp"

#include <chrono>
#include <iomanip>
#include <ostream>

namespace neuromatch {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace

ReferenceProtocol::ReferenceProtocol() {
    data.seed = 7;
    train.epochs = 50;
    train.seed = 1;
}

DualEncoder train_backbone(const ReferenceProtocol& protocol, std::ostream& log) {
    SynthesisParams p = protocol.data;
    p.seed = protocol.backbone_data_seed;
    const DatasetSplit corpus = generate_dataset(p, protocol.backbone_pairs, SplitRatios{98, 1, 1});
    TrainConfig t = protocol.train;
    t.epochs = protocol.backbone_epochs;
    t.keep_best = false;
    t.save_every = 0;
    const DualEncoder init = make_encoder(protocol.encoder, t.seed);
    const TrainResult r = train(init, corpus, t, make_partition(init, "proposed"), [&](const EpochRecord& e) {
        log << "  backbone epoch " << e.epoch << " loss " << std::setprecision(5) << e.loss << std::endl;
    });
    return r.model;
}

ReferenceResults run_reference(std::ostream& log, const ReferenceProtocol& protocol) {
    ReferenceResults out;
    const DatasetSplit split = generate_dataset(protocol.data, protocol.pairs, protocol.ratios);
    const EvalOptions eval{protocol.eval_seed, 10};
    for (ClassicalKind k : classical_kinds())
        out.classical.emplace_back(classical_name(k), evaluate_classical(k, split, eval).topk[0]);

    const auto t0 = Clock::now();
    const DualEncoder backbone = train_backbone(protocol, log);
    out.backbone_seconds = since(t0);

    const auto grid = ablation_grid(protocol.encoder, protocol.train);
    for (const GridRun& run : grid) {
        const auto r0 = Clock::now();
        DualEncoder start = make_encoder(run.encoder, run.train.seed);
        for (auto& [name, value] : start.params) value = backbone.params.get(name);
        const DualEncoder model = prepare_model(start, run.policy, run.train.seed);
        const TrainResult result = train(model, split, run.train, make_partition(model, run.policy));
        ReferenceRun rr{run.name, evaluate_model(result.model, split, eval), since(r0)};
        log << "  " << std::left << std::setw(18) << run.name << std::right << " top1 " << rr.report.topk[0]
            << " top5 " << rr.report.topk[4] << " dd " << rr.report.diagonal_dominance << " (selected epoch "
            << result.selected_epoch << ", " << std::fixed << std::setprecision(1) << rr.seconds << " s)"
            << std::defaultfloat << std::setprecision(6) << std::endl;
        out.runs.push_back(std::move(rr));
        if (out.runs.size() == 1) out.proposed_seconds = out.backbone_seconds + out.runs.front().seconds;
        if (!protocol.ablations) break;
    }
    return out;
}

}  // namespace neuromatch
