#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "evfuse/evalkit.hpp"
#include "evfuse/scene_sim.hpp"
#include "evfuse/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace evfuse;

namespace {

// ---------------------------------------------------------------------------
// Config tree. Every field has a default; unknown keys are rejected with the
// full path so typos never pass silently.
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string out = ".";
    uint64_t seed = 0;

    // scene: only the bundled preset for now; custom scenes go through the
    // library API
    uint64_t scene_seed = 0;

    struct {
        double duration_sec = 4.0;
        int f_event_hz = 25;
        int rgb_divisor = 1;
    } simulate;

    struct {
        int bins = 10;
    } voxel;

    DetectorConfig detector;
    bool detector_given = false; // only then is a checkpoint mismatch an error

    struct {
        std::string dataset;
        int iterations = 10000;
        int batch_size = 4;
        double max_lr = 1.5e-4;
        int unroll_len = 8;
        int tbptt_detach = 4;
        std::string fusion_mode = "ef";
        bool use_rgb = true;
        bool use_align = true;
        bool augment = true;
        bool time_shift_enabled = true;
        int dt_min = 0;
        int dt_max = 10;
    } train;

    struct {
        std::string dataset;
        std::string checkpoint;
        std::string protocol = "paired";
        std::string stub = "none"; // none | gt_echo | empty
        double score_threshold = 0.01;
        double nms_iou = 0.65;
        std::vector<int> rgb_divisors = {1, 2, 4, 6, 8, 10};
        std::vector<int> event_multipliers = {1, 2, 4, 6, 8};
        int rgb_base_divisor = 5;
        std::string fusion_mode = "ef";
        bool use_rgb = true;
        bool use_align = true;
    } eval;
};

void reject_unknown(const json& j, const std::string& where,
                    const std::vector<std::string>& allowed) {
    if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
    for (const auto& [key, _] : j.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw std::invalid_argument("config: unknown key " + where + "." + key);
}

FusionMode parse_fusion(const std::string& s, const std::string& where) {
    if (s == "ef") return FusionMode::ef;
    if (s == "cat") return FusionMode::cat;
    throw std::invalid_argument("config: " + where + " must be \"ef\" or \"cat\"");
}

RunConfig load_config(const std::string& path) {
    RunConfig c;
    if (path.empty()) return c;
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    const json j = json::parse(f);
    reject_unknown(j, "<root>", {"out", "seed", "scene", "simulate", "voxel", "detector", "train", "eval"});

    c.out = j.value("out", c.out);
    c.seed = j.value("seed", c.seed);
    if (j.contains("scene")) {
        const json& s = j["scene"];
        reject_unknown(s, "scene", {"preset", "seed"});
        if (s.value("preset", "default") != std::string("default"))
            throw std::invalid_argument("config: scene.preset only supports \"default\"");
        c.scene_seed = s.value("seed", c.scene_seed);
    }
    if (j.contains("simulate")) {
        const json& s = j["simulate"];
        reject_unknown(s, "simulate", {"duration_sec", "f_event_hz", "rgb_divisor"});
        c.simulate.duration_sec = s.value("duration_sec", c.simulate.duration_sec);
        c.simulate.f_event_hz = s.value("f_event_hz", c.simulate.f_event_hz);
        c.simulate.rgb_divisor = s.value("rgb_divisor", c.simulate.rgb_divisor);
    }
    if (j.contains("voxel")) {
        reject_unknown(j["voxel"], "voxel", {"bins"});
        c.voxel.bins = j["voxel"].value("bins", c.voxel.bins);
    }
    if (j.contains("detector")) {
        const json& d = j["detector"];
        reject_unknown(d, "detector",
                       {"widths", "num_classes", "csp_depth", "fpn_width", "head_width", "attn_reduction"});
        c.detector_given = true;
        if (d.contains("widths")) c.detector.widths = d["widths"].get<std::vector<int>>();
        c.detector.num_classes = d.value("num_classes", c.detector.num_classes);
        c.detector.csp_depth = d.value("csp_depth", c.detector.csp_depth);
        c.detector.fpn_width = d.value("fpn_width", c.detector.fpn_width);
        c.detector.head_width = d.value("head_width", c.detector.head_width);
        c.detector.attn_reduction = d.value("attn_reduction", c.detector.attn_reduction);
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        reject_unknown(t, "train",
                       {"dataset", "iterations", "batch_size", "max_lr", "unroll_len", "tbptt_detach",
                        "fusion_mode", "use_rgb", "use_align", "augment", "time_shift"});
        c.train.dataset = t.value("dataset", c.train.dataset);
        c.train.iterations = t.value("iterations", c.train.iterations);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.max_lr = t.value("max_lr", c.train.max_lr);
        c.train.unroll_len = t.value("unroll_len", c.train.unroll_len);
        c.train.tbptt_detach = t.value("tbptt_detach", c.train.tbptt_detach);
        c.train.fusion_mode = t.value("fusion_mode", c.train.fusion_mode);
        c.train.use_rgb = t.value("use_rgb", c.train.use_rgb);
        c.train.use_align = t.value("use_align", c.train.use_align);
        c.train.augment = t.value("augment", c.train.augment);
        if (t.contains("time_shift")) {
            const json& ts = t["time_shift"];
            reject_unknown(ts, "train.time_shift", {"enabled", "dt_min", "dt_max"});
            c.train.time_shift_enabled = ts.value("enabled", c.train.time_shift_enabled);
            c.train.dt_min = ts.value("dt_min", c.train.dt_min);
            c.train.dt_max = ts.value("dt_max", c.train.dt_max);
        }
    }
    if (j.contains("eval")) {
        const json& e = j["eval"];
        reject_unknown(e, "eval",
                       {"dataset", "checkpoint", "protocol", "stub", "score_threshold", "nms_iou",
                        "rgb_divisors", "event_multipliers", "rgb_base_divisor", "fusion_mode",
                        "use_rgb", "use_align"});
        c.eval.dataset = e.value("dataset", c.eval.dataset);
        c.eval.checkpoint = e.value("checkpoint", c.eval.checkpoint);
        c.eval.protocol = e.value("protocol", c.eval.protocol);
        c.eval.stub = e.value("stub", c.eval.stub);
        c.eval.score_threshold = e.value("score_threshold", c.eval.score_threshold);
        c.eval.nms_iou = e.value("nms_iou", c.eval.nms_iou);
        if (e.contains("rgb_divisors")) c.eval.rgb_divisors = e["rgb_divisors"].get<std::vector<int>>();
        if (e.contains("event_multipliers"))
            c.eval.event_multipliers = e["event_multipliers"].get<std::vector<int>>();
        c.eval.rgb_base_divisor = e.value("rgb_base_divisor", c.eval.rgb_base_divisor);
        c.eval.fusion_mode = e.value("fusion_mode", c.eval.fusion_mode);
        c.eval.use_rgb = e.value("use_rgb", c.eval.use_rgb);
        c.eval.use_align = e.value("use_align", c.eval.use_align);
    }
    return c;
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw std::runtime_error(what + " was not produced: " + p.string());
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

int cmd_simulate(const RunConfig& cfg) {
    const SceneConfig scene = default_scene(cfg.scene_seed);
    const SequenceDataset ds =
        make_dataset(scene, cfg.simulate.duration_sec, cfg.simulate.f_event_hz, cfg.simulate.rgb_divisor);
    fs::create_directories(cfg.out);
    save_dataset(cfg.out, ds);

    for (const char* name : {"meta.json", "events.evs", "gt.jsonl"})
        require_file(fs::path(cfg.out) / name, name);
    require_file(fs::path(cfg.out) / "frames", "frames directory");

    std::cout << "dataset written to " << cfg.out << "\n"
              << "  ticks:  " << ds.num_ticks << "\n"
              << "  events: " << ds.events.size() << "\n"
              << "  frames: " << ds.frames.size() << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    if (cfg.train.dataset.empty())
        throw std::invalid_argument("train: no dataset directory (config train.dataset or --dataset)");
    const SequenceDataset ds = load_dataset(cfg.train.dataset);

    DetectorConfig dc = cfg.detector;
    dc.voxel_bins = cfg.voxel.bins;
    dc.validate();

    TrainConfig tc;
    tc.iterations = cfg.train.iterations;
    tc.batch_size = cfg.train.batch_size;
    tc.max_lr = cfg.train.max_lr;
    tc.unroll_len = cfg.train.unroll_len;
    tc.tbptt_detach = cfg.train.tbptt_detach;
    tc.seed = cfg.seed;
    tc.fusion_mode = parse_fusion(cfg.train.fusion_mode, "train.fusion_mode");
    tc.use_rgb = cfg.train.use_rgb;
    tc.use_align = cfg.train.use_align;
    tc.augment = cfg.train.augment;
    tc.time_shift.enabled = cfg.train.time_shift_enabled;
    tc.time_shift.dt_min = cfg.train.dt_min;
    tc.time_shift.dt_max = cfg.train.dt_max;
    tc.validate();

    Rng rng(cfg.seed);
    DetectorParams init = DetectorParams::init(rng, dc);
    std::cout << "training " << init.param_count() << " parameters for " << tc.iterations
              << " iterations\n";
    TrainResult result = train(ds, tc, init);

    fs::create_directories(cfg.out);
    const fs::path ckpt = fs::path(cfg.out) / "checkpoint.bin";
    save_checkpoint(ckpt.string(), result.params);
    write_train_log((fs::path(cfg.out) / "train_log.csv").string(), result.log);
    write_config_echo((fs::path(cfg.out) / "train_config.json").string(), tc);

    require_file(ckpt, "checkpoint");
    require_file(fs::path(cfg.out) / "train_log.csv", "training log");
    require_file(fs::path(cfg.out) / "train_config.json", "config echo");

    if (!result.log.empty())
        std::cout << "final loss " << result.log.back().loss_total << " after "
                  << result.log.back().iteration + 1 << " iterations\n";
    std::cout << "run written to " << cfg.out << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    if (cfg.eval.dataset.empty())
        throw std::invalid_argument("eval: no dataset directory (config eval.dataset or --dataset)");
    const SequenceDataset ds = load_dataset(cfg.eval.dataset);

    EvalProtocol proto;
    proto.score_threshold = cfg.eval.score_threshold;
    proto.nms_iou = cfg.eval.nms_iou;
    proto.rgb_divisors = cfg.eval.rgb_divisors;
    proto.event_multipliers = cfg.eval.event_multipliers;
    proto.rgb_base_divisor = cfg.eval.rgb_base_divisor;

    // the model: a trained checkpoint, or one of the harness stubs
    std::unique_ptr<EvalModel> model;
    if (cfg.eval.stub == "gt_echo") {
        model = std::make_unique<GtEchoModel>();
    } else if (cfg.eval.stub == "empty") {
        model = std::make_unique<EmptyModel>();
    } else if (cfg.eval.stub == "none") {
        if (cfg.eval.checkpoint.empty())
            throw std::invalid_argument("eval: no checkpoint (config eval.checkpoint or --checkpoint)");
        DetectorParams params = load_checkpoint(cfg.eval.checkpoint);
        if (cfg.detector_given) {
            const DetectorConfig& a = params.config;
            const DetectorConfig& b = cfg.detector;
            if (a.widths != b.widths || a.num_classes != b.num_classes ||
                a.csp_depth != b.csp_depth || a.fpn_width != b.fpn_width ||
                a.head_width != b.head_width) {
                auto shape = [](const DetectorConfig& d) {
                    std::string s = "widths [";
                    for (size_t i = 0; i < d.widths.size(); ++i)
                        s += (i ? "," : "") + std::to_string(d.widths[i]);
                    s += "] classes " + std::to_string(d.num_classes) + " csp " +
                         std::to_string(d.csp_depth) + " fpn " + std::to_string(d.fpn_width) +
                         " head " + std::to_string(d.head_width);
                    return s;
                };
                throw std::invalid_argument("eval: checkpoint/config mismatch\n  checkpoint: " +
                                            shape(a) + "\n  config:     " + shape(b));
            }
        }
        DetectorConfig dc = params.config;
        model = std::make_unique<DetectorEvalModel>(
            std::move(params), dc, ds.scene.height, ds.scene.width, proto.score_threshold,
            proto.nms_iou, parse_fusion(cfg.eval.fusion_mode, "eval.fusion_mode"),
            cfg.eval.use_align, cfg.eval.use_rgb);
    } else {
        throw std::invalid_argument("eval: stub must be none, gt_echo or empty");
    }

    MetricsReport rep;
    if (cfg.eval.protocol == "paired") {
        proto.kind = ProtocolKind::paired;
        rep = run_paired_eval(*model, ds, proto);
    } else {
        const double duration = static_cast<double>(ds.num_ticks) / ds.f_event;
        const DatasetFactory factory = make_scene_factory(ds.scene, duration, ds.f_event);
        if (cfg.eval.protocol == "rgb_mismatch") {
            proto.kind = ProtocolKind::rgb_mismatch;
            rep = run_rgb_mismatch_sweep(*model, factory, proto);
        } else if (cfg.eval.protocol == "train_infer") {
            proto.kind = ProtocolKind::train_infer;
            rep = run_train_infer_sweep(*model, factory, proto);
        } else {
            throw std::invalid_argument("eval: protocol must be paired, rgb_mismatch or train_infer");
        }
    }

    fs::create_directories(cfg.out);
    const fs::path report = fs::path(cfg.out) / "report.json";
    const fs::path sweep = fs::path(cfg.out) / "sweep.csv";
    write_report_json(rep, report.string());
    write_sweep_csv(rep, sweep.string());
    require_file(report, "report.json");
    require_file(sweep, "sweep.csv");

    std::cout.precision(4);
    for (const ProtocolPoint& p : rep.points)
        std::cout << p.protocol << " @ " << p.point << ": mAP " << 100.0 * p.ap.map << " AP50 "
                  << 100.0 * p.ap.ap50 << " AP75 " << 100.0 * p.ap.ap75 << "\n";
    std::cout << "mdrop " << 100.0 * rep.mdrop << "\nreports written to " << cfg.out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic event+RGB fusion detection workbench"};
    app.require_subcommand(1);

    std::string config_path, out_override, dataset_override, checkpoint_override;
    int64_t seed_override = -1;

    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--out", out_override, "output directory (default: config 'out' or '.')");
    app.add_option("--seed", seed_override, "seed override (default: config 'seed' or 0)");

    CLI::App* sim = app.add_subcommand("simulate", "materialize a synthetic dataset directory");

    CLI::App* tr = app.add_subcommand("train", "train a detector on a dataset directory");
    int iters_override = -1;
    std::string time_shift_override;
    tr->add_option("--dataset", dataset_override, "dataset directory");
    tr->add_option("--iters", iters_override, "iteration count override");
    tr->add_option("--time-shift", time_shift_override, "on|off")
        ->check(CLI::IsMember({"on", "off"}));

    CLI::App* ev = app.add_subcommand("eval", "run an evaluation protocol, write report + sweep");
    std::string protocol_override, stub_override;
    ev->add_option("--dataset", dataset_override, "dataset directory");
    ev->add_option("--checkpoint", checkpoint_override, "trained checkpoint path");
    ev->add_option("--protocol", protocol_override, "paired|rgb_mismatch|train_infer")
        ->check(CLI::IsMember({"paired", "rgb_mismatch", "train_infer"}));
    ev->add_option("--stub", stub_override, "none|gt_echo|empty (harness self-test models)")
        ->check(CLI::IsMember({"none", "gt_echo", "empty"}));

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_config(config_path);
        if (!out_override.empty()) cfg.out = out_override;
        if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
        if (!dataset_override.empty()) {
            cfg.train.dataset = dataset_override;
            cfg.eval.dataset = dataset_override;
        }
        if (iters_override >= 0) cfg.train.iterations = iters_override;
        if (!time_shift_override.empty()) cfg.train.time_shift_enabled = time_shift_override == "on";
        if (!checkpoint_override.empty()) cfg.eval.checkpoint = checkpoint_override;
        if (!protocol_override.empty()) cfg.eval.protocol = protocol_override;
        if (!stub_override.empty()) cfg.eval.stub = stub_override;

        if (sim->parsed()) return cmd_simulate(cfg);
        if (tr->parsed()) return cmd_train(cfg);
        if (ev->parsed()) return cmd_eval(cfg);
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
