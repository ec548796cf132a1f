// SPDX-License-Identifier: Apache-2.0
//
// medgen: synthetic suites, training, pretraining, prediction, evaluation
// and plotting. Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical abort.

#include "medgen/config.hpp"
#include "medgen/data.hpp"
#include "medgen/error.hpp"
#include "medgen/infer.hpp"
#include "medgen/log.hpp"
#include "medgen/metrics.hpp"
#include "medgen/plot.hpp"
#include "medgen/png_io.hpp"
#include "medgen/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>

using namespace medgen;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 2;
constexpr int kData = 3;
constexpr int kNumerical = 4;

fs::path output_root() {
    const char* env = std::getenv("MEDGEN_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

void write_json(const fs::path& p, const nlohmann::json& j) {
    write_text(p, j.dump(2) + "\n");
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw DataError("cannot read " + p.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(p.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    std::string task = "seg";
    std::string out;
    std::string name;
    int instances = 8;
    int test_instances = 0;
    SynthSpec spec;
};

int run_synth(SynthArgs& a) {
    a.spec.kind = parse_task_kind(a.task);
    a.spec.validate();
    const std::string name = a.name.empty() ? "synthetic-" + to_string(a.spec.kind) : a.name;
    auto vols = gen_synthetic_suite(a.spec, a.instances + a.test_instances, name + "-");
    std::vector<Volume> train(vols.begin(), vols.begin() + a.instances), test(vols.begin() + a.instances, vols.end());
    DatasetManifest header;
    header.name = name;
    header.modality = "synthetic";
    header.task_kind = a.spec.kind;
    header.dataset_id = a.spec.dataset_id;
    header.class_count = a.spec.kind == TaskKind::Segmentation ? a.spec.classes : 1;
    const fs::path dir = a.out.empty() ? output_root() / "datasets" / name : fs::path(a.out);
    DatasetManifest m = materialize(train, test, header, dir);
    std::cout << (dir / "manifest.json").string() << ": " << m.instances.size() << " instances\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train / pretrain

struct TrainArgs {
    std::string config;
    std::string run_dir;
    std::string resume;
    std::vector<std::string> sets;
    long stop_after = -1;
    bool evaluate = false;
    std::string eval_mode = "ar";
};

struct ResolvedRun {
    TrainConfig cfg;
    KeyValueConfig kv;
    fs::path run_dir;
    fs::path base_dir;
    std::vector<std::string> dataset_entries;
};

ResolvedRun resolve_run(const TrainArgs& a) {
    ResolvedRun r;
    r.kv = KeyValueConfig::load(a.config);
    r.kv.apply_overrides(a.sets);
    r.base_dir = fs::absolute(a.config).parent_path();
    r.kv.require("datasets");
    r.dataset_entries = r.kv.get_list("datasets");
    if (r.dataset_entries.empty()) throw InvalidInput("config key 'datasets' lists no datasets");
    r.cfg = TrainConfig::from_kv(r.kv);
    r.cfg.validate();
    if (!a.run_dir.empty()) r.run_dir = a.run_dir;
    else if (r.kv.has("run_dir")) r.run_dir = r.kv.get("run_dir", "");
    else r.run_dir = output_root() / fs::path(a.config).stem();
    if (!r.cfg.init_checkpoint.empty() && fs::path(r.cfg.init_checkpoint).is_relative() &&
        !fs::exists(r.cfg.init_checkpoint))
        r.cfg.init_checkpoint = (r.base_dir / r.cfg.init_checkpoint).string();
    return r;
}

void snapshot(const ResolvedRun& r, const std::string& command) {
    KeyValueConfig snap = r.cfg.to_kv();
    std::string joined;
    for (auto& e : r.dataset_entries) joined += (joined.empty() ? "" : ",") + e;
    snap.set("datasets", joined);
    snap.set("run_dir", r.run_dir.string());
    snap.set("command", command);
    fs::create_directories(r.run_dir);
    write_text(r.run_dir / "config.txt", snap.dump());
}

std::vector<Dataset> load_datasets(const ResolvedRun& r) {
    std::vector<Dataset> out;
    for (auto& e : r.dataset_entries) out.push_back(resolve_dataset(e, r.base_dir));
    return out;
}

int run_train(const TrainArgs& a) {
    ResolvedRun r = resolve_run(a);
    snapshot(r, "train");
    auto datasets = load_datasets(r);
    FitOptions fo;
    fo.run_dir = r.run_dir;
    if (!a.resume.empty()) fo.resume = a.resume;
    fo.stop_after = a.stop_after;
    FitResult res = fit(r.cfg, datasets, fo);
    std::cout << "trained " << res.final_step << " steps; checkpoint "
              << (res.checkpoint ? res.checkpoint->string() : "-") << "\n";
    if (a.evaluate && res.final_step == r.cfg.total_steps()) {
        ClassRegistry reg = build_registry(datasets, r.cfg.predefined_strategy);
        for (auto& d : datasets) {
            if (d.test.empty()) continue;
            EvalOptions eo;
            eo.predict.mode = parse_infer_mode(a.eval_mode);
            eo.predict.scheme = r.cfg.scheme;
            eo.predict.pool = make_value_pool(r.cfg.color_lo, r.cfg.color_hi, r.cfg.color_step);
            eo.predict.registry = &reg;
            eo.predict.seed = r.cfg.seed;
            eo.prompt_seed = r.cfg.seed;
            eo.output_dir = r.run_dir / "predictions" / d.name;
            MetricReport rep = evaluate_dataset(res.model, d, eo);
            write_json(r.run_dir / "reports" / (d.name + ".json"), rep.to_json());
            write_text(r.run_dir / "reports" / (d.name + ".csv"), MetricReport::csv_header() + "\n" + rep.csv_row() + "\n");
            std::cout << rep.to_json().dump() << "\n";
        }
    }
    return 0;
}

int run_pretrain(const TrainArgs& a) {
    ResolvedRun r = resolve_run(a);
    snapshot(r, "pretrain");
    auto datasets = load_datasets(r);
    std::vector<Image> train, held;
    for (auto& d : datasets) {
        for (auto& v : d.train) train.insert(train.end(), v.slices.begin(), v.slices.end());
        for (auto& v : d.test) held.insert(held.end(), v.slices.begin(), v.slices.end());
    }
    FitOptions fo;
    fo.run_dir = r.run_dir;
    if (!a.resume.empty()) fo.resume = a.resume;
    fo.stop_after = a.stop_after;
    nlohmann::json report;
    if (!held.empty()) {
        Model<float> init = initial_model(r.cfg);
        report["heldout_loss_initial"] = mim_reconstruction_loss(init, held, r.cfg.mask_ratio, r.cfg.seed, r.cfg.beta);
    }
    FitResult res = pretrain_mim(r.cfg, train, fo);
    if (!held.empty())
        report["heldout_loss_final"] = mim_reconstruction_loss(res.model, held, r.cfg.mask_ratio, r.cfg.seed, r.cfg.beta);
    report["steps"] = res.final_step;
    report["checkpoint"] = res.checkpoint ? res.checkpoint->string() : "";
    write_json(r.run_dir / "reports" / "pretrain.json", report);
    std::cout << report.dump() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
    std::string checkpoint;
    std::string manifest;
    std::string out;
    std::string prompt_instance;
    std::string scheme;
    std::string mode = "ar";
    std::string split = "test";
    std::uint64_t seed = 0;
};

int run_predict(const PredictArgs& a) {
    DatasetManifest m = load_manifest(a.manifest);
    if (m.task_kind == TaskKind::Segmentation && a.scheme.empty())
        throw InvalidInput("--scheme is required for segmentation manifests");
    Checkpoint ck = Checkpoint::load(a.checkpoint);
    Model<float> model(ck.config);
    ck.apply_to(model);

    std::vector<Volume> train = m.load_split("train");
    std::vector<Volume> test = m.load_split(a.split);
    if (train.empty()) throw DataError(a.manifest + ": no training instance available as prompt");
    const Volume* prompt = nullptr;
    if (!a.prompt_instance.empty()) {
        for (auto& v : train)
            if (v.instance_id == a.prompt_instance) prompt = &v;
        if (!prompt) throw InvalidInput("prompt instance '" + a.prompt_instance + "' is not a training instance");
    } else {
        Rng rng(a.seed);
        std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
        prompt = &train[pick(rng)];
    }
    log_warn("prompt instance: " + prompt->instance_id);

    PredictOptions po;
    po.mode = parse_infer_mode(a.mode);
    ClassRegistry reg;
    if (m.task_kind == TaskKind::Segmentation) {
        po.scheme = parse_color_scheme(a.scheme);
        if (po.scheme == ColorScheme::Predefined) {
            if (!ck.meta.contains("registry"))
                throw InvalidInput("checkpoint carries no class registry; the predefined scheme is unavailable");
            reg = ClassRegistry::from_json(ck.meta["registry"]);
            po.registry = &reg;
        }
        if (ck.meta.contains("color_pool")) {
            auto p = ck.meta["color_pool"];
            po.pool = make_value_pool(p[0].get<float>(), p[1].get<float>(), p[2].get<float>());
        }
    }
    const fs::path out = a.out.empty() ? output_root() / "predictions" / m.name : fs::path(a.out);
    for (size_t i = 0; i < test.size(); ++i) {
        po.seed = mix_seed(a.seed, i);
        VolumePrediction p = predict_volume(model, m.task_kind, test[i], *prompt, po);
        write_prediction(p, out);
        std::cout << test[i].instance_id << ": " << p.canvases.size() << " slices\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string predictions;
    std::string manifest;
    std::string out;
    std::string split = "test";
};

int run_eval(const EvalArgs& a) {
    DatasetManifest m = load_manifest(a.manifest);
    std::vector<Volume> gt = m.load_split(a.split);
    if (gt.empty()) throw DataError(a.manifest + ": split '" + a.split + "' is empty");
    std::vector<LabelMap> pl, gl;
    std::vector<Image> pi, gi;
    char name[32];
    for (const Volume& v : gt) {
        const fs::path dir = fs::path(a.predictions) / v.instance_id;
        if (!fs::is_directory(dir)) throw DataError("missing predictions for instance " + v.instance_id + " in " + dir.string());
        const auto manifest = read_json(dir / "manifest.json");
        if (manifest.value("slice_count", -1) != v.size())
            throw DataError(dir.string() + ": " + std::to_string(manifest.value("slice_count", -1)) +
                            " predicted slices for " + std::to_string(v.size()) + " ground-truth slices");
        for (int s = 0; s < v.size(); ++s) {
            if (m.task_kind == TaskKind::Segmentation) {
                std::snprintf(name, sizeof name, "label_%03d.png", s);
                pl.push_back(read_label_png(dir / name, m.dataset_id, m.class_count));
            } else {
                std::snprintf(name, sizeof name, "canvas_%03d.png", s);
                pi.push_back(read_png16(dir / name));
            }
        }
        gl.insert(gl.end(), v.labels.begin(), v.labels.end());
        gi.insert(gi.end(), v.targets.begin(), v.targets.end());
    }
    MetricReport rep;
    if (m.task_kind == TaskKind::Segmentation) {
        std::vector<int> ids;
        for (int c = 1; c <= m.class_count; ++c) ids.push_back(c);
        rep = segmentation_report(pl, gl, ids);
    } else {
        rep = generation_report(pi, gi);
    }
    rep.dataset = m.name;
    rep.task_kind = to_string(m.task_kind);
    rep.volumes = static_cast<int>(gt.size());
    const fs::path out = a.out.empty() ? output_root() / "reports" : fs::path(a.out);
    write_json(out / (m.name + ".json"), rep.to_json());
    write_text(out / (m.name + ".csv"), MetricReport::csv_header() + "\n" + rep.csv_row() + "\n");
    std::cout << rep.to_json().dump() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// plot

struct PlotArgs {
    std::vector<std::string> reports;
    std::string kind = "bar";
    std::string metric = "miou";
    std::string labels;
    std::string title;
    std::string out;
};

double metric_of(const MetricReport& r, const std::string& metric) {
    if (metric == "miou") return r.miou;
    if (metric == "mae") return r.mae;
    if (metric == "psnr") return r.psnr;
    if (metric == "ssim") return r.ssim;
    throw InvalidInput("unknown metric '" + metric + "' (expected miou, mae, psnr or ssim)");
}

int run_plot(const PlotArgs& a) {
    if (a.kind != "bar" && a.kind != "line") throw InvalidInput("--kind must be bar or line");
    std::vector<std::string> labels = a.labels.empty() ? std::vector<std::string>{} : split(a.labels, ',');
    if (!labels.empty() && labels.size() != a.reports.size())
        throw InvalidInput("--labels needs one entry per report");
    Series s{a.metric, {}};
    for (size_t i = 0; i < a.reports.size(); ++i) {
        MetricReport r = MetricReport::from_json(read_json(a.reports[i]));
        s.values.push_back(metric_of(r, a.metric));
        if (a.labels.empty()) labels.push_back(r.dataset);
    }
    const std::string title = a.title.empty() ? a.metric : a.title;
    const std::string svg = a.kind == "bar" ? render_bar_svg(title, labels, {s}, a.metric)
                                            : render_line_svg(title, labels, {s}, a.metric);
    const fs::path out = a.out.empty() ? output_root() / "plots" / (a.metric + "_" + a.kind + ".svg") : fs::path(a.out);
    write_text(out, svg);
    std::cout << out.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"medgen: in-context medical image generation toolkit"};
    app.require_subcommand(1);
    int verbosity = 1;
    app.add_flag("-v,--verbose", [&](std::int64_t n) { verbosity = 1 + static_cast<int>(n); }, "More logging (repeatable)");
    app.add_flag("-q,--quiet", [&](std::int64_t) { verbosity = 0; }, "Errors only");

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Materialize a synthetic suite as PNG slices plus manifest");
    synth->add_option("--task", sa.task, "seg | synth | inpaint | denoise")->capture_default_str();
    synth->add_option("--out", sa.out, "Output directory (default $MEDGEN_OUTPUT_ROOT/datasets/<name>)");
    synth->add_option("--name", sa.name, "Dataset name");
    synth->add_option("--instances", sa.instances, "Training instances")->capture_default_str()->check(CLI::PositiveNumber);
    synth->add_option("--test-instances", sa.test_instances, "Held-out instances")->capture_default_str()->check(CLI::NonNegativeNumber);
    synth->add_option("--size", sa.spec.size, "Slice side in pixels")->capture_default_str();
    synth->add_option("--classes", sa.spec.classes, "Foreground classes (seg)")->capture_default_str();
    synth->add_option("--noise", sa.spec.noise, "Noise sigma (denoise)")->capture_default_str();
    synth->add_option("--transform", sa.spec.transform_id, "Remap variant (synth)")->capture_default_str();
    synth->add_option("--holes", sa.spec.holes, "Max holes per slice (inpaint)")->capture_default_str();
    synth->add_option("--min-slices", sa.spec.min_slices, "Minimum slices per instance")->capture_default_str();
    synth->add_option("--max-slices", sa.spec.max_slices, "Maximum slices per instance")->capture_default_str();
    synth->add_option("--dataset-id", sa.spec.dataset_id, "Dataset id (class appearance table)")->capture_default_str();
    synth->add_option("--seed", sa.spec.seed, "Seed")->capture_default_str();

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train on the datasets listed in a config file");
    auto* pretrain = app.add_subcommand("pretrain", "Single-image masked modeling on unlabeled slices");
    for (auto* sc : {train, pretrain}) {
        sc->add_option("--config", ta.config, "Flat key = value config file")->required()->check(CLI::ExistingFile);
        sc->add_option("--run-dir", ta.run_dir, "Run directory (default $MEDGEN_OUTPUT_ROOT/<config stem>)");
        sc->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
        sc->add_option("--set", ta.sets, "Override a config key: --set key=value (repeatable)");
        sc->add_option("--stop-after", ta.stop_after, "Stop (with a checkpoint) after this many steps");
    }
    train->add_flag("--eval", ta.evaluate, "Evaluate every dataset's test split after training");
    train->add_option("--eval-mode", ta.eval_mode, "ar | mim")->capture_default_str();

    PredictArgs pa;
    auto* predict = app.add_subcommand("predict", "Predict the test split of a manifest");
    predict->add_option("--checkpoint", pa.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    predict->add_option("--manifest", pa.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    predict->add_option("--out", pa.out, "Output directory (default $MEDGEN_OUTPUT_ROOT/predictions/<dataset>)");
    predict->add_option("--prompt-instance", pa.prompt_instance, "Training instance used as prompt (default: seeded pick)");
    predict->add_option("--scheme", pa.scheme, "binary | predefined | random (required for segmentation)");
    predict->add_option("--mode", pa.mode, "ar | mim")->capture_default_str();
    predict->add_option("--split", pa.split, "Split to predict")->capture_default_str();
    predict->add_option("--seed", pa.seed, "Seed for prompt choice and palettes")->capture_default_str();

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Score a predictions directory against a manifest");
    eval->add_option("--predictions", ea.predictions, "Predictions directory")->required()->check(CLI::ExistingDirectory);
    eval->add_option("--manifest", ea.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    eval->add_option("--out", ea.out, "Report directory (default $MEDGEN_OUTPUT_ROOT/reports)");
    eval->add_option("--split", ea.split, "Split to score")->capture_default_str();

    PlotArgs pl;
    auto* plot = app.add_subcommand("plot", "Render report JSON files as an SVG chart");
    plot->add_option("--reports", pl.reports, "Report JSON files")->required()->check(CLI::ExistingFile);
    plot->add_option("--kind", pl.kind, "bar | line")->capture_default_str();
    plot->add_option("--metric", pl.metric, "miou | mae | psnr | ssim")->capture_default_str();
    plot->add_option("--labels", pl.labels, "Comma-separated x labels (default: dataset names)");
    plot->add_option("--title", pl.title, "Chart title");
    plot->add_option("--out", pl.out, "Output SVG path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kUsage;
    }
    set_log_level(static_cast<LogLevel>(std::clamp(verbosity, 0, 3)));

    try {
        if (*synth) return run_synth(sa);
        if (*train) return run_train(ta);
        if (*pretrain) return run_pretrain(ta);
        if (*predict) return run_predict(pa);
        if (*eval) return run_eval(ea);
        if (*plot) return run_plot(pl);
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}
