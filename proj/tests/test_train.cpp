// SPDX-License-Identifier: Apache-2.0
#include "medgen/error.hpp"
#include "medgen/train.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace medgen;
namespace fs = std::filesystem;

namespace {

TaskDescriptor seg(size_t i) { return {i, static_cast<int>(i) + 1, TaskKind::Segmentation, ColorScheme::Random, "s"}; }
TaskDescriptor gen(size_t i, TaskKind k) { return {i, 1, k, std::nullopt, "g"}; }

TrainConfig tiny_config() {
    TrainConfig c;
    c.epochs = 2;
    c.warmup_epochs = 1;
    c.steps_per_epoch = 5;
    c.batch_size = 2;
    c.resize_to = 16;
    c.crop = 16;
    c.model.image_size = 16;
    c.model.patch_size = 4;
    c.model.embed_dim = 16;
    c.model.depth = 4;
    c.model.heads = 2;
    c.model.mlp_ratio = 2;
    c.model.tap_layers = {1, 2, 3, 4};
    c.model.decoder_channels = 8;
    return c;
}

Dataset synthetic(const std::string& entry) { return resolve_dataset(entry, "."); }

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("medgen_train_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("task sampling matches the configured weights") {
    std::vector<TaskDescriptor> tasks{seg(0), seg(1), seg(2), gen(3, TaskKind::Synthesis),
                                      gen(4, TaskKind::Denoising), gen(5, TaskKind::Inpainting)};
    Rng rng(1);
    const int n = 100000;
    std::vector<int> counts(tasks.size(), 0);
    for (int i = 0; i < n; ++i) ++counts[sample_task(rng, tasks, 0.5)];
    const double se_each = std::sqrt((1.0 / 6) * (5.0 / 6) / n);
    for (int c : counts) CHECK(std::abs(c / static_cast<double>(n) - 1.0 / 6) < 3 * se_each);
    const double seg_frac = (counts[0] + counts[1] + counts[2]) / static_cast<double>(n);
    CHECK(std::abs(seg_frac - 0.5) < 0.01);

    for (int i = 0; i < 1000; ++i) CHECK(tasks[sample_task(rng, tasks, 1.0)].kind == TaskKind::Segmentation);
}

TEST_CASE("task sampling with one family puts all mass there") {
    std::vector<TaskDescriptor> only_gen{gen(0, TaskKind::Synthesis), gen(1, TaskKind::Denoising)};
    Rng rng(2);
    int first = 0;
    for (int i = 0; i < 2000; ++i) first += sample_task(rng, only_gen, 0.5) == 0;
    CHECK(std::abs(first / 2000.0 - 0.5) < 0.05);
    CHECK_THROWS_AS(sample_task(rng, {}, 0.5), InvalidInput);
}

TEST_CASE("objective routing") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) CHECK(choose_objective(TaskKind::Segmentation, rng, 1.0) == Objective::AR);
    int mim = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) mim += choose_objective(TaskKind::Denoising, rng, 0.9) == Objective::MIM;
    CHECK(std::abs(mim / static_cast<double>(n) - 0.9) < 0.01);
    for (int i = 0; i < 1000; ++i) CHECK(choose_objective(TaskKind::Synthesis, rng, 0.0) == Objective::AR);
}

TEST_CASE("lr schedule anchors") {
    CHECK(lr_at(500, 10000, 500, 1e-3) == doctest::Approx(1e-3));
    CHECK(lr_at(10000, 10000, 500, 1e-3) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(lr_at(500 + 9500 / 2, 10000, 500, 1e-3) == doctest::Approx(5e-4));
    CHECK(lr_at(0, 10000, 500, 1e-3) == 0.0);
    CHECK(lr_at(0, 100, 0, 1e-3) == doctest::Approx(1e-3));
    CHECK_THROWS_AS(lr_at(0, 100, 200, 1e-3), InvalidInput);
}

TEST_CASE("property: lr schedule is continuous, non-negative, peaks at warmup end, then never rises") {
    Rng rng(4);
    std::uniform_int_distribution<long> total(10, 5000);
    for (int trial = 0; trial < 200; ++trial) {
        const long t = total(rng);
        std::uniform_int_distribution<long> w(0, t);
        const long warm = w(rng);
        double prev = lr_at(0, t, warm, 1e-3);
        double best = prev;
        long argbest = 0;
        for (long s = 1; s <= t; ++s) {
            const double v = lr_at(s, t, warm, 1e-3);
            CHECK(v >= 0.0);
            CHECK(std::abs(v - prev) <= 1e-3 * (std::max(1.0 / std::max(warm, 1L), 3.2 / (t - warm + 1))) + 1e-15);
            if (s > warm) CHECK(v <= prev + 1e-18);
            if (v > best) {
                best = v;
                argbest = s;
            }
            prev = v;
        }
        CHECK(argbest == warm);
        CHECK(best == doctest::Approx(1e-3));
    }
}

TEST_CASE("descriptors carry a scheme iff segmentation") {
    CHECK_NOTHROW(seg(0).validate());
    TaskDescriptor bad = gen(0, TaskKind::Denoising);
    bad.scheme = ColorScheme::Binary;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    TaskDescriptor bad2 = seg(0);
    bad2.scheme.reset();
    CHECK_THROWS_AS(bad2.validate(), InvalidInput);
}

TEST_CASE("train config validation and key-value round trip") {
    TrainConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    TrainConfig back = TrainConfig::from_kv(c.to_kv());
    CHECK(back.to_kv().dump() == c.to_kv().dump());
    CHECK(back.model == c.model);

    TrainConfig w = c;
    w.warmup_epochs = 5;
    CHECK_THROWS_AS(w.validate(), InvalidInput);
    TrainConfig s = c;
    s.seg_sampling_weight = 1.0;
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    TrainConfig m = c;
    m.mim_fraction_nonseg = 1.5;
    CHECK_THROWS_AS(m.validate(), InvalidInput);

    KeyValueConfig kv;
    kv.set("model.depth", "8");
    TrainConfig d = TrainConfig::from_kv(kv);
    CHECK(d.model.tap_layers == std::array<int, 4>{2, 4, 6, 8});
    CHECK(d.peak_lr == 1e-3);
    CHECK(d.weight_decay == 0.05);
    CHECK(d.seg_sampling_weight == 0.5);
    CHECK(d.mim_fraction_nonseg == 0.9);
}

TEST_CASE("zero-gradient batch only applies weight decay") {
    TrainConfig cfg = tiny_config();
    Model<float> model(cfg.model, 7);
    Dataset ds = synthetic("synthetic:synth:size=16:train=2:test=0:seed=1");
    ExampleSource src({ds}, cfg);
    Rng rng(0);
    Batch b = src.batch(0, Objective::AR, rng);
    for (auto& lay : b.layouts) {
        Mat<float> pred = model.forward(lay);
        for (int t = 0; t < lay.tokens(); ++t)
            for (int j = 0; j < lay.patch_area(); ++j)
                lay.targets[static_cast<size_t>(t) * lay.patch_area() + j] = pred(t, j);
    }
    Model<float> before = model;
    AdamW opt(model.params());
    const double lr = 1e-3;
    StepResult r = train_step(model, b, opt, lr, cfg, 1);
    CHECK(r.loss == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.grad_norm == doctest::Approx(0.0).epsilon(1e-12));
    for (size_t i = 0; i < model.params().size(); ++i) {
        const auto& p = model.params()[i];
        const auto& q = before.params()[i];
        const float shrink = p.decay ? static_cast<float>(1.0 - lr * cfg.weight_decay) : 1.0f;
        CHECK((p.value - q.value * shrink).cwiseAbs().maxCoeff() <= 1e-7f);
    }
}

TEST_CASE("non-finite loss aborts with diagnostics") {
    TrainConfig cfg = tiny_config();
    Model<float> model(cfg.model, 7);
    model.param("head.conv2.b").value.setConstant(std::nanf(""));
    Dataset ds = synthetic("synthetic:denoise:size=16:train=2:test=0:seed=1");
    ExampleSource src({ds}, cfg);
    Rng rng(0);
    Batch b = src.batch(0, Objective::MIM, rng);
    AdamW opt(model.params());
    try {
        train_step(model, b, opt, 5e-4, cfg, 42);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("step 42") != std::string::npos);
        CHECK(msg.find("lr=") != std::string::npos);
        CHECK(msg.find("batch") != std::string::npos);
    }
}

TEST_CASE("example source pairs prompt and task under one palette") {
    TrainConfig cfg = tiny_config();
    Dataset ds = synthetic("synthetic:seg:size=24:classes=2:train=3:test=0:seed=2");
    ExampleSource src({ds}, cfg);
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
        TrainingExample ex = src.draw(0, rng);
        REQUIRE(ex.palette.has_value());
        CHECK(ex.palette->injective());
        for (auto* img : {&ex.prompt_lbl, &ex.task_lbl})
            for (float v : img->pixels) {
                bool in_palette = v == 0.0f;
                for (auto& [c, val] : ex.palette->mapping) in_palette = in_palette || v == val;
                CHECK(in_palette);
            }
    }
    cfg.scheme = ColorScheme::Binary;
    ExampleSource bin({ds}, cfg);
    TrainingExample ex = bin.draw(0, rng);
    for (float v : ex.task_lbl.pixels) CHECK((v == 0.0f || v == 1.0f));
}

TEST_CASE("loss falls on a deterministic mapping within 200 steps") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 4;
    cfg.steps_per_epoch = 50;
    cfg.mim_fraction_nonseg = 0.0;
    Dataset ds = synthetic("synthetic:synth:size=16:train=4:test=0:seed=3");
    FitResult r = fit(cfg, {ds});
    REQUIRE(r.log.size() == 200);
    double first = 0, last = 0;
    for (int i = 0; i < 50; ++i) {
        first += r.log[i].loss;
        last += r.log[150 + i].loss;
    }
    CHECK(last < first);
}

TEST_CASE("fit is deterministic, routes segmentation to AR and writes checkpoints") {
    TrainConfig cfg = tiny_config();
    std::vector<Dataset> ds{synthetic("synthetic:seg:size=24:classes=2:train=3:test=0:seed=4"),
                            synthetic("synthetic:denoise:size=16:train=3:test=0:seed=4")};
    auto dir = scratch("fit");
    FitOptions fo;
    fo.run_dir = dir;
    FitResult a = fit(cfg, ds, fo);
    FitResult b = fit(cfg, ds);
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].loss == b.log[i].loss);
        CHECK(a.log[i].task == b.log[i].task);
        if (a.log[i].task == "segmentation") CHECK(a.log[i].objective == "ar");
    }
    CHECK(a.checkpoint.has_value());
    CHECK(fs::exists(dir / "checkpoints" / "last.ckpt"));
    std::ifstream log(dir / "metrics.jsonl");
    int lines = 0;
    for (std::string line; std::getline(log, line); ++lines) {
        auto j = nlohmann::json::parse(line);
        for (const char* k : {"step", "loss", "lr", "task", "objective"}) CHECK(j.contains(k));
    }
    CHECK(lines == 10);

    cfg.steps_per_epoch = 20;
    FitResult only_seg = fit(cfg, {ds[0]});
    for (auto& s : only_seg.log) CHECK(s.objective == "ar");
    fs::remove_all(dir);
}

TEST_CASE("resume continues the step counter and lr schedule exactly") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 4;
    cfg.checkpoint_interval = 3;
    std::vector<Dataset> ds{synthetic("synthetic:seg:size=24:classes=2:train=3:test=0:seed=6"),
                            synthetic("synthetic:inpaint:size=32:holes=1:train=3:test=0:seed=6")};
    FitResult full = fit(cfg, ds);

    auto dir = scratch("resume");
    FitOptions first;
    first.run_dir = dir;
    first.stop_after = 7;
    FitResult part = fit(cfg, ds, first);
    CHECK(part.final_step == 7);
    REQUIRE(part.checkpoint.has_value());
    CHECK(fs::exists(dir / "checkpoints" / "step_0000006.ckpt"));
    FitOptions second;
    second.run_dir = dir;
    second.resume = *part.checkpoint;
    FitResult rest = fit(cfg, ds, second);
    REQUIRE(part.log.size() + rest.log.size() == full.log.size());
    CHECK(rest.log.front().step == 8);
    for (size_t i = 0; i < rest.log.size(); ++i) {
        CHECK(rest.log[i].lr == full.log[7 + i].lr);
        CHECK(rest.log[i].loss == full.log[7 + i].loss);
    }
    std::ifstream log(dir / "metrics.jsonl");
    int lines = 0;
    for (std::string line; std::getline(log, line);) ++lines;
    CHECK(lines == static_cast<int>(full.log.size()));
    fs::remove_all(dir);
}

TEST_CASE("pretraining lowers held-out reconstruction loss and seeds fit") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 6;
    cfg.steps_per_epoch = 25;
    cfg.batch_size = 4;
    Dataset ds = synthetic("synthetic:seg:size=24:classes=2:train=4:test=2:seed=8");
    std::vector<Image> train, held;
    for (auto& v : ds.train) train.insert(train.end(), v.slices.begin(), v.slices.end());
    for (auto& v : ds.test) held.insert(held.end(), v.slices.begin(), v.slices.end());
    Model<float> init = initial_model(cfg);
    const double before = mim_reconstruction_loss(init, held, 0.75, 1);
    auto dir = scratch("pretrain");
    FitOptions fo;
    fo.run_dir = dir;
    FitResult r = pretrain_mim(cfg, train, fo);
    const double after = mim_reconstruction_loss(r.model, held, 0.75, 1);
    CHECK(after < before);

    REQUIRE(r.checkpoint.has_value());
    TrainConfig ft = tiny_config();
    ft.init_checkpoint = r.checkpoint->string();
    FitResult tuned = fit(ft, {ds});
    CHECK(tuned.log.size() == 10);
    CHECK_THROWS_AS(pretrain_mim(cfg, {}), InvalidInput);
    fs::remove_all(dir);
}

TEST_CASE("dataset entries") {
    Dataset d = synthetic("synthetic:denoise:size=16:train=3:test=2:seed=1:name=noisy");
    CHECK(d.name == "noisy");
    CHECK(d.kind == TaskKind::Denoising);
    CHECK(d.train.size() == 3);
    CHECK(d.test.size() == 2);
    CHECK_THROWS_AS(synthetic("synthetic:seg:colour=3"), InvalidInput);
    CHECK_THROWS_AS(synthetic("synthetic:seg:classes=x"), InvalidInput);
    CHECK_THROWS_AS(synthetic("synthetic:"), InvalidInput);
    CHECK_THROWS_AS(synthetic("/nonexistent/manifest.json"), DataError);
}
