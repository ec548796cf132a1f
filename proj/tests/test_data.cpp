// SPDX-License-Identifier: Apache-2.0
#include "medgen/data.hpp"
#include "medgen/error.hpp"
#include "medgen/metrics.hpp"
#include "medgen/png_io.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

using namespace medgen;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("medgen_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::set<int> ids_of(const LabelMap& l) { return {l.ids.begin(), l.ids.end()}; }

} // namespace

TEST_CASE("ct window anchors") {
    std::vector<float> raw{-100.0f, 200.0f, 50.0f, -500.0f};
    Slice s = ct_window(raw, 2, 2);
    CHECK(s.pixels[0] == doctest::Approx(0.0));
    CHECK(s.pixels[1] == doctest::Approx(1.0));
    CHECK(s.pixels[2] == doctest::Approx(0.5));
    CHECK(s.pixels[3] == doctest::Approx(0.0));
    CHECK_THROWS_AS(ct_window(raw, 2, 2, 10.0f, 10.0f), InvalidInput);
}

TEST_CASE("property: ct window is monotone") {
    Rng rng(1);
    std::uniform_real_distribution<float> u(-2000.0f, 2000.0f);
    std::vector<float> raw(500);
    for (auto& v : raw) v = u(rng);
    std::sort(raw.begin(), raw.end());
    Slice s = ct_window(raw, 1, 500);
    for (size_t i = 1; i < raw.size(); ++i) CHECK(s.pixels[i] >= s.pixels[i - 1]);
}

TEST_CASE("resize_crop output shape and pairing") {
    Rng rng(4);
    Slice img(64, 64);
    LabelMap lbl(64, 64, 1, 1);
    auto [out, l] = resize_crop(img, 512, 448, rng, lbl);
    CHECK(out.height == 448);
    CHECK(out.width == 448);
    REQUIRE(l.has_value());
    CHECK(l->height == 448);

    // a coordinate ramp: the label encodes each pixel's flat index, the image
    // the same index scaled, so matching offsets give matching values
    const int n = 40;
    Slice ramp(n, n);
    LabelMap coords(n, n, 1, n * n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            ramp.at(r, c) = static_cast<float>(r * n + c);
            coords.at(r, c) = r * n + c;
        }
    for (int trial = 0; trial < 20; ++trial) {
        auto [ci, cl] = resize_crop(ramp, n, 24, rng, coords);
        for (int r = 0; r < 24; ++r)
            for (int c = 0; c < 24; ++c) CHECK(ci.at(r, c) == static_cast<float>(cl->at(r, c)));
    }
    CHECK_THROWS_AS(resize_crop(img, 32, 48, rng), InvalidInput);
}

TEST_CASE("property: nearest label resize and crop introduce no new ids") {
    Rng rng(12);
    std::uniform_int_distribution<int> side(5, 40), id(0, 6);
    for (int trial = 0; trial < 100; ++trial) {
        LabelMap l(side(rng), side(rng), 1, 6);
        for (auto& v : l.ids) v = id(rng);
        const auto before = ids_of(l);
        const int to = side(rng) + 8;
        std::uniform_int_distribution<int> crop(1, to);
        auto [img, out] = resize_crop(Slice(l.height, l.width), to, crop(rng), rng, l);
        for (int v : ids_of(*out)) CHECK(before.count(v) == 1);
    }
}

TEST_CASE("resize_crop is deterministic under seed") {
    Slice img(50, 50);
    for (size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<float>(i % 7) / 7.0f;
    Rng a(3), b(3);
    CHECK(resize_crop(img, 64, 40, a).first == resize_crop(img, 64, 40, b).first);
}

TEST_CASE("segmentation generator: ids and determinism") {
    SynthSpec s;
    s.kind = TaskKind::Segmentation;
    s.classes = 3;
    s.seed = 5;
    Volume v = gen_synthetic(s);
    CHECK(v.size() >= s.min_slices);
    CHECK(v.size() <= s.max_slices);
    REQUIRE(v.labels.size() == v.slices.size());
    std::set<int> all;
    for (auto& l : v.labels) {
        auto i = ids_of(l);
        all.insert(i.begin(), i.end());
        l.validate();
    }
    CHECK(all == std::set<int>{0, 1, 2, 3});
    CHECK(gen_synthetic(s) == v);
    for (auto& sl : v.slices)
        for (float p : sl.pixels) {
            CHECK(p >= 0.0f);
            CHECK(p <= 1.0f);
        }
}

TEST_CASE("denoising generator noise matches the folded-normal mean") {
    SynthSpec s;
    s.kind = TaskKind::Denoising;
    s.noise = 0.1;
    s.min_slices = 16;
    s.max_slices = 16;
    std::vector<Image> in, tgt;
    for (auto& v : gen_synthetic_suite(s, 4)) {
        in.insert(in.end(), v.slices.begin(), v.slices.end());
        tgt.insert(tgt.end(), v.targets.begin(), v.targets.end());
    }
    REQUIRE(in.size() == 64);
    const double expected = 0.1 * std::sqrt(2.0 / std::numbers::pi);
    CHECK(mae(in, tgt) == doctest::Approx(expected).epsilon(0.05));
}

TEST_CASE("synthesis and inpainting generators") {
    SynthSpec s;
    s.kind = TaskKind::Synthesis;
    Volume v = gen_synthetic(s);
    for (size_t i = 0; i < v.slices[0].size(); ++i)
        CHECK(v.targets[0].pixels[i] == synthesis_remap(v.slices[0].pixels[i], 0));
    CHECK(synthesis_remap(0.5f, 1) == doctest::Approx(1.0f - synthesis_remap(0.5f, 0)));

    s.kind = TaskKind::Inpainting;
    Volume w = gen_synthetic(s);
    for (int z = 0; z < w.size(); ++z) {
        int zeros = 0;
        for (size_t i = 0; i < w.slices[z].size(); ++i) {
            if (w.slices[z].pixels[i] == 0.0f) ++zeros;
            else CHECK(w.slices[z].pixels[i] == w.targets[z].pixels[i]);
        }
        CHECK(zeros >= s.hole_min * s.hole_min);
    }
}

TEST_CASE("slices deform smoothly through a volume") {
    SynthSpec s;
    s.kind = TaskKind::Segmentation;
    s.min_slices = 20;
    s.max_slices = 20;
    Volume v = gen_synthetic(s);
    // neighbouring slices agree more than distant ones
    auto diff = [&](int a, int b) {
        int d = 0;
        for (size_t i = 0; i < v.labels[a].size(); ++i) d += v.labels[a].ids[i] != v.labels[b].ids[i];
        return d;
    };
    CHECK(diff(9, 10) < diff(0, 10));
}

TEST_CASE("infeasible synthetic specs are rejected") {
    SynthSpec s;
    s.classes = 12;
    s.size = 32;
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    SynthSpec t;
    t.kind = TaskKind::Denoising;
    t.noise = 0.0;
    CHECK_THROWS_AS(t.validate(), InvalidInput);
    CHECK_THROWS_AS(parse_task_kind("detect"), InvalidInput);
}

TEST_CASE("16-bit PNG round trip") {
    auto dir = scratch("png");
    Image img(5, 7);
    for (size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<float>(i) / 34.0f;
    write_png16(dir / "a.png", img);
    Image back = read_png16(dir / "a.png");
    REQUIRE(back.same_shape(img));
    for (size_t i = 0; i < img.size(); ++i) CHECK(back.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-4));
    LabelMap l(3, 3, 2, 4);
    l.ids = {0, 1, 2, 3, 4, 0, 1, 2, 3};
    write_label_png(dir / "l.png", l);
    CHECK(read_label_png(dir / "l.png", 2, 4) == l);
    CHECK_THROWS_AS(read_png16(dir / "missing.png"), DataError);
    fs::remove_all(dir);
}

TEST_CASE("manifest: materialize, load and count samples") {
    auto dir = scratch("manifest");
    SynthSpec s;
    s.kind = TaskKind::Segmentation;
    s.min_slices = 10;
    s.max_slices = 10;
    auto vols = gen_synthetic_suite(s, 2);
    DatasetManifest header;
    header.name = "toy";
    header.class_count = 3;
    materialize(vols, {}, header, dir);
    DatasetManifest m = load_manifest(dir / "manifest.json");
    CHECK(m.instances.size() == 2);
    CHECK(m.samples().size() == 20);
    Dataset d = load_dataset(m);
    REQUIRE(d.train.size() == 2);
    CHECK(d.train[0].labels == vols[0].labels);
    fs::remove_all(dir);
}

TEST_CASE("manifest: misaligned, missing and malformed inputs") {
    auto dir = scratch("manifest_bad");
    SynthSpec s;
    s.kind = TaskKind::Segmentation;
    s.min_slices = 4;
    s.max_slices = 4;
    DatasetManifest header;
    header.class_count = 3;
    DatasetManifest m = materialize(gen_synthetic_suite(s, 1, "case"), {}, header, dir);

    auto expect_error = [&](const nlohmann::json& j, const std::string& needle) {
        std::ofstream(dir / "bad.json") << j.dump();
        try {
            load_manifest(dir / "bad.json");
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    nlohmann::json j = m.to_json();
    j["instances"][0]["labels"].erase(j["instances"][0]["labels"].size() - 1);
    expect_error(j, "case0");

    j = m.to_json();
    j["instances"][0]["slices"][1] = "nowhere.png";
    expect_error(j, "nowhere.png");

    j = m.to_json();
    j.erase("task_kind");
    expect_error(j, "bad.json");

    j = m.to_json();
    j["instances"][0].erase("labels");
    expect_error(j, "case0");

    // generation manifests may omit labels
    j["task_kind"] = "denoising";
    std::ofstream(dir / "gen.json") << j.dump();
    CHECK(load_manifest(dir / "gen.json").instances.size() == 1);

    CHECK_THROWS_AS(load_manifest(dir / "absent.json"), DataError);
    fs::remove_all(dir);
}
