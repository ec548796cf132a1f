// SPDX-License-Identifier: Apache-2.0
#include "medgen/error.hpp"
#include "medgen/metrics.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace medgen;

namespace {

LabelMap labels(int h, int w, std::vector<int> ids, int classes = 3) {
    LabelMap l(h, w, 1, classes);
    for (size_t i = 0; i < ids.size(); ++i) l.ids[i] = ids[i];
    return l;
}

Image noise_image(int side, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> u(lo, hi);
    Image img(side, side);
    for (auto& v : img.pixels) v = u(rng);
    return img;
}

// Direct 2-D windowed SSIM, no separability, as an independent reference.
double ssim_reference(const Image& a, const Image& b) {
    const int win = 11;
    const double sigma = 1.5;
    double w[11][11];
    double norm = 0.0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
            norm += w[i][j];
        }
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0.0;
    int count = 0;
    for (int r = 0; r + win <= a.height; ++r)
        for (int c = 0; c + win <= a.width; ++c) {
            double mx = 0, my = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    mx += w[i][j] / norm * a.at(r + i, c + j);
                    my += w[i][j] / norm * b.at(r + i, c + j);
                }
            double vx = 0, vy = 0, cov = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    const double dx = a.at(r + i, c + j) - mx, dy = b.at(r + i, c + j) - my;
                    vx += w[i][j] / norm * dx * dx;
                    vy += w[i][j] / norm * dy * dy;
                    cov += w[i][j] / norm * dx * dy;
                }
            total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    return total / count;
}

} // namespace

TEST_CASE("miou: identity, overlap and disjoint cases") {
    auto gt = labels(4, 4, {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 1);
    auto r = miou({gt}, {gt}, {1});
    CHECK(r.mean == doctest::Approx(1.0));

    // gt region 4 px, pred region 4 px, overlap 2 -> 2/6
    auto pred = labels(4, 4, {0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 1);
    CHECK(miou({pred}, {gt}, {1}).per_class.at(1) == doctest::Approx(2.0 / 6.0));

    auto far = labels(4, 4, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1}, 1);
    CHECK(miou({far}, {gt}, {1}).per_class.at(1) == doctest::Approx(0.0));
}

TEST_CASE("miou excludes classes absent from both sides") {
    auto gt = labels(1, 4, {1, 1, 0, 0});
    auto r = miou({gt}, {gt}, {1, 2, 3});
    CHECK(r.per_class.size() == 1);
    CHECK(r.mean == doctest::Approx(1.0));
}

TEST_CASE("miou accumulates over the whole list") {
    // slice A: IoU 1/2, slice B: IoU 1/1; dataset-level = 2/3, not the slice mean 3/4
    auto pa = labels(1, 2, {1, 1}, 1), ga = labels(1, 2, {1, 0}, 1);
    auto pb = labels(1, 2, {1, 0}, 1), gb = labels(1, 2, {1, 0}, 1);
    CHECK(miou({pa, pb}, {ga, gb}, {1}).mean == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("miou rejects shape and count mismatches") {
    CHECK_THROWS_AS(miou({labels(1, 2, {0, 0})}, {labels(2, 1, {0, 0})}, {1}), InvalidInput);
    CHECK_THROWS_AS(miou({labels(1, 2, {0, 0})}, {}, {1}), InvalidInput);
}

TEST_CASE("property: miou equals a per-pixel set-count oracle on 1000 random 8x8 cases") {
    Rng rng(2024);
    std::uniform_int_distribution<int> id(0, 4), nslices(1, 3);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = nslices(rng);
        std::vector<LabelMap> p, g;
        for (int s = 0; s < n; ++s) {
            LabelMap a(8, 8, 1, 4), b(8, 8, 1, 4);
            for (auto& v : a.ids) v = id(rng);
            for (auto& v : b.ids) v = id(rng);
            p.push_back(a);
            g.push_back(b);
        }
        auto r = miou(p, g, {1, 2, 3, 4});
        double sum = 0.0;
        int used = 0;
        for (int c = 1; c <= 4; ++c) {
            std::set<std::pair<int, int>> inter, uni;
            for (int s = 0; s < n; ++s)
                for (int i = 0; i < 64; ++i) {
                    const bool x = p[s].ids[i] == c, y = g[s].ids[i] == c;
                    if (x && y) inter.insert({s, i});
                    if (x || y) uni.insert({s, i});
                }
            if (uni.empty()) {
                CHECK(r.per_class.count(c) == 0);
                continue;
            }
            const double iou = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
            CHECK(r.per_class.at(c) == doctest::Approx(iou).epsilon(1e-12));
            sum += iou;
            ++used;
        }
        CHECK(r.mean == doctest::Approx(used ? sum / used : 0.0).epsilon(1e-12));
    }
}

TEST_CASE("mae closed forms") {
    Image a(4, 4, 0.3f), b(4, 4, 0.4f);
    CHECK(mae({a}, {a}) == doctest::Approx(0.0));
    CHECK(mae({a}, {b}) == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(mae({Image(3, 3, 0.0f)}, {Image(3, 3, 1.0f)}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(mae({a}, {Image(2, 2)}), InvalidInput);
}

TEST_CASE("psnr closed forms and the infinite flag") {
    Image a(8, 8, 0.5f);
    CHECK(psnr(a, Image(8, 8, 0.6f)).db == doctest::Approx(20.0).epsilon(1e-4));
    CHECK(psnr(a, Image(8, 8, 0.51f)).db == doctest::Approx(40.0).epsilon(1e-3));
    auto same = psnr(a, a);
    CHECK(same.infinite);
}

TEST_CASE("property: psnr strictly decreases as the error grows") {
    Rng rng(3);
    std::uniform_real_distribution<float> step(0.001f, 0.05f);
    for (int trial = 0; trial < 200; ++trial) {
        Image gt = noise_image(8, rng, 0.2f, 0.8f);
        float d = step(rng);
        double last = 1e9;
        for (int k = 0; k < 5; ++k) {
            Image pred = gt;
            for (auto& v : pred.pixels) v += d;
            const double db = psnr(pred, gt).db;
            CHECK(db < last);
            last = db;
            d += step(rng);
        }
    }
}

TEST_CASE("ssim: identity, symmetry, inversion and small images") {
    Rng rng(17);
    Image x = noise_image(32, rng);
    CHECK(ssim(x, x) == doctest::Approx(1.0));
    Image y = noise_image(32, rng);
    CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-12));
    Image inv = x;
    for (auto& v : inv.pixels) v = 1.0f - v;
    CHECK(ssim(x, inv) < 0.05);
    CHECK_THROWS_AS(ssim(Image(10, 10), Image(10, 10)), InvalidInput);
}

TEST_CASE("property: ssim matches a direct windowed reference") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Image a = noise_image(16, rng), b = noise_image(16, rng);
        const double s = ssim(a, b);
        CHECK(s == doctest::Approx(ssim_reference(a, b)).epsilon(1e-9));
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
    }
}

TEST_CASE("property: mae, ssim and psnr rank a noise ladder identically") {
    Rng rng(8);
    Image clean(32, 32);
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) clean.at(r, c) = 0.5f + 0.3f * std::sin(0.3f * r) * std::cos(0.2f * c);
    std::vector<double> maes, ssims, psnrs;
    for (double sigma : {0.01, 0.05, 0.1}) {
        std::normal_distribution<float> n(0.0f, static_cast<float>(sigma));
        Image noisy = clean;
        for (auto& v : noisy.pixels) v = std::clamp(v + n(rng), 0.0f, 1.0f);
        maes.push_back(mae({noisy}, {clean}));
        ssims.push_back(1.0 - ssim(noisy, clean));
        psnrs.push_back(-psnr(noisy, clean).db);
    }
    for (auto* v : {&maes, &ssims, &psnrs}) CHECK(std::is_sorted(v->begin(), v->end()));
}

TEST_CASE("property: metrics are invariant to consistent slice reordering") {
    Rng rng(21);
    std::uniform_int_distribution<int> id(0, 3);
    std::vector<LabelMap> p, g;
    std::vector<Image> pi, gi;
    for (int s = 0; s < 6; ++s) {
        LabelMap a(12, 12, 1, 3), b(12, 12, 1, 3);
        for (auto& v : a.ids) v = id(rng);
        for (auto& v : b.ids) v = id(rng);
        p.push_back(a);
        g.push_back(b);
        pi.push_back(noise_image(12, rng));
        gi.push_back(noise_image(12, rng));
    }
    auto seg = segmentation_report(p, g, {1, 2, 3});
    auto gen = generation_report(pi, gi);
    std::vector<int> order{3, 0, 5, 1, 4, 2};
    std::vector<LabelMap> p2, g2;
    std::vector<Image> pi2, gi2;
    for (int i : order) {
        p2.push_back(p[i]);
        g2.push_back(g[i]);
        pi2.push_back(pi[i]);
        gi2.push_back(gi[i]);
    }
    CHECK(segmentation_report(p2, g2, {1, 2, 3}).miou == doctest::Approx(seg.miou).epsilon(1e-12));
    auto gen2 = generation_report(pi2, gi2);
    CHECK(gen2.mae == doctest::Approx(gen.mae).epsilon(1e-12));
    CHECK(gen2.psnr == doctest::Approx(gen.psnr).epsilon(1e-12));
    CHECK(gen2.ssim == doctest::Approx(gen.ssim).epsilon(1e-12));
}

TEST_CASE("report JSON and CSV") {
    auto gt = labels(2, 2, {0, 1, 2, 2});
    auto rep = segmentation_report({gt}, {gt}, {1, 2, 3});
    rep.dataset = "toy";
    auto j = rep.to_json();
    for (const char* key : {"dataset", "task_kind", "per_class_iou", "miou", "mae", "psnr", "psnr_infinite", "ssim",
                            "counts"})
        CHECK(j.contains(key));
    auto back = MetricReport::from_json(j);
    CHECK(back.miou == doctest::Approx(1.0));
    CHECK(back.per_class_iou.size() == 2);
    CHECK(rep.csv_row().rfind("toy,", 0) == 0);
    const std::string header = MetricReport::csv_header(), row = rep.csv_row();
    CHECK(std::count(header.begin(), header.end(), ',') == std::count(row.begin(), row.end(), ','));

    Image a(12, 12, 0.5f);
    auto g = generation_report({a, a}, {a, a});
    CHECK(g.psnr_infinite == 2);
    CHECK(g.mae == doctest::Approx(0.0));
}
