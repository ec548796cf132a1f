// SPDX-License-Identifier: Apache-2.0
#include "medgen/metrics.hpp"

#include "medgen/error.hpp"

#include <cmath>
#include <sstream>

namespace medgen {

namespace {

template <class A>
void check_aligned(const std::vector<A>& pred, const std::vector<A>& gt, const char* what) {
    if (pred.size() != gt.size())
        throw InvalidInput(std::string(what) + ": " + std::to_string(pred.size()) + " predictions vs " +
                           std::to_string(gt.size()) + " references");
    for (size_t i = 0; i < pred.size(); ++i)
        if (!pred[i].same_shape(gt[i])) throw InvalidInput(std::string(what) + ": shape mismatch at item " +
                                                           std::to_string(i));
}

std::vector<double> gaussian_kernel(int window, double sigma) {
    std::vector<double> k(window);
    double sum = 0.0;
    const double half = (window - 1) / 2.0;
    for (int i = 0; i < window; ++i) {
        const double x = i - half;
        k[i] = std::exp(-x * x / (2 * sigma * sigma));
        sum += k[i];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// separable valid-mode filtering
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    const int ow = w - n + 1;
    const int oh = h - n + 1;
    std::vector<double> tmp(static_cast<size_t>(h) * ow, 0.0);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += k[i] * img[static_cast<size_t>(r) * w + c + i];
            tmp[static_cast<size_t>(r) * ow + c] = s;
        }
    std::vector<double> out(static_cast<size_t>(oh) * ow, 0.0);
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += k[i] * tmp[static_cast<size_t>(r + i) * ow + c];
            out[static_cast<size_t>(r) * ow + c] = s;
        }
    return out;
}

} // namespace

IouResult miou(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt, const std::vector<int>& class_ids) {
    check_aligned(pred, gt, "miou");
    IouResult res;
    double sum = 0.0;
    int counted = 0;
    for (int c : class_ids) {
        long long inter = 0;
        long long uni = 0;
        for (size_t s = 0; s < pred.size(); ++s)
            for (size_t i = 0; i < pred[s].size(); ++i) {
                const bool p = pred[s].ids[i] == c;
                const bool g = gt[s].ids[i] == c;
                inter += p && g;
                uni += p || g;
            }
        if (uni == 0) continue;
        const double iou = static_cast<double>(inter) / static_cast<double>(uni);
        res.per_class[c] = iou;
        sum += iou;
        ++counted;
    }
    res.mean = counted ? sum / counted : 0.0;
    return res;
}

double mae(const std::vector<Image>& pred, const std::vector<Image>& gt) {
    check_aligned(pred, gt, "mae");
    double sum = 0.0;
    long long n = 0;
    for (size_t s = 0; s < pred.size(); ++s)
        for (size_t i = 0; i < pred[s].size(); ++i) {
            sum += std::fabs(static_cast<double>(pred[s].pixels[i]) - gt[s].pixels[i]);
            ++n;
        }
    return n ? sum / static_cast<double>(n) : 0.0;
}

Psnr psnr(const Image& pred, const Image& gt, double max_val) {
    if (!pred.same_shape(gt)) throw InvalidInput("psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred.pixels[i]) - gt.pixels[i];
        mse += d * d;
    }
    mse /= static_cast<double>(pred.size());
    if (mse == 0.0) return {0.0, true};
    return {10.0 * std::log10(max_val * max_val / mse), false};
}

double ssim(const Image& pred, const Image& gt, int window, double k1, double k2, double max_val) {
    if (!pred.same_shape(gt)) throw InvalidInput("ssim: shape mismatch");
    if (pred.height < window || pred.width < window)
        throw InvalidInput("ssim: image " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                           " smaller than window " + std::to_string(window));
    const int h = pred.height;
    const int w = pred.width;
    const auto k = gaussian_kernel(window, 1.5);
    std::vector<double> x(pred.pixels.begin(), pred.pixels.end());
    std::vector<double> y(gt.pixels.begin(), gt.pixels.end());
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k);
    const auto my = filter_valid(y, h, w, k);
    const auto sxx = filter_valid(xx, h, w, k);
    const auto syy = filter_valid(yy, h, w, k);
    const auto sxy = filter_valid(xy, h, w, k);
    const double c1 = (k1 * max_val) * (k1 * max_val);
    const double c2 = (k2 * max_val) * (k2 * max_val);
    double total = 0.0;
    for (size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cov = sxy[i] - mx[i] * my[i];
        total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json iou = nlohmann::json::object();
    for (auto& [c, v] : per_class_iou) iou[std::to_string(c)] = v;
    return {{"dataset", dataset},
            {"task_kind", task_kind},
            {"per_class_iou", iou},
            {"miou", miou},
            {"mae", mae},
            {"psnr", psnr},
            {"psnr_infinite", psnr_infinite},
            {"ssim", ssim},
            {"counts", {{"pixels", pixels}, {"slices", slices}, {"volumes", volumes}}},
            {"accumulation", "dataset-level (sums before division); psnr/ssim averaged per slice"}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
    MetricReport r;
    r.dataset = j.value("dataset", "");
    r.task_kind = j.value("task_kind", "");
    for (auto& [k, v] : j.at("per_class_iou").items()) r.per_class_iou[std::stoi(k)] = v.get<double>();
    r.miou = j.at("miou").get<double>();
    r.mae = j.at("mae").get<double>();
    r.psnr = j.at("psnr").get<double>();
    r.psnr_infinite = j.at("psnr_infinite").get<int>();
    r.ssim = j.at("ssim").get<double>();
    const auto& c = j.at("counts");
    r.pixels = c.at("pixels").get<long long>();
    r.slices = c.at("slices").get<int>();
    r.volumes = c.at("volumes").get<int>();
    return r;
}

std::string MetricReport::csv_header() { return "dataset,task_kind,miou,mae,psnr,psnr_infinite,ssim,pixels,slices,volumes"; }

std::string MetricReport::csv_row() const {
    std::ostringstream os;
    os.precision(8);
    os << dataset << ',' << task_kind << ',' << miou << ',' << mae << ',' << psnr << ',' << psnr_infinite << ','
       << ssim << ',' << pixels << ',' << slices << ',' << volumes;
    return os.str();
}

MetricReport segmentation_report(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt,
                                 const std::vector<int>& class_ids) {
    auto r = miou(pred, gt, class_ids);
    MetricReport rep;
    rep.task_kind = "segmentation";
    rep.per_class_iou = r.per_class;
    rep.miou = r.mean;
    rep.slices = static_cast<int>(pred.size());
    for (auto& p : pred) rep.pixels += static_cast<long long>(p.size());
    return rep;
}

MetricReport generation_report(const std::vector<Image>& pred, const std::vector<Image>& gt) {
    MetricReport rep;
    rep.mae = mae(pred, gt);
    double psum = 0.0;
    int finite = 0;
    double ssum = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        auto p = psnr(pred[i], gt[i]);
        if (p.infinite)
            ++rep.psnr_infinite;
        else {
            psum += p.db;
            ++finite;
        }
        ssum += ssim(pred[i], gt[i]);
        rep.pixels += static_cast<long long>(pred[i].size());
    }
    rep.psnr = finite ? psum / finite : 0.0;
    rep.ssim = pred.empty() ? 0.0 : ssum / static_cast<double>(pred.size());
    rep.slices = static_cast<int>(pred.size());
    return rep;
}

} // namespace medgen
