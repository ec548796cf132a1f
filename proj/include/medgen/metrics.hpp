// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "medgen/image.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace medgen {

struct IouResult {
    std::map<int, double> per_class;
    double mean = 0.0; // over classes present in pred or gt
};

/// Intersections and unions are summed over every pixel of the list before
/// dividing. Classes absent from both sides are dropped from the mean.
IouResult miou(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt, const std::vector<int>& class_ids);

double mae(const std::vector<Image>& pred, const std::vector<Image>& gt);

struct Psnr {
    double db = 0.0;
    bool infinite = false;
};

Psnr psnr(const Image& pred, const Image& gt, double max_val = 1.0);

/// Mean SSIM over an 11x11 Gaussian window (sigma 1.5), valid positions only.
double ssim(const Image& pred, const Image& gt, int window = 11, double k1 = 0.01, double k2 = 0.03,
            double max_val = 1.0);

struct MetricReport {
    std::string dataset;
    std::string task_kind;
    std::map<int, double> per_class_iou;
    double miou = 0.0;
    double mae = 0.0;
    double psnr = 0.0;       // mean over slices with finite PSNR
    int psnr_infinite = 0;   // slices excluded from the PSNR mean
    double ssim = 0.0;
    long long pixels = 0;
    int slices = 0;
    int volumes = 0;

    nlohmann::json to_json() const;
    static MetricReport from_json(const nlohmann::json& j);
    static std::string csv_header();
    std::string csv_row() const;
};

/// Segmentation report over aligned label lists.
MetricReport segmentation_report(const std::vector<LabelMap>& pred, const std::vector<LabelMap>& gt,
                                 const std::vector<int>& class_ids);
/// MAE / PSNR / SSIM report over aligned slice lists.
MetricReport generation_report(const std::vector<Image>& pred, const std::vector<Image>& gt);

} // namespace medgen
