// SPDX-License-Identifier: Apache-2.0
//
// Inference: slice-position-matched prompt selection, single-slice
// completion in AR or MIM mode, canvas decoding and whole-volume sweeps.
#pragma once

#include "medgen/canvas.hpp"
#include "medgen/data.hpp"
#include "medgen/metrics.hpp"
#include "medgen/net.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace medgen {

enum class InferMode { AR, MIM };

std::string to_string(InferMode m);
InferMode parse_infer_mode(const std::string& name);

/// clamp(floor(n * n_train / n_test), 0, n_train - 1), 0-based.
int select_prompt_slice(int n, int n_test, int n_train);

/// Completes the task canvas for task_img given one prompt pair. Inputs of a
/// different size are resized to the model resolution and the output is
/// resized back to task_img's shape. Output is clamped to [0, 1].
Image predict(Model<float>& model, const Image& prompt_img, const Image& prompt_canvas, const Image& task_img,
              InferMode mode = InferMode::AR);

struct VolumePrediction {
    std::string instance_id;
    std::string prompt_instance_id;
    std::vector<Image> canvases;  // raw model outputs per slice (binary: first class only)
    std::vector<LabelMap> labels; // segmentation only
    std::vector<Image> images;    // generation only (== canvases)
    std::optional<Palette> palette;
    ColorScheme scheme = ColorScheme::Random;
};

struct PredictOptions {
    InferMode mode = InferMode::AR;
    ColorScheme scheme = ColorScheme::Random;
    std::vector<float> pool = make_value_pool();
    const ClassRegistry* registry = nullptr; // predefined scheme
    std::uint64_t seed = 0;                  // random palette draw
};

/// Segmentation volumes (train labels required) are colorized, predicted and
/// decoded per slice; generation volumes return raw canvases.
VolumePrediction predict_volume(Model<float>& model, TaskKind kind, const Volume& test_vol, const Volume& train_vol,
                                const PredictOptions& opts);

/// Per-class binary predictions merged into one label map; the lowest
/// class id wins where masks overlap.
LabelMap merge_binary_masks(const std::vector<std::pair<int, LabelMap>>& masks, int height, int width);

/// Writes <dir>/<instance_id>/ with canvas_###.png, label_###.png,
/// palette.json and manifest.json.
void write_prediction(const VolumePrediction& pred, const std::filesystem::path& dir);

struct EvalOptions {
    PredictOptions predict;
    std::uint64_t prompt_seed = 0; // selects the prompt training instance
    std::optional<std::filesystem::path> output_dir;
    int max_volumes = -1;
};

/// Predicts every test volume of a dataset against one seed-selected
/// training instance and aggregates a MetricReport.
MetricReport evaluate_dataset(Model<float>& model, const Dataset& ds, const EvalOptions& opts);

} // namespace medgen
