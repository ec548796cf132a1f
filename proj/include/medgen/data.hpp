// SPDX-License-Identifier: Apache-2.0
//
// Sample sourcing: CT windowing, resize/crop augmentation, synthetic volume
// generators for the four task families, and on-disk dataset manifests.
#pragma once

#include "medgen/image.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace medgen {

enum class TaskKind { Segmentation, Synthesis, Inpainting, Denoising };

std::string to_string(TaskKind k);
/// Accepts full names and the short forms seg/synth/inpaint/denoise.
TaskKind parse_task_kind(const std::string& name);

/// Ordered stack of slices. Segmentation volumes carry `labels`;
/// generation volumes carry `targets` (the desired output per slice).
struct Volume {
    std::string instance_id;
    std::vector<Slice> slices;
    std::vector<LabelMap> labels;
    std::vector<Slice> targets;

    int size() const { return static_cast<int>(slices.size()); }
    bool operator==(const Volume&) const = default;
};

/// Clamp to [lo, hi] and rescale to [0, 1].
Slice ct_window(std::span<const float> raw, int height, int width, float lo = -100.0f, float hi = 200.0f);

/// Per-volume min-max rescale to [0, 1] (used where no window applies).
void minmax_normalize(std::vector<Slice>& slices);

Image resize_bilinear(const Image& img, int height, int width);
LabelMap resize_nearest(const LabelMap& label, int height, int width);

struct CropWindow {
    int resize = 0;
    int crop = 0;
    int top = 0;
    int left = 0;
};

CropWindow sample_crop(int resize_to, int crop, Rng& rng);
Image apply_crop(const Image& img, const CropWindow& w);
LabelMap apply_crop(const LabelMap& label, const CropWindow& w);

/// Bilinear for the image, nearest for the paired label; both share one
/// crop offset drawn from rng.
std::pair<Slice, std::optional<LabelMap>> resize_crop(const Slice& img, int resize_to, int crop, Rng& rng,
                                                      const std::optional<LabelMap>& paired = std::nullopt);

struct SynthSpec {
    TaskKind kind = TaskKind::Segmentation;
    int size = 32;
    int classes = 3;
    double noise = 0.1;     // denoising sigma
    int transform_id = 0;   // synthesis remap variant
    int holes = 2;          // inpainting: max holes per slice
    int hole_min = 4;
    int hole_max = 10;
    int min_slices = 8;
    int max_slices = 32;
    int dataset_id = 1;     // selects the class appearance table
    std::uint64_t seed = 0;

    /// Throws InvalidInput when parameters are out of range or infeasible.
    void validate() const;
};

/// One synthetic volume; bit-identical for equal specs.
Volume gen_synthetic(const SynthSpec& spec, const std::string& instance_id = "synth");

/// `count` volumes with per-instance seeds derived from spec.seed.
std::vector<Volume> gen_synthetic_suite(const SynthSpec& spec, int count, const std::string& prefix = "inst");

/// The fixed cross-modal intensity remap used by the synthesis generator.
float synthesis_remap(float x, int transform_id);

struct ManifestInstance {
    std::string instance_id;
    std::string split = "train";
    std::vector<std::string> slices;
    std::vector<std::string> labels; // label maps (segmentation) or target slices
};

struct DatasetManifest {
    std::filesystem::path root;
    std::string name;
    std::string modality = "synthetic";
    TaskKind task_kind = TaskKind::Segmentation;
    int dataset_id = 1;
    int class_count = 1;
    std::string normalization = "none"; // none | minmax
    std::vector<ManifestInstance> instances;

    struct SampleRef {
        int instance;
        int slice;
    };
    /// Every (instance, slice) pair in order.
    std::vector<SampleRef> samples() const;

    Volume load_instance(int index) const;
    std::vector<Volume> load_split(const std::string& split) const;

    nlohmann::json to_json() const;
};

/// Parses and eagerly validates alignment and file existence. Errors are
/// DataError naming the manifest path and offending instance.
DatasetManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// Writes volumes as 16-bit PNGs under dir and returns the manifest
/// (also written to dir/manifest.json).
DatasetManifest materialize(const std::vector<Volume>& train, const std::vector<Volume>& test,
                            const DatasetManifest& header, const std::filesystem::path& dir);

/// In-memory dataset used by training and evaluation.
struct Dataset {
    std::string name;
    TaskKind kind = TaskKind::Segmentation;
    int dataset_id = 1;
    int class_count = 1;
    std::vector<Volume> train;
    std::vector<Volume> test;
};

Dataset load_dataset(const DatasetManifest& m);

} // namespace medgen
