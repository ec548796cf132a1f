// SPDX-License-Identifier: Apache-2.0
//
// Input layouts for the two conditional-generation objectives.
//
//   * Masked image modeling composes a 2x2 quadrant grid
//       [prompt image | prompt label]
//       [task image   | task label  ]
//     and hides a random subset of its patches.
//   * Autoregressive training lays the same images out as a visual
//     sentence [Px1, Py1, ..., Pxn, Pyn, X, Y] with image-granularity causal
//     attention and supervision only on label elements.
//
// Both are lowered to a TokenLayout, the flat per-token description the
// network consumes.
#pragma once

#include "medgen/image.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace medgen {

enum class Quadrant { UpperLeft = 0, UpperRight = 1, LowerLeft = 2, LowerRight = 3 };

struct QuadrantGrid {
    Image pixels; // 2H x 2W
    int quad_h = 0;
    int quad_w = 0;

    Image extract(Quadrant q) const;
};

/// UL prompt image, UR prompt label, LL task image, LR task label.
QuadrantGrid compose_grid(const Image& prompt_img, const Image& prompt_lbl, const Image& task_img,
                          const Image& task_lbl);

struct PatchMask {
    std::vector<int> masked; // sorted patch indices
    int total = 0;
    double ratio = 0.0;

    bool contains(int patch) const;
};

PatchMask sample_patch_mask(int total_patches, double ratio, Rng& rng);

/// Masks exactly the patches of the lower-right quadrant of a grid lattice
/// (grid_rows x grid_cols patches).
PatchMask lower_right_mask(int grid_rows, int grid_cols);

/// Row-major patch extraction: returns (rows*cols) x (p*p) values.
std::vector<float> patchify(const Image& img, int patch);
Image unpatchify(const std::vector<float>& patches, int rows, int cols, int patch);

enum class Role { PromptImage, PromptLabel, TaskImage, TaskLabel };

struct SequenceElement {
    Role role;
    Image pixels;         // empty for the inference query
    bool placeholder = false;
};

/// Visual sentence with per-patch attention and supervision masks.
/// Patch k of element e has flat index e * patches_per_element + k.
struct VisualSequence {
    std::vector<SequenceElement> elements;
    int patch = 16;
    int patches_per_element = 0;
    int lattice_rows = 0;
    int lattice_cols = 0;
    std::vector<std::uint8_t> attention_mask;   // (E*P)^2, row = query patch
    std::vector<std::uint8_t> supervision_mask; // E*P

    int element_count() const { return static_cast<int>(elements.size()); }
    int patch_count() const { return element_count() * patches_per_element; }
    bool may_attend(int query_patch, int key_patch) const {
        return attention_mask[static_cast<size_t>(query_patch) * patch_count() + key_patch] != 0;
    }
    bool has_target() const { return !elements.back().placeholder; }
};

/// pairs = in-context (prompt image, prompt label canvas) examples. When
/// task_lbl is absent the final element is an inference query placeholder.
VisualSequence build_ar_sequence(const std::vector<std::pair<Image, Image>>& pairs, const Image& task_img,
                                 const std::optional<Image>& task_lbl, int patch = 16);

/// A rectangular patch lattice the decoder treats as one spatial map.
struct DecodeRegion {
    int rows = 0;
    int cols = 0;
    std::vector<int> tokens; // row-major token indices
    int element = -1;        // sequence element / quadrant it belongs to
    bool query = false;      // placeholder block predicting that element
};

/// Everything the network needs for one forward pass.
struct TokenLayout {
    int patch = 16;
    int lattice_rows = 0; // per-element lattice; local positions index into it
    int lattice_cols = 0;
    std::vector<float> patches;            // T x p*p (ignored where placeholder)
    std::vector<int> local_pos;            // in [0, lattice_rows*lattice_cols)
    std::vector<int> slot;                 // element/quadrant slot embedding id
    std::vector<std::uint8_t> placeholder; // 1 -> learned mask token
    std::vector<std::uint8_t> attention;   // T x T, empty = unrestricted
    std::vector<DecodeRegion> regions;
    std::vector<std::uint8_t> supervised; // T
    std::vector<float> targets;           // T x p*p

    int tokens() const { return static_cast<int>(slot.size()); }
    int patch_area() const { return patch * patch; }
    bool allowed(int q, int k) const {
        return attention.empty() || attention[static_cast<size_t>(q) * tokens() + k] != 0;
    }
    /// Throws InvalidInput on inconsistent sizes.
    void validate() const;
};

/// Which label predictions an AR layout decodes.
struct ArLayoutOptions {
    bool supervise_prompt_labels = true; // query blocks for every prompt label
    bool decode_context = false;         // also decode content blocks (diagnostics)
};

/// Lowers a visual sentence. Image elements and prompt labels become content
/// blocks; every label to be predicted gets a placeholder query block at that
/// element's position which sees strictly earlier elements plus itself.
TokenLayout to_token_layout(const VisualSequence& seq, const ArLayoutOptions& opts = {});

/// Index of the block in to_token_layout's region list holding the task-label prediction.
int task_label_region(const TokenLayout& layout);

TokenLayout mim_layout(const QuadrantGrid& grid, const PatchMask& mask, int patch);

/// Lone-slice mask-and-reconstruct layout used for pretraining.
TokenLayout single_image_mim_layout(const Image& img, const PatchMask& mask, int patch);

/// Writes grid.png and a mask overlay (masked patches hatched) for inspection.
void dump_grid_debug(const QuadrantGrid& grid, const PatchMask& mask, int patch, const std::filesystem::path& dir);

} // namespace medgen
