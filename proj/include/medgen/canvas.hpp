// SPDX-License-Identifier: Apache-2.0
//
// Single-channel canvases: every task output lives in one [0,1] intensity
// plane. Segmentation maps are "colorized" into that plane by one of three
// schemes and decoded back by nearest palette value.
#pragma once

#include "medgen/image.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace medgen {

enum class ColorScheme { Binary, Predefined, Random };

std::string to_string(ColorScheme s);
/// Throws InvalidInput for unknown names.
ColorScheme parse_color_scheme(const std::string& name);

/// class id -> canvas value in (0, 1]. Background is implicitly 0.
struct Palette {
    ColorScheme scheme = ColorScheme::Random;
    std::map<int, float> mapping;
    std::uint64_t seed = 0;

    bool empty() const { return mapping.empty(); }
    /// Smallest gap between any two values, background 0 included.
    float min_separation() const;
    bool injective() const;

    nlohmann::json to_json() const;
    static Palette from_json(const nlohmann::json& j);
};

struct Canvas {
    Image pixels;
    std::optional<Palette> palette;
};

/// One 0/1 canvas per foreground class present, ordered by class id.
std::vector<std::pair<int, Canvas>> colorize_binary(const LabelMap& label);

enum class PredefinedStrategy {
    AsPrinted,        // sum_{i<k} i*N_i + n
    CumulativeOffset, // sum_{i<k} N_i + n
};

std::string to_string(PredefinedStrategy s);
PredefinedStrategy parse_predefined_strategy(const std::string& name);

/// Integer value for class n (1-based) of dataset k (1-based); sizes[i-1] = N_i.
std::int64_t assign_predefined_value(int k, int n, const std::vector<int>& sizes,
                                     PredefinedStrategy strategy = PredefinedStrategy::AsPrinted);

/// Fixed per-(dataset, class) canvas values, normalized by the global maximum.
class ClassRegistry {
public:
    struct Entry {
        int dataset_id;
        int class_index;
        std::string semantic_name;
        std::int64_t predefined_value;
    };

    ClassRegistry() = default;
    /// Builds entries for every (k, n) and brute-force checks injectivity;
    /// throws InvalidInput if the strategy collides for these sizes.
    explicit ClassRegistry(std::vector<int> dataset_sizes,
                           PredefinedStrategy strategy = PredefinedStrategy::AsPrinted,
                           std::map<std::pair<int, int>, std::string> names = {});

    const std::vector<Entry>& entries() const { return entries_; }
    const std::vector<int>& dataset_sizes() const { return sizes_; }
    PredefinedStrategy strategy() const { return strategy_; }
    std::int64_t max_value() const { return max_value_; }

    /// Normalized canvas value in (0, 1].
    float value(int dataset_id, int class_index) const;
    /// Palette over every class of one dataset.
    Palette palette_for(int dataset_id) const;

    nlohmann::json to_json() const;
    static ClassRegistry from_json(const nlohmann::json& j);

private:
    std::vector<int> sizes_;
    PredefinedStrategy strategy_ = PredefinedStrategy::AsPrinted;
    std::vector<Entry> entries_;
    std::int64_t max_value_ = 1;
};

/// Evenly spaced admissible values in [lo, hi] with the given step.
std::vector<float> make_value_pool(float lo = 0.1f, float hi = 1.0f, float step = 0.05f);

/// Draws distinct pool values (without replacement) for each listed class.
Palette random_palette(const std::vector<int>& classes, Rng& rng, const std::vector<float>& pool);

/// Paints a label map with an existing palette; classes missing from the
/// palette are painted as background.
Image colorize_with(const LabelMap& label, const Palette& palette);

std::pair<Canvas, Palette> colorize_random(const LabelMap& label, Rng& rng, const std::vector<float>& pool);

/// Nearest palette value per pixel; ties go to background, then lowest id.
LabelMap decode_canvas(const Image& canvas, const Palette& palette);

} // namespace medgen
