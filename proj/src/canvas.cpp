// SPDX-License-Identifier: Apache-2.0
#include "medgen/canvas.hpp"

#include "medgen/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace medgen {

std::string to_string(ColorScheme s) {
    switch (s) {
    case ColorScheme::Binary: return "binary";
    case ColorScheme::Predefined: return "predefined";
    case ColorScheme::Random: return "random";
    }
    return "random";
}

ColorScheme parse_color_scheme(const std::string& name) {
    if (name == "binary") return ColorScheme::Binary;
    if (name == "predefined" || name == "pre-defined") return ColorScheme::Predefined;
    if (name == "random") return ColorScheme::Random;
    throw InvalidInput("unknown colorization scheme '" + name + "' (expected binary|predefined|random)");
}

std::string to_string(PredefinedStrategy s) {
    return s == PredefinedStrategy::AsPrinted ? "as_printed" : "cumulative_offset";
}

PredefinedStrategy parse_predefined_strategy(const std::string& name) {
    if (name == "as_printed") return PredefinedStrategy::AsPrinted;
    if (name == "cumulative_offset") return PredefinedStrategy::CumulativeOffset;
    throw InvalidInput("unknown predefined strategy '" + name + "'");
}

float Palette::min_separation() const {
    std::vector<float> vals{0.0f};
    for (auto& [id, v] : mapping) vals.push_back(v);
    std::sort(vals.begin(), vals.end());
    float gap = 1.0f;
    for (size_t i = 1; i < vals.size(); ++i) gap = std::min(gap, vals[i] - vals[i - 1]);
    return gap;
}

bool Palette::injective() const {
    std::set<float> seen;
    for (auto& [id, v] : mapping)
        if (!seen.insert(v).second) return false;
    return true;
}

nlohmann::json Palette::to_json() const {
    nlohmann::json m = nlohmann::json::object();
    for (auto& [id, v] : mapping) m[std::to_string(id)] = v;
    return {{"scheme", to_string(scheme)}, {"mapping", m}, {"seed", seed}};
}

Palette Palette::from_json(const nlohmann::json& j) {
    Palette p;
    p.scheme = parse_color_scheme(j.at("scheme").get<std::string>());
    p.seed = j.value("seed", std::uint64_t{0});
    for (auto& [key, val] : j.at("mapping").items()) p.mapping[std::stoi(key)] = val.get<float>();
    return p;
}

std::vector<std::pair<int, Canvas>> colorize_binary(const LabelMap& label) {
    label.validate();
    std::vector<std::pair<int, Canvas>> out;
    for (int cls : label.present_classes()) {
        Canvas c{Image(label.height, label.width), Palette{ColorScheme::Binary, {{cls, 1.0f}}, 0}};
        for (size_t i = 0; i < label.size(); ++i) c.pixels.pixels[i] = label.ids[i] == cls ? 1.0f : 0.0f;
        out.emplace_back(cls, std::move(c));
    }
    return out;
}

std::int64_t assign_predefined_value(int k, int n, const std::vector<int>& sizes, PredefinedStrategy strategy) {
    if (k < 1) throw InvalidInput("predefined value: dataset index must be >= 1");
    if (static_cast<int>(sizes.size()) < k - 1)
        throw InvalidInput("predefined value: sizes do not cover datasets 1.." + std::to_string(k - 1));
    const int n_k = static_cast<int>(sizes.size()) >= k ? sizes[k - 1] : n;
    if (n < 1 || n > n_k)
        throw InvalidInput("predefined value: class index " + std::to_string(n) + " outside [1, " +
                           std::to_string(n_k) + "]");
    std::int64_t offset = 0;
    for (int i = 1; i <= k - 1; ++i)
        offset += (strategy == PredefinedStrategy::AsPrinted ? i : 1) * static_cast<std::int64_t>(sizes[i - 1]);
    return offset + n;
}

ClassRegistry::ClassRegistry(std::vector<int> dataset_sizes, PredefinedStrategy strategy,
                             std::map<std::pair<int, int>, std::string> names)
    : sizes_(std::move(dataset_sizes)), strategy_(strategy) {
    std::set<std::int64_t> used;
    max_value_ = 1;
    for (int k = 1; k <= static_cast<int>(sizes_.size()); ++k) {
        if (sizes_[k - 1] < 1) throw InvalidInput("class registry: dataset " + std::to_string(k) + " has no classes");
        for (int n = 1; n <= sizes_[k - 1]; ++n) {
            auto v = assign_predefined_value(k, n, sizes_, strategy_);
            if (!used.insert(v).second)
                throw InvalidInput("class registry: strategy " + to_string(strategy_) + " collides at value " +
                                   std::to_string(v));
            auto it = names.find({k, n});
            entries_.push_back({k, n, it != names.end() ? it->second : "", v});
            max_value_ = std::max(max_value_, v);
        }
    }
}

float ClassRegistry::value(int dataset_id, int class_index) const {
    for (auto& e : entries_)
        if (e.dataset_id == dataset_id && e.class_index == class_index)
            return static_cast<float>(static_cast<double>(e.predefined_value) / static_cast<double>(max_value_));
    throw InvalidInput("class registry: no entry for dataset " + std::to_string(dataset_id) + " class " +
                       std::to_string(class_index));
}

Palette ClassRegistry::palette_for(int dataset_id) const {
    Palette p;
    p.scheme = ColorScheme::Predefined;
    for (auto& e : entries_)
        if (e.dataset_id == dataset_id)
            p.mapping[e.class_index] =
                static_cast<float>(static_cast<double>(e.predefined_value) / static_cast<double>(max_value_));
    if (p.empty()) throw InvalidInput("class registry: unknown dataset " + std::to_string(dataset_id));
    return p;
}

nlohmann::json ClassRegistry::to_json() const {
    nlohmann::json names = nlohmann::json::array();
    for (auto& e : entries_)
        if (!e.semantic_name.empty()) names.push_back({e.dataset_id, e.class_index, e.semantic_name});
    return {{"dataset_sizes", sizes_}, {"strategy", to_string(strategy_)}, {"names", names}};
}

ClassRegistry ClassRegistry::from_json(const nlohmann::json& j) {
    std::map<std::pair<int, int>, std::string> names;
    if (j.contains("names"))
        for (auto& n : j.at("names")) names[{n.at(0).get<int>(), n.at(1).get<int>()}] = n.at(2).get<std::string>();
    return ClassRegistry(j.at("dataset_sizes").get<std::vector<int>>(),
                         parse_predefined_strategy(j.value("strategy", std::string("as_printed"))), std::move(names));
}

std::vector<float> make_value_pool(float lo, float hi, float step) {
    if (!(step > 0.0f) || !(lo > 0.0f) || hi < lo || hi > 1.0f)
        throw InvalidInput("value pool: need 0 < lo <= hi <= 1 and step > 0");
    std::vector<float> pool;
    const int count = static_cast<int>(std::floor((hi - lo) / step + 1e-4f)) + 1;
    for (int i = 0; i < count; ++i) pool.push_back(lo + step * static_cast<float>(i));
    return pool;
}

Palette random_palette(const std::vector<int>& classes, Rng& rng, const std::vector<float>& pool) {
    if (pool.size() < classes.size())
        throw InvalidInput("random colorization: need " + std::to_string(classes.size()) +
                           " pool values but only " + std::to_string(pool.size()) + " available");
    std::vector<float> values = pool;
    Palette p;
    p.scheme = ColorScheme::Random;
    // partial Fisher-Yates: sample without replacement
    for (size_t i = 0; i < classes.size(); ++i) {
        std::uniform_int_distribution<size_t> pick(i, values.size() - 1);
        std::swap(values[i], values[pick(rng)]);
        p.mapping[classes[i]] = values[i];
    }
    return p;
}

Image colorize_with(const LabelMap& label, const Palette& palette) {
    Image out(label.height, label.width);
    for (size_t i = 0; i < label.size(); ++i) {
        auto it = palette.mapping.find(label.ids[i]);
        out.pixels[i] = it != palette.mapping.end() ? it->second : 0.0f;
    }
    return out;
}

std::pair<Canvas, Palette> colorize_random(const LabelMap& label, Rng& rng, const std::vector<float>& pool) {
    label.validate();
    Palette p = random_palette(label.present_classes(), rng, pool);
    return {Canvas{colorize_with(label, p), p}, p};
}

LabelMap decode_canvas(const Image& canvas, const Palette& palette) {
    LabelMap out(canvas.height, canvas.width);
    int max_id = 1;
    for (auto& [id, v] : palette.mapping) max_id = std::max(max_id, id);
    out.class_count = max_id;
    for (size_t i = 0; i < canvas.size(); ++i) {
        const float x = canvas.pixels[i];
        int best = 0;
        float best_d = std::fabs(x);
        // std::map iterates in ascending id, so strict < keeps the lowest id on ties
        for (auto& [id, v] : palette.mapping) {
            const float d = std::fabs(x - v);
            if (d < best_d) {
                best_d = d;
                best = id;
            }
        }
        out.ids[i] = best;
    }
    return out;
}

} // namespace medgen
