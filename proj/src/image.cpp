// SPDX-License-Identifier: Apache-2.0
#include "medgen/image.hpp"

#include "medgen/error.hpp"

#include <algorithm>
#include <string>

namespace medgen {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::vector<int> LabelMap::present_classes() const {
    std::vector<char> seen;
    for (auto id : ids) {
        if (id <= 0) continue;
        if (static_cast<size_t>(id) >= seen.size()) seen.resize(id + 1, 0);
        seen[id] = 1;
    }
    std::vector<int> out;
    for (size_t i = 0; i < seen.size(); ++i)
        if (seen[i]) out.push_back(static_cast<int>(i));
    return out;
}

void LabelMap::validate() const {
    if (class_count < 1) throw InvalidInput("label map: class_count must be >= 1");
    if (ids.size() != static_cast<size_t>(height) * width)
        throw InvalidInput("label map: pixel buffer does not match shape");
    auto [lo, hi] = std::minmax_element(ids.begin(), ids.end());
    if (lo != ids.end() && (*lo < 0 || *hi > class_count))
        throw InvalidInput("label map: id out of range [0, " + std::to_string(class_count) + "]");
}

} // namespace medgen
