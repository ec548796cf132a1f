// SPDX-License-Identifier: Apache-2.0
#include "medgen/seqbuild.hpp"

#include "medgen/error.hpp"
#include "medgen/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace medgen {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b))
        throw InvalidInput(std::string(what) + ": shape mismatch (" + std::to_string(a.height) + "x" +
                           std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                           std::to_string(b.width) + ")");
}

void require_divisible(const Image& img, int patch) {
    if (patch < 1 || img.height % patch != 0 || img.width % patch != 0 || img.height == 0)
        throw InvalidInput("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                           " is not divisible into " + std::to_string(patch) + "px patches");
}

} // namespace

Image QuadrantGrid::extract(Quadrant q) const {
    const int qi = static_cast<int>(q);
    const int r0 = (qi / 2) * quad_h;
    const int c0 = (qi % 2) * quad_w;
    Image out(quad_h, quad_w);
    for (int r = 0; r < quad_h; ++r)
        for (int c = 0; c < quad_w; ++c) out.at(r, c) = pixels.at(r0 + r, c0 + c);
    return out;
}

QuadrantGrid compose_grid(const Image& prompt_img, const Image& prompt_lbl, const Image& task_img,
                          const Image& task_lbl) {
    require_same_shape(prompt_img, prompt_lbl, "compose_grid");
    require_same_shape(prompt_img, task_img, "compose_grid");
    require_same_shape(prompt_img, task_lbl, "compose_grid");
    const int h = prompt_img.height;
    const int w = prompt_img.width;
    QuadrantGrid g{Image(2 * h, 2 * w), h, w};
    const Image* parts[4] = {&prompt_img, &prompt_lbl, &task_img, &task_lbl};
    for (int q = 0; q < 4; ++q) {
        const int r0 = (q / 2) * h;
        const int c0 = (q % 2) * w;
        for (int r = 0; r < h; ++r)
            std::copy_n(parts[q]->pixels.begin() + static_cast<size_t>(r) * w, w,
                        g.pixels.pixels.begin() + static_cast<size_t>(r0 + r) * 2 * w + c0);
    }
    return g;
}

bool PatchMask::contains(int patch) const { return std::binary_search(masked.begin(), masked.end(), patch); }

PatchMask sample_patch_mask(int total_patches, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidInput("patch mask: ratio must lie in (0, 1)");
    if (total_patches < 4) throw InvalidInput("patch mask: need at least 4 patches");
    const int count = static_cast<int>(std::lround(ratio * total_patches));
    std::vector<int> idx(total_patches);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < count; ++i) {
        std::uniform_int_distribution<int> pick(i, total_patches - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return PatchMask{std::move(idx), total_patches, ratio};
}

PatchMask lower_right_mask(int grid_rows, int grid_cols) {
    PatchMask m;
    m.total = grid_rows * grid_cols;
    for (int r = grid_rows / 2; r < grid_rows; ++r)
        for (int c = grid_cols / 2; c < grid_cols; ++c) m.masked.push_back(r * grid_cols + c);
    m.ratio = static_cast<double>(m.masked.size()) / m.total;
    return m;
}

std::vector<float> patchify(const Image& img, int patch) {
    require_divisible(img, patch);
    const int rows = img.height / patch;
    const int cols = img.width / patch;
    const int area = patch * patch;
    std::vector<float> out(static_cast<size_t>(rows) * cols * area);
    for (int pr = 0; pr < rows; ++pr)
        for (int pc = 0; pc < cols; ++pc) {
            float* dst = out.data() + static_cast<size_t>(pr * cols + pc) * area;
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x) dst[y * patch + x] = img.at(pr * patch + y, pc * patch + x);
        }
    return out;
}

Image unpatchify(const std::vector<float>& patches, int rows, int cols, int patch) {
    const int area = patch * patch;
    if (patches.size() != static_cast<size_t>(rows) * cols * area)
        throw InvalidInput("unpatchify: buffer does not match lattice");
    Image img(rows * patch, cols * patch);
    for (int pr = 0; pr < rows; ++pr)
        for (int pc = 0; pc < cols; ++pc) {
            const float* src = patches.data() + static_cast<size_t>(pr * cols + pc) * area;
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x) img.at(pr * patch + y, pc * patch + x) = src[y * patch + x];
        }
    return img;
}

VisualSequence build_ar_sequence(const std::vector<std::pair<Image, Image>>& pairs, const Image& task_img,
                                 const std::optional<Image>& task_lbl, int patch) {
    if (pairs.empty()) throw InvalidInput("build_ar_sequence: at least one prompt pair is required");
    require_divisible(task_img, patch);
    VisualSequence seq;
    seq.patch = patch;
    seq.lattice_rows = task_img.height / patch;
    seq.lattice_cols = task_img.width / patch;
    seq.patches_per_element = seq.lattice_rows * seq.lattice_cols;
    for (auto& [img, lbl] : pairs) {
        require_same_shape(task_img, img, "build_ar_sequence");
        require_same_shape(task_img, lbl, "build_ar_sequence");
        seq.elements.push_back({Role::PromptImage, img, false});
        seq.elements.push_back({Role::PromptLabel, lbl, false});
    }
    seq.elements.push_back({Role::TaskImage, task_img, false});
    if (task_lbl) {
        require_same_shape(task_img, *task_lbl, "build_ar_sequence");
        seq.elements.push_back({Role::TaskLabel, *task_lbl, false});
    } else {
        seq.elements.push_back({Role::TaskLabel, Image(), true});
    }

    const int n = seq.patch_count();
    const int per = seq.patches_per_element;
    seq.attention_mask.assign(static_cast<size_t>(n) * n, 0);
    seq.supervision_mask.assign(n, 0);
    for (int q = 0; q < n; ++q) {
        const int eq = q / per;
        for (int k = 0; k < n; ++k) seq.attention_mask[static_cast<size_t>(q) * n + k] = (k / per) <= eq;
        // even positions in 1-based numbering are labels
        seq.supervision_mask[q] = (eq % 2) == 1;
    }
    return seq;
}

void TokenLayout::validate() const {
    const size_t t = slot.size();
    const size_t area = static_cast<size_t>(patch) * patch;
    if (t == 0) throw InvalidInput("token layout: empty");
    if (local_pos.size() != t || placeholder.size() != t || supervised.size() != t)
        throw InvalidInput("token layout: per-token arrays disagree in length");
    if (patches.size() != t * area || targets.size() != t * area)
        throw InvalidInput("token layout: patch buffers do not match token count");
    if (!attention.empty() && attention.size() != t * t)
        throw InvalidInput("token layout: attention mask must be " + std::to_string(t) + "x" + std::to_string(t));
    for (auto& r : regions)
        if (static_cast<int>(r.tokens.size()) != r.rows * r.cols)
            throw InvalidInput("token layout: decode region size mismatch");
}

TokenLayout to_token_layout(const VisualSequence& seq, const ArLayoutOptions& opts) {
    struct Block {
        int element;
        bool query;
    };
    const int e_count = seq.element_count();
    std::vector<Block> blocks;
    for (int e = 0; e < e_count; ++e) {
        const bool last = e == e_count - 1;
        blocks.push_back({e, last});
    }
    if (opts.supervise_prompt_labels && seq.has_target())
        for (int e = 0; e < e_count - 1; ++e)
            if (seq.elements[e].role == Role::PromptLabel) blocks.push_back({e, true});

    const int per = seq.patches_per_element;
    const int area = seq.patch * seq.patch;
    const int t = static_cast<int>(blocks.size()) * per;
    TokenLayout out;
    out.patch = seq.patch;
    out.lattice_rows = seq.lattice_rows;
    out.lattice_cols = seq.lattice_cols;
    out.patches.assign(static_cast<size_t>(t) * area, 0.0f);
    out.targets.assign(static_cast<size_t>(t) * area, 0.0f);
    out.local_pos.resize(t);
    out.slot.resize(t);
    out.placeholder.assign(t, 0);
    out.supervised.assign(t, 0);

    for (size_t b = 0; b < blocks.size(); ++b) {
        const auto& el = seq.elements[blocks[b].element];
        const bool has_pixels = !el.placeholder;
        std::vector<float> px = has_pixels ? patchify(el.pixels, seq.patch) : std::vector<float>();
        for (int k = 0; k < per; ++k) {
            const int tok = static_cast<int>(b) * per + k;
            out.local_pos[tok] = k;
            out.slot[tok] = blocks[b].element;
            out.placeholder[tok] = blocks[b].query ? 1 : 0;
            if (has_pixels) {
                std::copy_n(px.begin() + static_cast<size_t>(k) * area, area,
                            out.targets.begin() + static_cast<size_t>(tok) * area);
                if (!blocks[b].query)
                    std::copy_n(px.begin() + static_cast<size_t>(k) * area, area,
                                out.patches.begin() + static_cast<size_t>(tok) * area);
            }
            out.supervised[tok] = blocks[b].query && has_pixels && el.role != Role::PromptImage &&
                                  el.role != Role::TaskImage;
        }
        if (blocks[b].query || opts.decode_context) {
            DecodeRegion reg{seq.lattice_rows, seq.lattice_cols, {}, blocks[b].element, blocks[b].query};
            for (int k = 0; k < per; ++k) reg.tokens.push_back(static_cast<int>(b) * per + k);
            out.regions.push_back(std::move(reg));
        }
    }

    out.attention.assign(static_cast<size_t>(t) * t, 0);
    for (size_t a = 0; a < blocks.size(); ++a)
        for (size_t b = 0; b < blocks.size(); ++b) {
            bool ok;
            if (!blocks[a].query)
                ok = !blocks[b].query && blocks[b].element <= blocks[a].element;
            else
                ok = (!blocks[b].query && blocks[b].element < blocks[a].element) || a == b;
            if (!ok) continue;
            for (int i = 0; i < per; ++i)
                std::fill_n(out.attention.begin() + (static_cast<size_t>(a) * per + i) * t + b * per, per, 1);
        }
    return out;
}

int task_label_region(const TokenLayout& layout) {
    int best = -1;
    for (size_t i = 0; i < layout.regions.size(); ++i)
        if (layout.regions[i].query && (best < 0 || layout.regions[i].element > layout.regions[best].element))
            best = static_cast<int>(i);
    if (best < 0) throw InvalidInput("layout has no label query region");
    return best;
}

namespace {

TokenLayout grid_layout(const Image& img, const PatchMask& mask, int patch, int elem_rows, int elem_cols,
                        bool quadrant_slots) {
    const int rows = img.height / patch;
    const int cols = img.width / patch;
    const int t = rows * cols;
    if (mask.total != t)
        throw InvalidInput("mim layout: mask covers " + std::to_string(mask.total) + " patches but lattice has " +
                           std::to_string(t));
    TokenLayout out;
    out.patch = patch;
    out.lattice_rows = elem_rows;
    out.lattice_cols = elem_cols;
    out.patches = patchify(img, patch);
    out.targets = out.patches;
    out.local_pos.resize(t);
    out.slot.resize(t);
    out.placeholder.assign(t, 0);
    out.supervised.assign(t, 0);
    DecodeRegion reg{rows, cols, {}, -1, false};
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const int tok = r * cols + c;
            out.local_pos[tok] = (r % elem_rows) * elem_cols + (c % elem_cols);
            out.slot[tok] = quadrant_slots ? (r / elem_rows) * 2 + (c / elem_cols) : 0;
            reg.tokens.push_back(tok);
        }
    const int area = patch * patch;
    for (int m : mask.masked) {
        out.placeholder[m] = 1;
        out.supervised[m] = 1;
        std::fill_n(out.patches.begin() + static_cast<size_t>(m) * area, area, 0.0f);
    }
    out.regions.push_back(std::move(reg));
    return out;
}

} // namespace

TokenLayout mim_layout(const QuadrantGrid& grid, const PatchMask& mask, int patch) {
    require_divisible(Image(grid.quad_h, grid.quad_w), patch);
    return grid_layout(grid.pixels, mask, patch, grid.quad_h / patch, grid.quad_w / patch, true);
}

TokenLayout single_image_mim_layout(const Image& img, const PatchMask& mask, int patch) {
    require_divisible(img, patch);
    return grid_layout(img, mask, patch, img.height / patch, img.width / patch, false);
}

void dump_grid_debug(const QuadrantGrid& grid, const PatchMask& mask, int patch, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_png16(dir / "grid.png", grid.pixels);
    Image overlay = grid.pixels;
    const int cols = grid.pixels.width / patch;
    for (int m : mask.masked) {
        const int pr = m / cols;
        const int pc = m % cols;
        for (int y = 0; y < patch; ++y)
            for (int x = 0; x < patch; ++x)
                overlay.at(pr * patch + y, pc * patch + x) = ((x + y) % 4 < 2) ? 1.0f : 0.0f;
    }
    write_png16(dir / "mask_overlay.png", overlay);
}

} // namespace medgen
