// SPDX-License-Identifier: Apache-2.0
#include "medgen/data.hpp"

#include "medgen/error.hpp"
#include "medgen/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace fs = std::filesystem;

namespace medgen {

std::string to_string(TaskKind k) {
    switch (k) {
    case TaskKind::Segmentation: return "segmentation";
    case TaskKind::Synthesis: return "synthesis";
    case TaskKind::Inpainting: return "inpainting";
    case TaskKind::Denoising: return "denoising";
    }
    return "segmentation";
}

TaskKind parse_task_kind(const std::string& name) {
    if (name == "segmentation" || name == "seg") return TaskKind::Segmentation;
    if (name == "synthesis" || name == "synth") return TaskKind::Synthesis;
    if (name == "inpainting" || name == "inpaint") return TaskKind::Inpainting;
    if (name == "denoising" || name == "denoise") return TaskKind::Denoising;
    throw InvalidInput("unknown task '" + name + "' (expected seg|synth|inpaint|denoise)");
}

Slice ct_window(std::span<const float> raw, int height, int width, float lo, float hi) {
    if (!(hi > lo)) throw InvalidInput("ct_window: hi must exceed lo");
    if (raw.size() != static_cast<size_t>(height) * width) throw InvalidInput("ct_window: buffer/shape mismatch");
    Slice out(height, width);
    const float span = hi - lo;
    for (size_t i = 0; i < raw.size(); ++i) out.pixels[i] = (std::clamp(raw[i], lo, hi) - lo) / span;
    return out;
}

void minmax_normalize(std::vector<Slice>& slices) {
    float lo = std::numeric_limits<float>::max();
    float hi = std::numeric_limits<float>::lowest();
    for (auto& s : slices)
        for (float v : s.pixels) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const float span = hi > lo ? hi - lo : 1.0f;
    for (auto& s : slices)
        for (float& v : s.pixels) v = (v - lo) / span;
}

Image resize_bilinear(const Image& img, int height, int width) {
    if (img.height == height && img.width == width) return img;
    Image out(height, width);
    const double sy = static_cast<double>(img.height) / height;
    const double sx = static_cast<double>(img.width) / width;
    for (int r = 0; r < height; ++r) {
        const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
        const int y0 = static_cast<int>(y);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double fy = y - y0;
        for (int c = 0; c < width; ++c) {
            const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
            const int x0 = static_cast<int>(x);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double fx = x - x0;
            const double top = img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx;
            const double bot = img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx;
            out.at(r, c) = static_cast<float>(top * (1 - fy) + bot * fy);
        }
    }
    return out;
}

LabelMap resize_nearest(const LabelMap& label, int height, int width) {
    if (label.height == height && label.width == width) return label;
    LabelMap out(height, width, label.dataset_id, label.class_count);
    for (int r = 0; r < height; ++r) {
        const int y = std::min(label.height - 1, static_cast<int>((r + 0.5) * label.height / height));
        for (int c = 0; c < width; ++c) {
            const int x = std::min(label.width - 1, static_cast<int>((c + 0.5) * label.width / width));
            out.at(r, c) = label.at(y, x);
        }
    }
    return out;
}

CropWindow sample_crop(int resize_to, int crop, Rng& rng) {
    if (crop > resize_to || crop < 1) throw InvalidInput("resize_crop: crop must be in [1, resize_to]");
    std::uniform_int_distribution<int> off(0, resize_to - crop);
    CropWindow w{resize_to, crop, 0, 0};
    w.top = off(rng);
    w.left = off(rng);
    return w;
}

Image apply_crop(const Image& img, const CropWindow& w) {
    Image big = resize_bilinear(img, w.resize, w.resize);
    if (w.crop == w.resize) return big;
    Image out(w.crop, w.crop);
    for (int r = 0; r < w.crop; ++r)
        for (int c = 0; c < w.crop; ++c) out.at(r, c) = big.at(w.top + r, w.left + c);
    return out;
}

LabelMap apply_crop(const LabelMap& label, const CropWindow& w) {
    LabelMap big = resize_nearest(label, w.resize, w.resize);
    if (w.crop == w.resize) return big;
    LabelMap out(w.crop, w.crop, label.dataset_id, label.class_count);
    for (int r = 0; r < w.crop; ++r)
        for (int c = 0; c < w.crop; ++c) out.at(r, c) = big.at(w.top + r, w.left + c);
    return out;
}

std::pair<Slice, std::optional<LabelMap>> resize_crop(const Slice& img, int resize_to, int crop, Rng& rng,
                                                      const std::optional<LabelMap>& paired) {
    const CropWindow w = sample_crop(resize_to, crop, rng);
    std::optional<LabelMap> lbl;
    if (paired) lbl = apply_crop(*paired, w);
    return {apply_crop(img, w), std::move(lbl)};
}

void SynthSpec::validate() const {
    if (size < 16) throw InvalidInput("synthetic spec: size must be >= 16");
    if (min_slices < 1 || max_slices < min_slices) throw InvalidInput("synthetic spec: bad slice range");
    if (kind == TaskKind::Segmentation) {
        if (classes < 1) throw InvalidInput("synthetic spec: classes must be >= 1");
        const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(classes))));
        if (size / grid < 10)
            throw InvalidInput("synthetic spec: " + std::to_string(classes) + " classes do not fit in a " +
                               std::to_string(size) + "px image (need >= 10px per class cell)");
    }
    if (kind == TaskKind::Denoising && !(noise > 0.0 && noise <= 0.5))
        throw InvalidInput("synthetic spec: noise must be in (0, 0.5]");
    if (kind == TaskKind::Inpainting && (holes < 1 || hole_min < 1 || hole_max < hole_min || hole_max > size / 2))
        throw InvalidInput("synthetic spec: bad hole geometry");
    if (kind == TaskKind::Synthesis && (transform_id < 0 || transform_id > 1))
        throw InvalidInput("synthetic spec: transform_id must be 0 or 1");
}

float synthesis_remap(float x, int transform_id) {
    // gamma then contrast stretch; variant 1 additionally inverts
    const float y = std::clamp(1.6f * std::pow(std::max(x, 0.0f), 0.6f) - 0.45f, 0.0f, 1.0f);
    return transform_id == 1 ? 1.0f - y : y;
}

namespace {

struct ShapeTrack {
    int cls;
    bool ellipse;
    float level;
    float cx, cy, dx, dy; // center at mid-volume and drift over the volume
    float radius, aspect, angle;
    float zc, hz;         // extent along the volume in normalized units
};

// Smooth low-contrast background shared by all synthetic kinds.
struct Backdrop {
    float fy1, fx1, ph1, fy2, fx2, ph2;
};

float backdrop_at(const Backdrop& b, int r, int c, float u) {
    return std::sin(b.fy1 * r + b.fx1 * c + b.ph1 + 1.5f * u) * 0.5f +
           std::sin(b.fy2 * r - b.fx2 * c + b.ph2 - 1.1f * u) * 0.5f;
}

Volume gen_segmentation(const SynthSpec& s, Rng& rng, const std::string& id) {
    std::uniform_real_distribution<float> uni(0.0f, 1.0f);
    std::uniform_int_distribution<int> slices(s.min_slices, s.max_slices);
    const int n = slices(rng);
    const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(s.classes))));
    const float cell = static_cast<float>(s.size) / grid;

    std::vector<int> cells(grid * grid);
    for (int i = 0; i < grid * grid; ++i) cells[i] = i;
    std::shuffle(cells.begin(), cells.end(), rng);

    std::vector<ShapeTrack> tracks;
    for (int c = 1; c <= s.classes; ++c) {
        ShapeTrack t{};
        t.cls = c;
        // appearance is fixed per (dataset, class): intensity band and shape family
        const int slot = (c - 1 + (s.dataset_id - 1)) % s.classes;
        t.level = s.classes == 1 ? 0.8f : 0.4f + 0.5f * static_cast<float>(slot) / static_cast<float>(s.classes - 1);
        t.ellipse = (slot % 2) == 0;
        const int cell_id = cells[c - 1];
        const float half = cell / 2.0f;
        const float max_r = half - 1.5f;
        t.radius = max_r * (0.65f + 0.35f * uni(rng));
        t.aspect = 0.7f + 0.3f * uni(rng);
        t.angle = std::numbers::pi_v<float> * uni(rng);
        const float slack = std::max(0.0f, half - t.radius - 1.0f);
        t.cx = (cell_id % grid) * cell + half + (uni(rng) - 0.5f) * slack;
        t.cy = (cell_id / grid) * cell + half + (uni(rng) - 0.5f) * slack;
        t.dx = (uni(rng) - 0.5f) * slack;
        t.dy = (uni(rng) - 0.5f) * slack;
        t.zc = 0.4f + 0.2f * uni(rng);
        t.hz = 0.45f + 0.2f * uni(rng);
        tracks.push_back(t);
    }
    const Backdrop bg{0.2f + 0.3f * uni(rng), 0.2f + 0.3f * uni(rng), 6.28f * uni(rng),
                      0.1f + 0.3f * uni(rng), 0.1f + 0.3f * uni(rng), 6.28f * uni(rng)};
    const float tex_phase = 6.28f * uni(rng);

    Volume v;
    v.instance_id = id;
    for (int z = 0; z < n; ++z) {
        const float u = n > 1 ? static_cast<float>(z) / static_cast<float>(n - 1) : 0.5f;
        Slice img(s.size, s.size);
        LabelMap lbl(s.size, s.size, s.dataset_id, s.classes);
        for (int r = 0; r < s.size; ++r)
            for (int c = 0; c < s.size; ++c) img.at(r, c) = 0.14f + 0.05f * backdrop_at(bg, r, c, u);
        for (auto& t : tracks) {
            const float dz = (u - t.zc) / t.hz;
            const float scale = dz * dz < 1.0f ? std::sqrt(1.0f - dz * dz) : 0.0f;
            // mid-volume slices always show every class
            const float rad = std::max(scale, std::fabs(u - 0.5f) < 0.15f ? 0.5f : 0.0f) * t.radius;
            if (rad < 1.5f) continue;
            const float cx = t.cx + t.dx * (u - 0.5f);
            const float cy = t.cy + t.dy * (u - 0.5f);
            const float ca = std::cos(t.angle);
            const float sa = std::sin(t.angle);
            for (int r = 0; r < s.size; ++r)
                for (int c = 0; c < s.size; ++c) {
                    const float px = c + 0.5f - cx;
                    const float py = r + 0.5f - cy;
                    bool inside;
                    if (t.ellipse) {
                        const float a = (px * ca + py * sa) / rad;
                        const float b = (-px * sa + py * ca) / (rad * t.aspect);
                        inside = a * a + b * b <= 1.0f;
                    } else {
                        inside = std::fabs(px) <= rad && std::fabs(py) <= rad * t.aspect;
                    }
                    if (!inside) continue;
                    lbl.at(r, c) = t.cls;
                    img.at(r, c) = t.level + 0.03f * std::sin(0.9f * r + 1.3f * c + tex_phase);
                }
        }
        v.slices.push_back(std::move(img));
        v.labels.push_back(std::move(lbl));
    }
    return v;
}

struct Blob {
    float cx, cy, dx, dy, sigma, amp;
};

Volume gen_generation(const SynthSpec& s, Rng& rng, const std::string& id) {
    std::uniform_real_distribution<float> uni(0.0f, 1.0f);
    std::normal_distribution<float> gauss(0.0f, static_cast<float>(s.noise));
    std::uniform_int_distribution<int> slices(s.min_slices, s.max_slices);
    const int n = slices(rng);
    const float size = static_cast<float>(s.size);
    std::vector<Blob> blobs(3 + static_cast<int>(uni(rng) * 3.0f));
    for (auto& b : blobs) {
        b.cx = size * (0.15f + 0.7f * uni(rng));
        b.cy = size * (0.15f + 0.7f * uni(rng));
        b.dx = size * 0.2f * (uni(rng) - 0.5f);
        b.dy = size * 0.2f * (uni(rng) - 0.5f);
        b.sigma = size * (0.08f + 0.14f * uni(rng));
        b.amp = (uni(rng) < 0.5f ? -1.0f : 1.0f) * (0.1f + 0.12f * uni(rng));
    }
    const Backdrop bg{0.1f + 0.15f * uni(rng), 0.1f + 0.15f * uni(rng), 6.28f * uni(rng),
                      0.05f + 0.15f * uni(rng), 0.05f + 0.15f * uni(rng), 6.28f * uni(rng)};

    Volume v;
    v.instance_id = id;
    for (int z = 0; z < n; ++z) {
        const float u = n > 1 ? static_cast<float>(z) / static_cast<float>(n - 1) : 0.5f;
        Slice clean(s.size, s.size);
        for (int r = 0; r < s.size; ++r)
            for (int c = 0; c < s.size; ++c) {
                float val = 0.5f + 0.04f * backdrop_at(bg, r, c, u);
                for (auto& b : blobs) {
                    const float px = c + 0.5f - (b.cx + b.dx * (u - 0.5f));
                    const float py = r + 0.5f - (b.cy + b.dy * (u - 0.5f));
                    val += b.amp * std::exp(-(px * px + py * py) / (2.0f * b.sigma * b.sigma));
                }
                clean.at(r, c) = std::clamp(val, 0.25f, 0.75f);
            }
        Slice input = clean;
        Slice target = clean;
        switch (s.kind) {
        case TaskKind::Denoising:
            for (auto& p : input.pixels) p = std::clamp(p + gauss(rng), 0.0f, 1.0f);
            break;
        case TaskKind::Synthesis:
            for (auto& p : target.pixels) p = synthesis_remap(p, s.transform_id);
            break;
        case TaskKind::Inpainting: {
            std::uniform_int_distribution<int> count(1, s.holes);
            std::uniform_int_distribution<int> extent(s.hole_min, s.hole_max);
            const int holes = count(rng);
            for (int h = 0; h < holes; ++h) {
                const int hh = extent(rng);
                const int hw = extent(rng);
                std::uniform_int_distribution<int> top(0, s.size - hh);
                std::uniform_int_distribution<int> left(0, s.size - hw);
                const int r0 = top(rng);
                const int c0 = left(rng);
                for (int r = r0; r < r0 + hh; ++r)
                    for (int c = c0; c < c0 + hw; ++c) input.at(r, c) = 0.0f;
            }
            break;
        }
        case TaskKind::Segmentation: break;
        }
        v.slices.push_back(std::move(input));
        v.targets.push_back(std::move(target));
    }
    return v;
}

} // namespace

Volume gen_synthetic(const SynthSpec& spec, const std::string& instance_id) {
    spec.validate();
    Rng rng(spec.seed);
    if (spec.kind == TaskKind::Segmentation) return gen_segmentation(spec, rng, instance_id);
    return gen_generation(spec, rng, instance_id);
}

std::vector<Volume> gen_synthetic_suite(const SynthSpec& spec, int count, const std::string& prefix) {
    std::vector<Volume> out;
    for (int i = 0; i < count; ++i) {
        SynthSpec s = spec;
        s.seed = mix_seed(spec.seed, static_cast<std::uint64_t>(i));
        out.push_back(gen_synthetic(s, prefix + std::to_string(i)));
    }
    return out;
}

std::vector<DatasetManifest::SampleRef> DatasetManifest::samples() const {
    std::vector<SampleRef> out;
    for (size_t i = 0; i < instances.size(); ++i)
        for (size_t s = 0; s < instances[i].slices.size(); ++s)
            out.push_back({static_cast<int>(i), static_cast<int>(s)});
    return out;
}

Volume DatasetManifest::load_instance(int index) const {
    const auto& inst = instances.at(index);
    Volume v;
    v.instance_id = inst.instance_id;
    for (auto& s : inst.slices) v.slices.push_back(read_png16(root / s));
    if (normalization == "minmax") minmax_normalize(v.slices);
    for (size_t i = 0; i < inst.labels.size(); ++i) {
        if (task_kind == TaskKind::Segmentation)
            v.labels.push_back(read_label_png(root / inst.labels[i], dataset_id, class_count));
        else
            v.targets.push_back(read_png16(root / inst.labels[i]));
    }
    for (size_t i = 0; i < v.slices.size(); ++i) {
        if (!v.slices[i].same_shape(v.slices[0]))
            throw DataError("instance " + inst.instance_id + ": slice " + std::to_string(i) + " has a different shape");
        if (i < v.labels.size() &&
            (v.labels[i].height != v.slices[i].height || v.labels[i].width != v.slices[i].width))
            throw DataError("instance " + inst.instance_id + ": label " + std::to_string(i) + " shape mismatch");
    }
    return v;
}

std::vector<Volume> DatasetManifest::load_split(const std::string& split) const {
    std::vector<Volume> out;
    for (size_t i = 0; i < instances.size(); ++i)
        if (instances[i].split == split) out.push_back(load_instance(static_cast<int>(i)));
    return out;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json inst = nlohmann::json::array();
    for (auto& i : instances) {
        nlohmann::json j = {{"instance_id", i.instance_id}, {"split", i.split}, {"slices", i.slices}};
        if (!i.labels.empty()) j["labels"] = i.labels;
        inst.push_back(j);
    }
    return {{"format", "medgen-manifest/1"}, {"name", name},           {"modality", modality},
            {"task_kind", to_string(task_kind)}, {"dataset_id", dataset_id}, {"class_count", class_count},
            {"normalization", normalization},    {"instances", inst}};
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("manifest not found: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": invalid JSON: " + e.what());
    }
    DatasetManifest m;
    m.root = path.parent_path();
    try {
        m.name = j.value("name", path.parent_path().filename().string());
        m.modality = j.value("modality", "unknown");
        m.task_kind = parse_task_kind(j.at("task_kind").get<std::string>());
        m.dataset_id = j.value("dataset_id", 1);
        m.class_count = j.value("class_count", 1);
        m.normalization = j.value("normalization", "none");
        if (j.contains("root")) m.root = m.root / j.at("root").get<std::string>();
        for (auto& ji : j.at("instances")) {
            ManifestInstance inst;
            inst.instance_id = ji.at("instance_id").get<std::string>();
            inst.split = ji.value("split", "train");
            inst.slices = ji.at("slices").get<std::vector<std::string>>();
            if (ji.contains("labels")) inst.labels = ji.at("labels").get<std::vector<std::string>>();
            m.instances.push_back(std::move(inst));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": schema violation: " + e.what());
    } catch (const InvalidInput& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    if (m.normalization != "none" && m.normalization != "minmax")
        throw DataError(path.string() + ": normalization must be none|minmax");
    for (auto& inst : m.instances) {
        if (inst.slices.empty()) throw DataError(path.string() + ": instance " + inst.instance_id + " has no slices");
        if (!inst.labels.empty() && inst.labels.size() != inst.slices.size())
            throw DataError(path.string() + ": instance " + inst.instance_id + " lists " +
                            std::to_string(inst.slices.size()) + " slices but " + std::to_string(inst.labels.size()) +
                            " labels");
        if (inst.labels.empty() && m.task_kind == TaskKind::Segmentation)
            throw DataError(path.string() + ": segmentation instance " + inst.instance_id + " has no labels");
        for (auto* list : {&inst.slices, &inst.labels})
            for (auto& f : *list)
                if (!fs::exists(m.root / f)) throw DataError("missing file: " + (m.root / f).string());
    }
    return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path.string());
    out << m.to_json().dump(2) << '\n';
}

DatasetManifest materialize(const std::vector<Volume>& train, const std::vector<Volume>& test,
                            const DatasetManifest& header, const fs::path& dir) {
    DatasetManifest m = header;
    m.root = dir;
    m.instances.clear();
    auto emit = [&](const Volume& v, const std::string& split) {
        ManifestInstance inst{v.instance_id, split, {}, {}};
        fs::create_directories(dir / v.instance_id);
        char buf[32];
        for (int i = 0; i < v.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%03d", i);
            const std::string img = v.instance_id + "/img_" + buf + ".png";
            write_png16(dir / img, v.slices[i]);
            inst.slices.push_back(img);
            if (i < static_cast<int>(v.labels.size())) {
                const std::string lbl = v.instance_id + "/lbl_" + buf + ".png";
                write_label_png(dir / lbl, v.labels[i]);
                inst.labels.push_back(lbl);
            } else if (i < static_cast<int>(v.targets.size())) {
                const std::string tgt = v.instance_id + "/tgt_" + buf + ".png";
                write_png16(dir / tgt, v.targets[i]);
                inst.labels.push_back(tgt);
            }
        }
        m.instances.push_back(std::move(inst));
    };
    fs::create_directories(dir);
    for (auto& v : train) emit(v, "train");
    for (auto& v : test) emit(v, "test");
    write_manifest(m, dir / "manifest.json");
    return m;
}

Dataset load_dataset(const DatasetManifest& m) {
    Dataset d;
    d.name = m.name;
    d.kind = m.task_kind;
    d.dataset_id = m.dataset_id;
    d.class_count = m.class_count;
    d.train = m.load_split("train");
    d.test = m.load_split("test");
    return d;
}

} // namespace medgen
