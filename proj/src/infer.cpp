// SPDX-License-Identifier: Apache-2.0
#include "medgen/infer.hpp"

#include "medgen/error.hpp"
#include "medgen/png_io.hpp"
#include "medgen/seqbuild.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

namespace medgen {

namespace fs = std::filesystem;

std::string to_string(InferMode m) { return m == InferMode::AR ? "ar" : "mim"; }

InferMode parse_infer_mode(const std::string& name) {
    if (name == "ar" || name == "AR") return InferMode::AR;
    if (name == "mim" || name == "MIM") return InferMode::MIM;
    throw InvalidInput("unknown inference mode '" + name + "' (expected ar or mim)");
}

int select_prompt_slice(int n, int n_test, int n_train) {
    if (n_test <= 0) throw InvalidInput("select_prompt_slice: test volume has no slices");
    if (n_train <= 0) throw InvalidInput("select_prompt_slice: prompt volume has no slices");
    const long long idx = static_cast<long long>(n) * n_train / n_test;
    return static_cast<int>(std::clamp<long long>(idx, 0, n_train - 1));
}

namespace {

Image to_side(const Image& img, int side) {
    return img.height == side && img.width == side ? img : resize_bilinear(img, side, side);
}

// Gathers a region's predicted patches into an image.
Image region_image(const Mat<float>& pred, const DecodeRegion& reg, int patch) {
    const int area = patch * patch;
    std::vector<float> flat(reg.tokens.size() * static_cast<size_t>(area));
    for (size_t i = 0; i < reg.tokens.size(); ++i)
        std::copy_n(pred.row(reg.tokens[i]).data(), area, flat.begin() + static_cast<long>(i) * area);
    return unpatchify(flat, reg.rows, reg.cols, patch);
}

std::vector<int> classes_of(const std::vector<LabelMap>& labels) {
    std::set<int> s;
    for (auto& l : labels)
        for (int c : l.present_classes()) s.insert(c);
    return {s.begin(), s.end()};
}

Palette restrict(const Palette& p, const std::vector<int>& classes) {
    Palette out = p;
    out.mapping.clear();
    for (int c : classes) {
        auto it = p.mapping.find(c);
        if (it != p.mapping.end()) out.mapping.insert(*it);
    }
    return out;
}

} // namespace

Image predict(Model<float>& model, const Image& prompt_img, const Image& prompt_canvas, const Image& task_img,
              InferMode mode) {
    if (!prompt_img.same_shape(prompt_canvas))
        throw InvalidInput("predict: prompt image and prompt canvas differ in shape");
    if (task_img.size() == 0 || prompt_img.size() == 0) throw InvalidInput("predict: empty input image");
    const ModelConfig& cfg = model.config();
    const int side = cfg.image_size;
    const int patch = cfg.patch_size;
    const Image pi = to_side(prompt_img, side), pc = to_side(prompt_canvas, side), ti = to_side(task_img, side);

    Image out;
    if (mode == InferMode::AR) {
        auto seq = build_ar_sequence({{pi, pc}}, ti, std::nullopt, patch);
        ArLayoutOptions o;
        o.supervise_prompt_labels = false;
        TokenLayout layout = to_token_layout(seq, o);
        Mat<float> pred = model.forward(layout);
        out = region_image(pred, layout.regions[static_cast<size_t>(task_label_region(layout))], patch);
    } else {
        QuadrantGrid grid = compose_grid(pi, pc, ti, Image(side, side, 0.0f));
        const int lat = cfg.lattice();
        TokenLayout layout = mim_layout(grid, lower_right_mask(2 * lat, 2 * lat), patch);
        Mat<float> pred = model.forward(layout);
        QuadrantGrid done{region_image(pred, layout.regions.front(), patch), side, side};
        out = done.extract(Quadrant::LowerRight);
    }
    for (float& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
    if (!out.same_shape(task_img)) out = resize_bilinear(out, task_img.height, task_img.width);
    return out;
}

LabelMap merge_binary_masks(const std::vector<std::pair<int, LabelMap>>& masks, int height, int width) {
    LabelMap out(height, width);
    auto sorted = masks;
    std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.first < b.first; });
    for (auto it = sorted.rbegin(); it != sorted.rend(); ++it) {
        const LabelMap& m = it->second;
        if (m.height != height || m.width != width) throw InvalidInput("merge_binary_masks: mask shape mismatch");
        for (size_t i = 0; i < m.ids.size(); ++i)
            if (m.ids[i] != 0) out.ids[i] = it->first; // lower ids overwrite later
    }
    return out;
}

VolumePrediction predict_volume(Model<float>& model, TaskKind kind, const Volume& test_vol, const Volume& train_vol,
                                const PredictOptions& opts) {
    const int n_te = test_vol.size();
    const int n_tr = train_vol.size();
    if (n_te == 0) throw InvalidInput("predict_volume: test volume " + test_vol.instance_id + " has no slices");
    if (n_tr == 0) throw InvalidInput("predict_volume: prompt volume " + train_vol.instance_id + " has no slices");
    VolumePrediction out;
    out.instance_id = test_vol.instance_id;
    out.prompt_instance_id = train_vol.instance_id;
    out.scheme = opts.scheme;

    if (kind != TaskKind::Segmentation) {
        if (static_cast<int>(train_vol.targets.size()) != n_tr)
            throw InvalidInput("predict_volume: prompt volume " + train_vol.instance_id + " lacks targets");
        for (int n = 0; n < n_te; ++n) {
            const int m = select_prompt_slice(n, n_te, n_tr);
            out.canvases.push_back(predict(model, train_vol.slices[m], train_vol.targets[m], test_vol.slices[n], opts.mode));
        }
        out.images = out.canvases;
        return out;
    }

    if (static_cast<int>(train_vol.labels.size()) != n_tr)
        throw InvalidInput("predict_volume: prompt volume " + train_vol.instance_id + " lacks labels");
    const LabelMap& ref = train_vol.labels.front();
    const std::vector<int> classes = classes_of(train_vol.labels);

    Palette pal;
    switch (opts.scheme) {
    case ColorScheme::Random: {
        Rng rng(opts.seed);
        pal = random_palette(classes, rng, opts.pool);
        break;
    }
    case ColorScheme::Predefined:
        if (!opts.registry) throw InvalidInput("predict_volume: predefined scheme needs a class registry");
        pal = opts.registry->palette_for(ref.dataset_id);
        break;
    case ColorScheme::Binary:
        pal.scheme = ColorScheme::Binary;
        for (int c : classes) pal.mapping[c] = 1.0f;
        break;
    }
    out.palette = pal;

    for (int n = 0; n < n_te; ++n) {
        const int m = select_prompt_slice(n, n_te, n_tr);
        const LabelMap& prompt_lbl = train_vol.labels[m];
        const Image& task = test_vol.slices[n];
        LabelMap decoded(task.height, task.width, ref.dataset_id, ref.class_count);
        const std::vector<int> present = prompt_lbl.present_classes();
        if (opts.scheme == ColorScheme::Binary) {
            std::vector<std::pair<int, LabelMap>> masks;
            Image first(task.height, task.width, 0.0f);
            for (int c : present) {
                Palette one{ColorScheme::Binary, {{c, 1.0f}}, 0};
                Image canvas = predict(model, train_vol.slices[m], colorize_with(prompt_lbl, one), task, opts.mode);
                if (masks.empty()) first = canvas;
                masks.emplace_back(c, decode_canvas(canvas, one));
            }
            decoded = merge_binary_masks(masks, task.height, task.width);
            out.canvases.push_back(std::move(first));
        } else {
            Image canvas = predict(model, train_vol.slices[m], colorize_with(prompt_lbl, pal), task, opts.mode);
            decoded = decode_canvas(canvas, restrict(pal, present));
            out.canvases.push_back(std::move(canvas));
        }
        decoded.dataset_id = ref.dataset_id;
        decoded.class_count = ref.class_count;
        out.labels.push_back(std::move(decoded));
    }
    return out;
}

void write_prediction(const VolumePrediction& pred, const fs::path& dir) {
    const fs::path vdir = dir / pred.instance_id;
    std::error_code ec;
    fs::create_directories(vdir, ec);
    if (ec) throw DataError("cannot create " + vdir.string() + ": " + ec.message());
    char name[32];
    for (size_t i = 0; i < pred.canvases.size(); ++i) {
        std::snprintf(name, sizeof name, "canvas_%03zu.png", i);
        write_png16(vdir / name, pred.canvases[i]);
    }
    for (size_t i = 0; i < pred.labels.size(); ++i) {
        std::snprintf(name, sizeof name, "label_%03zu.png", i);
        write_label_png(vdir / name, pred.labels[i]);
    }
    auto write_json = [&](const fs::path& p, const nlohmann::json& j) {
        std::ofstream os(p);
        if (!os) throw DataError("cannot write " + p.string());
        os << j.dump(2) << '\n';
    };
    if (pred.palette) write_json(vdir / "palette.json", pred.palette->to_json());
    write_json(vdir / "manifest.json", {{"instance_id", pred.instance_id},
                                        {"prompt_instance_id", pred.prompt_instance_id},
                                        {"slice_count", pred.canvases.size()},
                                        {"scheme", pred.palette ? to_string(pred.scheme) : "none"}});
}

MetricReport evaluate_dataset(Model<float>& model, const Dataset& ds, const EvalOptions& opts) {
    if (ds.train.empty()) throw InvalidInput("dataset '" + ds.name + "' has no training instance to prompt from");
    if (ds.test.empty()) throw InvalidInput("dataset '" + ds.name + "' has no test instances");
    Rng rng(opts.prompt_seed);
    std::uniform_int_distribution<size_t> pick(0, ds.train.size() - 1);
    const Volume& prompt = ds.train[pick(rng)];

    std::vector<LabelMap> pred_lbl, gt_lbl;
    std::vector<Image> pred_img, gt_img;
    size_t volumes = 0;
    for (const Volume& v : ds.test) {
        if (opts.max_volumes >= 0 && static_cast<int>(volumes) >= opts.max_volumes) break;
        PredictOptions po = opts.predict;
        po.seed = mix_seed(opts.predict.seed, volumes);
        VolumePrediction p = predict_volume(model, ds.kind, v, prompt, po);
        if (opts.output_dir) write_prediction(p, *opts.output_dir);
        if (ds.kind == TaskKind::Segmentation) {
            if (v.labels.size() != v.slices.size())
                throw DataError("dataset '" + ds.name + "': test instance " + v.instance_id + " lacks labels");
            pred_lbl.insert(pred_lbl.end(), p.labels.begin(), p.labels.end());
            gt_lbl.insert(gt_lbl.end(), v.labels.begin(), v.labels.end());
        } else {
            if (v.targets.size() != v.slices.size())
                throw DataError("dataset '" + ds.name + "': test instance " + v.instance_id + " lacks targets");
            pred_img.insert(pred_img.end(), p.images.begin(), p.images.end());
            gt_img.insert(gt_img.end(), v.targets.begin(), v.targets.end());
        }
        ++volumes;
    }
    MetricReport r;
    if (ds.kind == TaskKind::Segmentation) {
        std::vector<int> ids;
        for (int c = 1; c <= ds.class_count; ++c) ids.push_back(c);
        r = segmentation_report(pred_lbl, gt_lbl, ids);
    } else {
        r = generation_report(pred_img, gt_img);
    }
    r.dataset = ds.name;
    r.task_kind = to_string(ds.kind);
    r.volumes = static_cast<int>(volumes);
    return r;
}

} // namespace medgen
