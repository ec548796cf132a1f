// SPDX-License-Identifier: Apache-2.0
#include "medgen/train.hpp"

#include "medgen/error.hpp"
#include "medgen/infer.hpp"
#include "medgen/log.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace medgen {

namespace fs = std::filesystem;

std::string to_string(Objective o) { return o == Objective::MIM ? "mim" : "ar"; }

Objective parse_objective(const std::string& name) {
    if (name == "mim" || name == "MIM") return Objective::MIM;
    if (name == "ar" || name == "AR") return Objective::AR;
    throw InvalidInput("unknown objective '" + name + "' (expected ar or mim)");
}

void TaskDescriptor::validate() const {
    if (scheme.has_value() != (kind == TaskKind::Segmentation))
        throw InvalidInput("task '" + name + "': a colorization scheme is required for segmentation and only there");
}

size_t sample_task(Rng& rng, const std::vector<TaskDescriptor>& tasks, double seg_weight) {
    if (tasks.empty()) throw InvalidInput("sample_task: no task descriptors");
    if (seg_weight < 0.0 || seg_weight > 1.0) throw InvalidInput("sample_task: seg_weight must lie in [0, 1]");
    std::vector<size_t> seg, rest;
    for (size_t i = 0; i < tasks.size(); ++i)
        (tasks[i].kind == TaskKind::Segmentation ? seg : rest).push_back(i);

    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::vector<size_t>* family;
    if (seg.empty() || rest.empty()) {
        static bool warned = false;
        if (!warned) {
            log_warn("only one task family present; all sampling mass goes to it");
            warned = true;
        }
        family = seg.empty() ? &rest : &seg;
        u(rng); // keep the draw count independent of the mixture
    } else {
        family = u(rng) < seg_weight ? &seg : &rest;
    }
    std::uniform_int_distribution<size_t> pick(0, family->size() - 1);
    return (*family)[pick(rng)];
}

Objective choose_objective(TaskKind kind, Rng& rng, double mim_fraction_nonseg) {
    if (kind == TaskKind::Segmentation) return Objective::AR;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    return u(rng) < mim_fraction_nonseg ? Objective::MIM : Objective::AR;
}

double lr_at(long step, long total_steps, long warmup_steps, double peak_lr, double floor_lr) {
    if (total_steps <= 0 || warmup_steps < 0 || warmup_steps > total_steps)
        throw InvalidInput("lr_at: need 0 <= warmup_steps <= total_steps and total_steps > 0");
    step = std::clamp(step, 0L, total_steps);
    if (step < warmup_steps) return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const long decay = total_steps - warmup_steps;
    if (decay == 0) return peak_lr;
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(decay);
    return floor_lr + 0.5 * (peak_lr - floor_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw InvalidInput("train config: " + m); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs) fail("need 0 <= warmup_epochs <= epochs");
    if (steps_per_epoch < 1) fail("steps_per_epoch must be >= 1");
    if (!(peak_lr > 0.0) || min_lr < 0.0 || min_lr > peak_lr) fail("need 0 <= min_lr <= peak_lr, peak_lr > 0");
    if (weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(seg_sampling_weight > 0.0 && seg_sampling_weight < 1.0)) fail("seg_sampling_weight must lie in (0, 1)");
    if (mim_fraction_nonseg < 0.0 || mim_fraction_nonseg > 1.0) fail("mim_fraction_nonseg must lie in [0, 1]");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must lie in (0, 1)");
    if (!(beta > 0.0)) fail("beta must be > 0");
    if (checkpoint_interval < 0) fail("checkpoint_interval must be >= 0");
    if (crop < 1 || resize_to < crop) fail("need 1 <= crop <= resize_to");
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) fail("data_fraction must lie in (0, 1]");
    if (!(color_lo > 0.0f && color_hi <= 1.0f && color_lo <= color_hi && color_step > 0.0f))
        fail("color pool must satisfy 0 < lo <= hi <= 1, step > 0");
    model.validate();
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
    TrainConfig c;
    c.epochs = kv.get_int("epochs", c.epochs);
    c.warmup_epochs = kv.get_int("warmup_epochs", c.warmup_epochs);
    c.steps_per_epoch = kv.get_int("steps_per_epoch", c.steps_per_epoch);
    c.peak_lr = kv.get_double("peak_lr", c.peak_lr);
    c.min_lr = kv.get_double("min_lr", c.min_lr);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.adam_beta1 = kv.get_double("adam_beta1", c.adam_beta1);
    c.adam_beta2 = kv.get_double("adam_beta2", c.adam_beta2);
    c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
    c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
    c.batch_size = kv.get_int("batch_size", c.batch_size);
    c.seg_sampling_weight = kv.get_double("seg_sampling_weight", c.seg_sampling_weight);
    c.mim_fraction_nonseg = kv.get_double("mim_fraction_nonseg", c.mim_fraction_nonseg);
    c.mask_ratio = kv.get_double("mask_ratio", c.mask_ratio);
    c.seg_objective = parse_objective(kv.get("seg_objective", to_string(c.seg_objective)));
    c.seed = static_cast<std::uint64_t>(std::stoull(kv.get("seed", std::to_string(c.seed))));
    c.beta = kv.get_double("beta", c.beta);
    c.checkpoint_interval = kv.get_int("checkpoint_interval", c.checkpoint_interval);
    c.resize_to = kv.get_int("resize_to", c.resize_to);
    c.crop = kv.get_int("crop", c.crop);
    c.scheme = parse_color_scheme(kv.get("scheme", to_string(c.scheme)));
    c.predefined_strategy =
        parse_predefined_strategy(kv.get("predefined_strategy", to_string(c.predefined_strategy)));
    c.color_lo = static_cast<float>(kv.get_double("color_lo", c.color_lo));
    c.color_hi = static_cast<float>(kv.get_double("color_hi", c.color_hi));
    c.color_step = static_cast<float>(kv.get_double("color_step", c.color_step));
    c.supervise_prompt_labels = kv.get_bool("supervise_prompt_labels", c.supervise_prompt_labels);
    c.data_fraction = kv.get_double("data_fraction", c.data_fraction);
    c.init_checkpoint = kv.get("init_checkpoint", c.init_checkpoint);

    ModelConfig& m = c.model;
    m.image_size = kv.get_int("model.image_size", m.image_size);
    m.patch_size = kv.get_int("model.patch_size", m.patch_size);
    m.embed_dim = kv.get_int("model.embed_dim", m.embed_dim);
    m.depth = kv.get_int("model.depth", m.depth);
    m.heads = kv.get_int("model.heads", m.heads);
    m.mlp_ratio = kv.get_int("model.mlp_ratio", m.mlp_ratio);
    m.decoder_channels = kv.get_int("model.decoder_channels", m.decoder_channels);
    if (kv.has("model.tap_layers")) {
        auto taps = kv.get_list("model.tap_layers");
        if (taps.size() != 4) throw InvalidInput("model.tap_layers needs exactly four block indices");
        for (int i = 0; i < 4; ++i) {
            try {
                m.tap_layers[i] = std::stoi(taps[i]);
            } catch (const std::exception&) {
                throw InvalidInput("model.tap_layers: '" + taps[i] + "' is not an integer");
            }
        }
    } else if (kv.has("model.depth")) {
        // evenly spaced taps ending at the last block
        for (int i = 0; i < 4; ++i) m.tap_layers[i] = std::max(1, m.depth * (i + 1) / 4);
    }
    return c;
}

KeyValueConfig TrainConfig::to_kv() const {
    KeyValueConfig kv;
    auto num = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    kv.set("epochs", std::to_string(epochs));
    kv.set("warmup_epochs", std::to_string(warmup_epochs));
    kv.set("steps_per_epoch", std::to_string(steps_per_epoch));
    kv.set("peak_lr", num(peak_lr));
    kv.set("min_lr", num(min_lr));
    kv.set("weight_decay", num(weight_decay));
    kv.set("adam_beta1", num(adam_beta1));
    kv.set("adam_beta2", num(adam_beta2));
    kv.set("adam_eps", num(adam_eps));
    kv.set("grad_clip", num(grad_clip));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("seg_sampling_weight", num(seg_sampling_weight));
    kv.set("mim_fraction_nonseg", num(mim_fraction_nonseg));
    kv.set("mask_ratio", num(mask_ratio));
    kv.set("seg_objective", to_string(seg_objective));
    kv.set("seed", std::to_string(seed));
    kv.set("beta", num(beta));
    kv.set("checkpoint_interval", std::to_string(checkpoint_interval));
    kv.set("resize_to", std::to_string(resize_to));
    kv.set("crop", std::to_string(crop));
    kv.set("scheme", to_string(scheme));
    kv.set("predefined_strategy", to_string(predefined_strategy));
    kv.set("color_lo", num(color_lo));
    kv.set("color_hi", num(color_hi));
    kv.set("color_step", num(color_step));
    kv.set("supervise_prompt_labels", supervise_prompt_labels ? "true" : "false");
    kv.set("data_fraction", num(data_fraction));
    if (!init_checkpoint.empty()) kv.set("init_checkpoint", init_checkpoint);
    kv.set("model.image_size", std::to_string(model.image_size));
    kv.set("model.patch_size", std::to_string(model.patch_size));
    kv.set("model.embed_dim", std::to_string(model.embed_dim));
    kv.set("model.depth", std::to_string(model.depth));
    kv.set("model.heads", std::to_string(model.heads));
    kv.set("model.mlp_ratio", std::to_string(model.mlp_ratio));
    kv.set("model.decoder_channels", std::to_string(model.decoder_channels));
    kv.set("model.tap_layers", std::to_string(model.tap_layers[0]) + "," + std::to_string(model.tap_layers[1]) +
                                   "," + std::to_string(model.tap_layers[2]) + "," +
                                   std::to_string(model.tap_layers[3]));
    return kv;
}

// ---------------------------------------------------------------------------
// AdamW

AdamW::AdamW(const std::vector<Param<float>>& params) {
    for (auto& p : params) {
        m_.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Mat<float>::Zero(p.value.rows(), p.value.cols()));
    }
}

void AdamW::step(std::vector<Param<float>>& params, double lr, const TrainConfig& cfg) {
    if (params.size() != m_.size()) throw InvalidInput("AdamW: parameter list changed size");
    ++t_;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const float step_size = static_cast<float>(lr / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    const float eps = static_cast<float>(cfg.adam_eps);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (p.decay && cfg.weight_decay > 0.0) p.value *= static_cast<float>(1.0 - lr * cfg.weight_decay);
        auto m = m_[i].array();
        auto v = v_[i].array();
        auto g = p.grad.array();
        m = static_cast<float>(b1) * m + static_cast<float>(1.0 - b1) * g;
        v = static_cast<float>(b2) * v + static_cast<float>(1.0 - b2) * g.square();
        p.value.array() -= step_size * m / ((v * inv_c2).sqrt() + eps);
    }
}

void AdamW::save_into(Checkpoint& ckpt, const std::vector<Param<float>>& params) const {
    for (size_t i = 0; i < params.size(); ++i) {
        ckpt.adam_m[params[i].name] = m_[i].cast<double>();
        ckpt.adam_v[params[i].name] = v_[i].cast<double>();
    }
    ckpt.meta["adam_t"] = t_;
}

void AdamW::load_from(const Checkpoint& ckpt, const std::vector<Param<float>>& params) {
    *this = AdamW(params);
    for (size_t i = 0; i < params.size(); ++i) {
        auto mi = ckpt.adam_m.find(params[i].name);
        auto vi = ckpt.adam_v.find(params[i].name);
        if (mi == ckpt.adam_m.end() || vi == ckpt.adam_v.end())
            throw DataError("checkpoint lacks optimizer state for '" + params[i].name + "'");
        m_[i] = mi->second.cast<float>();
        v_[i] = vi->second.cast<float>();
    }
    t_ = ckpt.meta.value("adam_t", 0L);
}

// ---------------------------------------------------------------------------
// train_step

StepResult train_step(Model<float>& model, const Batch& batch, AdamW& opt, double lr, const TrainConfig& cfg,
                      long step) {
    if (batch.layouts.empty()) throw InvalidInput("train_step: empty batch");
    auto diag = [&](const std::string& what, double value) {
        std::ostringstream os;
        os << what << " " << value << " at step " << step << " (lr=" << lr << ", batch task=" << batch.task
           << ", objective=" << to_string(batch.objective) << ")";
        return os.str();
    };
    model.zero_grad();
    typename Model<float>::Workspace ws;
    const float inv_b = 1.0f / static_cast<float>(batch.layouts.size());
    double loss = 0.0;
    Mat<float> grad;
    for (const auto& layout : batch.layouts) {
        Mat<float> pred = model.forward(layout, ws);
        loss += masked_loss(pred, layout.targets, layout.supervised, cfg.beta, &grad);
        grad *= inv_b;
        model.backward(layout, ws, grad);
    }
    loss /= static_cast<double>(batch.layouts.size());
    if (!std::isfinite(loss)) throw NumericalError(diag("non-finite loss", loss));

    double sq = 0.0;
    for (auto& p : model.params()) sq += p.grad.cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericalError(diag("non-finite gradient norm", norm));
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
        const float s = static_cast<float>(cfg.grad_clip / (norm + 1e-12));
        for (auto& p : model.params()) p.grad *= s;
    }
    opt.step(model.params(), lr, cfg);
    return {loss, norm};
}

// ---------------------------------------------------------------------------
// Example sourcing

ClassRegistry build_registry(const std::vector<Dataset>& datasets, PredefinedStrategy strategy) {
    int max_id = 0;
    for (auto& d : datasets)
        if (d.kind == TaskKind::Segmentation) max_id = std::max(max_id, d.dataset_id);
    if (max_id == 0) return {};
    std::vector<int> sizes(static_cast<size_t>(max_id), 1);
    std::set<int> seen;
    for (auto& d : datasets) {
        if (d.kind != TaskKind::Segmentation) continue;
        if (d.dataset_id < 1) throw InvalidInput("dataset '" + d.name + "': dataset_id must be >= 1");
        if (!seen.insert(d.dataset_id).second)
            throw InvalidInput("segmentation dataset_id " + std::to_string(d.dataset_id) + " used twice");
        sizes[static_cast<size_t>(d.dataset_id - 1)] = d.class_count;
    }
    return ClassRegistry(sizes, strategy);
}

namespace {

Image to_size(const Image& img, int side) {
    return img.height == side && img.width == side ? img : resize_bilinear(img, side, side);
}

LabelMap to_size(const LabelMap& lbl, int side) {
    return lbl.height == side && lbl.width == side ? lbl : resize_nearest(lbl, side, side);
}

// Resize to resize_to, crop, then bring the crop to model resolution.
struct Cropped {
    Image img;
    std::optional<Image> target;
    std::optional<LabelMap> label;
};

Cropped crop_pair(const Image& img, const Image* target, const LabelMap* label, const TrainConfig& cfg, Rng& rng) {
    const CropWindow w = sample_crop(cfg.resize_to, cfg.crop, rng);
    const int side = cfg.model.image_size;
    Cropped out;
    out.img = to_size(apply_crop(resize_bilinear(img, cfg.resize_to, cfg.resize_to), w), side);
    if (target) out.target = to_size(apply_crop(resize_bilinear(*target, cfg.resize_to, cfg.resize_to), w), side);
    if (label) out.label = to_size(apply_crop(resize_nearest(*label, cfg.resize_to, cfg.resize_to), w), side);
    return out;
}

std::vector<int> union_classes(const LabelMap& a, const LabelMap& b) {
    std::set<int> s;
    for (int c : a.present_classes()) s.insert(c);
    for (int c : b.present_classes()) s.insert(c);
    return {s.begin(), s.end()};
}

} // namespace

ExampleSource::ExampleSource(const std::vector<Dataset>& datasets, const TrainConfig& cfg)
    : datasets_(datasets), cfg_(cfg) {
    if (datasets.empty()) throw InvalidInput("no datasets configured");
    cfg_.validate();
    registry_ = build_registry(datasets, cfg.predefined_strategy);
    pool_ = make_value_pool(cfg.color_lo, cfg.color_hi, cfg.color_step);
    for (size_t i = 0; i < datasets.size(); ++i) {
        const auto& d = datasets[i];
        if (d.train.empty()) throw InvalidInput("dataset '" + d.name + "' has no training instances");
        for (auto& v : d.train) {
            if (v.slices.empty()) throw DataError("dataset '" + d.name + "': instance " + v.instance_id + " is empty");
            if (d.kind == TaskKind::Segmentation && v.labels.size() != v.slices.size())
                throw DataError("dataset '" + d.name + "': instance " + v.instance_id + " lacks aligned labels");
            if (d.kind != TaskKind::Segmentation && v.targets.size() != v.slices.size())
                throw DataError("dataset '" + d.name + "': instance " + v.instance_id + " lacks aligned targets");
        }
        TaskDescriptor t;
        t.dataset_index = i;
        t.dataset_id = d.dataset_id;
        t.kind = d.kind;
        t.name = d.name;
        if (d.kind == TaskKind::Segmentation) t.scheme = cfg.scheme;
        t.validate();
        tasks_.push_back(t);

        // Nested subsets: a fixed seeded order truncated by the fraction.
        std::vector<int> order(d.train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(mix_seed(0x5eedULL, static_cast<std::uint64_t>(d.dataset_id) * 31 + i));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const int keep = std::max(1, static_cast<int>(std::lround(cfg.data_fraction * order.size())));
        order.resize(static_cast<size_t>(keep));
        std::sort(order.begin(), order.end());
        train_subset_.push_back(std::move(order));
    }
}

TrainingExample ExampleSource::draw(size_t task, Rng& rng) const {
    const auto& t = tasks_.at(task);
    const Dataset& d = datasets_[t.dataset_index];
    const auto& subset = train_subset_[t.dataset_index];
    std::uniform_int_distribution<size_t> pick(0, subset.size() - 1);
    const size_t a = pick(rng);
    size_t b = a;
    if (subset.size() > 1) {
        std::uniform_int_distribution<size_t> other(0, subset.size() - 2);
        b = other(rng);
        if (b >= a) ++b;
    }
    const Volume& task_vol = d.train[static_cast<size_t>(subset[a])];
    const Volume& prompt_vol = d.train[static_cast<size_t>(subset[b])];
    std::uniform_int_distribution<int> slice(0, task_vol.size() - 1);
    const int n = slice(rng);
    const int m = select_prompt_slice(n, task_vol.size(), prompt_vol.size());

    TrainingExample ex;
    if (d.kind == TaskKind::Segmentation) {
        Cropped p = crop_pair(prompt_vol.slices[m], nullptr, &prompt_vol.labels[m], cfg_, rng);
        Cropped q = crop_pair(task_vol.slices[n], nullptr, &task_vol.labels[n], cfg_, rng);
        Palette pal;
        switch (*t.scheme) {
        case ColorScheme::Random: {
            pal = random_palette(union_classes(*p.label, *q.label), rng, pool_);
            break;
        }
        case ColorScheme::Predefined:
            pal = registry_.palette_for(d.dataset_id);
            break;
        case ColorScheme::Binary: {
            auto classes = p.label->present_classes();
            if (classes.empty()) classes = q.label->present_classes();
            int c = 1;
            if (!classes.empty()) {
                std::uniform_int_distribution<size_t> pc(0, classes.size() - 1);
                c = classes[pc(rng)];
            }
            pal.scheme = ColorScheme::Binary;
            pal.mapping[c] = 1.0f;
            break;
        }
        }
        ex.prompt_img = std::move(p.img);
        ex.prompt_lbl = colorize_with(*p.label, pal);
        ex.task_img = std::move(q.img);
        ex.task_lbl = colorize_with(*q.label, pal);
        ex.palette = std::move(pal);
    } else {
        Cropped p = crop_pair(prompt_vol.slices[m], &prompt_vol.targets[m], nullptr, cfg_, rng);
        Cropped q = crop_pair(task_vol.slices[n], &task_vol.targets[n], nullptr, cfg_, rng);
        ex.prompt_img = std::move(p.img);
        ex.prompt_lbl = std::move(*p.target);
        ex.task_img = std::move(q.img);
        ex.task_lbl = std::move(*q.target);
    }
    return ex;
}

TokenLayout ExampleSource::layout(const TrainingExample& ex, Objective objective, Rng& rng) const {
    const int patch = cfg_.model.patch_size;
    if (objective == Objective::AR) {
        auto seq = build_ar_sequence({{ex.prompt_img, ex.prompt_lbl}}, ex.task_img, ex.task_lbl, patch);
        ArLayoutOptions o;
        o.supervise_prompt_labels = cfg_.supervise_prompt_labels;
        return to_token_layout(seq, o);
    }
    QuadrantGrid grid = compose_grid(ex.prompt_img, ex.prompt_lbl, ex.task_img, ex.task_lbl);
    const int side = 2 * cfg_.model.lattice();
    PatchMask mask = sample_patch_mask(side * side, cfg_.mask_ratio, rng);
    return mim_layout(grid, mask, patch);
}

Batch ExampleSource::batch(size_t task, Objective objective, Rng& rng) const {
    Batch b;
    b.task = task;
    b.objective = objective;
    for (int i = 0; i < cfg_.batch_size; ++i) b.layouts.push_back(layout(draw(task, rng), objective, rng));
    return b;
}

// ---------------------------------------------------------------------------
// fit / pretrain

nlohmann::json StepLog::to_json() const {
    return {{"step", step}, {"loss", loss}, {"lr", lr}, {"task", task}, {"dataset", dataset}, {"objective", objective}};
}

nlohmann::json run_meta(const TrainConfig& cfg, const std::vector<Dataset>& datasets, const ClassRegistry& reg) {
    nlohmann::json j;
    j["scheme"] = to_string(cfg.scheme);
    j["color_pool"] = {cfg.color_lo, cfg.color_hi, cfg.color_step};
    j["train_config"] = cfg.to_kv().values();
    j["datasets"] = nlohmann::json::array();
    for (auto& d : datasets)
        j["datasets"].push_back(
            {{"name", d.name}, {"kind", to_string(d.kind)}, {"dataset_id", d.dataset_id}, {"class_count", d.class_count}});
    if (!reg.dataset_sizes().empty()) j["registry"] = reg.to_json();
    return j;
}

namespace {

std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void restore_rng(Rng& rng, const std::string& s) {
    std::istringstream is(s);
    is >> rng;
    if (!is) throw DataError("checkpoint carries a corrupt rng state");
}

class RunFiles {
public:
    RunFiles(const fs::path& dir, bool append) : dir_(dir) {
        if (dir_.empty()) return;
        std::error_code ec;
        fs::create_directories(dir_ / "checkpoints", ec);
        if (ec) throw DataError("cannot create run directory " + dir_.string() + ": " + ec.message());
        log_.open(dir_ / "metrics.jsonl", append ? std::ios::app : std::ios::trunc);
        if (!log_) throw DataError("cannot open " + (dir_ / "metrics.jsonl").string());
    }

    void record(const StepLog& s) {
        if (log_.is_open()) log_ << s.to_json().dump() << '\n';
    }

    std::optional<fs::path> save(const Checkpoint& c, const std::string& name) {
        if (dir_.empty()) return std::nullopt;
        log_.flush();
        fs::path p = dir_ / "checkpoints" / name;
        c.save(p);
        return p;
    }

private:
    fs::path dir_;
    std::ofstream log_;
};

std::string step_name(long step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%07ld.ckpt", step);
    return buf;
}

// Shared loop: draw_batch produces the batch for one step.
template <typename DrawBatch, typename Describe>
FitResult run_loop(const TrainConfig& cfg, Model<float> model, const nlohmann::json& meta, const FitOptions& opts,
                   DrawBatch draw_batch, Describe describe) {
    AdamW opt(model.params());
    Rng rng(mix_seed(cfg.seed, 0x7a11));
    long step = 0;
    if (opts.resume) {
        Checkpoint c = Checkpoint::load(*opts.resume);
        c.apply_to(model);
        opt.load_from(c, model.params());
        step = c.step;
        if (!c.meta.contains("rng")) throw DataError("checkpoint " + opts.resume->string() + " cannot be resumed");
        restore_rng(rng, c.meta["rng"].get<std::string>());
        log_info("resuming from " + opts.resume->string() + " at step " + std::to_string(step));
    }
    RunFiles files(opts.run_dir, opts.resume.has_value());

    FitResult res{model, {}, std::nullopt, step, meta};
    auto checkpoint = [&](const std::string& name) {
        Checkpoint c = Checkpoint::from_model(res.model, step);
        opt.save_into(c, res.model.params());
        c.meta.update(meta);
        c.meta["rng"] = rng_state(rng);
        return files.save(c, name);
    };

    const long total = cfg.total_steps();
    while (step < total) {
        Batch b = draw_batch(rng);
        const double lr = lr_at(step + 1, total, cfg.warmup_steps(), cfg.peak_lr, cfg.min_lr);
        StepResult r = train_step(res.model, b, opt, lr, cfg, step + 1);
        ++step;
        StepLog s{step, r.loss, lr, {}, {}, to_string(b.objective)};
        describe(b, s);
        files.record(s);
        res.log.push_back(s);
        if (opts.on_step) opts.on_step(s);
        if (step % 50 == 0 || step == total) {
            std::ostringstream os;
            os << "step " << step << "/" << total << " loss " << r.loss << " lr " << lr;
            log_info(os.str());
        }
        if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step < total)
            res.checkpoint = checkpoint(step_name(step));
        if (opts.stop_after >= 0 && step >= opts.stop_after && step < total) {
            res.checkpoint = checkpoint(step_name(step));
            res.final_step = step;
            return res;
        }
    }
    res.checkpoint = checkpoint("last.ckpt");
    res.final_step = step;
    return res;
}

} // namespace

Model<float> initial_model(const TrainConfig& cfg) { return Model<float>(cfg.model, mix_seed(cfg.seed, 0x1417)); }

FitResult fit(const TrainConfig& cfg, const std::vector<Dataset>& datasets, const FitOptions& opts) {
    cfg.validate();
    ExampleSource source(datasets, cfg);
    Model<float> model = initial_model(cfg);
    if (!cfg.init_checkpoint.empty() && !opts.resume) {
        Checkpoint init = Checkpoint::load(cfg.init_checkpoint);
        init.apply_encoder_to(model);
        log_info("encoder initialised from " + cfg.init_checkpoint);
    }
    const auto& tasks = source.tasks();
    auto draw = [&](Rng& rng) {
        const size_t t = sample_task(rng, tasks, cfg.seg_sampling_weight);
        Objective o = choose_objective(tasks[t].kind, rng, cfg.mim_fraction_nonseg);
        if (tasks[t].kind == TaskKind::Segmentation) o = cfg.seg_objective;
        return source.batch(t, o, rng);
    };
    auto describe = [&](const Batch& b, StepLog& s) {
        s.task = to_string(tasks[b.task].kind);
        s.dataset = tasks[b.task].name;
    };
    nlohmann::json meta = run_meta(cfg, datasets, source.registry());
    meta["mode"] = "fit";
    return run_loop(cfg, std::move(model), meta, opts, draw, describe);
}

FitResult pretrain_mim(const TrainConfig& cfg, const std::vector<Image>& slices, const FitOptions& opts) {
    cfg.validate();
    if (slices.empty()) throw InvalidInput("pretraining needs at least one slice");
    Model<float> model = initial_model(cfg);
    const int side = cfg.model.image_size;
    const int lat = cfg.model.lattice();
    auto draw = [&](Rng& rng) {
        Batch b;
        b.objective = Objective::MIM;
        std::uniform_int_distribution<size_t> pick(0, slices.size() - 1);
        for (int i = 0; i < cfg.batch_size; ++i) {
            const Image& s = slices[pick(rng)];
            const CropWindow w = sample_crop(cfg.resize_to, cfg.crop, rng);
            Image img = to_size(apply_crop(resize_bilinear(s, cfg.resize_to, cfg.resize_to), w), side);
            PatchMask mask = sample_patch_mask(lat * lat, cfg.mask_ratio, rng);
            b.layouts.push_back(single_image_mim_layout(img, mask, cfg.model.patch_size));
        }
        return b;
    };
    auto describe = [](const Batch&, StepLog& s) {
        s.task = "pretrain";
        s.dataset = "unlabeled";
    };
    nlohmann::json meta;
    meta["mode"] = "pretrain";
    meta["train_config"] = cfg.to_kv().values();
    return run_loop(cfg, std::move(model), meta, opts, draw, describe);
}

double mim_reconstruction_loss(Model<float>& model, const std::vector<Image>& slices, double ratio,
                               std::uint64_t seed, double beta) {
    if (slices.empty()) throw InvalidInput("no held-out slices");
    const int side = model.config().image_size;
    const int lat = model.config().lattice();
    double total = 0.0;
    for (size_t i = 0; i < slices.size(); ++i) {
        Rng rng(mix_seed(seed, i));
        PatchMask mask = sample_patch_mask(lat * lat, ratio, rng);
        TokenLayout layout = single_image_mim_layout(to_size(slices[i], side), mask, model.config().patch_size);
        total += masked_loss(model.forward(layout), layout.targets, layout.supervised, beta);
    }
    return total / static_cast<double>(slices.size());
}

// ---------------------------------------------------------------------------
// Dataset entries

Dataset resolve_dataset(const std::string& entry, const fs::path& base_dir) {
    const std::string e = trim(entry);
    if (!e.starts_with("synthetic:")) {
        fs::path p = e;
        if (p.is_relative()) p = base_dir / p;
        return load_dataset(load_manifest(p));
    }
    auto parts = split(e, ':');
    if (parts.size() < 2 || trim(parts[1]).empty())
        throw InvalidInput("dataset entry '" + e + "': expected synthetic:<task>[:key=value...]");
    SynthSpec spec;
    spec.kind = parse_task_kind(trim(parts[1]));
    int n_train = 8, n_test = 4;
    std::string name;
    for (size_t i = 2; i < parts.size(); ++i) {
        const auto eq = parts[i].find('=');
        if (eq == std::string::npos) throw InvalidInput("dataset entry '" + e + "': '" + parts[i] + "' is not key=value");
        const std::string k = trim(parts[i].substr(0, eq));
        const std::string v = trim(parts[i].substr(eq + 1));
        bool known = true;
        try {
            if (k == "size") spec.size = std::stoi(v);
            else if (k == "classes") spec.classes = std::stoi(v);
            else if (k == "noise") spec.noise = std::stod(v);
            else if (k == "transform") spec.transform_id = std::stoi(v);
            else if (k == "holes") spec.holes = std::stoi(v);
            else if (k == "min_slices") spec.min_slices = std::stoi(v);
            else if (k == "max_slices") spec.max_slices = std::stoi(v);
            else if (k == "dataset_id") spec.dataset_id = std::stoi(v);
            else if (k == "seed") spec.seed = std::stoull(v);
            else if (k == "train") n_train = std::stoi(v);
            else if (k == "test") n_test = std::stoi(v);
            else if (k == "name") name = v;
            else known = false;
        } catch (const std::invalid_argument&) {
            throw InvalidInput("dataset entry '" + e + "': bad value for '" + k + "'");
        } catch (const std::out_of_range&) {
            throw InvalidInput("dataset entry '" + e + "': value out of range for '" + k + "'");
        }
        if (!known) throw InvalidInput("dataset entry '" + e + "': unknown key '" + k + "'");
    }
    if (n_train < 1 || n_test < 0) throw InvalidInput("dataset entry '" + e + "': need train >= 1 and test >= 0");
    spec.validate();
    Dataset d;
    d.kind = spec.kind;
    d.dataset_id = spec.dataset_id;
    d.class_count = spec.kind == TaskKind::Segmentation ? spec.classes : 1;
    d.name = name.empty() ? "synthetic-" + to_string(spec.kind) + "-" + std::to_string(spec.dataset_id) : name;
    auto vols = gen_synthetic_suite(spec, n_train + n_test, d.name + "-");
    d.train.assign(vols.begin(), vols.begin() + n_train);
    d.test.assign(vols.begin() + n_train, vols.end());
    return d;
}

} // namespace medgen
