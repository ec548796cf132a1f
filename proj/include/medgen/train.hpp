// SPDX-License-Identifier: Apache-2.0
//
// Training orchestration: task sampling, hybrid MIM / autoregressive
// objective routing, warmup-cosine AdamW, checkpointing and resume, and a
// single-image masked-modeling pretraining mode.
#pragma once

#include "medgen/canvas.hpp"
#include "medgen/config.hpp"
#include "medgen/data.hpp"
#include "medgen/net.hpp"
#include "medgen/seqbuild.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace medgen {

enum class Objective { MIM, AR };

std::string to_string(Objective o);
Objective parse_objective(const std::string& name);

struct TaskDescriptor {
    size_t dataset_index = 0;
    int dataset_id = 1;
    TaskKind kind = TaskKind::Segmentation;
    std::optional<ColorScheme> scheme; // present iff segmentation
    std::string name;

    void validate() const;
};

/// Segmentation with probability seg_weight (uniform among segmentation
/// descriptors), otherwise uniform among the rest. If only one family is
/// present all mass goes to it and a warning is logged.
size_t sample_task(Rng& rng, const std::vector<TaskDescriptor>& tasks, double seg_weight);

/// Segmentation always trains autoregressively; other kinds use MIM with
/// probability mim_fraction_nonseg.
Objective choose_objective(TaskKind kind, Rng& rng, double mim_fraction_nonseg);

/// Linear warmup from 0 to peak, then half-cosine down to floor.
double lr_at(long step, long total_steps, long warmup_steps, double peak_lr, double floor_lr = 0.0);

struct TrainConfig {
    int epochs = 100;
    int warmup_epochs = 5;
    int steps_per_epoch = 100;
    double peak_lr = 1e-3;
    double min_lr = 0.0;
    double weight_decay = 0.05;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip = 1.0; // global norm, <= 0 disables
    int batch_size = 8;
    double seg_sampling_weight = 0.5;
    double mim_fraction_nonseg = 0.9;
    double mask_ratio = 0.75;
    Objective seg_objective = Objective::AR; // MIM only for the ablation
    std::uint64_t seed = 0;
    double beta = 1.0; // smooth-L1 threshold
    int checkpoint_interval = 0; // steps; 0 = final checkpoint only
    int resize_to = 512;
    int crop = 448;
    ColorScheme scheme = ColorScheme::Random;
    PredefinedStrategy predefined_strategy = PredefinedStrategy::AsPrinted;
    float color_lo = 0.1f;
    float color_hi = 1.0f;
    float color_step = 0.05f;
    bool supervise_prompt_labels = true;
    double data_fraction = 1.0;
    std::string init_checkpoint; // encoder initialisation (pretraining output)
    ModelConfig model;

    long total_steps() const { return static_cast<long>(epochs) * steps_per_epoch; }
    long warmup_steps() const { return static_cast<long>(warmup_epochs) * steps_per_epoch; }
    /// Throws InvalidInput on violated invariants.
    void validate() const;
    static TrainConfig from_kv(const KeyValueConfig& kv);
    KeyValueConfig to_kv() const;
};

class AdamW {
public:
    AdamW() = default;
    explicit AdamW(const std::vector<Param<float>>& params);

    /// Decoupled weight decay: p -= lr*wd*p for decaying params, then the
    /// bias-corrected Adam step.
    void step(std::vector<Param<float>>& params, double lr, const TrainConfig& cfg);

    long steps() const { return t_; }
    void save_into(Checkpoint& ckpt, const std::vector<Param<float>>& params) const;
    void load_from(const Checkpoint& ckpt, const std::vector<Param<float>>& params);

private:
    std::vector<Mat<float>> m_, v_;
    long t_ = 0;
};

/// One homogeneous batch: a single task and objective.
struct Batch {
    size_t task = 0;
    Objective objective = Objective::AR;
    std::vector<TokenLayout> layouts;
};

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
};

/// Forward/backward over the batch (mean loss), gradient clipping, one AdamW
/// update. Throws NumericalError with step/lr/batch diagnostics if the loss
/// or gradient is not finite.
StepResult train_step(Model<float>& model, const Batch& batch, AdamW& opt, double lr, const TrainConfig& cfg,
                      long step = 0);

/// The four images of one in-context training example at model resolution.
struct TrainingExample {
    Image prompt_img, prompt_lbl, task_img, task_lbl;
    std::optional<Palette> palette;
};

/// Draws examples from in-memory datasets: random task instance and slice,
/// a different training instance as prompt at the matched slice position,
/// random crop, then colorization under the configured scheme.
class ExampleSource {
public:
    ExampleSource(const std::vector<Dataset>& datasets, const TrainConfig& cfg);

    const std::vector<TaskDescriptor>& tasks() const { return tasks_; }
    const ClassRegistry& registry() const { return registry_; }

    TrainingExample draw(size_t task, Rng& rng) const;
    TokenLayout layout(const TrainingExample& ex, Objective objective, Rng& rng) const;
    Batch batch(size_t task, Objective objective, Rng& rng) const;

private:
    std::vector<Dataset> datasets_;
    TrainConfig cfg_;
    std::vector<TaskDescriptor> tasks_;
    std::vector<std::vector<int>> train_subset_; // per dataset, indices of used train volumes
    ClassRegistry registry_;
    std::vector<float> pool_;
};

/// Registry over the segmentation datasets, indexed by dataset_id.
ClassRegistry build_registry(const std::vector<Dataset>& datasets, PredefinedStrategy strategy);

struct StepLog {
    long step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::string task;
    std::string dataset;
    std::string objective;

    nlohmann::json to_json() const;
};

struct FitOptions {
    std::filesystem::path run_dir;        // empty: keep everything in memory
    std::optional<std::filesystem::path> resume;
    long stop_after = -1;                 // stop early (simulates interruption)
    std::function<void(const StepLog&)> on_step;
};

struct FitResult {
    Model<float> model;
    std::vector<StepLog> log;
    std::optional<std::filesystem::path> checkpoint;
    long final_step = 0;
    nlohmann::json meta;
};

/// Freshly initialised model for a run (seeded from cfg.seed).
Model<float> initial_model(const TrainConfig& cfg);

/// Full training loop. Writes run_dir/metrics.jsonl and run_dir/checkpoints/.
FitResult fit(const TrainConfig& cfg, const std::vector<Dataset>& datasets, const FitOptions& opts = {});

/// Mask-and-reconstruct on lone slices (no prompts); the resulting
/// checkpoint initialises fit through TrainConfig::init_checkpoint.
FitResult pretrain_mim(const TrainConfig& cfg, const std::vector<Image>& slices, const FitOptions& opts = {});

/// Mean masked reconstruction loss over slices with seeded masks.
double mim_reconstruction_loss(Model<float>& model, const std::vector<Image>& slices, double ratio,
                               std::uint64_t seed, double beta = 1.0);

/// Resolves one `datasets` entry: a manifest path, or
/// `synthetic:<task>[:key=value...]` generated in memory.
Dataset resolve_dataset(const std::string& entry, const std::filesystem::path& base_dir);

/// Metadata embedded in checkpoints so inference can rebuild palettes.
nlohmann::json run_meta(const TrainConfig& cfg, const std::vector<Dataset>& datasets, const ClassRegistry& reg);

} // namespace medgen
