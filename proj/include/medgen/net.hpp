// SPDX-License-Identifier: Apache-2.0
//
// Vision-transformer encoder with a two-convolution prediction head.
//
//   tokens -> patch embedding (or learned mask token) + local position +
//   slot embedding -> pre-norm transformer blocks -> four tapped block
//   outputs, each linearly projected and summed -> per-region 3x3 conv,
//   GELU, 1x1 conv to patch pixels -> sigmoid.
//
// Forward and backward are written out by hand; Model<double> exists so the
// analytic gradients can be checked against finite differences.
#pragma once

#include "medgen/seqbuild.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace medgen {

struct ModelConfig {
    int image_size = 224;      // side of one sequence element / grid quadrant
    int patch_size = 16;
    int embed_dim = 192;
    int depth = 12;
    int heads = 3;
    int mlp_ratio = 4;
    std::array<int, 4> tap_layers{3, 6, 9, 12}; // 1-based block indices
    int decoder_channels = 64;
    int max_slots = 4;         // distinct element/quadrant slots

    int lattice() const { return image_size / patch_size; }
    /// Throws InvalidInput on violated invariants.
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

/// Elementwise smooth-L1: 0.5 d^2 / beta for |d| < beta, else |d| - beta/2.
double smooth_l1(double pred, double target, double beta = 1.0);
double smooth_l1_grad(double pred, double target, double beta = 1.0);

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Param {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    bool decay = true; // weight decay applies (matrices, not biases/norms/embeddings)
};

/// Mean smooth-L1 over pixels of supervised tokens. Writes d(loss)/d(pred)
/// into grad when non-null. Throws InvalidInput for an empty mask.
template <typename T>
double masked_loss(const Mat<T>& pred, const std::vector<float>& target, const std::vector<std::uint8_t>& mask,
                   double beta, Mat<T>* grad = nullptr);

template <typename T>
class Model {
public:
    struct Workspace;

    explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0);
    ~Model();
    Model(const Model&);
    Model& operator=(const Model&);
    Model(Model&&) noexcept;
    Model& operator=(Model&&) noexcept;

    const ModelConfig& config() const { return cfg_; }

    /// Per-token pixel predictions (T x p*p) in [0,1]. Rows of tokens not
    /// covered by a decode region are zero.
    Mat<T> forward(const TokenLayout& layout);
    /// Same, keeping intermediates in ws for a following backward().
    Mat<T> forward(const TokenLayout& layout, Workspace& ws);
    /// Accumulates parameter gradients for d(loss)/d(pred).
    void backward(const TokenLayout& layout, Workspace& ws, const Mat<T>& dpred);

    /// Fused (pre-head) token features, T x embed_dim.
    Mat<T> features(const TokenLayout& layout);

    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }
    Param<T>& param(const std::string& name);
    void zero_grad();
    size_t parameter_count() const;

    /// Copies values from another model with the same configuration.
    template <typename U>
    void load_values(const Model<U>& other) {
        for (size_t i = 0; i < params_.size(); ++i) params_[i].value = other.params()[i].value.template cast<T>();
    }

private:
    void build();
    void check_layout(const TokenLayout& layout) const;

    ModelConfig cfg_;
    std::vector<Param<T>> params_;
    std::map<std::string, size_t> index_;
};

template <typename T>
struct Model<T>::Workspace {
    struct Block {
        Mat<T> x_in, ln1, qkv, attn_cat, x_mid, ln2, h_pre, h_act;
        Eigen::Matrix<T, Eigen::Dynamic, 1> mu1, rs1, mu2, rs2;
        std::vector<Mat<T>> probs; // per head and group, rows x keys
    };
    std::vector<Block> blocks;
    std::vector<Mat<T>> taps; // block outputs feeding the head
    Mat<T> fused;
    struct Region {
        Mat<T> cols, h_pre, h_act, out;
    };
    std::vector<Region> regions;
    // query rows sharing one visibility pattern, with the keys they see
    struct AttnGroup {
        std::vector<int> rows, keys;
    };
    std::vector<AttnGroup> groups;
};

/// Versioned binary checkpoint.
struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;

    ModelConfig config;
    std::map<std::string, Mat<double>> tensors;
    std::map<std::string, Mat<double>> adam_m, adam_v; // optional optimizer state
    std::int64_t step = 0;
    nlohmann::json meta = nlohmann::json::object(); // run config snapshot, registry, ...

    template <typename T>
    static Checkpoint from_model(const Model<T>& m, std::int64_t step);
    /// Throws DataError if names or shapes disagree with the model.
    template <typename T>
    void apply_to(Model<T>& m) const;
    /// Loads the encoder-side tensors only (patch embedding, positions,
    /// mask token, transformer blocks); used to initialise from pretraining.
    template <typename T>
    void apply_encoder_to(Model<T>& m) const;

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);
};

extern template class Model<float>;
extern template class Model<double>;

} // namespace medgen
