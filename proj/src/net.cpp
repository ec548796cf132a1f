// SPDX-License-Identifier: Apache-2.0
#include "medgen/net.hpp"

#include "medgen/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>

namespace medgen {

void ModelConfig::validate() const {
    if (patch_size < 1 || image_size < patch_size || image_size % patch_size != 0)
        throw InvalidInput("model config: image_size must be a positive multiple of patch_size");
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
        throw InvalidInput("model config: embed_dim must be divisible by heads");
    if (depth < 1) throw InvalidInput("model config: depth must be >= 1");
    for (int i = 0; i < 4; ++i) {
        if (tap_layers[i] < 1 || tap_layers[i] > depth)
            throw InvalidInput("model config: tap layer " + std::to_string(tap_layers[i]) + " outside [1, depth]");
        if (i > 0 && tap_layers[i] <= tap_layers[i - 1])
            throw InvalidInput("model config: tap layers must be strictly increasing");
    }
    if (decoder_channels < 1 || mlp_ratio < 1 || max_slots < 1)
        throw InvalidInput("model config: decoder_channels, mlp_ratio and max_slots must be positive");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"image_size", image_size}, {"patch_size", patch_size},     {"embed_dim", embed_dim},
            {"depth", depth},           {"heads", heads},               {"mlp_ratio", mlp_ratio},
            {"tap_layers", tap_layers}, {"decoder_channels", decoder_channels}, {"max_slots", max_slots}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size");
    c.patch_size = j.at("patch_size");
    c.embed_dim = j.at("embed_dim");
    c.depth = j.at("depth");
    c.heads = j.at("heads");
    c.mlp_ratio = j.at("mlp_ratio");
    c.tap_layers = j.at("tap_layers").get<std::array<int, 4>>();
    c.decoder_channels = j.at("decoder_channels");
    c.max_slots = j.at("max_slots");
    c.validate();
    return c;
}

double smooth_l1(double pred, double target, double beta) {
    const double d = pred - target;
    const double a = std::fabs(d);
    return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double pred, double target, double beta) {
    const double d = pred - target;
    if (std::fabs(d) < beta) return d / beta;
    return d > 0 ? 1.0 : -1.0;
}

template <typename T>
double masked_loss(const Mat<T>& pred, const std::vector<float>& target, const std::vector<std::uint8_t>& mask,
                   double beta, Mat<T>* grad) {
    if (!(beta > 0.0)) throw InvalidInput("masked_loss: beta must be positive");
    const Eigen::Index tokens = pred.rows();
    const Eigen::Index area = pred.cols();
    if (static_cast<Eigen::Index>(mask.size()) != tokens ||
        static_cast<Eigen::Index>(target.size()) != tokens * area)
        throw InvalidInput("masked_loss: prediction, target and mask sizes disagree");
    const auto supervised = std::count(mask.begin(), mask.end(), std::uint8_t{1});
    if (supervised == 0) throw InvalidInput("masked_loss: mask selects no patches");
    const double count = static_cast<double>(supervised) * static_cast<double>(area);
    if (grad) grad->setZero(tokens, area);
    double sum = 0.0;
    for (Eigen::Index t = 0; t < tokens; ++t) {
        if (!mask[t]) continue;
        for (Eigen::Index k = 0; k < area; ++k) {
            const double p = static_cast<double>(pred(t, k));
            const double y = target[t * area + k];
            sum += smooth_l1(p, y, beta);
            if (grad) (*grad)(t, k) = static_cast<T>(smooth_l1_grad(p, y, beta) / count);
        }
    }
    return sum / count;
}

template double masked_loss<float>(const Mat<float>&, const std::vector<float>&, const std::vector<std::uint8_t>&,
                                   double, Mat<float>*);
template double masked_loss<double>(const Mat<double>&, const std::vector<float>&, const std::vector<std::uint8_t>&,
                                    double, Mat<double>*);

namespace {

constexpr double kLnEps = 1e-6;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Vectorized forms of gelu / gelu_grad / sigmoid over whole matrices.
template <typename T>
Mat<T> gelu_mat(const Mat<T>& x) {
    const T c = static_cast<T>(0.7978845608028654);
    const auto a = x.array();
    const auto t = (c * (a + static_cast<T>(0.044715) * a.cube())).tanh();
    return (static_cast<T>(0.5) * a * (static_cast<T>(1) + t)).matrix();
}

template <typename T>
Mat<T> gelu_grad_mat(const Mat<T>& x) {
    const T c = static_cast<T>(0.7978845608028654);
    const auto a = x.array();
    const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t =
        (c * (a + static_cast<T>(0.044715) * a.cube())).tanh();
    return (static_cast<T>(0.5) * (static_cast<T>(1) + t) +
            static_cast<T>(0.5) * a * (static_cast<T>(1) - t.square()) * c *
                (static_cast<T>(1) + static_cast<T>(3 * 0.044715) * a.square()))
        .matrix();
}

template <typename T>
Mat<T> sigmoid_mat(const Mat<T>& x) {
    return (static_cast<T>(1) / (static_cast<T>(1) + (-x.array()).exp())).matrix();
}

// Normalizes rows of x into xhat; returns y = xhat * g + b.
template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>& xhat, Vec<T>& mu, Vec<T>& rs) {
    const Eigen::Index d = x.cols();
    mu = x.rowwise().mean();
    xhat = x.colwise() - mu;
    rs = (xhat.array().square().rowwise().sum() / static_cast<T>(d) + static_cast<T>(kLnEps)).rsqrt();
    xhat = xhat.array().colwise() * rs.array();
    Mat<T> y = xhat.array().rowwise() * g.row(0).array();
    y.rowwise() += b.row(0);
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const Vec<T>& rs, const Mat<T>& g, Mat<T>& dg,
                           Mat<T>& db) {
    dg.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    db.row(0) += dy.colwise().sum();
    Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
    const Vec<T> mean_d = dxhat.rowwise().mean();
    const Vec<T> mean_dx = (dxhat.array() * xhat.array()).rowwise().mean();
    Mat<T> dx = dxhat.colwise() - mean_d;
    dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
    return dx.array().colwise() * rs.array();
}

template <typename T>
Mat<T> gather_rows(const Mat<T>& src, const std::vector<int>& rows, Eigen::Index col, Eigen::Index width) {
    Mat<T> out(static_cast<Eigen::Index>(rows.size()), width);
    for (size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = src.block(rows[r], col, 1, width);
    return out;
}

} // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build();
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto fill_normal = [&](Mat<T>& m, double std) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * normal(rng));
    };
    for (auto& p : params_) {
        const auto& n = p.name;
        if (n.ends_with(".g")) {
            p.value.setOnes();
        } else if (n.ends_with(".b")) {
            p.value.setZero();
        } else if (n == "pos_local") {
            // 2D sin-cos initialization, then learned
            const int lat = cfg_.lattice();
            const int d = cfg_.embed_dim;
            const int quarter = std::max(1, d / 4);
            for (int r = 0; r < lat; ++r)
                for (int c = 0; c < lat; ++c)
                    for (int k = 0; k < d; ++k) {
                        const int band = k % quarter;
                        const double freq = 1.0 / std::pow(100.0, static_cast<double>(band) / quarter);
                        const int kind = (k / quarter) % 4;
                        const double pos = kind < 2 ? r : c;
                        p.value(r * lat + c, k) =
                            static_cast<T>(0.5 * ((kind % 2) == 0 ? std::sin(pos * freq) : std::cos(pos * freq)));
                    }
        } else if (n.starts_with("head.conv1")) {
            fill_normal(p.value, std::sqrt(2.0 / static_cast<double>(p.value.rows())));
        } else if (n.starts_with("head.conv2")) {
            fill_normal(p.value, 1.0 / std::sqrt(static_cast<double>(p.value.rows())));
        } else if (n == "patch_embed.w") {
            const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
            std::uniform_real_distribution<double> u(-limit, limit);
            for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(u(rng));
        } else {
            fill_normal(p.value, 0.02);
        }
    }
}

template <typename T>
Model<T>::~Model() = default;
template <typename T>
Model<T>::Model(const Model&) = default;
template <typename T>
Model<T>& Model<T>::operator=(const Model&) = default;
template <typename T>
Model<T>::Model(Model&&) noexcept = default;
template <typename T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;

template <typename T>
void Model<T>::build() {
    const int d = cfg_.embed_dim;
    const int area = cfg_.patch_size * cfg_.patch_size;
    const int hidden = d * cfg_.mlp_ratio;
    auto add = [&](std::string name, Eigen::Index rows, Eigen::Index cols, bool decay) {
        index_[name] = params_.size();
        params_.push_back({std::move(name), Mat<T>::Zero(rows, cols), Mat<T>::Zero(rows, cols), decay});
    };
    add("patch_embed.w", area, d, true);
    add("patch_embed.b", 1, d, false);
    add("mask_token", 1, d, false);
    add("pos_local", cfg_.lattice() * cfg_.lattice(), d, false);
    add("pos_slot", cfg_.max_slots, d, false);
    for (int i = 0; i < cfg_.depth; ++i) {
        const std::string pre = "blocks." + std::to_string(i) + ".";
        add(pre + "ln1.g", 1, d, false);
        add(pre + "ln1.b", 1, d, false);
        add(pre + "attn.qkv.w", d, 3 * d, true);
        add(pre + "attn.qkv.b", 1, 3 * d, false);
        add(pre + "attn.proj.w", d, d, true);
        add(pre + "attn.proj.b", 1, d, false);
        add(pre + "ln2.g", 1, d, false);
        add(pre + "ln2.b", 1, d, false);
        add(pre + "mlp.fc1.w", d, hidden, true);
        add(pre + "mlp.fc1.b", 1, hidden, false);
        add(pre + "mlp.fc2.w", hidden, d, true);
        add(pre + "mlp.fc2.b", 1, d, false);
    }
    for (int k = 0; k < 4; ++k) {
        add("head.tap" + std::to_string(k) + ".w", d, d, true);
        add("head.tap" + std::to_string(k) + ".b", 1, d, false);
    }
    add("head.conv1.w", 9 * d, cfg_.decoder_channels, true);
    add("head.conv1.b", 1, cfg_.decoder_channels, false);
    add("head.conv2.w", cfg_.decoder_channels, area, true);
    add("head.conv2.b", 1, area, false);
}

template <typename T>
Param<T>& Model<T>::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidInput("model has no parameter '" + name + "'");
    return params_[it->second];
}

template <typename T>
void Model<T>::zero_grad() {
    for (auto& p : params_) p.grad.setZero();
}

template <typename T>
size_t Model<T>::parameter_count() const {
    size_t n = 0;
    for (auto& p : params_) n += static_cast<size_t>(p.value.size());
    return n;
}

template <typename T>
void Model<T>::check_layout(const TokenLayout& layout) const {
    layout.validate();
    if (layout.patch != cfg_.patch_size)
        throw InvalidInput("layout patch size " + std::to_string(layout.patch) + " != model patch size " +
                           std::to_string(cfg_.patch_size));
    if (layout.lattice_rows != cfg_.lattice() || layout.lattice_cols != cfg_.lattice())
        throw InvalidInput("layout lattice " + std::to_string(layout.lattice_rows) + "x" +
                           std::to_string(layout.lattice_cols) + " does not match model lattice " +
                           std::to_string(cfg_.lattice()));
    const int positions = cfg_.lattice() * cfg_.lattice();
    for (int t = 0; t < layout.tokens(); ++t) {
        if (layout.local_pos[t] < 0 || layout.local_pos[t] >= positions)
            throw InvalidInput("layout: local position out of range");
        if (layout.slot[t] < 0 || layout.slot[t] >= cfg_.max_slots)
            throw InvalidInput("layout: slot " + std::to_string(layout.slot[t]) + " exceeds max_slots " +
                               std::to_string(cfg_.max_slots));
    }
    for (auto& r : layout.regions)
        for (int tok : r.tokens)
            if (tok < 0 || tok >= layout.tokens()) throw InvalidInput("layout: decode region token out of range");
}

template <typename T>
Mat<T> Model<T>::forward(const TokenLayout& layout) {
    Workspace ws;
    return forward(layout, ws);
}

template <typename T>
Mat<T> Model<T>::features(const TokenLayout& layout) {
    Workspace ws;
    forward(layout, ws);
    return ws.fused;
}

template <typename T>
Mat<T> Model<T>::forward(const TokenLayout& layout, Workspace& ws) {
    check_layout(layout);
    const int tokens = layout.tokens();
    const int d = cfg_.embed_dim;
    const int area = layout.patch_area();
    const int heads = cfg_.heads;
    const int dh = d / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    const int last = cfg_.tap_layers[3];

    // embedding
    Eigen::Map<const Mat<float>> patches(layout.patches.data(), tokens, area);
    Mat<T> x = patches.template cast<T>() * param("patch_embed.w").value;
    x.rowwise() += param("patch_embed.b").value.row(0);
    const auto& mask_tok = param("mask_token").value;
    const auto& pos_local = param("pos_local").value;
    const auto& pos_slot = param("pos_slot").value;
    for (int t = 0; t < tokens; ++t) {
        if (layout.placeholder[t]) x.row(t) = mask_tok.row(0);
        x.row(t) += pos_local.row(layout.local_pos[t]) + pos_slot.row(layout.slot[t]);
    }

    ws.groups.clear();
    if (layout.attention.empty()) {
        typename Workspace::AttnGroup all;
        for (int t = 0; t < tokens; ++t) all.rows.push_back(t);
        all.keys = all.rows;
        ws.groups.push_back(std::move(all));
    } else {
        std::map<std::vector<std::uint8_t>, size_t> seen;
        for (int q = 0; q < tokens; ++q) {
            const auto* row = layout.attention.data() + static_cast<size_t>(q) * tokens;
            std::vector<std::uint8_t> pattern(row, row + tokens);
            auto [it, fresh] = seen.try_emplace(std::move(pattern), ws.groups.size());
            if (fresh) {
                typename Workspace::AttnGroup g;
                for (int k = 0; k < tokens; ++k)
                    if (row[k]) g.keys.push_back(k);
                ws.groups.push_back(std::move(g));
            }
            ws.groups[it->second].rows.push_back(q);
        }
    }
    const size_t ngroups = ws.groups.size();

    ws.blocks.resize(last);
    ws.taps.clear();
    for (int i = 0; i < last; ++i) {
        auto& b = ws.blocks[i];
        const std::string pre = "blocks." + std::to_string(i) + ".";
        b.x_in = x;
        Mat<T> y1 = layer_norm(x, param(pre + "ln1.g").value, param(pre + "ln1.b").value, b.ln1, b.mu1, b.rs1);
        b.qkv = y1 * param(pre + "attn.qkv.w").value;
        b.qkv.rowwise() += param(pre + "attn.qkv.b").value.row(0);
        b.attn_cat.resize(tokens, d);
        b.probs.resize(heads * ngroups);
        for (int h = 0; h < heads; ++h)
            for (size_t gi = 0; gi < ngroups; ++gi) {
                const auto& g = ws.groups[gi];
                const Mat<T> q = gather_rows(b.qkv, g.rows, h * dh, dh);
                const Mat<T> k = gather_rows(b.qkv, g.keys, d + h * dh, dh);
                const Mat<T> v = gather_rows(b.qkv, g.keys, 2 * d + h * dh, dh);
                Mat<T>& p = b.probs[h * ngroups + gi];
                p.noalias() = (q * k.transpose()) * scale;
                for (Eigen::Index r = 0; r < p.rows(); ++r) {
                    auto row = p.row(r);
                    const T mx = row.maxCoeff();
                    row = (row.array() - mx).exp();
                    row /= row.sum();
                }
                const Mat<T> out = p * v;
                for (size_t r = 0; r < g.rows.size(); ++r)
                    b.attn_cat.block(g.rows[r], h * dh, 1, dh) = out.row(static_cast<Eigen::Index>(r));
            }
        Mat<T> a = b.attn_cat * param(pre + "attn.proj.w").value;
        a.rowwise() += param(pre + "attn.proj.b").value.row(0);
        b.x_mid = x + a;
        Mat<T> y2 = layer_norm(b.x_mid, param(pre + "ln2.g").value, param(pre + "ln2.b").value, b.ln2, b.mu2, b.rs2);
        b.h_pre = y2 * param(pre + "mlp.fc1.w").value;
        b.h_pre.rowwise() += param(pre + "mlp.fc1.b").value.row(0);
        b.h_act = gelu_mat(b.h_pre);
        x = b.x_mid + b.h_act * param(pre + "mlp.fc2.w").value;
        x.rowwise() += param(pre + "mlp.fc2.b").value.row(0);
        for (int k = 0; k < 4; ++k)
            if (cfg_.tap_layers[k] == i + 1) ws.taps.push_back(x);
    }

    ws.fused = Mat<T>::Zero(tokens, d);
    for (int k = 0; k < 4; ++k) {
        ws.fused.noalias() += ws.taps[k] * param("head.tap" + std::to_string(k) + ".w").value;
        ws.fused.rowwise() += param("head.tap" + std::to_string(k) + ".b").value.row(0);
    }

    Mat<T> pred = Mat<T>::Zero(tokens, area);
    const auto& w1 = param("head.conv1.w").value;
    const auto& b1 = param("head.conv1.b").value;
    const auto& w2 = param("head.conv2.w").value;
    const auto& b2 = param("head.conv2.b").value;
    ws.regions.resize(layout.regions.size());
    for (size_t ri = 0; ri < layout.regions.size(); ++ri) {
        const auto& reg = layout.regions[ri];
        auto& rw = ws.regions[ri];
        const int n = reg.rows * reg.cols;
        rw.cols.setZero(n, 9 * d);
        for (int r = 0; r < reg.rows; ++r)
            for (int c = 0; c < reg.cols; ++c)
                for (int ky = -1; ky <= 1; ++ky)
                    for (int kx = -1; kx <= 1; ++kx) {
                        const int rr = r + ky;
                        const int cc = c + kx;
                        if (rr < 0 || rr >= reg.rows || cc < 0 || cc >= reg.cols) continue;
                        const int slot = (ky + 1) * 3 + (kx + 1);
                        rw.cols.block(r * reg.cols + c, slot * d, 1, d) = ws.fused.row(reg.tokens[rr * reg.cols + cc]);
                    }
        rw.h_pre.noalias() = rw.cols * w1;
        rw.h_pre.rowwise() += b1.row(0);
        rw.h_act = gelu_mat(rw.h_pre);
        rw.out.noalias() = rw.h_act * w2;
        rw.out.rowwise() += b2.row(0);
        rw.out = sigmoid_mat<T>(rw.out);
        for (int k = 0; k < n; ++k) pred.row(reg.tokens[k]) = rw.out.row(k);
    }
    return pred;
}

template <typename T>
void Model<T>::backward(const TokenLayout& layout, Workspace& ws, const Mat<T>& dpred) {
    const int tokens = layout.tokens();
    const int d = cfg_.embed_dim;
    const int area = layout.patch_area();
    const int heads = cfg_.heads;
    const int dh = d / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    const int last = cfg_.tap_layers[3];
    if (dpred.rows() != tokens || dpred.cols() != area) throw InvalidInput("backward: gradient shape mismatch");

    // head
    Mat<T> dfused = Mat<T>::Zero(tokens, d);
    auto& pw1 = param("head.conv1.w");
    auto& pb1 = param("head.conv1.b");
    auto& pw2 = param("head.conv2.w");
    auto& pb2 = param("head.conv2.b");
    for (size_t ri = 0; ri < layout.regions.size(); ++ri) {
        const auto& reg = layout.regions[ri];
        auto& rw = ws.regions[ri];
        const int n = reg.rows * reg.cols;
        Mat<T> dz(n, area);
        for (int k = 0; k < n; ++k) dz.row(k) = dpred.row(reg.tokens[k]);
        dz = dz.array() * rw.out.array() * (static_cast<T>(1) - rw.out.array());
        pw2.grad.noalias() += rw.h_act.transpose() * dz;
        pb2.grad.row(0) += dz.colwise().sum();
        Mat<T> dh_pre = dz * pw2.value.transpose();
        dh_pre.array() *= gelu_grad_mat(rw.h_pre).array();
        pw1.grad.noalias() += rw.cols.transpose() * dh_pre;
        pb1.grad.row(0) += dh_pre.colwise().sum();
        const Mat<T> dcols = dh_pre * pw1.value.transpose();
        for (int r = 0; r < reg.rows; ++r)
            for (int c = 0; c < reg.cols; ++c)
                for (int ky = -1; ky <= 1; ++ky)
                    for (int kx = -1; kx <= 1; ++kx) {
                        const int rr = r + ky;
                        const int cc = c + kx;
                        if (rr < 0 || rr >= reg.rows || cc < 0 || cc >= reg.cols) continue;
                        const int slot = (ky + 1) * 3 + (kx + 1);
                        dfused.row(reg.tokens[rr * reg.cols + cc]) += dcols.block(r * reg.cols + c, slot * d, 1, d);
                    }
    }

    std::vector<Mat<T>> dtaps(4);
    for (int k = 0; k < 4; ++k) {
        auto& pw = param("head.tap" + std::to_string(k) + ".w");
        auto& pb = param("head.tap" + std::to_string(k) + ".b");
        pw.grad.noalias() += ws.taps[k].transpose() * dfused;
        pb.grad.row(0) += dfused.colwise().sum();
        dtaps[k] = dfused * pw.value.transpose();
    }

    Mat<T> dx = Mat<T>::Zero(tokens, d);
    for (int i = last - 1; i >= 0; --i) {
        for (int k = 0; k < 4; ++k)
            if (cfg_.tap_layers[k] == i + 1) dx += dtaps[k];
        auto& b = ws.blocks[i];
        const std::string pre = "blocks." + std::to_string(i) + ".";

        // mlp
        auto& fc2w = param(pre + "mlp.fc2.w");
        param(pre + "mlp.fc2.b").grad.row(0) += dx.colwise().sum();
        fc2w.grad.noalias() += b.h_act.transpose() * dx;
        Mat<T> dhid = dx * fc2w.value.transpose();
        dhid.array() *= gelu_grad_mat(b.h_pre).array();
        auto& fc1w = param(pre + "mlp.fc1.w");
        auto& ln2g = param(pre + "ln2.g");
        auto& ln2b = param(pre + "ln2.b");
        Mat<T> y2 = b.ln2.array().rowwise() * ln2g.value.row(0).array();
        y2.rowwise() += ln2b.value.row(0);
        fc1w.grad.noalias() += y2.transpose() * dhid;
        param(pre + "mlp.fc1.b").grad.row(0) += dhid.colwise().sum();
        const Mat<T> dy2 = dhid * fc1w.value.transpose();
        Mat<T> dmid = dx + layer_norm_backward(dy2, b.ln2, b.rs2, ln2g.value, ln2g.grad, ln2b.grad);

        // attention
        auto& projw = param(pre + "attn.proj.w");
        projw.grad.noalias() += b.attn_cat.transpose() * dmid;
        param(pre + "attn.proj.b").grad.row(0) += dmid.colwise().sum();
        const Mat<T> dcat = dmid * projw.value.transpose();
        Mat<T> dqkv = Mat<T>::Zero(tokens, 3 * d);
        const size_t ngroups = ws.groups.size();
        for (int h = 0; h < heads; ++h)
            for (size_t gi = 0; gi < ngroups; ++gi) {
                const auto& g = ws.groups[gi];
                const Mat<T> q = gather_rows(b.qkv, g.rows, h * dh, dh);
                const Mat<T> k = gather_rows(b.qkv, g.keys, d + h * dh, dh);
                const Mat<T> v = gather_rows(b.qkv, g.keys, 2 * d + h * dh, dh);
                const Mat<T> dout = gather_rows(dcat, g.rows, h * dh, dh);
                const Mat<T>& p = b.probs[h * ngroups + gi];
                const Mat<T> dp = dout * v.transpose();
                const Mat<T> dv = p.transpose() * dout;
                const Vec<T> rowdot = (dp.array() * p.array()).rowwise().sum();
                Mat<T> ds = p.array() * (dp.colwise() - rowdot).array();
                ds *= scale;
                const Mat<T> dq = ds * k;
                const Mat<T> dk = ds.transpose() * q;
                for (size_t r = 0; r < g.rows.size(); ++r)
                    dqkv.block(g.rows[r], h * dh, 1, dh) += dq.row(static_cast<Eigen::Index>(r));
                for (size_t c = 0; c < g.keys.size(); ++c) {
                    dqkv.block(g.keys[c], d + h * dh, 1, dh) += dk.row(static_cast<Eigen::Index>(c));
                    dqkv.block(g.keys[c], 2 * d + h * dh, 1, dh) += dv.row(static_cast<Eigen::Index>(c));
                }
            }
        auto& qkvw = param(pre + "attn.qkv.w");
        auto& ln1g = param(pre + "ln1.g");
        auto& ln1b = param(pre + "ln1.b");
        Mat<T> y1 = b.ln1.array().rowwise() * ln1g.value.row(0).array();
        y1.rowwise() += ln1b.value.row(0);
        qkvw.grad.noalias() += y1.transpose() * dqkv;
        param(pre + "attn.qkv.b").grad.row(0) += dqkv.colwise().sum();
        const Mat<T> dy1 = dqkv * qkvw.value.transpose();
        dx = dmid + layer_norm_backward(dy1, b.ln1, b.rs1, ln1g.value, ln1g.grad, ln1b.grad);
    }

    // embedding
    auto& pos_local = param("pos_local");
    auto& pos_slot = param("pos_slot");
    auto& mask_tok = param("mask_token");
    for (int t = 0; t < tokens; ++t) {
        pos_local.grad.row(layout.local_pos[t]) += dx.row(t);
        pos_slot.grad.row(layout.slot[t]) += dx.row(t);
        if (layout.placeholder[t]) {
            mask_tok.grad.row(0) += dx.row(t);
            dx.row(t).setZero();
        }
    }
    Eigen::Map<const Mat<float>> patches(layout.patches.data(), tokens, area);
    param("patch_embed.w").grad.noalias() += patches.template cast<T>().transpose() * dx;
    param("patch_embed.b").grad.row(0) += dx.colwise().sum();
}

template class Model<float>;
template class Model<double>;

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'G', 'C', 'K', 'P', 'T', '\0', '\1'};

template <typename V>
void put(std::ostream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const std::string& path) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError("checkpoint truncated: " + path);
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const std::string& path) {
    const auto n = get<std::uint64_t>(is, path);
    if (n > (1ull << 32)) throw DataError("checkpoint corrupt (string length): " + path);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw DataError("checkpoint truncated: " + path);
    return s;
}

} // namespace

template <typename T>
Checkpoint Checkpoint::from_model(const Model<T>& m, std::int64_t step) {
    Checkpoint c;
    c.config = m.config();
    c.step = step;
    for (auto& p : m.params()) c.tensors[p.name] = p.value.template cast<double>();
    return c;
}

template <typename T>
void Checkpoint::apply_to(Model<T>& m) const {
    if (!(config == m.config())) throw DataError("checkpoint model config differs from the target model");
    for (auto& p : m.params()) {
        auto it = tensors.find(p.name);
        if (it == tensors.end()) throw DataError("checkpoint lacks tensor '" + p.name + "'");
        if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
            throw DataError("checkpoint tensor '" + p.name + "' has the wrong shape");
        p.value = it->second.template cast<T>();
    }
}

template <typename T>
void Checkpoint::apply_encoder_to(Model<T>& m) const {
    for (auto& p : m.params()) {
        if (p.name.starts_with("head.")) continue;
        auto it = tensors.find(p.name);
        if (it == tensors.end()) continue;
        if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
            throw DataError("pretrained tensor '" + p.name + "' has the wrong shape");
        p.value = it->second.template cast<T>();
    }
}

template Checkpoint Checkpoint::from_model<float>(const Model<float>&, std::int64_t);
template Checkpoint Checkpoint::from_model<double>(const Model<double>&, std::int64_t);
template void Checkpoint::apply_to<float>(Model<float>&) const;
template void Checkpoint::apply_to<double>(Model<double>&) const;
template void Checkpoint::apply_encoder_to<float>(Model<float>&) const;
template void Checkpoint::apply_encoder_to<double>(Model<double>&) const;

void Checkpoint::save(const std::filesystem::path& path) const {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw DataError("cannot write checkpoint: " + path.string());
        os.write(kMagic, sizeof(kMagic));
        put<std::uint32_t>(os, kFormatVersion);
        nlohmann::json head = {{"config", config.to_json()}, {"meta", meta}};
        put_string(os, head.dump());
        put<std::int64_t>(os, step);
        const std::map<std::string, Mat<double>>* groups[3] = {&tensors, &adam_m, &adam_v};
        std::uint32_t count = 0;
        for (auto* g : groups) count += static_cast<std::uint32_t>(g->size());
        put<std::uint32_t>(os, count);
        for (std::uint32_t gi = 0; gi < 3; ++gi)
            for (auto& [name, m] : *groups[gi]) {
                put_string(os, name);
                put<std::uint32_t>(os, gi);
                put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
                put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
                os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
            }
        if (!os) throw DataError("checkpoint write failed: " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    const std::string ps = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint not found: " + ps);
    char magic[sizeof(kMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError("not a checkpoint file: " + ps);
    const auto version = get<std::uint32_t>(is, ps);
    if (version != kFormatVersion)
        throw DataError("checkpoint " + ps + " has format_version " + std::to_string(version) + ", expected " +
                        std::to_string(kFormatVersion));
    Checkpoint c;
    try {
        auto head = nlohmann::json::parse(get_string(is, ps));
        c.config = ModelConfig::from_json(head.at("config"));
        c.meta = head.value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint header unreadable: " + ps + ": " + e.what());
    }
    c.step = get<std::int64_t>(is, ps);
    const auto count = get<std::uint32_t>(is, ps);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name = get_string(is, ps);
        const auto group = get<std::uint32_t>(is, ps);
        const auto rows = get<std::uint32_t>(is, ps);
        const auto cols = get<std::uint32_t>(is, ps);
        Mat<double> m(rows, cols);
        is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!is) throw DataError("checkpoint truncated: " + ps);
        if (group == 0)
            c.tensors[name] = std::move(m);
        else if (group == 1)
            c.adam_m[name] = std::move(m);
        else
            c.adam_v[name] = std::move(m);
    }
    return c;
}

} // namespace medgen
