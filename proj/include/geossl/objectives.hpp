#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "geossl/model.hpp"

namespace geossl {

// Per-dimension z-score statistics for the 28 raw signature channels.
// Computed once from training data, then frozen: they are plain data, never
// graph nodes, so no gradient can reach them.
struct NormStats {
    std::array<double, kSignatureDim> mu{};
    std::array<double, kSignatureDim> sigma{};
    double eps = 1e-6;
    bool calibrated = false;
    int64_t token_count_observed = 0;
};

// Streaming per-dimension mean/std accumulator (double precision, population
// convention). Feed active-cell signature rows batch by batch, then finish().
class NormCalibrator {
public:
    void add_rows(const float* rows, int n);
    void add(const TokenizerInput& in) { add_rows(in.signatures.data(), in.active_count()); }
    void add(const GeoSignatureSet& set);
    int64_t count() const { return count_; }
    NormStats finish() const;  // throws if no tokens were observed

private:
    std::array<double, kSignatureDim> mean_{};
    std::array<double, kSignatureDim> m2_{};
    int64_t count_ = 0;
};

// (y - mu) / (sigma + eps) per channel, in place over n x 28 rows.
void normalize_rows(std::vector<float>& rows, const NormStats& stats);
void normalize_rows(std::vector<double>& rows, const NormStats& stats);

// Uniformly random floor(ratio * |active|)-subset of the active cell
// indices (at least 1 when ratio > 0), sorted ascending. Deterministic per
// seed. Requires >= 2 active cells.
std::vector<int> sample_mask(const std::vector<char>& active, double ratio, uint64_t seed);

enum class LossKind { mse, smooth_l1 };

LossKind loss_kind_from_name(const std::string& name);
std::string loss_kind_name(LossKind kind);

// Loss weights and masking/normalization switches for one pretraining step.
struct StepConfig {
    double w_r = 1.0;
    double w_c = 0.2;
    double tau_c = 0.07;
    double beta = 1.0;
    double mask_ratio = 0.5;
    LossKind loss_kind = LossKind::smooth_l1;
    bool normalize_targets = true;
};

template <typename T>
struct StepLoss {
    int total = -1;
    int recon = -1;
    int contrast = -1;
    std::vector<int> mask_rows;  // global (part*T + cell) rows of the clean view
};

// Builds the full training-step graph: the clean and augmented views are
// concatenated along the batch axis and run through ONE model forward; the
// reconstruction head predicts the (normalized) raw signatures at masked
// positions of the clean view only, and the symmetric InfoNCE couples the
// two views' pooled unit embeddings. Total = w_r * recon + w_c * contrast.
template <typename T>
StepLoss<T> pretrain_step_loss(Graph<T>& g, ModelForward<T>& model, const ModelConfig& cfg,
                               const std::vector<TokenizerInput>& clean,
                               const std::vector<TokenizerInput>& aug, const NormStats& stats,
                               const StepConfig& sc, uint64_t mask_seed) {
    const int B = static_cast<int>(clean.size());
    if (B < 1 || aug.size() != clean.size()) {
        throw std::runtime_error("pretrain_step_loss: need matching clean/augmented views, got " +
                                 std::to_string(clean.size()) + "/" + std::to_string(aug.size()));
    }
    const int Tn = cfg.T();

    std::vector<int> token_ids;
    token_ids.reserve(2 * static_cast<size_t>(B));
    for (const auto& in : clean) token_ids.push_back(model.tokenize(in));
    for (const auto& in : aug) token_ids.push_back(model.tokenize(in));
    const int tokens = g.concat_rows(token_ids);

    std::vector<char> active_all(static_cast<size_t>(2 * B) * Tn, 0);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < Tn; ++t) {
            active_all[static_cast<size_t>(b) * Tn + t] = clean[static_cast<size_t>(b)].active[t];
            active_all[static_cast<size_t>(B + b) * Tn + t] =
                aug[static_cast<size_t>(b)].active[t];
        }
    }

    StepLoss<T> out;
    std::vector<T> targets;
    for (int b = 0; b < B; ++b) {
        const auto& in = clean[static_cast<size_t>(b)];
        const auto cells = sample_mask(in.active, sc.mask_ratio,
                                       derive_seed(mask_seed, "mask", static_cast<uint64_t>(b)));
        // cell -> compact active row, for signature lookup
        std::vector<int> active_row(static_cast<size_t>(Tn), -1);
        for (int a = 0; a < in.active_count(); ++a) {
            active_row[static_cast<size_t>(in.active_indices[static_cast<size_t>(a)])] = a;
        }
        for (const int t : cells) {
            out.mask_rows.push_back(b * Tn + t);
            const float* sig =
                in.signatures.data() + static_cast<size_t>(active_row[static_cast<size_t>(t)]) *
                                           kSignatureDim;
            for (int c = 0; c < kSignatureDim; ++c) {
                double y = sig[c];
                if (sc.normalize_targets) {
                    if (!stats.calibrated) {
                        throw std::runtime_error(
                            "pretrain_step_loss: normalization requested but stats are not "
                            "calibrated");
                    }
                    y = (y - stats.mu[static_cast<size_t>(c)]) /
                        (stats.sigma[static_cast<size_t>(c)] + stats.eps);
                }
                targets.push_back(static_cast<T>(y));
            }
        }
    }
    if (out.mask_rows.empty() && sc.w_r > 0) {
        throw std::runtime_error("pretrain_step_loss: no masked cells but w_r > 0");
    }

    auto res = model.process(tokens, 2 * B, out.mask_rows, active_all);
    if (!out.mask_rows.empty()) {
        const int pred = model.recon_head(res.tokens_out, out.mask_rows);
        out.recon = (sc.loss_kind == LossKind::smooth_l1)
                        ? g.smooth_l1_loss(pred, targets, static_cast<T>(sc.beta))
                        : g.mse_loss(pred, targets);
    } else {
        out.recon = g.scalar_constant(T(0));
    }
    const int za = g.slice_rows(res.pooled_unit, 0, B);
    const int zb = g.slice_rows(res.pooled_unit, B, B);
    out.contrast = g.info_nce(za, zb, static_cast<T>(sc.tau_c));
    out.total = g.add(g.scale(out.recon, static_cast<T>(sc.w_r)),
                      g.scale(out.contrast, static_cast<T>(sc.w_c)));
    return out;
}

}  // namespace geossl
