#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "geossl/trainer.hpp"

namespace geossl {

// 1 - SSE/SST where SST uses the single grand mean over every element.
// Throws on fewer than 2 elements or zero-variance targets.
double r2_masked(const std::vector<double>& pred, const std::vector<double>& target);

// Mean over pairs of ||a_i - b_i||^2 on unit embeddings (n rows of dim d).
double alignment(const std::vector<double>& za, const std::vector<double>& zb, int n, int d);

// log of the mean over all distinct ordered pairs of exp(-t * ||z_i - z_j||^2)
// on unit embeddings. Never positive; 0 when all embeddings coincide.
double uniformity(const std::vector<double>& z, int n, int d, double t = 2.0);

// Fraction of queries whose cosine nearest neighbor in the candidate pool is
// their own counterpart (row i of aug). Ties break to the lowest index.
// Embeddings of any scale; cosine is scale-invariant.
double top1_retrieval(const std::vector<double>& clean, const std::vector<double>& aug, int n,
                      int d);

// Symmetric InfoNCE value on unit embeddings, matching the training loss.
double info_nce_value(const std::vector<double>& za, const std::vector<double>& zb, int n, int d,
                      double tau);

struct DiagnosticStats {
    double l2_norm_mean = 0.0;
    double l2_norm_std = 0.0;
    double cos_mean = 0.0;
    double cos_std = 0.0;
};

// Norm statistics on the raw (pre-normalization) embeddings; cosine statistics
// on their normalized versions over all distinct pairs, or a seeded sample of
// 10^6 pairs when there are more.
DiagnosticStats embedding_diagnostics(const std::vector<double>& raw, int n, int d,
                                      uint64_t seed = 0);

struct EvalReport {
    // reconstruction at masked positions, in the training target space
    double smooth_l1 = 0.0;
    double mse = 0.0;
    double r2 = 0.0;
    // contrastive quality over the evaluation pool
    double top1 = 0.0;
    double info_nce = 0.0;
    double alignment = 0.0;
    double uniformity = 0.0;
    DiagnosticStats diagnostics;
    int pool_size = 0;  // meshes actually evaluated
    int n_meshes = 0;   // meshes available in the split
    uint64_t seed = 0;
};

struct EvalOptions {
    int pool_size = 256;
    int batch_size = 16;
    int sample_points = 1024;  // ignored; samples arrive preprocessed
    float jitter_sigma = 0.02f;
    float dropout = 0.3f;
    StepConfig step;  // mask ratio, beta, tau, target space — mirror training
    uint64_t seed = 90210;
};

// Runs the full metric suite over (up to pool_size of) the given samples with
// seeded masks and augmentations. Read-only over the checkpoint.
EvalReport evaluate_samples(const Checkpoint& ckpt, const std::vector<SampleRecord>& samples,
                            const EvalOptions& opt);

nlohmann::json report_to_json(const EvalReport& r);

// Side-by-side train/val table with val/train ratios per metric; notes the
// pool-size mismatch caveat when the two reports used different pools.
nlohmann::json gap_report(const EvalReport& train, const EvalReport& val);

// Appends one row per report to a CSV (header written when the file is new).
void append_eval_csv(const std::string& path, const std::string& split, const EvalReport& r);

}  // namespace geossl
