#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "geossl/dataset.hpp"
#include "geossl/model.hpp"
#include "geossl/objectives.hpp"

namespace geossl {

// Linear warmup from 0 to peak, then cosine decay to 0 at total_steps.
// Continuous at the joint; never negative.
double lr_at(int64_t step, int64_t warmup, int64_t total_steps, double peak);

struct OptimConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// AdamW first/second moment accumulators, shaped like the parameter store.
struct OptimState {
    std::vector<std::vector<float>> m, v;
    int64_t step = 0;  // completed optimizer steps

    static OptimState like(const ParamStore<float>& params);
};

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the observed pre-clip norm.
double clip_grad_norm(std::vector<std::vector<float>>& grads, double max_norm);

// One AdamW update with bias correction; weight decay is decoupled and
// multiplicative, applied only to non-exempt parameters. Returns false (and
// leaves parameters, moments and the step counter untouched) if any gradient
// is non-finite.
bool adamw_step(ParamStore<float>& params, const std::vector<std::vector<float>>& grads,
                OptimState& state, const OptimConfig& oc, double lr);

struct Checkpoint {
    ModelConfig model;
    ParamStore<float> params;
    NormStats stats;
    bool has_optim = false;
    OptimState optim;
    int64_t epoch = 0;  // completed epochs
    int64_t step = 0;   // completed optimizer steps
    uint64_t root_seed = 0;
    std::string config_json = "{}";  // run-config snapshot, opaque to the loader
};

namespace detail {
// Test hook for crash simulation: invoked at named stages of the save path
// ("temp-open", "header-written", "payload-half", "payload-written",
// "flushed", "synced"). Throwing from the hook abandons the save mid-flight.
extern std::function<void(const std::string& stage)> checkpoint_fault_hook;
}  // namespace detail

// Writes to a sibling temp file, flushes, syncs, then atomically renames over
// the target, so the target path always holds a complete file.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct HistoryRow {
    int64_t epoch = 0;
    int64_t step = 0;
    double lr = 0.0;
    double train_recon = 0.0;
    double train_contrast = 0.0;
    double val_recon = 0.0;
    double val_contrast = 0.0;
};

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows);
std::vector<HistoryRow> read_history_csv(const std::string& path);

struct TrainLoopConfig {
    ModelConfig model;
    StepConfig step;
    float jitter_sigma = 0.02f;
    float dropout = 0.3f;
    int batch_size = 16;
    int grad_accum = 2;
    int epochs = 30;
    double lr_peak = 3e-4;
    int64_t warmup_steps = 500;
    double clip_norm = 1.0;
    OptimConfig optim;
    int calib_batches = 32;
    uint64_t root_seed = 1;
    std::string run_dir;
    // Run at most this many epochs in this invocation (0 = no limit). The
    // learning-rate schedule is always driven by `epochs`, so a partial
    // session followed by a resume matches an uninterrupted run bit-exactly.
    int stop_after_epochs = 0;
};

struct TrainResult {
    std::vector<HistoryRow> history;
    std::string checkpoint_path;
    NormStats stats;
};

// Target-normalization statistics over the head of the epoch-0 train stream
// (the exact tokens a fresh train_loop would calibrate on): the first
// min(calib_batches, batches-per-epoch) shuffled batches at the training
// batch size. Pure function of (config, samples).
NormStats calibrate_stats(const TrainLoopConfig& cfg,
                          const std::vector<SampleRecord>& train_samples);

// Deterministic epoch loop: shuffled train batches, two-view step loss,
// gradient accumulation (averaged), clipping, AdamW with the warmup-cosine
// schedule, a val pass per epoch, history CSV, and a checkpoint per epoch
// written over run_dir/checkpoint.shpc. Resumes from that checkpoint if it
// already exists. Single-threaded and bit-reproducible for a fixed config.
TrainResult train_loop(const TrainLoopConfig& cfg, const std::vector<SampleRecord>& train_samples,
                       const std::vector<SampleRecord>& val_samples,
                       const std::string& config_json = "{}");

}  // namespace geossl
