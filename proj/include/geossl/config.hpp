#pragma once

#include <string>
#include <vector>

#include "geossl/evaluation.hpp"
#include "geossl/model.hpp"
#include "geossl/objectives.hpp"
#include "geossl/trainer.hpp"

namespace geossl {

// Corpus locations and preprocessing knobs.
struct DataConfig {
    std::string raw_dir = "data/raw";
    std::string processed_dir = "data/processed";
    int sample_points = 8192;
    double val_fraction = 0.05;
};

// Augmentation parameters ride along with the loss settings because they
// define the second contrastive view.
struct ObjectivesConfig {
    StepConfig step;
    float jitter_sigma = 0.02f;
    float dropout = 0.3f;
};

struct TrainerConfig {
    int batch_size = 16;
    int grad_accum = 2;
    int epochs = 50;
    double lr_peak = 3e-4;
    int warmup_steps = 500;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double clip_norm = 1.0;
    int calib_batches = 32;
    std::string run_dir = "runs/pretrain";
};

struct EvalConfig {
    int pool_size = 2048;
    int batch_size = 16;
};

struct AblationConfig {
    std::string out_dir = "runs/ablation";
};

// Full run configuration. Defaults reproduce the released training recipe;
// YAML files override individual leaves via deep merge.
struct Config {
    uint64_t seed = 1;
    DataConfig data;
    ModelConfig model;
    ObjectivesConfig objectives;
    TrainerConfig trainer;
    EvalConfig eval;
    AblationConfig ablation;
};

// Merges one parsed YAML document into cfg. Unknown keys, type mismatches
// and malformed lists throw with the full dotted key path. Lists (grid,
// radii) are replaced whole, never merged element-wise.
void apply_yaml_text(Config& cfg, const std::string& yaml_text);

// Built-in defaults, then each file merged in order (later files win per
// leaf). Validates the merged result.
Config load_config(const std::vector<std::string>& files);

// Schema/range validation of a merged config. Throws on violations.
void validate_config(const Config& cfg);

// Fully materialized round-trippable forms. The YAML form is what gets
// echoed into run directories; the JSON form is the checkpoint snapshot.
std::string config_to_yaml(const Config& cfg);
std::string config_to_json(const Config& cfg);

// Adapters into the trainer / evaluator option structs.
TrainLoopConfig train_loop_config(const Config& cfg);
EvalOptions eval_options(const Config& cfg);

}  // namespace geossl
