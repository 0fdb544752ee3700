#pragma once

#include "metatsr/eval.hpp"

#include <map>
#include <string>
#include <vector>

namespace metatsr {

/// Where the raw series come from: CSV files, or the built-in synthetic
/// family when synthetic_enabled is set.
struct DataConfig {
    std::vector<std::string> csv_paths;
    std::string csv_dir;  // alternative: every *.csv, sorted by name
    std::string target_column;
    std::string split_manifest;  // optional
    std::string impute_default = "interpolate";
    std::map<std::string, std::string> impute_overrides;  // column -> policy

    bool synthetic_enabled = false;
    int synth_regimes = 2;
    int synth_series_count = 6;
    long synth_length = 6000;
    int synth_channels = 3;
    double synth_drift_rate = 1.0;
    double synth_noise_std = 0.02;
};

struct WindowingConfig {
    int window_size = 5;        // delta
    int step_size = 1;          // k
    int meta_window_length = 50;  // l
    int task_stride = 1;        // stride between training virtual tasks
};

struct ModelConfig {
    std::string kind = "maml";  // maml | mmaml | lstm-finetune | target-mean
    std::vector<int> lstm_hidden = {120, 120};
    int feature_dim = 128;
    bool tanh_features = true;
    int enc_hidden = 128;
    int dec_hidden = 128;
    int latent_dim = 64;
};

struct TrainSection {
    double inner_lr = 0.01;
    double meta_lr = 0.0005;
    int inner_steps = 1;
    int meta_batch_size = 20;
    double noise_level = 0.0;
    int meta_epochs = 10000;
    int patience = 500;
    bool second_order = true;
    int val_every = 1;
    double vrae_weight = 0.1;
    bool stochastic_encode = true;
    double pretrain_lr = 0.001;
    int pretrain_epochs = 1000;
    int pretrain_patience = 50;
    int pretrain_batch_size = 128;
    double finetune_lr = 0.001;
    double finetune_weight_decay = 0.0;
    int checkpoint_every = 0;
};

struct EvalSection {
    int horizon = 10;
    int meta_test_step = 0;  // 0 = per-series floor(M/100), min 1
    std::vector<int> gradient_steps = {1, 10};
    int runs = 5;
    bool dump_raw_errors = false;
    bool export_embeddings = false;
};

struct RunConfig {
    DataConfig data;
    WindowingConfig windowing;
    ModelConfig model;
    TrainSection train;
    EvalSection eval;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    int threads = 1;
    std::string dataset_name = "dataset";

    /// Loads and validates a JSON config file; unknown keys are rejected.
    static RunConfig load(const std::string& path);
    static RunConfig from_json_text(const std::string& text);

    /// Canonical serialization: keys sorted, no volatile fields dropped.
    std::string canonical_json() const;

    /// Hash over {data, windowing, seed}: identifies preprocess artifacts.
    std::uint64_t pipeline_hash() const;
    /// Hash over {data, windowing, model, train, seed}: identifies checkpoints.
    std::uint64_t model_hash() const;

    void validate() const;

    MamlConfig maml_config() const;
    MmamlConfig mmaml_config() const;
    NetConfig net_config(int input_channels) const;
    ModNetConfig modnet_config(int input_channels) const;
    MetaTestConfig metatest_config(int gradient_steps) const;
    std::vector<ChannelImpute> impute_policies(
        const std::vector<std::string>& channel_names) const;
    SynthConfig synth_config() const;
};

}  // namespace metatsr
