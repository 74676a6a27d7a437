#pragma once

#include <map>
#include <string>
#include <vector>

#include "rtcl/fusion.hpp"
#include "rtcl/state.hpp"
#include "rtcl/tasks.hpp"

namespace rtcl {

struct ExperimentConfig {
    TaskMode mode = TaskMode::Split;
    std::string dataset = "synthetic";  // "synthetic" or "mnist"
    std::string data_dir;               // IDX files for "mnist"
    std::string out_dir;

    int tasks = 5;
    int capacity = 5;  // negative = unlimited; zero is invalid
    int replay_m = 64;
    real alpha = real(0.5);

    int lora_rank = 4;
    int ae_latent = 4;
    int ae_hidden = 32;  // deep autoencoder (permutation mode)

    real lr_adapter = real(0.001);
    real lr_ae = real(0.005);
    real lr_pretrain = real(0.001);

    int batch_train = 128;
    int batch_test = 1;
    int batch_ae = 32;
    int replay_batch = 32;

    int epochs_adapter = 20;
    int epochs_ae = 600;
    int epochs_pretrain = 20;
    int epochs_distill = 0;  // zero falls back to epochs_adapter

    int train_per_class = 128;
    int test_per_class = 64;
    int pretext_per_class = 128;
    bool first_permutation_identity = false;

    uint64_t seed = 1;
    BackboneConfig backbone;

    void validate() const;
    int distill_epochs() const { return epochs_distill > 0 ? epochs_distill : epochs_adapter; }

    // Flat key=value text, one pair per line; used for config files and the
    // checkpoint's config section.
    std::string to_kv() const;
    static ExperimentConfig from_kv(const std::string& text);
    static ExperimentConfig load_file(const std::string& path);
};

struct MetricsLog {
    uint64_t seed = 0;
    std::vector<real> acc_final;      // per task, after the final task
    std::vector<real> running_avg;    // average over seen tasks, after each task
    std::vector<real> acc_at_finish;  // forced-gate accuracy right after training each task
    std::vector<std::vector<long>> routing_confusion;  // [true task][chosen autoencoder]
    std::vector<int> routed_majority;                  // per task, most frequent routed index
    long params_lora = 0;
    long params_heads = 0;
    long params_ae = 0;
    std::vector<long> footprint_after_task;  // adapters + autoencoders
    std::vector<long> lora_after_task;
    std::vector<FusionEvent> fusion_events;
    std::map<std::string, double> wall_seconds;

    long params_trainable() const { return params_lora + params_heads + params_ae; }
    real avg_acc() const;
};

real avg_task_accuracy(const std::vector<real>& accs);

struct RunResult {
    ExperimentConfig config;
    MetricsLog metrics;
    ContinualState state;
    std::vector<TaskSpec> specs;
    std::vector<std::vector<real>> heatmap;
    // Per-task embedded test sets, kept for probes and the heatmap tool.
    std::vector<std::vector<TaskSample>> test_tokens;
};

// The full continual loop: per task, train the autoencoder, build herding
// memory, then grow a new adapter or distill-fuse into one, and evaluate.
// Passing a pretrained backbone skips the pretext phase.
RunResult run_continual(const ExperimentConfig& cfg, const FrozenBackbone* pretrained = nullptr);

// Same pipeline, but inference always uses the most recently trained adapter
// instead of the novelty-detection gate.
RunResult ablate_routing(const ExperimentConfig& cfg, const FrozenBackbone* pretrained = nullptr);

// Builds the configured pretext dataset and pretrains just the frozen backbone.
FrozenBackbone pretrain_backbone(const ExperimentConfig& cfg, PretrainResult* stats = nullptr);

// Rebuilds the task stream from the config and recomputes the heatmap for an
// already-trained state (the standalone heatmap tool).
std::vector<std::vector<real>> heatmap_for_state(const ContinualState& state,
                                                 const ExperimentConfig& cfg);

// Writes metrics.csv, metrics.json, heatmap.csv, and checkpoint.rtcl.
void write_outputs(const RunResult& result, const std::string& out_dir);

std::string metrics_csv(const MetricsLog& m);
std::string heatmap_csv(const std::vector<std::vector<real>>& grid);
std::string metrics_json(const MetricsLog& m, const ExperimentConfig& cfg);

}  // namespace rtcl
