// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsep/model.hpp"
#include "lsep/probe.hpp"
#include "lsep/sampler.hpp"

namespace lsep::config {

// AdamW hyperparameters exposed in the experiment file. The epsilon term is
// deliberately not a config knob; the optimizer default applies.
struct OptimizerSection {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;

    bool operator==(const OptimizerSection&) const = default;
};

// Optional feature-alignment regularizer. lambda == 0 disables the branch
// entirely; when enabled, `provider` is either the builtin "patch"
// (encoder-free clean-patch targets) or a path to a precomputed feature
// file, and `align_depth` is the 1-based tap block (0 reuses the probe
// target depth). The projection head is an MLP with `head_depth` SiLU
// hidden layers of `head_width` units (0 = model hidden size).
struct RepaSection {
    double lambda = 0.0;
    std::string provider;
    int64_t align_depth = 0;
    int64_t head_width = 0;
    int64_t head_depth = 2;

    bool enabled() const { return lambda != 0.0; }
    bool operator==(const RepaSection&) const = default;
};

// Sampler settings carried alongside the training recipe so `sample` jobs
// launched from the same file reproduce the preset's guidance schedule.
struct SamplingSection {
    std::string kind = "sde";  // "sde" | "ode"
    int64_t steps = 250;
    double cfg_weight = 1.0;  // 1 disables guidance
    double interval_lo = 0.0;
    double interval_hi = 0.0;
    bool interval_on_noise = false;
    double t_min = 1e-3;
    double diffusion_scale = 1.0;

    // Fills a per-job spec; seed and labels are supplied by the caller.
    sampler::SampleSpec to_spec(uint64_t seed, std::vector<int> labels) const;
    bool operator==(const SamplingSection&) const = default;
};

// Where training data comes from. `path` points at a class-folder tree or a
// packed container file ("auto" sniffs: directory → folder, file →
// container). An empty path is allowed at load so sampling-only configs
// work; the trainer rejects it.
struct DatasetSection {
    std::string path;
    std::string kind = "auto";  // "auto" | "folder" | "container"
    int64_t image_size = 32;
    int64_t channels = 3;

    bool operator==(const DatasetSection&) const = default;
};

// The full experiment description. Defaults describe a desk-scale run with
// both regularizers off; presets (see preset_config) fill in the published
// recipes. JSON keys mirror field names one-to-one; see README for the
// schema and the `preset` include mechanism.
struct ExperimentConfig {
    model::ModelConfig model;   // defaults to the tiny geometry
    probe::ProbePolicy probe;   // omega == 0: probe branch off
    RepaSection repa;           // lambda == 0: alignment off
    OptimizerSection optimizer;
    SamplingSection sampling;
    DatasetSection dataset;
    int64_t batch_size = 16;
    int64_t total_steps = 1000;
    double rho_D = 0.1;  // denoiser label-drop probability
    uint64_t seed = 0;
    double ema_decay = 0.9999;
    bool deterministic = true;
    std::string output_dir = "runs/default";
    std::string device = "cpu";
    int64_t checkpoint_interval = 1000;
    int64_t log_interval = 50;
    int64_t prefetch_batches = 2;  // bounded-queue capacity of the loader

    // Field ranges plus cross-section checks (probe depth vs model depth,
    // crop range vs token grid, provider required when repa is enabled).
    // Throws ValidationError.
    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

// Named starting points selectable via the top-level "preset" key: "tiny"
// (desk-scale, 10 classes, 32x32 RGB pixels) or "B"/"L"/"XL" (the published
// latent-space recipes: batch 256, AdamW 1e-4 (0.9, 0.999), 250 sampling
// steps; XL adds guidance 1.8 gated to [0, 0.65]).
ExperimentConfig preset_config(const std::string& name);

// Canonical JSON form: every field explicit, object keys sorted. Feeding
// the dump back through config_from_json reproduces the struct exactly.
nlohmann::json to_json(const ExperimentConfig& cfg);

// Builds a config from parsed JSON: resolves the optional "preset" base,
// overlays explicit keys field-by-field, rejects unknown keys and
// mistyped values, then validates. Purely in-memory: no path resolution,
// no environment lookups, no file-existence checks.
ExperimentConfig config_from_json(const nlohmann::json& j);

// 16-hex-digit FNV-1a over the canonical dump with the two deployment
// fields (output_dir, device) removed, so environment overrides never
// change the digest. Stable across key reordering and preset-vs-explicit
// spellings of the same resolved config; checkpoints store it and resume
// compares it.
std::string config_digest(const ExperimentConfig& cfg);

// Full load pipeline: parse file → config_from_json → resolve relative
// dataset/provider paths against the config file's directory → apply
// environment overrides (LSEP_OUTPUT_DIR, LSEP_DEVICE — deployment knobs
// only) → validate → require referenced paths to exist.
ExperimentConfig load_config(const std::string& path);

// Writes the canonical JSON form (pretty-printed, trailing newline).
void save_config(const ExperimentConfig& cfg, const std::string& path);

}  // namespace lsep::config
