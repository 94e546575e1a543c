// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lsep/config.hpp"
#include "lsep/data.hpp"
#include "lsep/flow.hpp"
#include "lsep/model.hpp"
#include "lsep/probe.hpp"
#include "lsep/repa.hpp"
#include "lsep/rng.hpp"
#include "lsep/train.hpp"

namespace lsep::train {

// One metrics-log record; serialized as a single JSON line. `noise_digest`
// hashes this step's (x0, epsilon, t) so seed-isolation claims are
// checkable from the log alone.
struct MetricsRecord {
    int64_t step = 0;  // completed steps, 1-based
    double loss = 0.0;
    double velocity = 0.0;
    double class_mean = 0.0;
    double class_term = 0.0;
    double omega_mean = 0.0;
    double null_fraction = 0.0;
    double repa = 0.0;
    std::string noise_digest;
};

// Per-stream master seeds, normally all equal to the config seed. Tests
// override single members to demonstrate that the probe/crop draws, the
// conditioning draws and the data order are isolated from the noise
// stream.
struct StreamSeeds {
    uint64_t data = 0;   // epoch shuffling
    uint64_t noise = 0;  // epsilon
    uint64_t time = 0;   // t
    uint64_t cond = 0;   // denoiser label drops (rho_D)
    uint64_t probe = 0;  // probe-branch labels and crops (rho_L)

    static StreamSeeds uniform(uint64_t seed) { return {seed, seed, seed, seed, seed}; }
    bool operator==(const StreamSeeds&) const = default;
};

// Builds the dataset a config points at: class-folder tree or packed
// container, sniffed from the filesystem when kind is "auto". Verifies the
// result against the model geometry in the section.
data::Dataset load_dataset(const config::DatasetSection& spec);

// The training loop. Owns the model, probe head, optional alignment head,
// optimizer, EMA and the rng streams; one instance is one run. The durable
// TrainState is the checkpoint written by save_state: step counter, every
// parameter, EMA values, optimizer moments, and the stream seeds (engines
// are re-derived from seed + step, so no engine state is stored).
//
// Per step: pull the batch, draw t ~ U[0,1] and epsilon, evaluate the
// combined objective, AdamW step, EMA update (trunk only). Metrics append
// one record per log interval plus the final step; checkpoints are written
// every checkpoint_interval steps into output_dir. A non-finite loss or a
// non-finite activation aborts with a diagnostic checkpoint.
class Trainer {
public:
    Trainer(config::ExperimentConfig cfg, data::Dataset ds);
    Trainer(config::ExperimentConfig cfg, data::Dataset ds, StreamSeeds seeds);

    // Advances to `step` (no-op if already there); run() goes to
    // cfg.total_steps. Throws NumericalError after writing a diagnostic
    // checkpoint if the loss blows up.
    void run_to(int64_t step);
    void run();

    int64_t current_step() const { return step_; }
    const config::ExperimentConfig& config() const { return cfg_; }
    const model::DitModel& model() const { return model_; }
    model::DitModel& model_mut() { return model_; }
    const probe::ProbeHead& probe_head() const { return probe_head_; }
    const EmaState& ema() const { return ema_; }
    const std::vector<MetricsRecord>& metrics() const { return metrics_; }
    const std::string& last_checkpoint() const { return last_checkpoint_; }

    // FNV-1a over the trunk parameter values (declaration order).
    uint64_t trunk_digest() const { return model_.param_digest(); }
    // Digest of the complete mutable state: step, every parameter group,
    // EMA values and optimizer moments. Bitwise-equal states agree here.
    uint64_t state_digest() const;

    // Checkpoint round trip. Loading verifies the stored config digest and
    // stream seeds against this trainer (override with allow_mismatch),
    // then restores parameters, EMA, moments and the step counter.
    void save_state(const std::string& path) const;
    void load_state(const std::string& path, bool allow_mismatch = false);
    // Writes a step-named checkpoint for the current step into output_dir.
    void write_final_checkpoint();

private:
    MetricsRecord do_step(int64_t step, const data::LatentBatch& batch);
    void append_metrics(const MetricsRecord& rec);
    void write_checkpoint(const std::string& name);
    // Qualified (container name, tensor) pairs in optimizer group order.
    std::vector<std::pair<std::string, nn::Tensor>> qualified_params() const;

    config::ExperimentConfig cfg_;
    data::Dataset ds_;
    StreamSeeds seeds_;
    model::DitModel model_;
    probe::ProbeHead probe_head_;
    std::unique_ptr<repa::FeatureProvider> provider_;   // null unless repa on
    std::unique_ptr<repa::AlignmentHead> align_head_;   // null unless repa on
    flow::InterpolantSchedule sched_;
    AdamW opt_;
    EmaState ema_;
    data::EpochOrder order_;
    RngStream noise_, time_, cond_, probe_rng_;
    int64_t step_ = 0;
    std::vector<MetricsRecord> metrics_;
    std::ofstream metrics_file_;
    std::string last_checkpoint_;
};

// Outcome summary of a completed run.
struct TrainResult {
    int64_t steps = 0;
    uint64_t trunk_digest = 0;
    uint64_t ema_digest = 0;
    std::string last_checkpoint;
    std::vector<MetricsRecord> metrics;
};

// Convenience wrappers: run a config to completion (ingesting the dataset
// it names, or using `ds`), guaranteeing a checkpoint at the final step.
TrainResult train(const config::ExperimentConfig& cfg);
TrainResult train(const config::ExperimentConfig& cfg, data::Dataset ds);

}  // namespace lsep::train
