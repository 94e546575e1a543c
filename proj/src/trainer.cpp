// SPDX-License-Identifier: Apache-2.0
#include "lsep/trainer.hpp"

#include <cmath>
#include <filesystem>

#include "lsep/checkpoint.hpp"
#include "lsep/rng.hpp"

namespace lsep::train {

namespace fs = std::filesystem;

data::Dataset load_dataset(const config::DatasetSection& spec) {
    if (spec.path.empty()) throw ValidationError("load_dataset: dataset path is empty");
    std::string kind = spec.kind;
    if (kind == "auto") kind = fs::is_directory(spec.path) ? "folder" : "container";
    data::Dataset ds = kind == "folder"
                           ? data::ingest_folder(spec.path, spec.image_size, spec.channels)
                           : data::ingest_container(spec.path);
    if (ds.channels != spec.channels || ds.height != spec.image_size ||
        ds.width != spec.image_size)
        throw ValidationError("load_dataset: '" + spec.path + "' holds " +
                              std::to_string(ds.channels) + "x" + std::to_string(ds.height) +
                              "x" + std::to_string(ds.width) + " samples, expected " +
                              std::to_string(spec.channels) + "x" +
                              std::to_string(spec.image_size) + "x" +
                              std::to_string(spec.image_size));
    return ds;
}

namespace {

config::ExperimentConfig validated(config::ExperimentConfig cfg) {
    cfg.validate();
    return cfg;
}

std::unique_ptr<repa::FeatureProvider> make_provider(const config::ExperimentConfig& cfg) {
    if (!cfg.repa.enabled()) return nullptr;
    if (cfg.repa.provider == "patch")
        return std::make_unique<repa::PatchProvider>(cfg.model.input_channels,
                                                     cfg.model.patch_size);
    return std::make_unique<repa::FileFeatureProvider>(cfg.repa.provider);
}

std::unique_ptr<repa::AlignmentHead> make_align_head(const config::ExperimentConfig& cfg,
                                                     const repa::FeatureProvider* provider) {
    if (provider == nullptr) return nullptr;
    const int64_t width =
        cfg.repa.head_width == 0 ? cfg.model.hidden_dim : cfg.repa.head_width;
    return std::make_unique<repa::AlignmentHead>(cfg.model.hidden_dim, provider->feat_dim(),
                                                 width, cfg.repa.head_depth,
                                                 RngStream(cfg.seed, "align-init").stream_seed());
}

// Group order fixed as trunk, probe head, alignment head; slot indices and
// checkpoint moment names depend on it.
AdamW make_optimizer(const config::ExperimentConfig& cfg, model::DitModel& m,
                     probe::ProbeHead& head, repa::AlignmentHead* align) {
    std::vector<ParamGroup> groups;
    ParamGroup trunk;
    trunk.lr = cfg.optimizer.lr;
    for (auto& p : m.params()) trunk.params.push_back(p.tensor);
    groups.push_back(std::move(trunk));
    ParamGroup probe_group;
    probe_group.lr = cfg.probe.probe_lr;
    for (auto& p : head.params()) probe_group.params.push_back(p.tensor);
    groups.push_back(std::move(probe_group));
    if (align != nullptr) {
        ParamGroup align_group;
        align_group.lr = cfg.optimizer.lr;
        for (auto& p : align->params()) align_group.params.push_back(p.tensor);
        groups.push_back(std::move(align_group));
    }
    return AdamW(std::move(groups),
                 {cfg.optimizer.beta1, cfg.optimizer.beta2, 1e-8, cfg.optimizer.weight_decay});
}

std::string step_name(const char* stem, int64_t step) {
    std::string digits = std::to_string(step);
    if (digits.size() < 8) digits.insert(0, 8 - digits.size(), '0');
    return std::string(stem) + "_" + digits + ".ckpt";
}

}  // namespace

Trainer::Trainer(config::ExperimentConfig cfg, data::Dataset ds)
    : Trainer(cfg, std::move(ds), StreamSeeds::uniform(cfg.seed)) {}

Trainer::Trainer(config::ExperimentConfig cfg, data::Dataset ds, StreamSeeds seeds)
    : cfg_(validated(std::move(cfg))),
      ds_(std::move(ds)),
      seeds_(seeds),
      model_(cfg_.model, cfg_.seed),
      probe_head_(cfg_.model.hidden_dim, cfg_.model.num_classes),
      provider_(make_provider(cfg_)),
      align_head_(make_align_head(cfg_, provider_.get())),
      sched_(flow::linear_schedule()),
      opt_(make_optimizer(cfg_, model_, probe_head_, align_head_.get())),
      ema_(model_.params()),
      order_(ds_.count(), cfg_.batch_size, seeds_.data),
      noise_(seeds_.noise, "train-noise"),
      time_(seeds_.time, "train-time"),
      cond_(seeds_.cond, "train-cond"),
      probe_rng_(seeds_.probe, "train-probe") {
    if (ds_.channels != cfg_.model.input_channels || ds_.height != cfg_.model.input_size ||
        ds_.width != cfg_.model.input_size)
        throw ValidationError("Trainer: dataset samples are " + std::to_string(ds_.channels) +
                              "x" + std::to_string(ds_.height) + "x" + std::to_string(ds_.width) +
                              ", model expects " + std::to_string(cfg_.model.input_channels) +
                              "x" + std::to_string(cfg_.model.input_size) + "x" +
                              std::to_string(cfg_.model.input_size));
    if (ds_.num_classes != cfg_.model.num_classes)
        throw ValidationError("Trainer: dataset has " + std::to_string(ds_.num_classes) +
                              " classes, model expects " +
                              std::to_string(cfg_.model.num_classes));
}

std::vector<std::pair<std::string, nn::Tensor>> Trainer::qualified_params() const {
    std::vector<std::pair<std::string, nn::Tensor>> out;
    for (const auto& p : model_.params()) out.emplace_back("model." + p.name, p.tensor);
    for (const auto& p : probe_head_.params()) out.emplace_back("probe." + p.name, p.tensor);
    if (align_head_)
        for (const auto& p : align_head_->params()) out.emplace_back("align." + p.name, p.tensor);
    return out;
}

MetricsRecord Trainer::do_step(int64_t step, const data::LatentBatch& batch) {
    auto eng_noise = noise_.at(static_cast<uint64_t>(step));
    auto eng_time = time_.at(static_cast<uint64_t>(step));
    auto eng_cond = cond_.at(static_cast<uint64_t>(step));
    auto eng_probe = probe_rng_.at(static_cast<uint64_t>(step));

    std::vector<double> eps(batch.values.size());
    gaussian_fill(eng_noise, eps);
    std::vector<double> t(static_cast<size_t>(cfg_.batch_size));
    for (auto& ti : t) ti = uniform01(eng_time);

    MetricsRecord rec;
    rec.step = step + 1;
    Fnv1a h;
    h.update(batch.values.data(), batch.values.size() * sizeof(double));
    h.update(eps.data(), eps.size() * sizeof(double));
    h.update(t.data(), t.size() * sizeof(double));
    rec.noise_digest = hex64(h.digest());

    opt_.zero_grad();
    nn::Tensor total;
    try {
        if (align_head_) {
            const std::vector<int64_t> ids = order_.batch(step);
            const repa::RepaConfig repa_cfg{cfg_.repa.lambda, cfg_.repa.align_depth};
            auto parts = repa::combined_repa_lsep_loss(
                model_, probe_head_, *align_head_, *provider_, batch.shape, batch.values, eps, t,
                batch.labels, ids, cfg_.probe, cfg_.rho_D, repa_cfg, sched_, eng_cond, eng_probe);
            total = parts.total;
            rec.velocity = parts.lsep.velocity;
            rec.class_mean = parts.lsep.class_mean;
            rec.class_term = parts.lsep.class_term;
            rec.omega_mean = parts.lsep.omega_mean;
            rec.null_fraction = parts.lsep.null_fraction;
            rec.repa = parts.repa;
        } else {
            auto parts = probe::lsep_loss(model_, probe_head_, batch.shape, batch.values, eps, t,
                                          batch.labels, cfg_.probe, cfg_.rho_D, sched_, eng_cond,
                                          eng_probe);
            total = parts.total;
            rec.velocity = parts.velocity;
            rec.class_mean = parts.class_mean;
            rec.class_term = parts.class_term;
            rec.omega_mean = parts.omega_mean;
            rec.null_fraction = parts.null_fraction;
        }
    } catch (const NumericalError& e) {
        // Parameters are still the pre-step state: freeze them for autopsy.
        const std::string diag = fs::path(cfg_.output_dir) / step_name("diag_step", step);
        save_state(diag);
        throw NumericalError(std::string(e.what()) + " at training step " + std::to_string(step) +
                                 " (diagnostic checkpoint: " + diag + ")",
                             e.layer_index);
    }
    rec.loss = total.values()[0];
    if (!std::isfinite(rec.loss)) {
        const std::string diag = fs::path(cfg_.output_dir) / step_name("diag_step", step);
        save_state(diag);
        throw NumericalError("train: non-finite loss at step " + std::to_string(step) +
                             " (diagnostic checkpoint: " + diag + ")");
    }
    total.backward();
    opt_.step();
    ema_.update(model_.params(), cfg_.ema_decay);
    return rec;
}

void Trainer::run_to(int64_t step) {
    if (step > cfg_.total_steps)
        throw ValidationError("Trainer: target step " + std::to_string(step) +
                              " beyond total_steps " + std::to_string(cfg_.total_steps));
    if (step <= step_) return;
    data::Prefetcher prefetch(ds_, order_, step_, step, cfg_.prefetch_batches);
    for (int64_t s = step_; s < step; ++s) {
        auto batch = prefetch.next();
        if (!batch) throw ValidationError("Trainer: data pipeline ended early");
        MetricsRecord rec = do_step(s, *batch);
        step_ = s + 1;
        if (step_ % cfg_.log_interval == 0 || step_ == cfg_.total_steps) append_metrics(rec);
        if (step_ % cfg_.checkpoint_interval == 0) write_checkpoint(step_name("step", step_));
    }
}

void Trainer::run() { run_to(cfg_.total_steps); }

void Trainer::append_metrics(const MetricsRecord& rec) {
    metrics_.push_back(rec);
    if (!metrics_file_.is_open()) {
        fs::create_directories(cfg_.output_dir);
        const auto path = fs::path(cfg_.output_dir) / "metrics.jsonl";
        metrics_file_.open(path, std::ios::app);
        if (!metrics_file_)
            throw ValidationError("Trainer: cannot open '" + path.string() + "' for append");
    }
    const nlohmann::json j = {{"step", rec.step},
                              {"loss", rec.loss},
                              {"velocity", rec.velocity},
                              {"class_mean", rec.class_mean},
                              {"class_term", rec.class_term},
                              {"omega_mean", rec.omega_mean},
                              {"null_fraction", rec.null_fraction},
                              {"repa", rec.repa},
                              {"noise_digest", rec.noise_digest}};
    metrics_file_ << j.dump() << "\n";
    metrics_file_.flush();
}

void Trainer::write_checkpoint(const std::string& name) {
    const auto path = fs::path(cfg_.output_dir) / name;
    save_state(path.string());
    last_checkpoint_ = path.string();
}

void Trainer::write_final_checkpoint() { write_checkpoint(step_name("step", step_)); }

uint64_t Trainer::state_digest() const {
    Fnv1a h;
    h.update_pod(step_);
    h.update_pod(opt_.step_count());
    for (const auto& [name, tensor] : qualified_params()) {
        h.update(name);
        h.update(tensor.values().data(), tensor.values().size() * sizeof(double));
    }
    for (size_t i = 0; i < ema_.names().size(); ++i) {
        h.update(ema_.names()[i]);
        h.update(ema_.values()[i].data(), ema_.values()[i].size() * sizeof(double));
    }
    for (const auto& slot : opt_.slots()) {
        h.update(slot.exp_avg.data(), slot.exp_avg.size() * sizeof(double));
        h.update(slot.exp_avg_sq.data(), slot.exp_avg_sq.size() * sizeof(double));
    }
    return h.digest();
}

void Trainer::save_state(const std::string& path) const {
    ckpt::Checkpoint c;
    c.meta["format"] = "train_state";
    c.meta["version"] = 1;
    c.meta["step"] = step_;
    c.meta["opt_steps"] = opt_.step_count();
    c.meta["config"] = config::to_json(cfg_);
    c.meta["config_digest"] = config::config_digest(cfg_);
    c.meta["stream_seeds"] = {{"data", seeds_.data},
                              {"noise", seeds_.noise},
                              {"time", seeds_.time},
                              {"cond", seeds_.cond},
                              {"probe", seeds_.probe}};
    ckpt::pack_params(c, "model.", model_.params());
    ckpt::pack_params(c, "probe.", probe_head_.params());
    if (align_head_) ckpt::pack_params(c, "align.", align_head_->params());
    const auto& trunk = model_.params();
    for (size_t i = 0; i < ema_.names().size(); ++i)
        c.add("ema." + ema_.names()[i], trunk[i].tensor.shape(), ema_.values()[i]);
    const auto qualified = qualified_params();
    const auto& slots = opt_.slots();
    for (size_t i = 0; i < qualified.size(); ++i) {
        c.add("opt." + qualified[i].first + ".m", qualified[i].second.shape(),
              slots[i].exp_avg);
        c.add("opt." + qualified[i].first + ".v", qualified[i].second.shape(),
              slots[i].exp_avg_sq);
    }
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    ckpt::save_checkpoint(path, c);
}

void Trainer::load_state(const std::string& path, bool allow_mismatch) {
    const ckpt::Checkpoint c = ckpt::load_checkpoint(path);
    if (!c.meta.contains("format") || c.meta.at("format") != "train_state")
        throw ValidationError("load_state: '" + path + "' is not a train-state checkpoint");
    ckpt::check_meta_digest(c, "config_digest", config::config_digest(cfg_), allow_mismatch);
    if (!allow_mismatch) {
        if (!c.meta.contains("stream_seeds"))
            throw ValidationError("load_state: checkpoint lacks stream seeds");
        const auto& s = c.meta.at("stream_seeds");
        const StreamSeeds stored{s.at("data").get<uint64_t>(), s.at("noise").get<uint64_t>(),
                                 s.at("time").get<uint64_t>(), s.at("cond").get<uint64_t>(),
                                 s.at("probe").get<uint64_t>()};
        if (!(stored == seeds_))
            throw ValidationError(
                "load_state: checkpoint stream seeds differ from this trainer's");
    }
    const int64_t step = c.meta.at("step").get<int64_t>();
    if (step < 0 || step > cfg_.total_steps)
        throw ValidationError("load_state: checkpoint step " + std::to_string(step) +
                              " outside [0, total_steps]");
    ckpt::unpack_params(c, "model.", model_.params());
    ckpt::unpack_params(c, "probe.", probe_head_.params());
    if (align_head_) {
        ckpt::unpack_params(c, "align.", align_head_->params());
    } else {
        for (const auto& a : c.arrays)
            if (a.name.starts_with("align."))
                throw ValidationError(
                    "load_state: checkpoint carries an alignment head but repa is disabled");
    }
    // EMA arrays: every trunk name must be present with the right size, and
    // nothing else may hide under the prefix.
    size_t ema_found = 0;
    for (const auto& a : c.arrays)
        if (a.name.starts_with("ema.")) ++ema_found;
    if (ema_found != ema_.names().size())
        throw ValidationError("load_state: checkpoint has " + std::to_string(ema_found) +
                              " ema arrays, expected " + std::to_string(ema_.names().size()));
    for (size_t i = 0; i < ema_.names().size(); ++i) {
        const auto* a = c.find("ema." + ema_.names()[i]);
        if (a == nullptr)
            throw ValidationError("load_state: missing array 'ema." + ema_.names()[i] + "'");
        if (a->values.size() != ema_.values()[i].size())
            throw ValidationError("load_state: size mismatch for 'ema." + ema_.names()[i] + "'");
        ema_.values()[i] = a->values;
    }
    const auto qualified = qualified_params();
    size_t opt_found = 0;
    for (const auto& a : c.arrays)
        if (a.name.starts_with("opt.")) ++opt_found;
    if (opt_found != 2 * qualified.size())
        throw ValidationError("load_state: checkpoint has " + std::to_string(opt_found) +
                              " optimizer arrays, expected " +
                              std::to_string(2 * qualified.size()));
    auto& slots = opt_.slots();
    for (size_t i = 0; i < qualified.size(); ++i) {
        for (const char* part : {".m", ".v"}) {
            const std::string name = "opt." + qualified[i].first + part;
            const auto* a = c.find(name);
            if (a == nullptr)
                throw ValidationError("load_state: missing array '" + name + "'");
            auto& dst = part[1] == 'm' ? slots[i].exp_avg : slots[i].exp_avg_sq;
            if (a->values.size() != dst.size())
                throw ValidationError("load_state: size mismatch for '" + name + "'");
            dst = a->values;
        }
    }
    opt_.set_step_count(c.meta.at("opt_steps").get<int64_t>());
    step_ = step;
    last_checkpoint_ = path;
}

TrainResult train(const config::ExperimentConfig& cfg, data::Dataset ds) {
    Trainer trainer(cfg, std::move(ds));
    trainer.run();
    if (cfg.total_steps % cfg.checkpoint_interval != 0)
        trainer.write_final_checkpoint();
    TrainResult result;
    result.steps = trainer.current_step();
    result.trunk_digest = trainer.trunk_digest();
    result.ema_digest = trainer.ema().digest();
    result.last_checkpoint = trainer.last_checkpoint();
    result.metrics = trainer.metrics();
    return result;
}

TrainResult train(const config::ExperimentConfig& cfg) {
    return train(cfg, load_dataset(cfg.dataset));
}

}  // namespace lsep::train
