// SPDX-License-Identifier: Apache-2.0
#include "lsep/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>

#include "lsep/train.hpp"

namespace lsep::config {

namespace fs = std::filesystem;
using nlohmann::json;

sampler::SampleSpec SamplingSection::to_spec(uint64_t seed, std::vector<int> labels) const {
    sampler::SampleSpec spec;
    spec.kind = sampler::sampler_kind_from(kind);
    spec.steps = steps;
    spec.cfg_weight = cfg_weight;
    spec.interval_lo = interval_lo;
    spec.interval_hi = interval_hi;
    spec.interval_on_noise = interval_on_noise;
    spec.t_min = t_min;
    spec.diffusion_scale = diffusion_scale;
    spec.seed = seed;
    spec.labels = std::move(labels);
    return spec;
}

void ExperimentConfig::validate() const {
    model.validate();
    probe.validate(model.grid(), model.depth);
    // The model carries its own tap index for checkpoint metadata; the two
    // must agree or probing and training would tap different blocks.
    if (probe.target_depth != model.target_depth)
        throw ValidationError("config: probe.target_depth " + std::to_string(probe.target_depth) +
                              " disagrees with model.target_depth " +
                              std::to_string(model.target_depth));
    if (!(optimizer.lr > 0.0)) throw ValidationError("config: optimizer.lr must be positive");
    train::AdamWConfig{optimizer.beta1, optimizer.beta2, 1e-8, optimizer.weight_decay}.validate();
    if (repa.lambda < 0.0) throw ValidationError("config: repa.lambda must be >= 0");
    if (repa.enabled() && repa.provider.empty())
        throw ValidationError("config: repa.provider is required when repa.lambda != 0");
    if (repa.align_depth < 0 || repa.align_depth > model.depth)
        throw ValidationError("config: repa.align_depth " + std::to_string(repa.align_depth) +
                              " outside [0, depth]");
    if (repa.head_width < 0) throw ValidationError("config: repa.head_width must be >= 0");
    if (repa.head_depth < 0) throw ValidationError("config: repa.head_depth must be >= 0");
    // to_spec also resolves the kind string; a bad name throws here.
    sampling.to_spec(seed, {}).validate();
    if (dataset.kind != "auto" && dataset.kind != "folder" && dataset.kind != "container")
        throw ValidationError("config: dataset.kind must be \"auto\", \"folder\" or \"container\"");
    if (dataset.image_size < 2) throw ValidationError("config: dataset.image_size must be >= 2");
    if (dataset.channels < 1 || dataset.channels > 16)
        throw ValidationError("config: dataset.channels must lie in [1, 16]");
    if (dataset.image_size != model.input_size || dataset.channels != model.input_channels)
        throw ValidationError("config: dataset geometry " + std::to_string(dataset.channels) + "x" +
                              std::to_string(dataset.image_size) +
                              " does not match model input " +
                              std::to_string(model.input_channels) + "x" +
                              std::to_string(model.input_size));
    if (batch_size < 1) throw ValidationError("config: batch_size must be >= 1");
    if (total_steps < 1) throw ValidationError("config: total_steps must be >= 1");
    if (!(rho_D >= 0.0 && rho_D <= 1.0))
        throw ValidationError("config: rho_D must lie in [0, 1]");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0))
        throw ValidationError("config: ema_decay must lie in [0, 1]");
    if (output_dir.empty()) throw ValidationError("config: output_dir must not be empty");
    if (device != "cpu")
        throw ValidationError("config: unsupported device '" + device + "' (only \"cpu\")");
    if (checkpoint_interval < 1)
        throw ValidationError("config: checkpoint_interval must be >= 1");
    if (log_interval < 1) throw ValidationError("config: log_interval must be >= 1");
    if (prefetch_batches < 1) throw ValidationError("config: prefetch_batches must be >= 1");
}

ExperimentConfig preset_config(const std::string& name) {
    ExperimentConfig c;
    c.model = model::arch_preset(name);
    c.probe.target_depth = c.model.target_depth;
    c.probe.rho_L = 0.9;
    c.probe.bins = 10;
    if (name == "tiny") {
        // Desk-scale recipe: published probe settings shrunk onto the 8x8
        // token grid (crop ratio matches the large models' [12,16] of 16),
        // small-model probe lr, and step/batch/EMA budgets sized for CPUs.
        c.probe.crop_min = 6;
        c.probe.crop_max = 8;
        c.probe.omega_start = 0.0275;
        c.probe.omega_end = 0.0325;
        c.probe.probe_lr = 0.03;
        c.batch_size = 16;
        c.total_steps = 20000;
        c.ema_decay = 0.999;
        c.checkpoint_interval = 2000;
        c.log_interval = 50;
        c.dataset.image_size = 32;
        c.dataset.channels = 3;
    } else {
        // Published table: batch 256, 400K iterations, AdamW 1e-4
        // (0.9, 0.999), EMA 0.9999, SDE sampling with 250 steps, on
        // 32x32x4 latents with 1000 classes.
        c.batch_size = 256;
        c.total_steps = 400000;
        c.ema_decay = 0.9999;
        c.checkpoint_interval = 10000;
        c.log_interval = 100;
        c.dataset.image_size = 32;
        c.dataset.channels = 4;
        c.dataset.kind = "container";
        if (name == "B") {
            c.probe.crop_min = 14;
            c.probe.crop_max = 16;
            c.probe.omega_start = 0.005;
            c.probe.omega_end = 0.01;
            c.probe.probe_lr = 0.03;
        } else if (name == "L") {
            c.probe.crop_min = 12;
            c.probe.crop_max = 16;
            c.probe.omega_start = 0.0275;
            c.probe.omega_end = 0.0325;
            c.probe.probe_lr = 1e-4;
        } else {  // "XL" — arch_preset rejected everything else already
            c.probe.crop_min = 12;
            c.probe.crop_max = 16;
            c.probe.omega_start = 0.0225;
            c.probe.omega_end = 0.03;
            c.probe.probe_lr = 1e-4;
            c.sampling.cfg_weight = 1.8;
            c.sampling.interval_lo = 0.0;
            c.sampling.interval_hi = 0.65;
        }
    }
    c.validate();
    return c;
}

namespace {

// Rejects keys outside the section's schema so typos fail loudly instead
// of silently keeping a default.
void require_keys(const json& j, const char* where,
                  std::initializer_list<const char*> allowed) {
    if (!j.is_object())
        throw ValidationError(std::string("config: ") + where + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : allowed)
            if (item.key() == k) {
                known = true;
                break;
            }
        if (!known)
            throw ValidationError("config: unknown key '" + item.key() + "' in " + where);
    }
}

// Typed field readers: absent key keeps the preset/default value already
// in *out; a present key must hold the right JSON type.
void get_i64(const json& j, const char* where, const char* key, int64_t* out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number_integer() && !v.is_number_unsigned())
        throw ValidationError(std::string("config: ") + where + "." + key + " must be an integer");
    *out = v.get<int64_t>();
}

void get_u64(const json& j, const char* where, const char* key, uint64_t* out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    const bool ok = v.is_number_unsigned() ||
                    (v.is_number_integer() && v.get<int64_t>() >= 0);
    if (!ok)
        throw ValidationError(std::string("config: ") + where + "." + key +
                              " must be a non-negative integer");
    *out = v.get<uint64_t>();
}

void get_f64(const json& j, const char* where, const char* key, double* out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_number())
        throw ValidationError(std::string("config: ") + where + "." + key + " must be a number");
    *out = v.get<double>();
}

void get_str(const json& j, const char* where, const char* key, std::string* out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_string())
        throw ValidationError(std::string("config: ") + where + "." + key + " must be a string");
    *out = v.get<std::string>();
}

void get_bool(const json& j, const char* where, const char* key, bool* out) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (!v.is_boolean())
        throw ValidationError(std::string("config: ") + where + "." + key + " must be a boolean");
    *out = v.get<bool>();
}

void read_model(const json& j, model::ModelConfig* m) {
    require_keys(j, "model",
                 {"input_channels", "input_size", "patch_size", "depth", "hidden_dim",
                  "num_heads", "num_classes", "target_depth"});
    get_i64(j, "model", "input_channels", &m->input_channels);
    get_i64(j, "model", "input_size", &m->input_size);
    get_i64(j, "model", "patch_size", &m->patch_size);
    get_i64(j, "model", "depth", &m->depth);
    get_i64(j, "model", "hidden_dim", &m->hidden_dim);
    get_i64(j, "model", "num_heads", &m->num_heads);
    get_i64(j, "model", "num_classes", &m->num_classes);
    get_i64(j, "model", "target_depth", &m->target_depth);
}

void read_probe(const json& j, probe::ProbePolicy* p) {
    require_keys(j, "probe",
                 {"target_depth", "rho_L", "crop_min", "crop_max", "omega_start", "omega_end",
                  "bins", "probe_lr", "label_mode"});
    get_i64(j, "probe", "target_depth", &p->target_depth);
    get_f64(j, "probe", "rho_L", &p->rho_L);
    get_i64(j, "probe", "crop_min", &p->crop_min);
    get_i64(j, "probe", "crop_max", &p->crop_max);
    get_f64(j, "probe", "omega_start", &p->omega_start);
    get_f64(j, "probe", "omega_end", &p->omega_end);
    get_i64(j, "probe", "bins", &p->bins);
    get_f64(j, "probe", "probe_lr", &p->probe_lr);
    get_str(j, "probe", "label_mode", &p->label_mode);
}

void read_repa(const json& j, RepaSection* r) {
    require_keys(j, "repa", {"lambda", "provider", "align_depth", "head_width", "head_depth"});
    get_f64(j, "repa", "lambda", &r->lambda);
    get_str(j, "repa", "provider", &r->provider);
    get_i64(j, "repa", "align_depth", &r->align_depth);
    get_i64(j, "repa", "head_width", &r->head_width);
    get_i64(j, "repa", "head_depth", &r->head_depth);
}

void read_optimizer(const json& j, OptimizerSection* o) {
    require_keys(j, "optimizer", {"lr", "beta1", "beta2", "weight_decay"});
    get_f64(j, "optimizer", "lr", &o->lr);
    get_f64(j, "optimizer", "beta1", &o->beta1);
    get_f64(j, "optimizer", "beta2", &o->beta2);
    get_f64(j, "optimizer", "weight_decay", &o->weight_decay);
}

void read_sampling(const json& j, SamplingSection* s) {
    require_keys(j, "sampling",
                 {"kind", "steps", "cfg_weight", "interval_lo", "interval_hi",
                  "interval_on_noise", "t_min", "diffusion_scale"});
    get_str(j, "sampling", "kind", &s->kind);
    get_i64(j, "sampling", "steps", &s->steps);
    get_f64(j, "sampling", "cfg_weight", &s->cfg_weight);
    get_f64(j, "sampling", "interval_lo", &s->interval_lo);
    get_f64(j, "sampling", "interval_hi", &s->interval_hi);
    get_bool(j, "sampling", "interval_on_noise", &s->interval_on_noise);
    get_f64(j, "sampling", "t_min", &s->t_min);
    get_f64(j, "sampling", "diffusion_scale", &s->diffusion_scale);
}

void read_dataset(const json& j, DatasetSection* d) {
    require_keys(j, "dataset", {"path", "kind", "image_size", "channels"});
    get_str(j, "dataset", "path", &d->path);
    get_str(j, "dataset", "kind", &d->kind);
    get_i64(j, "dataset", "image_size", &d->image_size);
    get_i64(j, "dataset", "channels", &d->channels);
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
    json j;
    j["model"] = {{"input_channels", c.model.input_channels},
                  {"input_size", c.model.input_size},
                  {"patch_size", c.model.patch_size},
                  {"depth", c.model.depth},
                  {"hidden_dim", c.model.hidden_dim},
                  {"num_heads", c.model.num_heads},
                  {"num_classes", c.model.num_classes},
                  {"target_depth", c.model.target_depth}};
    j["probe"] = {{"target_depth", c.probe.target_depth},
                  {"rho_L", c.probe.rho_L},
                  {"crop_min", c.probe.crop_min},
                  {"crop_max", c.probe.crop_max},
                  {"omega_start", c.probe.omega_start},
                  {"omega_end", c.probe.omega_end},
                  {"bins", c.probe.bins},
                  {"probe_lr", c.probe.probe_lr},
                  {"label_mode", c.probe.label_mode}};
    j["repa"] = {{"lambda", c.repa.lambda},
                 {"provider", c.repa.provider},
                 {"align_depth", c.repa.align_depth},
                 {"head_width", c.repa.head_width},
                 {"head_depth", c.repa.head_depth}};
    j["optimizer"] = {{"lr", c.optimizer.lr},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"weight_decay", c.optimizer.weight_decay}};
    j["sampling"] = {{"kind", c.sampling.kind},
                     {"steps", c.sampling.steps},
                     {"cfg_weight", c.sampling.cfg_weight},
                     {"interval_lo", c.sampling.interval_lo},
                     {"interval_hi", c.sampling.interval_hi},
                     {"interval_on_noise", c.sampling.interval_on_noise},
                     {"t_min", c.sampling.t_min},
                     {"diffusion_scale", c.sampling.diffusion_scale}};
    j["dataset"] = {{"path", c.dataset.path},
                    {"kind", c.dataset.kind},
                    {"image_size", c.dataset.image_size},
                    {"channels", c.dataset.channels}};
    j["batch_size"] = c.batch_size;
    j["total_steps"] = c.total_steps;
    j["rho_D"] = c.rho_D;
    j["seed"] = c.seed;
    j["ema_decay"] = c.ema_decay;
    j["deterministic"] = c.deterministic;
    j["output_dir"] = c.output_dir;
    j["device"] = c.device;
    j["checkpoint_interval"] = c.checkpoint_interval;
    j["log_interval"] = c.log_interval;
    j["prefetch_batches"] = c.prefetch_batches;
    return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    require_keys(j, "config",
                 {"preset", "model", "probe", "repa", "optimizer", "sampling", "dataset",
                  "batch_size", "total_steps", "rho_D", "seed", "ema_decay", "deterministic",
                  "output_dir", "device", "checkpoint_interval", "log_interval",
                  "prefetch_batches"});
    ExperimentConfig c;
    if (j.contains("preset")) {
        const json& v = j.at("preset");
        if (!v.is_string())
            throw ValidationError("config: preset must be a string");
        c = preset_config(v.get<std::string>());
    }
    if (j.contains("model")) read_model(j.at("model"), &c.model);
    if (j.contains("probe")) read_probe(j.at("probe"), &c.probe);
    if (j.contains("repa")) read_repa(j.at("repa"), &c.repa);
    if (j.contains("optimizer")) read_optimizer(j.at("optimizer"), &c.optimizer);
    if (j.contains("sampling")) read_sampling(j.at("sampling"), &c.sampling);
    if (j.contains("dataset")) read_dataset(j.at("dataset"), &c.dataset);
    get_i64(j, "config", "batch_size", &c.batch_size);
    get_i64(j, "config", "total_steps", &c.total_steps);
    get_f64(j, "config", "rho_D", &c.rho_D);
    get_u64(j, "config", "seed", &c.seed);
    get_f64(j, "config", "ema_decay", &c.ema_decay);
    get_bool(j, "config", "deterministic", &c.deterministic);
    get_str(j, "config", "output_dir", &c.output_dir);
    get_str(j, "config", "device", &c.device);
    get_i64(j, "config", "checkpoint_interval", &c.checkpoint_interval);
    get_i64(j, "config", "log_interval", &c.log_interval);
    get_i64(j, "config", "prefetch_batches", &c.prefetch_batches);
    c.validate();
    return c;
}

std::string config_digest(const ExperimentConfig& cfg) {
    json j = to_json(cfg);
    // Deployment knobs are environment-overridable and must never break
    // checkpoint compatibility.
    j.erase("output_dir");
    j.erase("device");
    Fnv1a h;
    h.update(j.dump());  // object keys are stored sorted, so this is canonical
    return hex64(h.digest());
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("load_config: cannot open '" + path + "'");
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ValidationError("load_config: '" + path + "': " + e.what());
    }
    ExperimentConfig cfg = config_from_json(j);
    // Relative data paths are written relative to the config file, not to
    // whatever directory the tool happens to run from.
    const fs::path base = fs::path(path).parent_path();
    auto resolve = [&](std::string* p) {
        if (!p->empty() && fs::path(*p).is_relative())
            *p = (base / *p).lexically_normal().string();
    };
    resolve(&cfg.dataset.path);
    // "patch" names the builtin encoder-free provider, not a file.
    if (cfg.repa.provider != "patch") resolve(&cfg.repa.provider);
    if (const char* v = std::getenv("LSEP_OUTPUT_DIR"); v != nullptr && *v != '\0')
        cfg.output_dir = v;
    if (const char* v = std::getenv("LSEP_DEVICE"); v != nullptr && *v != '\0')
        cfg.device = v;
    cfg.validate();
    if (!cfg.dataset.path.empty() && !fs::exists(cfg.dataset.path))
        throw ValidationError("load_config: dataset path '" + cfg.dataset.path +
                              "' does not exist");
    if (!cfg.repa.provider.empty() && cfg.repa.provider != "patch" &&
        !fs::is_regular_file(cfg.repa.provider))
        throw ValidationError("load_config: repa provider '" + cfg.repa.provider +
                              "' is not a readable file");
    return cfg;
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("save_config: cannot open '" + path + "' for writing");
    os << to_json(cfg).dump(2) << "\n";
    if (!os) throw ValidationError("save_config: write to '" + path + "' failed");
}

}  // namespace lsep::config
