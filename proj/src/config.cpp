#include "warpkit/config.hpp"

#include <cstdlib>
#include <set>

#include "warpkit/error.hpp"
#include "warpkit/kvfile.hpp"

namespace warpkit {

namespace {

const char* kSchema = "wk-1";

KvFile to_kv(const RunConfig& c) {
    KvFile kv(kSchema);
    kv.set("precision", dtype_name(c.precision));
    kv.set_int("seed", static_cast<long long>(c.seed));

    kv.set_int("model.layers", static_cast<long long>(c.model.layers));
    kv.set_int("model.dim", static_cast<long long>(c.model.dim));
    kv.set_int("model.heads", static_cast<long long>(c.model.heads));
    kv.set_int("model.frames", static_cast<long long>(c.model.frames));
    kv.set_int("model.grid_h", static_cast<long long>(c.model.grid_h));
    kv.set_int("model.grid_w", static_cast<long long>(c.model.grid_w));
    kv.set_int("model.text_len", static_cast<long long>(c.model.text_len));
    kv.set_int("model.vocab", static_cast<long long>(c.model.vocab));
    kv.set_int("model.channels", static_cast<long long>(c.model.channels));
    kv.set_int("model.mlp_mult", static_cast<long long>(c.model.mlp_mult));
    kv.set_int("model.rope_frame", static_cast<long long>(c.model.rope.frame_channels));
    kv.set_int("model.rope_row", static_cast<long long>(c.model.rope.row_channels));
    kv.set_int("model.rope_col", static_cast<long long>(c.model.rope.col_channels));
    kv.set_double("model.rope_base", c.model.rope.base);
    kv.set_int("model.rope_enabled", c.model.rope_enabled ? 1 : 0);

    kv.set_int("schedule.steps", static_cast<long long>(c.schedule_steps));
    kv.set_double("schedule.beta_start", c.beta_start);
    kv.set_double("schedule.beta_end", c.beta_end);

    kv.set_int("train.steps", static_cast<long long>(c.train.steps));
    kv.set_int("train.rank", static_cast<long long>(c.train.rank));
    kv.set_double("train.adapter_lr", c.train.adapter_lr);
    kv.set_double("train.token_lr", c.train.token_lr);
    kv.set_double("train.beta1", c.train.beta1);
    kv.set_double("train.beta2", c.train.beta2);
    kv.set_double("train.eps", c.train.eps);
    kv.set_double("train.weight_decay", c.train.weight_decay);
    kv.set_int("train.pool", static_cast<long long>(c.train.pool));
    kv.set_int("train.seed", static_cast<long long>(c.train.seed));

    kv.set("inject.strategy", strategy_name(c.inject.strategy));
    kv.set_double("inject.step_lo", c.inject.step_band.lo);
    kv.set_double("inject.step_hi", c.inject.step_band.hi);
    kv.set_double("inject.layer_lo", c.inject.layer_band.lo);
    kv.set_double("inject.layer_hi", c.inject.layer_band.hi);
    kv.set_int("inject.descriptor_layer", c.inject.descriptor_layer);
    kv.set_double("mask.tau_fg", c.inject.mask.tau_fg);
    kv.set_double("mask.tau_cc", c.inject.mask.tau_cc);
    kv.set_int("mask.normalize", c.inject.mask.normalize ? 1 : 0);
    return kv;
}

std::size_t as_size(const KvFile& kv, const std::string& key, std::size_t fallback) {
    if (!kv.has(key)) return fallback;
    long long v = kv.get_int(key);
    if (v < 0) throw ConfigError("config: " + key + " must be >= 0");
    return static_cast<std::size_t>(v);
}

double as_double(const KvFile& kv, const std::string& key, double fallback) {
    return kv.has(key) ? kv.get_double(key) : fallback;
}

bool as_bool(const KvFile& kv, const std::string& key, bool fallback) {
    if (!kv.has(key)) return fallback;
    long long v = kv.get_int(key);
    if (v != 0 && v != 1) throw ConfigError("config: " + key + " must be 0 or 1");
    return v == 1;
}

RunConfig from_kv(const KvFile& kv) {
    static const std::set<std::string> known = {
        "schema",          "precision",         "seed",
        "model.layers",    "model.dim",         "model.heads",
        "model.frames",    "model.grid_h",      "model.grid_w",
        "model.text_len",  "model.vocab",       "model.channels",
        "model.mlp_mult",  "model.rope_frame",  "model.rope_row",
        "model.rope_col",  "model.rope_base",   "model.rope_enabled",
        "schedule.steps",  "schedule.beta_start", "schedule.beta_end",
        "train.steps",     "train.rank",        "train.adapter_lr",
        "train.token_lr",  "train.beta1",       "train.beta2",
        "train.eps",       "train.weight_decay", "train.pool",
        "train.seed",      "inject.strategy",   "inject.step_lo",
        "inject.step_hi",  "inject.layer_lo",   "inject.layer_hi",
        "inject.descriptor_layer", "mask.tau_fg", "mask.tau_cc",
        "mask.normalize"};
    for (const auto& [key, value] : kv.entries()) {
        (void)value;
        if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    }

    RunConfig c;
    c.precision = kv.has("precision") ? dtype_from_name(kv.get("precision"))
                                      : DType::F32;
    c.seed = as_size(kv, "seed", c.seed);

    c.model.layers = as_size(kv, "model.layers", c.model.layers);
    c.model.dim = as_size(kv, "model.dim", c.model.dim);
    c.model.heads = as_size(kv, "model.heads", c.model.heads);
    c.model.frames = as_size(kv, "model.frames", c.model.frames);
    c.model.grid_h = as_size(kv, "model.grid_h", c.model.grid_h);
    c.model.grid_w = as_size(kv, "model.grid_w", c.model.grid_w);
    c.model.text_len = as_size(kv, "model.text_len", c.model.text_len);
    c.model.vocab = as_size(kv, "model.vocab", c.model.vocab);
    c.model.channels = as_size(kv, "model.channels", c.model.channels);
    c.model.mlp_mult = as_size(kv, "model.mlp_mult", c.model.mlp_mult);
    c.model.rope.frame_channels =
        as_size(kv, "model.rope_frame", c.model.rope.frame_channels);
    c.model.rope.row_channels =
        as_size(kv, "model.rope_row", c.model.rope.row_channels);
    c.model.rope.col_channels =
        as_size(kv, "model.rope_col", c.model.rope.col_channels);
    c.model.rope.base = as_double(kv, "model.rope_base", c.model.rope.base);
    c.model.rope_enabled = as_bool(kv, "model.rope_enabled", c.model.rope_enabled);

    c.schedule_steps = as_size(kv, "schedule.steps", c.schedule_steps);
    c.beta_start = as_double(kv, "schedule.beta_start", c.beta_start);
    c.beta_end = as_double(kv, "schedule.beta_end", c.beta_end);

    c.train.steps = as_size(kv, "train.steps", c.train.steps);
    c.train.rank = as_size(kv, "train.rank", c.train.rank);
    c.train.adapter_lr = as_double(kv, "train.adapter_lr", c.train.adapter_lr);
    c.train.token_lr = as_double(kv, "train.token_lr", c.train.token_lr);
    c.train.beta1 = as_double(kv, "train.beta1", c.train.beta1);
    c.train.beta2 = as_double(kv, "train.beta2", c.train.beta2);
    c.train.eps = as_double(kv, "train.eps", c.train.eps);
    c.train.weight_decay = as_double(kv, "train.weight_decay", c.train.weight_decay);
    c.train.pool = as_size(kv, "train.pool", c.train.pool);
    c.train.seed = as_size(kv, "train.seed", c.train.seed);

    if (kv.has("inject.strategy"))
        c.inject.strategy = strategy_from_name(kv.get("inject.strategy"));
    c.inject.step_band.lo = as_double(kv, "inject.step_lo", c.inject.step_band.lo);
    c.inject.step_band.hi = as_double(kv, "inject.step_hi", c.inject.step_band.hi);
    c.inject.layer_band.lo = as_double(kv, "inject.layer_lo", c.inject.layer_band.lo);
    c.inject.layer_band.hi = as_double(kv, "inject.layer_hi", c.inject.layer_band.hi);
    if (kv.has("inject.descriptor_layer")) {
        long long v = kv.get_int("inject.descriptor_layer");
        if (v < -1) throw ConfigError("config: inject.descriptor_layer must be >= -1");
        c.inject.descriptor_layer = static_cast<int>(v);
    }
    c.inject.mask.tau_fg = as_double(kv, "mask.tau_fg", c.inject.mask.tau_fg);
    c.inject.mask.tau_cc = as_double(kv, "mask.tau_cc", c.inject.mask.tau_cc);
    c.inject.mask.normalize = as_bool(kv, "mask.normalize", c.inject.mask.normalize);

    c.model.validate();
    if (c.schedule_steps == 0) throw ConfigError("config: schedule.steps must be > 0");
    if (!(c.beta_start > 0.0) || !(c.beta_end >= c.beta_start) || c.beta_end >= 1.0)
        throw ConfigError("config: want 0 < beta_start <= beta_end < 1");
    return c;
}

}  // namespace

void RunConfig::save(const std::filesystem::path& path) const {
    to_kv(*this).save(path);
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    return from_kv(KvFile::load(path, kSchema));
}

std::string RunConfig::to_text() const { return to_kv(*this).to_text(); }

std::string RunConfig::hash() const { return content_hash(to_text()); }

void apply_precision(const RunConfig& cfg) {
    DType want = cfg.precision;
    if (const char* env = std::getenv("WARPKIT_PRECISION")) want = dtype_from_name(env);
    set_default_dtype(want);
}

}  // namespace warpkit
