#include "warpkit/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "warpkit/error.hpp"
#include "warpkit/kvfile.hpp"
#include "warpkit/tensor_io.hpp"

namespace warpkit {

const char* proj_site_name(ProjSite site) {
    switch (site) {
        case ProjSite::Query: return "query";
        case ProjSite::Key: return "key";
        case ProjSite::Value: return "value";
        case ProjSite::Output: return "output";
    }
    throw ContractError("proj_site_name: bad site");
}

std::size_t effective_rank(std::size_t requested, std::size_t dim) {
    if (requested == 0) throw ConfigError("adapter rank must be positive");
    return std::min(requested, dim / 2);
}

LoraAdapter LoraAdapter::init(std::size_t layer, ProjSite site, std::size_t dim,
                              std::size_t rank, SeededRng& rng) {
    if (site == ProjSite::Query)
        throw ConfigError(
            "query adapters are rejected: adapting queries moves attention "
            "routing, only key/value/output may carry appearance");
    LoraAdapter a;
    a.layer = layer;
    a.site = site;
    a.rank = effective_rank(rank, dim);
    a.scale = 1.0;  // alpha == rank
    a.down = Tensor::gaussian({dim, a.rank}, rng, 0.02);
    a.up = Tensor::zeros({a.rank, dim});
    return a;
}

Tensor apply_lora(const Tensor& w, const LoraAdapter& adapter) {
    if (w.rank() != 2 || w.dim(0) != adapter.down.dim(0) ||
        w.dim(1) != adapter.up.dim(1))
        throw ShapeError("apply_lora: base " + w.shape_str() + " vs factors " +
                         adapter.down.shape_str() + "*" + adapter.up.shape_str());
    return add(w, scale(matmul(adapter.down, adapter.up), adapter.scale));
}

void AdapterSet::add(LoraAdapter adapter) {
    if (find(adapter.layer, adapter.site))
        throw ConfigError("duplicate adapter for layer " +
                          std::to_string(adapter.layer) + " " +
                          proj_site_name(adapter.site));
    adapters_.push_back(std::move(adapter));
}

const LoraAdapter* AdapterSet::find(std::size_t layer, ProjSite site) const {
    for (const LoraAdapter& a : adapters_)
        if (a.layer == layer && a.site == site) return &a;
    return nullptr;
}

LoraAdapter* AdapterSet::find(std::size_t layer, ProjSite site) {
    for (LoraAdapter& a : adapters_)
        if (a.layer == layer && a.site == site) return &a;
    return nullptr;
}

AdapterSet AdapterSet::full(const ModelConfig& cfg, std::size_t rank,
                            SeededRng& rng) {
    AdapterSet set;
    for (std::size_t l = 0; l < cfg.layers; ++l)
        for (ProjSite site : {ProjSite::Key, ProjSite::Value, ProjSite::Output})
            set.add(LoraAdapter::init(l, site, cfg.dim, rank, rng));
    return set;
}

SubjectToken SubjectToken::init(const ModelConfig& cfg, const Weights& w) {
    SubjectToken tok;
    tok.vocab_id = cfg.subject_id();
    tok.embedding = Tensor({cfg.dim}, w.embed.dtype());
    for (std::size_t j = 0; j < cfg.dim; ++j)
        tok.embedding[j] = w.embed(tok.vocab_id, j);
    tok.embedding.seal();
    return tok;
}

void adamw_step(Tensor& param, const Tensor& grad, AdamState& state, double lr,
                const TrainConfig& cfg) {
    if (!param.same_shape(grad))
        throw ShapeError("adamw_step: param " + param.shape_str() + " vs grad " +
                         grad.shape_str());
    if (state.step == 0) {
        state.m = Tensor::zeros(param.shape(), DType::F64);
        state.v = Tensor::zeros(param.shape(), DType::F64);
    }
    ++state.step;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < param.numel(); ++i) {
        double g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        double m_hat = state.m[i] / bc1;
        double v_hat = state.v[i] / bc2;
        param[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) +
                          cfg.weight_decay * param[i]);
    }
    param.seal();
}

TrainResult train_coarse(const Model& model, const Schedule& sched,
                         const std::vector<Tensor>& references,
                         const std::vector<std::size_t>& prompt,
                         const TrainConfig& cfg) {
    if (references.empty()) throw ConfigError("train_coarse: no references");
    if (cfg.pool == 0) throw ConfigError("train_coarse: pool must be positive");
    bool has_subject = false;
    for (std::size_t id : prompt)
        if (id == model.config().subject_id()) has_subject = true;
    if (!has_subject)
        throw ConfigError("train_coarse: prompt must mention the subject token");

    SeededRng root(cfg.seed);
    SeededRng init_rng = root.split(1);
    TrainResult result;
    result.adapters = AdapterSet::full(model.config(), cfg.rank, init_rng);
    result.token = SubjectToken::init(model.config(), model.weights());

    // fixed pool of (reference, timestep, noise) tuples, walked in order, so
    // every `pool` consecutive steps see the same data (one epoch)
    struct PoolEntry {
        std::size_t ref;
        std::size_t t;
        Tensor eps;
    };
    SeededRng pool_rng = root.split(2);
    std::vector<PoolEntry> pool(cfg.pool);
    for (std::size_t i = 0; i < cfg.pool; ++i) {
        pool[i].ref = i % references.size();
        pool[i].t = 1 + static_cast<std::size_t>(pool_rng.next_below(sched.steps));
        pool[i].eps = Tensor::gaussian(references[pool[i].ref].shape(), pool_rng);
    }

    std::vector<AdamState> adapter_state(result.adapters.all().size() * 2);
    AdamState token_state;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const PoolEntry& entry = pool[step % cfg.pool];
        GradTape tape(true);
        ForwardOptions opts;
        opts.adapters = &result.adapters;
        opts.subject = &result.token;
        opts.train = true;
        ForwardResult fw;
        Var loss = epsilon_loss(tape, sched, model, opts, references[entry.ref],
                                prompt, entry.t, entry.eps, &fw);
        result.loss_curve.push_back(loss.value()[0]);
        tape.backward(loss);

        for (const AdapterVars& av : fw.adapter_vars) {
            LoraAdapter* ad =
                result.adapters.find(av.layer, static_cast<ProjSite>(av.site));
            if (!ad) throw ContractError("train_coarse: adapter var without adapter");
            std::size_t idx = static_cast<std::size_t>(
                std::distance(result.adapters.all().data(), ad));
            adamw_step(ad->down, tape.grad(av.down), adapter_state[2 * idx],
                       cfg.adapter_lr, cfg);
            adamw_step(ad->up, tape.grad(av.up), adapter_state[2 * idx + 1],
                       cfg.adapter_lr, cfg);
        }
        if (fw.token_var.valid())
            adamw_step(result.token.embedding, tape.grad(fw.token_var), token_state,
                       cfg.token_lr, cfg);
    }
    return result;
}

void save_checkpoint(const std::filesystem::path& dir, const AdapterSet& adapters,
                     const SubjectToken& token, const ModelConfig& cfg,
                     const std::vector<double>& loss_curve) {
    std::filesystem::create_directories(dir);
    KvFile kv("wk-ckpt-1");
    kv.set_int("layers", static_cast<long long>(cfg.layers));
    kv.set_int("dim", static_cast<long long>(cfg.dim));
    kv.set_int("token_id", static_cast<long long>(token.vocab_id));
    kv.set_int("adapters", static_cast<long long>(adapters.all().size()));
    for (std::size_t i = 0; i < adapters.all().size(); ++i) {
        const LoraAdapter& a = adapters.all()[i];
        const std::string p = "adapter." + std::to_string(i) + ".";
        kv.set_int(p + "layer", static_cast<long long>(a.layer));
        kv.set(p + "site", proj_site_name(a.site));
        kv.set_int(p + "rank", static_cast<long long>(a.rank));
        kv.set_double(p + "scale", a.scale);
        save_tensor(dir / ("adapter_" + std::to_string(i) + "_down.wkt"), a.down);
        save_tensor(dir / ("adapter_" + std::to_string(i) + "_up.wkt"), a.up);
    }
    save_tensor(dir / "token.wkt", token.embedding);
    kv.save(dir / "checkpoint.kv");

    std::ofstream curve(dir / "loss_curve.csv");
    if (!curve) throw IoError("cannot write loss curve");
    curve << "step,loss\n";
    for (std::size_t i = 0; i < loss_curve.size(); ++i) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.17g", loss_curve[i]);
        curve << i << "," << buf << "\n";
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir,
                           const ModelConfig& cfg) {
    KvFile kv = KvFile::load(dir / "checkpoint.kv", "wk-ckpt-1");
    if (static_cast<std::size_t>(kv.get_int("layers")) != cfg.layers ||
        static_cast<std::size_t>(kv.get_int("dim")) != cfg.dim)
        throw ConfigError("checkpoint was trained for a different model shape");
    Checkpoint ck;
    std::size_t count = static_cast<std::size_t>(kv.get_int("adapters"));
    for (std::size_t i = 0; i < count; ++i) {
        const std::string p = "adapter." + std::to_string(i) + ".";
        LoraAdapter a;
        a.layer = static_cast<std::size_t>(kv.get_int(p + "layer"));
        const std::string site = kv.get(p + "site");
        if (site == "key")
            a.site = ProjSite::Key;
        else if (site == "value")
            a.site = ProjSite::Value;
        else if (site == "output")
            a.site = ProjSite::Output;
        else
            throw ConfigError("checkpoint: bad adapter site '" + site + "'");
        a.rank = static_cast<std::size_t>(kv.get_int(p + "rank"));
        a.scale = kv.get_double(p + "scale");
        a.down = load_tensor(dir / ("adapter_" + std::to_string(i) + "_down.wkt"));
        a.up = load_tensor(dir / ("adapter_" + std::to_string(i) + "_up.wkt"));
        if (a.down.shape() != std::vector<std::size_t>{cfg.dim, a.rank} ||
            a.up.shape() != std::vector<std::size_t>{a.rank, cfg.dim})
            throw ConfigError("checkpoint: adapter factor shape mismatch");
        ck.adapters.add(std::move(a));
    }
    ck.token.vocab_id = static_cast<std::size_t>(kv.get_int("token_id"));
    ck.token.embedding = load_tensor(dir / "token.wkt");
    if (ck.token.embedding.shape() != std::vector<std::size_t>{cfg.dim})
        throw ConfigError("checkpoint: token embedding shape mismatch");

    std::ifstream curve(dir / "loss_curve.csv");
    if (curve) {
        std::string line;
        std::getline(curve, line);  // header
        while (std::getline(curve, line)) {
            auto comma = line.find(',');
            if (comma == std::string::npos) continue;
            ck.loss_curve.push_back(std::stod(line.substr(comma + 1)));
        }
    }
    return ck;
}

}  // namespace warpkit
