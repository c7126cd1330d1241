#include "warpkit/mmdit.hpp"

#include <cmath>
#include <cstring>

#include "warpkit/adaptation.hpp"
#include "warpkit/error.hpp"

namespace warpkit {

namespace {

constexpr double kIdentityValueScale = 0.05;

void fnv_bytes(std::uint64_t& h, const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
    }
}

void fnv_tensor(std::uint64_t& h, const Tensor& t) {
    for (std::size_t d : t.shape()) fnv_bytes(h, &d, sizeof(d));
    fnv_bytes(h, t.data(), t.numel() * sizeof(double));
}

Tensor time_features(std::size_t dim, std::size_t t, DType dt) {
    Tensor f({dim}, dt);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        double w = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                            static_cast<double>(half));
        f[2 * i] = std::sin(static_cast<double>(t) * w);
        f[2 * i + 1] = std::cos(static_cast<double>(t) * w);
    }
    f.seal();
    return f;
}

}  // namespace

void ModelConfig::validate() const {
    if (layers == 0 || dim == 0 || heads == 0 || frames == 0 || grid_h == 0 ||
        grid_w == 0 || text_len == 0 || vocab < 2 || channels == 0 || mlp_mult == 0)
        throw ConfigError("model config: all dimensions must be positive");
    if (dim % heads != 0) throw ConfigError("model config: dim % heads != 0");
    if (dim % 2 != 0) throw ConfigError("model config: dim must be even");
    if (rope.head_dim() != head_dim())
        throw ConfigError("model config: rope channel groups must sum to head_dim");
    if (channels != dim)
        throw ConfigError(
            "model config: channels must equal dim (one cell per token)");
}

std::uint64_t Weights::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    fnv_tensor(h, patch_proj);
    fnv_tensor(h, embed);
    fnv_tensor(h, time_proj);
    for (const LayerWeights& lw : layers) {
        fnv_tensor(h, lw.attn_gain);
        fnv_tensor(h, lw.wq);
        fnv_tensor(h, lw.wk);
        fnv_tensor(h, lw.wv);
        fnv_tensor(h, lw.wo);
        fnv_tensor(h, lw.mlp_gain);
        fnv_tensor(h, lw.w1);
        fnv_tensor(h, lw.w2);
    }
    fnv_tensor(h, final_gain);
    fnv_tensor(h, head);
    return h;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t heads, const std::vector<std::uint8_t>* key_mask) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("attention: want rank-2 q/k/v");
    if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0) || k.dim(1) != v.dim(1))
        throw ShapeError("attention: shape mismatch " + q.shape_str() + " " +
                         k.shape_str() + " " + v.shape_str());
    if (heads == 0 || q.dim(1) % heads != 0)
        throw ShapeError("attention: width not divisible by heads");
    if (key_mask && key_mask->size() != k.dim(0))
        throw ShapeError("attention: key mask length mismatch");
    const std::size_t sq = q.dim(0), sk = k.dim(0), d = q.dim(1), hd = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor out({sq, d}, q.dtype() == DType::F64 || k.dtype() == DType::F64 ||
                                v.dtype() == DType::F64
                            ? DType::F64
                            : DType::F32);
    std::vector<double> logits(sk);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < sq; ++i) {
            double mx = -1e300;
            for (std::size_t j = 0; j < sk; ++j) {
                if (key_mask && !(*key_mask)[j]) {
                    logits[j] = -1e300;
                    continue;
                }
                double acc = 0.0;
                for (std::size_t c = 0; c < hd; ++c)
                    acc += q(i, off + c) * k(j, off + c);
                logits[j] = acc * inv;
                mx = std::max(mx, logits[j]);
            }
            if (mx == -1e300)
                throw ContractError("attention: key mask hides every key");
            double denom = 0.0;
            for (std::size_t j = 0; j < sk; ++j) {
                logits[j] = (logits[j] == -1e300) ? 0.0 : std::exp(logits[j] - mx);
                denom += logits[j];
            }
            for (std::size_t j = 0; j < sk; ++j) {
                double p = logits[j] / denom;
                if (p == 0.0) continue;
                for (std::size_t c = 0; c < hd; ++c)
                    out(i, off + c) += p * v(j, off + c);
            }
        }
    }
    out.seal();
    return out;
}

Model::Model(ModelConfig cfg, Weights w)
    : cfg_(cfg), w_(std::move(w)), rope_(cfg.rope) {
    cfg_.validate();
    auto want = [](const Tensor& t, std::vector<std::size_t> shape, const char* name) {
        if (t.shape() != shape)
            throw ConfigError(std::string("weights: bad shape for ") + name + ": " +
                              t.shape_str());
    };
    want(w_.patch_proj, {cfg_.channels, cfg_.dim}, "patch_proj");
    want(w_.embed, {cfg_.vocab, cfg_.dim}, "embed");
    want(w_.time_proj, {cfg_.dim, cfg_.dim}, "time_proj");
    if (w_.layers.size() != cfg_.layers)
        throw ConfigError("weights: layer count mismatch");
    for (const LayerWeights& lw : w_.layers) {
        want(lw.attn_gain, {cfg_.dim}, "attn_gain");
        want(lw.wq, {cfg_.dim, cfg_.dim}, "wq");
        want(lw.wk, {cfg_.dim, cfg_.dim}, "wk");
        want(lw.wv, {cfg_.dim, cfg_.dim}, "wv");
        want(lw.wo, {cfg_.dim, cfg_.dim}, "wo");
        want(lw.mlp_gain, {cfg_.dim}, "mlp_gain");
        want(lw.w1, {cfg_.dim, cfg_.mlp_mult * cfg_.dim}, "w1");
        want(lw.w2, {cfg_.mlp_mult * cfg_.dim, cfg_.dim}, "w2");
    }
    want(w_.final_gain, {cfg_.dim}, "final_gain");
    want(w_.head, {cfg_.dim, cfg_.channels}, "head");
}

Model Model::random_init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SeededRng rng(seed);
    const double s = 0.02;
    Weights w;
    w.patch_proj = Tensor::gaussian({cfg.channels, cfg.dim}, rng, s);
    w.embed = Tensor::gaussian({cfg.vocab, cfg.dim}, rng,
                               1.0 / std::sqrt(static_cast<double>(cfg.dim)));
    w.time_proj = Tensor::gaussian({cfg.dim, cfg.dim}, rng, s);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerWeights lw;
        lw.attn_gain = Tensor::full({cfg.dim}, 1.0);
        lw.wq = Tensor::gaussian({cfg.dim, cfg.dim}, rng, s);
        lw.wk = Tensor::gaussian({cfg.dim, cfg.dim}, rng, s);
        lw.wv = Tensor::gaussian({cfg.dim, cfg.dim}, rng, s);
        lw.wo = Tensor::gaussian({cfg.dim, cfg.dim}, rng, s);
        lw.mlp_gain = Tensor::full({cfg.dim}, 1.0);
        lw.w1 = Tensor::gaussian({cfg.dim, cfg.mlp_mult * cfg.dim}, rng, s);
        lw.w2 = Tensor::gaussian({cfg.mlp_mult * cfg.dim, cfg.dim}, rng, s);
        w.layers.push_back(std::move(lw));
    }
    w.final_gain = Tensor::full({cfg.dim}, 1.0);
    w.head = Tensor::gaussian({cfg.dim, cfg.channels}, rng, s);
    return Model(cfg, std::move(w));
}

Model Model::content_identity(const ModelConfig& cfg) {
    cfg.validate();
    Weights w;
    w.patch_proj = Tensor::identity(cfg.dim);
    // deterministic unit-ish embeddings; the reserved subject row reads the
    // per-head indicator channels so subject attention is content-driven
    SeededRng rng(0x1DEA);
    w.embed = Tensor::gaussian({cfg.vocab, cfg.dim}, rng,
                               1.0 / std::sqrt(static_cast<double>(cfg.dim)));
    const double amp = 1.0 / std::sqrt(static_cast<double>(cfg.heads));
    for (std::size_t j = 0; j < cfg.dim; ++j)
        w.embed(cfg.subject_id(), j) = 0.0;
    for (std::size_t h = 0; h < cfg.heads; ++h)
        w.embed(cfg.subject_id(), h * cfg.head_dim()) = amp;
    w.embed.seal();
    w.time_proj = Tensor::zeros({cfg.dim, cfg.dim});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        LayerWeights lw;
        lw.attn_gain = Tensor::full({cfg.dim}, 1.0);
        lw.wq = Tensor::identity(cfg.dim);
        lw.wk = Tensor::identity(cfg.dim);
        lw.wv = scale(Tensor::identity(cfg.dim), kIdentityValueScale);
        lw.wo = Tensor::identity(cfg.dim);
        lw.mlp_gain = Tensor::full({cfg.dim}, 1.0);
        lw.w1 = Tensor::zeros({cfg.dim, cfg.mlp_mult * cfg.dim});
        lw.w2 = Tensor::zeros({cfg.mlp_mult * cfg.dim, cfg.dim});
        w.layers.push_back(std::move(lw));
    }
    w.final_gain = Tensor::full({cfg.dim}, 1.0);
    w.head = Tensor::identity(cfg.dim);
    return Model(cfg, std::move(w));
}

std::vector<GridPos> Model::video_positions(std::size_t frames) const {
    std::vector<GridPos> pos;
    pos.reserve(frames * cfg_.grid_h * cfg_.grid_w);
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t h = 0; h < cfg_.grid_h; ++h)
            for (std::size_t w = 0; w < cfg_.grid_w; ++w)
                pos.push_back(GridPos{static_cast<int>(f), static_cast<int>(h),
                                      static_cast<int>(w)});
    return pos;
}

std::vector<GridPos> Model::sequence_positions(std::size_t frames) const {
    std::vector<GridPos> pos = video_positions(frames);
    for (std::size_t i = 0; i < cfg_.text_len; ++i) pos.push_back(GridPos{});
    return pos;
}

std::size_t Model::default_descriptor_layer() const {
    return cfg_.layers / 2 - 1;
}

ForwardResult Model::forward(GradTape& tape, const Tensor& latent,
                             const std::vector<std::size_t>& prompt, std::size_t t,
                             const ForwardOptions& opts) const {
    if (latent.rank() != 4 || latent.dim(1) != cfg_.grid_h ||
        latent.dim(2) != cfg_.grid_w || latent.dim(3) != cfg_.channels)
        throw ShapeError("forward: latent " + latent.shape_str() +
                         " does not fit the configured grid");
    if (prompt.size() != cfg_.text_len)
        throw ShapeError("forward: prompt length " + std::to_string(prompt.size()) +
                         " != " + std::to_string(cfg_.text_len));
    for (std::size_t id : prompt)
        if (id >= cfg_.vocab) throw ConfigError("forward: prompt id out of vocab");
    if (opts.hooks && tape.recording())
        throw ContractError("forward: injection hooks are inference-only");
    if (opts.train && !tape.recording())
        throw ContractError("forward: train mode needs a recording tape");

    const std::size_t frames = latent.dim(0);
    const std::size_t n_video = frames * cfg_.grid_h * cfg_.grid_w;
    const std::size_t s_len = n_video + cfg_.text_len;
    const std::vector<GridPos> pos = sequence_positions(frames);

    ForwardResult result;

    // tokens: patchified video cells, then text embeddings
    Var vid = tape.matmul(tape.constant(latent.reshaped({n_video, cfg_.channels})),
                          tape.constant(w_.patch_proj));
    Var text = tape.gather_rows(tape.constant(w_.embed), prompt);
    if (opts.subject) {
        if (opts.subject->vocab_id >= cfg_.vocab)
            throw ConfigError("forward: subject token id out of vocab");
        Var emb;
        if (opts.train) {
            emb = tape.leaf(opts.subject->embedding);
            result.token_var = emb;
        } else {
            emb = tape.constant(opts.subject->embedding);
        }
        for (std::size_t i = 0; i < prompt.size(); ++i)
            if (prompt[i] == opts.subject->vocab_id)
                text = tape.replace_row(text, i, emb);
    }
    Var x = tape.concat_rows(vid, text);

    Var temb = tape.matmul(
        tape.constant(time_features(cfg_.dim, t, latent.dtype()).reshaped({1, cfg_.dim})),
        tape.constant(w_.time_proj));
    x = tape.add_rowvec(x, tape.reshape(temb, {cfg_.dim}));

    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));

    auto project = [&](Var h, const Tensor& w, std::size_t layer,
                       ProjSite site) -> Var {
        Var out = tape.matmul(h, tape.constant(w));
        const LoraAdapter* ad =
            opts.adapters ? opts.adapters->find(layer, site) : nullptr;
        if (!ad) return out;
        Var down, up;
        if (opts.train) {
            down = tape.leaf(ad->down);
            up = tape.leaf(ad->up);
            result.adapter_vars.push_back(
                AdapterVars{layer, static_cast<int>(site), down, up});
        } else {
            down = tape.constant(ad->down);
            up = tape.constant(ad->up);
        }
        Var delta = tape.matmul(tape.matmul(h, down), up);
        return tape.add(out, tape.scale(delta, ad->scale));
    };

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const LayerWeights& lw = w_.layers[l];
        Var h = tape.rmsnorm_rows(x, tape.constant(lw.attn_gain));
        Var q = project(h, lw.wq, l, ProjSite::Query);  // never adapted
        Var k = project(h, lw.wk, l, ProjSite::Key);
        Var v = project(h, lw.wv, l, ProjSite::Value);

        Var qr = q, kr = k;
        if (cfg_.rope_enabled) {
            qr = rope_.apply(tape, q, pos, cfg_.heads);
            kr = rope_.apply(tape, k, pos, cfg_.heads);
        }

        LayerTrace trace;
        if (opts.capture_trace) {
            trace.q_pre = q.value();
            trace.k_pre = k.value();
            trace.v = v.value();
            trace.q_post = qr.value();
            trace.k_post = kr.value();
        }

        // inference-time value replacement on the video rows
        Var v_used = v;
        if (opts.hooks && opts.hooks->value_override) {
            Tensor v_video({n_video, cfg_.dim}, v.value().dtype());
            const Tensor& vv = v.value();
            for (std::size_t i = 0; i < n_video * cfg_.dim; ++i) v_video[i] = vv[i];
            v_video.seal();
            auto replaced = opts.hooks->value_override(l, v_video);
            if (replaced) {
                if (replaced->rank() != 2 || replaced->dim(0) != n_video ||
                    replaced->dim(1) != cfg_.dim)
                    throw InjectionError("value override: want [" +
                                         std::to_string(n_video) + "," +
                                         std::to_string(cfg_.dim) + "], got " +
                                         replaced->shape_str());
                Var head_part = tape.constant(std::move(*replaced));
                v_used = tape.concat_rows(head_part, tape.slice_rows(v, n_video, s_len));
            }
        }

        std::optional<Tensor> attn_override;
        if (opts.hooks && opts.hooks->attention_override) {
            AttentionTensors at{qr.value(), kr.value(), v.value(), n_video,
                                cfg_.heads};
            attn_override = opts.hooks->attention_override(l, at);
            if (attn_override &&
                (attn_override->rank() != 2 || attn_override->dim(0) != s_len ||
                 attn_override->dim(1) != cfg_.dim))
                throw InjectionError("attention override: bad shape " +
                                     attn_override->shape_str());
        }

        Var attn;
        const bool need_probs = opts.capture_trace || !attn_override;
        if (need_probs) {
            std::vector<Var> head_outs;
            Tensor probs_stack;
            if (opts.capture_trace)
                probs_stack = Tensor({cfg_.heads, s_len, s_len},
                                     qr.value().dtype());
            for (std::size_t hh = 0; hh < cfg_.heads; ++hh) {
                const std::size_t b = hh * cfg_.head_dim();
                const std::size_t e = b + cfg_.head_dim();
                Var qh = tape.slice_cols(qr, b, e);
                Var kh = tape.slice_cols(kr, b, e);
                Var logits = tape.scale(tape.matmul_nt(qh, kh), inv_scale);
                Var probs = tape.softmax_rows(logits);
                if (opts.capture_trace) {
                    const Tensor& pv = probs.value();
                    double* dst = probs_stack.data() + hh * s_len * s_len;
                    std::memcpy(dst, pv.data(), s_len * s_len * sizeof(double));
                }
                if (!attn_override) {
                    Var vh = tape.slice_cols(v_used, b, e);
                    head_outs.push_back(tape.matmul(probs, vh));
                }
            }
            if (opts.capture_trace) {
                probs_stack.seal();
                trace.probs = std::move(probs_stack);
            }
            if (!attn_override) attn = tape.concat_cols(head_outs);
        }
        if (attn_override) attn = tape.constant(std::move(*attn_override));

        Var o = project(attn, lw.wo, l, ProjSite::Output);
        x = tape.add(x, o);

        Var h2 = tape.rmsnorm_rows(x, tape.constant(lw.mlp_gain));
        Var m = tape.matmul(tape.gelu(tape.matmul(h2, tape.constant(lw.w1))),
                            tape.constant(lw.w2));
        x = tape.add(x, m);

        if (opts.capture_trace) {
            trace.out = x.value();
            result.traces.push_back(std::move(trace));
        }
    }

    Var xf = tape.rmsnorm_rows(x, tape.constant(w_.final_gain));
    result.eps = tape.matmul(tape.slice_rows(xf, 0, n_video), tape.constant(w_.head));
    return result;
}

}  // namespace warpkit
