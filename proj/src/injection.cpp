#include "warpkit/injection.hpp"

#include <cmath>
#include <set>

#include "warpkit/error.hpp"

namespace warpkit {

namespace {

Tensor video_rows(const Tensor& t, std::size_t n_video) {
    if (t.rank() != 2 || t.dim(0) < n_video)
        throw ShapeError("video_rows: bad trace tensor " + t.shape_str());
    Tensor out({n_video, t.dim(1)}, t.dtype());
    for (std::size_t i = 0; i < n_video * t.dim(1); ++i) out[i] = t[i];
    out.seal();
    return out;
}

double row_cosine(const double* a, const double* b, std::size_t n) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na < 1e-30 || nb < 1e-30) return 0.0;
    return dot / std::sqrt(na * nb);
}

// mean cosine between the value rows feeding attention and the true-match
// reference rows, over ground-truth foreground anchors
double value_fidelity(const Tensor& v_stream, const Tensor& v_ref,
                      const FlowField& truth, const Tensor& fg_gt) {
    const GridDims& g = truth.grid;
    const std::size_t width = v_stream.dim(1);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < g.tokens(); ++p) {
        if (fg_gt[p] == 0.0) continue;
        const std::size_t src = (p / g.per_frame()) * g.per_frame() + truth.match[p];
        acc += row_cosine(v_stream.data() + p * width, v_ref.data() + src * width,
                          width);
        ++n;
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN()
                  : acc / static_cast<double>(n);
}

}  // namespace

Strategy strategy_from_name(const std::string& name) {
    if (name == "none") return Strategy::None;
    if (name == "value_warp") return Strategy::ValueWarp;
    if (name == "kv_replace") return Strategy::KvReplace;
    if (name == "token_concat") return Strategy::TokenConcat;
    throw ConfigError("unknown strategy '" + name + "'");
}

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::None: return "none";
        case Strategy::ValueWarp: return "value_warp";
        case Strategy::KvReplace: return "kv_replace";
        case Strategy::TokenConcat: return "token_concat";
    }
    throw ContractError("strategy_name: bad strategy");
}

std::pair<std::size_t, std::size_t> band_range(const BandSpec& band, std::size_t n) {
    if (!(band.lo >= 0.0) || !(band.hi <= 1.0) || band.lo > band.hi)
        throw ConfigError("band: want 0 <= lo <= hi <= 1");
    if (n == 0) throw ConfigError("band: empty index range");
    const double eps = 1e-9;
    double first_f = std::ceil(band.lo * static_cast<double>(n) - eps);
    double last_f = std::floor(band.hi * static_cast<double>(n) + eps);
    std::size_t first = static_cast<std::size_t>(std::max(1.0, first_f));
    std::size_t last = static_cast<std::size_t>(
        std::max(0.0, std::min(static_cast<double>(n), last_f)));
    return {first, last};  // first > last means the band selects nothing
}

Tensor warp_values(const Tensor& v_ref, const FlowField& ref_to_gen) {
    if (ref_to_gen.dir != FlowDirection::RefToGen)
        throw ContractError("warp_values: flow must be anchored on the clip");
    ref_to_gen.validate();
    const GridDims& g = ref_to_gen.grid;
    if (v_ref.rank() != 2 || v_ref.dim(0) != g.tokens())
        throw ShapeError("warp_values: values " + v_ref.shape_str() +
                         " vs grid tokens " + std::to_string(g.tokens()));
    const std::size_t width = v_ref.dim(1);
    Tensor out({g.tokens(), width}, v_ref.dtype());
    for (std::size_t p = 0; p < g.tokens(); ++p) {
        const std::size_t src =
            (p / g.per_frame()) * g.per_frame() + ref_to_gen.match[p];
        const double* srow = v_ref.data() + src * width;
        double* drow = out.data() + p * width;
        for (std::size_t c = 0; c < width; ++c) drow[c] = srow[c];
    }
    out.seal();
    return out;
}

Tensor blend_values(const Tensor& v_warp, const Tensor& v_gen, const Tensor& mask) {
    if (!v_warp.same_shape(v_gen))
        throw ShapeError("blend_values: " + v_warp.shape_str() + " vs " +
                         v_gen.shape_str());
    if (v_warp.rank() != 2 || mask.numel() != v_warp.dim(0))
        throw ShapeError("blend_values: mask length mismatch");
    const std::size_t width = v_warp.dim(1);
    Tensor out = v_gen;
    for (std::size_t p = 0; p < v_warp.dim(0); ++p) {
        if (mask[p] == 0.0) continue;
        for (std::size_t c = 0; c < width; ++c) out(p, c) = v_warp(p, c);
    }
    out.seal();
    return out;
}

Tensor kv_replacement_attention(const Tensor& q, const Tensor& k_gen,
                                const Tensor& v_gen, const Tensor& k_ref_vid,
                                const Tensor& v_ref_vid, const Tensor& mask,
                                std::size_t heads, std::size_t n_video) {
    const std::size_t s_len = q.dim(0), width = q.dim(1);
    if (k_gen.dim(0) != s_len || v_gen.dim(0) != s_len || n_video >= s_len)
        throw ShapeError("kv_replacement_attention: sequence mismatch");
    if (k_ref_vid.dim(0) != n_video || v_ref_vid.dim(0) != n_video)
        throw ShapeError("kv_replacement_attention: reference rows != video rows");
    if (mask.numel() != n_video)
        throw ShapeError("kv_replacement_attention: mask length mismatch");

    // reference key/value set: reference video rows, generation text rows
    Tensor k_ref(k_gen.shape(), k_gen.dtype());
    Tensor v_ref(v_gen.shape(), v_gen.dtype());
    for (std::size_t i = 0; i < n_video * width; ++i) {
        k_ref[i] = k_ref_vid[i];
        v_ref[i] = v_ref_vid[i];
    }
    for (std::size_t i = n_video * width; i < s_len * width; ++i) {
        k_ref[i] = k_gen[i];
        v_ref[i] = v_gen[i];
    }
    k_ref.seal();
    v_ref.seal();

    std::vector<std::uint8_t> allow_ref(s_len, 1), allow_gen(s_len, 1);
    for (std::size_t p = 0; p < n_video; ++p) {
        allow_ref[p] = mask[p] != 0.0 ? 1 : 0;
        allow_gen[p] = mask[p] != 0.0 ? 0 : 1;
    }
    Tensor f_ref = attention(q, k_ref, v_ref, heads, &allow_ref);
    Tensor f_gen = attention(q, k_gen, v_gen, heads, &allow_gen);

    Tensor out = f_gen;
    for (std::size_t p = 0; p < n_video; ++p) {
        if (mask[p] == 0.0) continue;
        for (std::size_t c = 0; c < width; ++c) out(p, c) = f_ref(p, c);
    }
    out.seal();
    return out;
}

Tensor token_concat_attention(const Tensor& q, const Tensor& k_gen,
                              const Tensor& v_gen, const Tensor& k_ref_vid,
                              const Tensor& v_ref_vid, std::size_t heads,
                              std::size_t n_video) {
    const std::size_t s_len = q.dim(0), width = q.dim(1);
    if (k_gen.dim(0) != s_len || v_gen.dim(0) != s_len || n_video >= s_len)
        throw ShapeError("token_concat_attention: sequence mismatch");
    if (k_ref_vid.dim(0) != n_video || v_ref_vid.dim(0) != n_video)
        throw ShapeError("token_concat_attention: reference rows != video rows");
    // widened set: generation video, reference video (original positions,
    // already rotated on its own lattice), generation text
    const std::size_t wide = s_len + n_video;
    Tensor k_wide({wide, width}, k_gen.dtype());
    Tensor v_wide({wide, width}, v_gen.dtype());
    for (std::size_t i = 0; i < n_video * width; ++i) {
        k_wide[i] = k_gen[i];
        v_wide[i] = v_gen[i];
    }
    for (std::size_t i = 0; i < n_video * width; ++i) {
        k_wide[n_video * width + i] = k_ref_vid[i];
        v_wide[n_video * width + i] = v_ref_vid[i];
    }
    for (std::size_t i = n_video * width; i < s_len * width; ++i) {
        k_wide[n_video * width + i] = k_gen[i];
        v_wide[n_video * width + i] = v_gen[i];
    }
    k_wide.seal();
    v_wide.seal();
    return attention(q, k_wide, v_wide, heads);
}

DualBranchResult run_dual_branch(const Model& model, const Schedule& sched,
                                 const AdapterSet* adapters,
                                 const SubjectToken* subject,
                                 const std::vector<std::size_t>& prompt,
                                 const Tensor& reference_latent,
                                 const InjectionConfig& cfg, std::uint64_t seed,
                                 const Scene* oracle, const Tensor* teacher) {
    const ModelConfig& mc = model.config();
    if (reference_latent.rank() != 4)
        throw ShapeError("run_dual_branch: reference latent must be [F,H,W,c]");
    const GridDims grid{reference_latent.dim(0), mc.grid_h, mc.grid_w};
    const std::size_t n_video = grid.tokens();

    const auto [s_lo, s_hi] = band_range(cfg.step_band, sched.steps);
    const auto [l_lo, l_hi] = band_range(cfg.layer_band, mc.layers);
    const std::size_t dlayer =
        cfg.descriptor_layer < 0 ? model.default_descriptor_layer()
                                 : static_cast<std::size_t>(cfg.descriptor_layer);
    if (dlayer >= mc.layers)
        throw ConfigError("run_dual_branch: descriptor layer out of range");

    std::optional<std::size_t> subject_col;
    if (subject) {
        for (std::size_t i = 0; i < prompt.size(); ++i) {
            if (prompt[i] == subject->vocab_id) {
                subject_col = n_video + i;
                break;
            }
        }
    }
    if (cfg.strategy != Strategy::None && !subject_col)
        throw ConfigError(
            "run_dual_branch: injection needs the subject token in the prompt");

    ForwardOptions opts;
    opts.adapters = adapters;
    opts.subject = subject;
    opts.capture_trace = true;

    const bool want_ref = cfg.strategy != Strategy::None || oracle != nullptr;
    Trajectory traj;
    if (want_ref) {
        ForwardOptions inv_opts;
        inv_opts.adapters = adapters;
        inv_opts.subject = subject;
        traj = ddim_invert(sched, model, inv_opts, reference_latent, prompt);
    }

    Tensor fg_gt;
    FlowField flow_gt;
    if (oracle) {
        fg_gt = gt_mask(*oracle);
        flow_gt = gt_flow(*oracle, FlowDirection::RefToGen);
        if (fg_gt.numel() != n_video)
            throw ShapeError("run_dual_branch: oracle grid does not match latent");
    }

    if (teacher && !teacher->same_shape(reference_latent))
        throw ShapeError("run_dual_branch: teacher clip shape mismatch");

    DualBranchResult out;
    Tensor eps0 = initial_noise(
        {grid.frames, mc.grid_h, mc.grid_w, mc.channels}, seed);
    Tensor x = teacher ? add_noise(sched, *teacher, eps0, sched.steps) : eps0;
    SubjectAttention accum(grid);
    Tensor qg_d, kg_d, qr_d, kr_d;
    bool have_desc = false;

    double fid_sum = 0.0;
    std::size_t fid_n = 0;

    for (std::size_t s = 1; s <= sched.steps; ++s) {
        const std::size_t t = sched.steps - s + 1;
        StepDiag diag;
        diag.step = s;
        diag.t = t;

        std::vector<LayerTrace> ref_traces;
        if (want_ref) {
            GradTape ref_tape(false);
            ForwardResult ref_fw = model.forward(ref_tape, traj.at(t), prompt, t, opts);
            ref_traces = std::move(ref_fw.traces);
        }

        diag.banded = cfg.strategy != Strategy::None && s >= s_lo && s <= s_hi;
        const bool probe_banded = oracle && s >= s_lo && s <= s_hi && s_lo <= s_hi;

        Tensor fg, cc, mt;
        FlowField flow_rg;
        bool have_masks = false;
        InjectionHooks hooks;
        std::set<std::size_t> applied;
        auto in_layer_band = [&](std::size_t l) {
            return l + 1 >= l_lo && l + 1 <= l_hi;
        };

        if (diag.banded && have_desc && !accum.empty()) {
            fg = foreground_mask(accum.mean(), grid, cfg.mask);
            Correlation c_gr = directional_correlation(qg_d, kr_d, grid);
            Correlation c_rg = directional_correlation(qr_d, kg_d, grid);
            Correlation sym = symmetric_correlation(c_gr, c_rg);
            flow_rg = extract_flow(sym, FlowDirection::RefToGen);
            FlowField flow_gr = extract_flow(sym, FlowDirection::GenToRef);
            cc = cycle_mask(cycle_error(flow_rg, flow_gr), fg, grid, cfg.mask.tau_cc);
            mt = combine_masks(fg, cc);
            have_masks = true;
            diag.fg_count = mask_count(fg);
            diag.cc_count = mask_count(cc);
            diag.mask_count = mask_count(mt);
            for (std::size_t p = 0; p < n_video; ++p)
                if (mt[p] != 0.0 && fg[p] == 0.0) ++diag.leak_count;
            if (oracle) diag.pck_vs_gt = pck(flow_rg, flow_gt, fg_gt, 0.05).value;

            if (diag.mask_count == 0) {
                diag.fallback = true;
                ++out.fallback_steps;
            } else {
                diag.injected = true;
                ++out.injected_steps;
                switch (cfg.strategy) {
                    case Strategy::ValueWarp:
                        hooks.value_override =
                            [&](std::size_t layer,
                                const Tensor& v_video) -> std::optional<Tensor> {
                            if (!in_layer_band(layer)) return std::nullopt;
                            if (!applied.insert(layer).second)
                                throw ContractError(
                                    "value override fired twice at one layer");
                            Tensor v_ref = video_rows(ref_traces[layer].v, n_video);
                            return blend_values(warp_values(v_ref, flow_rg),
                                                v_video, mt);
                        };
                        break;
                    case Strategy::KvReplace:
                        hooks.attention_override =
                            [&](std::size_t layer, const AttentionTensors& at)
                            -> std::optional<Tensor> {
                            if (!in_layer_band(layer)) return std::nullopt;
                            if (!applied.insert(layer).second)
                                throw ContractError(
                                    "attention override fired twice at one layer");
                            return kv_replacement_attention(
                                at.q_rot, at.k_rot, at.v,
                                video_rows(ref_traces[layer].k_post, n_video),
                                video_rows(ref_traces[layer].v, n_video), mt,
                                at.heads, n_video);
                        };
                        break;
                    case Strategy::TokenConcat:
                        hooks.attention_override =
                            [&](std::size_t layer, const AttentionTensors& at)
                            -> std::optional<Tensor> {
                            if (!in_layer_band(layer)) return std::nullopt;
                            if (!applied.insert(layer).second)
                                throw ContractError(
                                    "attention override fired twice at one layer");
                            return token_concat_attention(
                                at.q_rot, at.k_rot, at.v,
                                video_rows(ref_traces[layer].k_post, n_video),
                                video_rows(ref_traces[layer].v, n_video),
                                at.heads, n_video);
                        };
                        break;
                    case Strategy::None:
                        throw ContractError("unreachable");
                }
            }
            StepArtifacts art;
            art.step = s;
            art.fg = fg;
            art.cc = cc;
            art.mt = mt;
            art.flow = flow_rg;
            out.artifacts.push_back(std::move(art));
        }

        ForwardOptions step_opts = opts;
        if (diag.injected) step_opts.hooks = &hooks;

        Tensor eps;
        std::vector<LayerTrace> gen_traces;
        {
            GradTape gen_tape(false);
            ForwardResult gen_fw = model.forward(gen_tape, x, prompt, t, step_opts);
            eps = gen_fw.eps.value().reshaped(x.shape());
            gen_traces = std::move(gen_fw.traces);
        }

        if (subject_col) accum.add_all_layers(gen_traces, n_video, *subject_col);

        if (probe_banded && cfg.strategy != Strategy::KvReplace &&
            !ref_traces.empty()) {
            double layer_sum = 0.0;
            std::size_t layer_n = 0;
            for (std::size_t l = 0; l < mc.layers; ++l) {
                if (!in_layer_band(l)) continue;
                Tensor v_gen_vid = video_rows(gen_traces[l].v, n_video);
                Tensor v_stream =
                    (cfg.strategy == Strategy::ValueWarp && have_masks)
                        ? blend_values(warp_values(
                                           video_rows(ref_traces[l].v, n_video),
                                           flow_rg),
                                       v_gen_vid, mt)
                        : v_gen_vid;
                Tensor v_ref_vid = video_rows(ref_traces[l].v, n_video);
                layer_sum += value_fidelity(v_stream, v_ref_vid, flow_gt, fg_gt);
                ++layer_n;
            }
            if (layer_n > 0) {
                diag.fidelity = layer_sum / static_cast<double>(layer_n);
                fid_sum += diag.fidelity;
                ++fid_n;
            }
        }

        qg_d = video_rows(gen_traces[dlayer].q_pre, n_video);
        kg_d = video_rows(gen_traces[dlayer].k_pre, n_video);
        if (want_ref) {
            qr_d = video_rows(ref_traces[dlayer].q_pre, n_video);
            kr_d = video_rows(ref_traces[dlayer].k_pre, n_video);
            have_desc = true;
        }

        x = ddim_step(sched, x, eps, t, t - 1);
        if (teacher)
            x = t - 1 == 0 ? *teacher : add_noise(sched, *teacher, eps0, t - 1);
        out.steps.push_back(diag);
    }

    if (fid_n > 0) out.mean_fidelity = fid_sum / static_cast<double>(fid_n);
    out.video = std::move(x);
    return out;
}

}  // namespace warpkit
