#include "warpkit/correspondence.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "warpkit/error.hpp"

namespace warpkit {

void Correlation::validate() const {
    if (frames.size() != grid.frames)
        throw ShapeError("correlation: frame count mismatch");
    for (const Tensor& f : frames)
        if (f.rank() != 2 || f.dim(0) != grid.per_frame() ||
            f.dim(1) != grid.per_frame())
            throw ShapeError("correlation: frame matrix " + f.shape_str());
}

Correlation directional_correlation(const Tensor& qa, const Tensor& kb,
                                    const GridDims& grid) {
    if (qa.rank() != 2 || kb.rank() != 2 || qa.dim(1) != kb.dim(1))
        throw ShapeError("directional_correlation: " + qa.shape_str() + " vs " +
                         kb.shape_str());
    if (qa.dim(0) != grid.tokens() || kb.dim(0) != grid.tokens())
        throw ShapeError("directional_correlation: descriptor rows != grid tokens");
    const std::size_t per = grid.per_frame(), width = qa.dim(1);
    const double inv = 1.0 / std::sqrt(static_cast<double>(width));
    Correlation corr;
    corr.grid = grid;
    for (std::size_t f = 0; f < grid.frames; ++f) {
        Tensor logits({per, per}, qa.dtype() == DType::F64 || kb.dtype() == DType::F64
                                      ? DType::F64
                                      : DType::F32);
        for (std::size_t i = 0; i < per; ++i) {
            const double* qrow = qa.data() + (f * per + i) * width;
            for (std::size_t j = 0; j < per; ++j) {
                const double* krow = kb.data() + (f * per + j) * width;
                double acc = 0.0;
                for (std::size_t c = 0; c < width; ++c) acc += qrow[c] * krow[c];
                logits(i, j) = acc * inv;
            }
        }
        logits.seal();
        corr.frames.push_back(softmax(logits, 1));
    }
    return corr;
}

Correlation symmetric_correlation(const Correlation& ab, const Correlation& ba) {
    ab.validate();
    ba.validate();
    if (ab.grid.frames != ba.grid.frames || ab.grid.h != ba.grid.h ||
        ab.grid.w != ba.grid.w)
        throw ShapeError("symmetric_correlation: grid mismatch");
    Correlation sym;
    sym.grid = ab.grid;
    for (std::size_t f = 0; f < ab.grid.frames; ++f)
        sym.frames.push_back(
            scale(add(ab.frames[f], transpose2d(ba.frames[f])), 0.5));
    return sym;
}

FlowField extract_flow(const Correlation& sym, FlowDirection dir) {
    sym.validate();
    FlowField flow;
    flow.grid = sym.grid;
    flow.dir = dir;
    flow.match.reserve(sym.grid.tokens());
    for (const Tensor& frame : sym.frames) {
        // rows anchor RefToGen (per a-token best b), cols anchor GenToRef
        std::vector<std::size_t> idx =
            argmax(frame, dir == FlowDirection::RefToGen ? 1 : 0);
        flow.match.insert(flow.match.end(), idx.begin(), idx.end());
    }
    flow.validate();
    return flow;
}

FlowField brute_force_match(const Correlation& sym, FlowDirection dir) {
    sym.validate();
    FlowField flow;
    flow.grid = sym.grid;
    flow.dir = dir;
    const std::size_t per = sym.grid.per_frame();
    for (const Tensor& frame : sym.frames) {
        for (std::size_t anchor = 0; anchor < per; ++anchor) {
            double best = -1e300;
            std::size_t best_j = 0;
            for (std::size_t j = 0; j < per; ++j) {
                double v = dir == FlowDirection::RefToGen ? frame(anchor, j)
                                                          : frame(j, anchor);
                if (v > best) {
                    best = v;
                    best_j = j;
                }
            }
            flow.match.push_back(best_j);
        }
    }
    flow.validate();
    return flow;
}

Tensor cycle_error(const FlowField& ref_to_gen, const FlowField& gen_to_ref) {
    if (ref_to_gen.dir != FlowDirection::RefToGen ||
        gen_to_ref.dir != FlowDirection::GenToRef)
        throw ContractError("cycle_error: pass (RefToGen, GenToRef) in that order");
    ref_to_gen.validate();
    gen_to_ref.validate();
    const GridDims& g = ref_to_gen.grid;
    if (g.frames != gen_to_ref.grid.frames || g.h != gen_to_ref.grid.h ||
        g.w != gen_to_ref.grid.w)
        throw ShapeError("cycle_error: grid mismatch");
    Tensor err({g.tokens()});
    for (std::size_t f = 0; f < g.frames; ++f) {
        for (std::size_t cell = 0; cell < g.per_frame(); ++cell) {
            const std::size_t anchor = f * g.per_frame() + cell;
            // clip -> reference -> clip round trip
            std::size_t ref_cell = ref_to_gen.match[anchor];
            std::size_t back = gen_to_ref.match[f * g.per_frame() + ref_cell];
            double dh = static_cast<double>(cell / g.w) -
                        static_cast<double>(back / g.w);
            double dw = static_cast<double>(cell % g.w) -
                        static_cast<double>(back % g.w);
            err[anchor] = std::sqrt(dh * dh + dw * dw);
        }
    }
    err.seal();
    return err;
}

PckResult pck(const FlowField& pred, const FlowField& truth, const Tensor& fg_mask,
              double alpha) {
    pred.validate();
    truth.validate();
    if (pred.dir != truth.dir)
        throw ContractError("pck: flow directions differ");
    const GridDims& g = pred.grid;
    if (g.frames != truth.grid.frames || g.h != truth.grid.h || g.w != truth.grid.w)
        throw ShapeError("pck: grid mismatch");
    if (fg_mask.numel() != g.tokens())
        throw ShapeError("pck: mask length " + std::to_string(fg_mask.numel()) +
                         " != tokens");
    if (!(alpha > 0.0)) throw ConfigError("pck: alpha must be positive");
    const double thr =
        alpha * static_cast<double>(std::max(g.h, g.w));
    PckResult res;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < g.tokens(); ++i) {
        if (fg_mask[i] == 0.0) continue;
        ++res.evaluated;
        double dh = static_cast<double>(pred.match[i] / g.w) -
                    static_cast<double>(truth.match[i] / g.w);
        double dw = static_cast<double>(pred.match[i] % g.w) -
                    static_cast<double>(truth.match[i] % g.w);
        if (std::sqrt(dh * dh + dw * dw) <= thr) ++hits;
    }
    if (res.evaluated == 0)
        throw ContractError("pck: foreground mask selects no anchors");
    res.value = static_cast<double>(hits) / static_cast<double>(res.evaluated);
    return res;
}

const char* descriptor_kind_name(DescriptorKind kind) {
    switch (kind) {
        case DescriptorKind::QkRopeFree: return "qk_ropefree";
        case DescriptorKind::Qk: return "qk";
        case DescriptorKind::Hidden: return "hidden";
    }
    throw ContractError("descriptor_kind_name: bad kind");
}

std::pair<Tensor, Tensor> descriptors_from_trace(const LayerTrace& trace,
                                                 DescriptorKind kind,
                                                 std::size_t n_video) {
    auto take = [n_video](const Tensor& t) {
        if (t.rank() != 2 || t.dim(0) < n_video)
            throw ShapeError("descriptors_from_trace: trace tensor " + t.shape_str());
        Tensor out({n_video, t.dim(1)}, t.dtype());
        for (std::size_t i = 0; i < n_video * t.dim(1); ++i) out[i] = t[i];
        out.seal();
        return out;
    };
    switch (kind) {
        case DescriptorKind::QkRopeFree:
            return {take(trace.q_pre), take(trace.k_pre)};
        case DescriptorKind::Qk:
            return {take(trace.q_post), take(trace.k_post)};
        case DescriptorKind::Hidden: {
            Tensor h = take(trace.out);
            return {h, h};
        }
    }
    throw ContractError("descriptors_from_trace: bad kind");
}

SweepResult descriptor_sweep(const Model& model, const Schedule& sched,
                             const Scene& scene,
                             const std::vector<std::size_t>& prompt,
                             const std::vector<std::size_t>& timesteps,
                             double alpha, std::uint64_t seed) {
    if (timesteps.empty()) throw ConfigError("descriptor_sweep: no timesteps");
    const GridDims& grid = scene.params.grid;
    const std::size_t n_video = grid.tokens();
    const Tensor fg = gt_mask(scene);
    const FlowField truth = gt_flow(scene, FlowDirection::RefToGen);
    const Tensor ref_latent = repeat_reference(scene, grid.frames);

    SeededRng root(seed);
    SweepResult sweep;
    for (std::size_t t : timesteps) {
        if (t < 1 || t > sched.steps)
            throw ConfigError("descriptor_sweep: timestep out of schedule");
        SeededRng gen_rng = root.split(2 * t);
        SeededRng ref_rng = root.split(2 * t + 1);
        Tensor x_gen = add_noise(
            sched, scene.video,
            Tensor::gaussian(scene.video.shape(), gen_rng), t);
        Tensor x_ref = add_noise(
            sched, ref_latent, Tensor::gaussian(ref_latent.shape(), ref_rng), t);

        ForwardOptions opts;
        opts.capture_trace = true;
        GradTape tape_g(false), tape_r(false);
        ForwardResult fw_gen = model.forward(tape_g, x_gen, prompt, t, opts);
        ForwardResult fw_ref = model.forward(tape_r, x_ref, prompt, t, opts);

        for (std::size_t layer = 0; layer < model.config().layers; ++layer) {
            for (DescriptorKind kind : {DescriptorKind::QkRopeFree,
                                        DescriptorKind::Qk,
                                        DescriptorKind::Hidden}) {
                auto [q_gen, k_gen] =
                    descriptors_from_trace(fw_gen.traces[layer], kind, n_video);
                auto [q_ref, k_ref] =
                    descriptors_from_trace(fw_ref.traces[layer], kind, n_video);
                Correlation c_gr = directional_correlation(q_gen, k_ref, grid);
                Correlation c_rg = directional_correlation(q_ref, k_gen, grid);
                Correlation sym = symmetric_correlation(c_gr, c_rg);
                FlowField flow = extract_flow(sym, FlowDirection::RefToGen);
                PckResult res = pck(flow, truth, fg, alpha);
                SweepRow row;
                row.layer = layer;
                row.kind = kind;
                row.timestep = t;
                row.pck = res.value;
                row.foreground = res.evaluated;
                if (res.value > sweep.best_pck) {
                    sweep.best_pck = res.value;
                    sweep.best_layer = layer;
                    sweep.best_kind = kind;
                }
                sweep.rows.push_back(row);
            }
        }
    }
    return sweep;
}

void save_flow_csv(const std::filesystem::path& path, const FlowField& flow) {
    flow.validate();
    std::ofstream os(path);
    if (!os) throw IoError("cannot write flow csv: " + path.string());
    os << "frame,row,col,drow,dcol\n";
    const GridDims& g = flow.grid;
    for (std::size_t i = 0; i < flow.match.size(); ++i) {
        auto [dh, dw] = flow.displacement(i);
        std::size_t f = i / g.per_frame();
        std::size_t cell = i % g.per_frame();
        os << f << "," << cell / g.w << "," << cell % g.w << "," << dh << ","
           << dw << "\n";
    }
    if (!os) throw IoError("flow csv write failed: " + path.string());
}

void save_sweep_csv(const std::filesystem::path& path, const SweepResult& sweep) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write sweep csv: " + path.string());
    os << "layer,kind,timestep,pck,fg_count\n";
    for (const SweepRow& r : sweep.rows) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", r.pck);
        os << r.layer << "," << descriptor_kind_name(r.kind) << "," << r.timestep
           << "," << buf << "," << r.foreground << "\n";
    }
    if (!os) throw IoError("sweep csv write failed: " + path.string());
}

}  // namespace warpkit
