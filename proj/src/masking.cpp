#include "warpkit/masking.hpp"

#include <cmath>
#include <fstream>

#include "warpkit/error.hpp"

namespace warpkit {

SubjectAttention::SubjectAttention(GridDims grid)
    : grid_(grid), sum_(Tensor::zeros({grid.tokens()}, DType::F64)) {}

void SubjectAttention::add(const LayerTrace& trace, std::size_t n_video,
                           std::size_t subject_col) {
    if (trace.probs.rank() != 3)
        throw ShapeError("subject attention: trace has no probability stack");
    const std::size_t heads = trace.probs.dim(0);
    const std::size_t s_len = trace.probs.dim(1);
    if (n_video != grid_.tokens() || n_video > s_len || subject_col >= s_len)
        throw ShapeError("subject attention: geometry mismatch");
    const double* p = trace.probs.data();
    for (std::size_t h = 0; h < heads; ++h) {
        const double* head = p + h * s_len * s_len;
        for (std::size_t i = 0; i < n_video; ++i)
            sum_[i] += head[i * s_len + subject_col];
        ++count_;
    }
}

void SubjectAttention::add_all_layers(const std::vector<LayerTrace>& traces,
                                      std::size_t n_video,
                                      std::size_t subject_col) {
    for (const LayerTrace& t : traces) add(t, n_video, subject_col);
}

Tensor SubjectAttention::mean() const {
    if (count_ == 0) throw ContractError("subject attention: nothing accumulated");
    return scale(sum_, 1.0 / static_cast<double>(count_));
}

Tensor foreground_mask(const Tensor& scores, const GridDims& grid,
                       const MaskConfig& cfg) {
    if (scores.numel() != grid.tokens())
        throw ShapeError("foreground_mask: score count != tokens");
    if (!(cfg.tau_fg >= 0.0)) throw ConfigError("foreground_mask: bad tau_fg");
    Tensor mask({grid.tokens()});
    const std::size_t per = grid.per_frame();
    for (std::size_t f = 0; f < grid.frames; ++f) {
        const std::size_t base = f * per;
        double lo = scores[base], hi = scores[base];
        for (std::size_t i = 1; i < per; ++i) {
            lo = std::min(lo, scores[base + i]);
            hi = std::max(hi, scores[base + i]);
        }
        for (std::size_t i = 0; i < per; ++i) {
            double s = scores[base + i];
            if (cfg.normalize) {
                if (hi == lo) {
                    mask[base + i] = 0.0;  // flat frame: no contrast, no mask
                    continue;
                }
                s = (s - lo) / (hi - lo);
            }
            mask[base + i] = s >= cfg.tau_fg ? 1.0 : 0.0;
        }
    }
    mask.seal();
    return mask;
}

Tensor cycle_mask(const Tensor& cycle_err, const Tensor& fg_mask,
                  const GridDims& grid, double tau_cc) {
    if (cycle_err.numel() != grid.tokens() || fg_mask.numel() != grid.tokens())
        throw ShapeError("cycle_mask: length mismatch");
    if (!(tau_cc >= 0.0)) throw ConfigError("cycle_mask: bad tau_cc");
    Tensor mask({grid.tokens()});
    const std::size_t per = grid.per_frame();
    for (std::size_t f = 0; f < grid.frames; ++f) {
        const std::size_t base = f * per;
        double fg = 0.0;
        for (std::size_t i = 0; i < per; ++i) fg += fg_mask[base + i];
        const double theta = tau_cc * static_cast<double>(grid.h) *
                             (fg / static_cast<double>(per));
        for (std::size_t i = 0; i < per; ++i)
            mask[base + i] = cycle_err[base + i] < theta ? 1.0 : 0.0;
    }
    mask.seal();
    return mask;
}

Tensor combine_masks(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("combine_masks: shape mismatch");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i)
        out[i] = (a[i] != 0.0 && b[i] != 0.0) ? 1.0 : 0.0;
    out.seal();
    return out;
}

std::size_t mask_count(const Tensor& mask) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.numel(); ++i)
        if (mask[i] != 0.0) ++n;
    return n;
}

void save_mask_pgm(const std::filesystem::path& path, const Tensor& mask,
                   const GridDims& grid, std::size_t frame) {
    if (mask.numel() != grid.tokens())
        throw ShapeError("save_mask_pgm: mask length mismatch");
    if (frame >= grid.frames) throw ShapeError("save_mask_pgm: frame out of range");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write pgm: " + path.string());
    os << "P2\n" << grid.w << " " << grid.h << "\n1\n";
    const std::size_t base = frame * grid.per_frame();
    for (std::size_t h = 0; h < grid.h; ++h) {
        for (std::size_t w = 0; w < grid.w; ++w) {
            if (w) os << " ";
            os << (mask[base + h * grid.w + w] != 0.0 ? 1 : 0);
        }
        os << "\n";
    }
    if (!os) throw IoError("pgm write failed: " + path.string());
}

}  // namespace warpkit
