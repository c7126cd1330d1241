#pragma once

#include "warpkit/correspondence.hpp"

namespace warpkit {

struct MaskConfig {
    double tau_fg = 0.3;
    double tau_cc = 0.1;
    // min-max normalize attention scores per frame before thresholding;
    // `false` thresholds the raw averaged attention instead
    bool normalize = true;
};

// Running average of video-to-text attention toward the subject token over
// steps, layers and heads. Feed it every sampled step's traces; mean() is the
// score field the foreground mask thresholds.
class SubjectAttention {
public:
    explicit SubjectAttention(GridDims grid);

    // one layer trace; subject_col is the absolute key column of the subject
    // token (n_video + its prompt slot)
    void add(const LayerTrace& trace, std::size_t n_video, std::size_t subject_col);
    void add_all_layers(const std::vector<LayerTrace>& traces, std::size_t n_video,
                        std::size_t subject_col);

    bool empty() const { return count_ == 0; }
    std::size_t samples() const { return count_; }
    Tensor mean() const;  // [tokens]

private:
    GridDims grid_;
    Tensor sum_;
    std::size_t count_ = 0;
};

// scores >= tau_fg after per-frame min-max normalization (or raw). A frame
// whose scores are all equal has no usable contrast and masks to zero.
Tensor foreground_mask(const Tensor& scores, const GridDims& grid,
                       const MaskConfig& cfg);

// Per frame: theta = tau_cc * H * (foreground fraction); cells whose flow
// round-trip error stays strictly below theta survive. An empty foreground
// frame yields theta = 0, i.e. nothing survives.
Tensor cycle_mask(const Tensor& cycle_err, const Tensor& fg_mask,
                  const GridDims& grid, double tau_cc);

// elementwise AND of two 0/1 masks
Tensor combine_masks(const Tensor& a, const Tensor& b);

std::size_t mask_count(const Tensor& mask);

// one frame of a token mask as a tiny PGM (maxval 1)
void save_mask_pgm(const std::filesystem::path& path, const Tensor& mask,
                   const GridDims& grid, std::size_t frame);

}  // namespace warpkit
