#pragma once

#include "warpkit/autograd.hpp"
#include "warpkit/tensor.hpp"

namespace warpkit {

// Lattice position of a token. f < 0 marks a text token, which rotary
// embedding leaves untouched.
struct GridPos {
    int f = -1;
    int h = 0;
    int w = 0;
    bool text() const { return f < 0; }
};

// Axial rotary embedding over (frame, row, col). The head dimension is split
// into three channel groups, one per axis; each group rotates adjacent pairs
// by angle coord * base^(-2i/group), the usual schedule. Every head uses the
// same tables.
struct RopeConfig {
    std::size_t frame_channels = 6;
    std::size_t row_channels = 6;
    std::size_t col_channels = 4;
    double base = 10000.0;

    std::size_t head_dim() const {
        return frame_channels + row_channels + col_channels;
    }
};

class Rope {
public:
    explicit Rope(RopeConfig cfg);

    const RopeConfig& config() const { return cfg_; }

    // x is [S, heads*head_dim]; pos has one entry per row. inverse applies
    // the opposite rotation (used for gradients: the rotation is orthogonal).
    Tensor apply(const Tensor& x, const std::vector<GridPos>& pos,
                 std::size_t heads, bool inverse = false) const;

    Var apply(GradTape& tape, Var x, const std::vector<GridPos>& pos,
              std::size_t heads) const;

    // per-axis frequencies, exposed for tests
    const std::vector<double>& frame_freqs() const { return freq_[0]; }
    const std::vector<double>& row_freqs() const { return freq_[1]; }
    const std::vector<double>& col_freqs() const { return freq_[2]; }

private:
    RopeConfig cfg_;
    std::vector<double> freq_[3];
};

}  // namespace warpkit
