#include "warpkit/rope.hpp"

#include <cmath>

#include "warpkit/error.hpp"

namespace warpkit {

Rope::Rope(RopeConfig cfg) : cfg_(cfg) {
    const std::size_t groups[3] = {cfg.frame_channels, cfg.row_channels,
                                   cfg.col_channels};
    for (int a = 0; a < 3; ++a) {
        if (groups[a] == 0 || groups[a] % 2 != 0)
            throw ConfigError("rope channel groups must be positive and even");
        std::size_t pairs = groups[a] / 2;
        freq_[a].resize(pairs);
        for (std::size_t i = 0; i < pairs; ++i)
            freq_[a][i] = std::pow(cfg.base, -2.0 * static_cast<double>(i) /
                                                  static_cast<double>(groups[a]));
    }
}

Tensor Rope::apply(const Tensor& x, const std::vector<GridPos>& pos,
                   std::size_t heads, bool inverse) const {
    if (x.rank() != 2) throw ShapeError("rope: want rank-2, got " + x.shape_str());
    const std::size_t hd = cfg_.head_dim();
    if (heads == 0 || x.dim(1) != heads * hd)
        throw ShapeError("rope: width " + std::to_string(x.dim(1)) +
                         " is not heads * " + std::to_string(hd));
    if (pos.size() != x.dim(0))
        throw ShapeError("rope: position count mismatch");

    Tensor out = x;
    const double sign = inverse ? -1.0 : 1.0;
    const std::size_t group_off[3] = {0, cfg_.frame_channels,
                                      cfg_.frame_channels + cfg_.row_channels};
    for (std::size_t r = 0; r < x.dim(0); ++r) {
        const GridPos& p = pos[r];
        if (p.text()) continue;
        const double coord[3] = {static_cast<double>(p.f),
                                 static_cast<double>(p.h),
                                 static_cast<double>(p.w)};
        for (int a = 0; a < 3; ++a) {
            for (std::size_t i = 0; i < freq_[a].size(); ++i) {
                const double ang = sign * coord[a] * freq_[a][i];
                const double c = std::cos(ang), s = std::sin(ang);
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t col = h * hd + group_off[a] + 2 * i;
                    const double x0 = out(r, col), x1 = out(r, col + 1);
                    out(r, col) = x0 * c - x1 * s;
                    out(r, col + 1) = x0 * s + x1 * c;
                }
            }
        }
    }
    out.seal();
    return out;
}

Var Rope::apply(GradTape& tape, Var x, const std::vector<GridPos>& pos,
                std::size_t heads) const {
    Tensor value = apply(x.value(), pos, heads, false);
    // rotation is orthogonal, so the adjoint is the inverse rotation
    return tape.unary_op(x, std::move(value),
                         [this, pos, heads](const Tensor& g) {
                             return apply(g, pos, heads, true);
                         });
}

}  // namespace warpkit
