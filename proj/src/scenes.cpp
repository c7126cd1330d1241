#include "warpkit/scenes.hpp"

#include <cmath>
#include <set>

#include "warpkit/error.hpp"
#include "warpkit/kvfile.hpp"
#include "warpkit/tensor_io.hpp"

namespace warpkit {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

inline std::size_t wrap(long v, std::size_t n) {
    long m = v % static_cast<long>(n);
    if (m < 0) m += static_cast<long>(n);
    return static_cast<std::size_t>(m);
}

// all the seeded raw material for one scene
struct SceneFabric {
    std::vector<double> base;                     // [c], unit norm * base_gain
    std::vector<std::vector<double>> bg;          // [H*W][c], smooth field
    std::vector<std::vector<double>> sig;         // [sprite*sprite][c]
    std::vector<double> indicator;                // [c]
};

SceneFabric weave(const SceneParams& p) {
    SceneFabric f;
    const std::size_t c = p.channels;
    SeededRng root(p.seed);

    SeededRng base_rng = root.split(1);
    f.base.resize(c);
    double norm = 0.0;
    for (auto& v : f.base) {
        v = base_rng.gaussian();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : f.base) v *= p.base_gain / norm;

    // per-channel low-frequency cosine; amplitude set so a cell's background
    // vector has norm ~ background_gain
    SeededRng bg_rng = root.split(2);
    const double amp = p.background_gain * std::sqrt(2.0 / static_cast<double>(c));
    std::vector<double> kh(c), kw(c), phase(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        kh[ch] = static_cast<double>(bg_rng.next_below(3));
        kw[ch] = static_cast<double>(bg_rng.next_below(3));
        phase[ch] = bg_rng.uniform() * kTwoPi;
    }
    f.bg.assign(p.grid.per_frame(), std::vector<double>(c));
    for (std::size_t h = 0; h < p.grid.h; ++h) {
        for (std::size_t w = 0; w < p.grid.w; ++w) {
            auto& cell = f.bg[h * p.grid.w + w];
            for (std::size_t ch = 0; ch < c; ++ch) {
                double arg = kTwoPi * (kh[ch] * static_cast<double>(h) /
                                           static_cast<double>(p.grid.h) +
                                       kw[ch] * static_cast<double>(w) /
                                           static_cast<double>(p.grid.w)) +
                             phase[ch];
                cell[ch] = amp * std::cos(arg);
            }
        }
    }

    SeededRng sig_rng = root.split(3);
    f.sig.assign(p.sprite * p.sprite, std::vector<double>(c));
    for (auto& s : f.sig) {
        double n2 = 0.0;
        for (auto& v : s) {
            v = sig_rng.gaussian();
            n2 += v * v;
        }
        n2 = std::sqrt(n2);
        for (auto& v : s) v *= p.signature_gain / n2;
    }

    f.indicator.assign(c, 0.0);
    const double bump =
        p.subject_gain / std::sqrt(static_cast<double>(p.subject_channels.size()));
    for (std::size_t ch : p.subject_channels) f.indicator[ch] = bump;
    return f;
}

// sprite-local coordinates of reference cell (h, w), or (-1, -1)
std::pair<int, int> sprite_local(const SceneParams& p, std::size_t h, std::size_t w) {
    long lh = static_cast<long>(h) - p.origin_h;
    long lw = static_cast<long>(w) - p.origin_w;
    std::size_t rh = wrap(lh, p.grid.h), rw = wrap(lw, p.grid.w);
    if (rh < p.sprite && rw < p.sprite)
        return {static_cast<int>(rh), static_cast<int>(rw)};
    return {-1, -1};
}

void fill_cell(double* dst, const SceneParams& p, const SceneFabric& f,
               std::size_t ref_h, std::size_t ref_w, bool background_here,
               bool sprite_here, double drift) {
    const std::size_t c = p.channels;
    auto [sh, sw] = sprite_local(p, ref_h, ref_w);
    const bool on_sprite = sprite_here && sh >= 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        double v = f.base[ch];
        if (background_here) v += f.bg[ref_h * p.grid.w + ref_w][ch];
        if (on_sprite) {
            v += (1.0 - drift) *
                 f.sig[static_cast<std::size_t>(sh) * p.sprite +
                       static_cast<std::size_t>(sw)][ch];
            v += f.indicator[ch];
        }
        dst[ch] = v;
    }
}

}  // namespace

void SceneParams::validate() const {
    if (grid.frames == 0 || grid.h == 0 || grid.w == 0 || channels == 0)
        throw ConfigError("scene: all dims must be positive");
    if (sprite == 0 || sprite > grid.h || sprite > grid.w)
        throw ConfigError("scene: sprite side must fit the grid");
    if (subject_drift < 0.0 || subject_drift > 1.0)
        throw ConfigError("scene: subject_drift in [0,1]");
    if (subject_channels.empty())
        throw ConfigError("scene: need at least one subject channel");
    std::set<std::size_t> seen;
    for (std::size_t ch : subject_channels) {
        if (ch >= channels) throw ConfigError("scene: subject channel out of range");
        if (!seen.insert(ch).second)
            throw ConfigError("scene: duplicate subject channel");
    }
    if (base_gain < 0 || subject_gain < 0 || signature_gain < 0 ||
        background_gain < 0)
        throw ConfigError("scene: gains must be nonnegative");
}

void FlowField::validate() const {
    if (match.size() != grid.tokens())
        throw ShapeError("flow: match count " + std::to_string(match.size()) +
                         " != tokens " + std::to_string(grid.tokens()));
    for (std::size_t m : match)
        if (m >= grid.per_frame())
            throw ShapeError("flow: match index out of frame");
}

std::pair<int, int> FlowField::displacement(std::size_t i) const {
    if (i >= match.size()) throw ShapeError("flow: anchor out of range");
    const std::size_t cell = i % grid.per_frame();
    const int ah = static_cast<int>(cell / grid.w), aw = static_cast<int>(cell % grid.w);
    const int sh = static_cast<int>(match[i] / grid.w);
    const int sw = static_cast<int>(match[i] % grid.w);
    return {sh - ah, sw - aw};
}

Scene make_scene(const SceneParams& params) {
    params.validate();
    const SceneParams& p = params;
    SceneFabric fabric = weave(p);

    Scene scene;
    scene.params = p;
    scene.video = Tensor({p.grid.frames, p.grid.h, p.grid.w, p.channels});
    scene.reference = Tensor({1, p.grid.h, p.grid.w, p.channels});

    for (std::size_t h = 0; h < p.grid.h; ++h)
        for (std::size_t w = 0; w < p.grid.w; ++w)
            fill_cell(scene.reference.data() + (h * p.grid.w + w) * p.channels, p,
                      fabric, h, w, true, true, 0.0);
    scene.reference.seal();

    for (std::size_t fidx = 0; fidx < p.grid.frames; ++fidx) {
        const int dh = p.step_h * static_cast<int>(fidx);
        const int dw = p.step_w * static_cast<int>(fidx);
        scene.shift.emplace_back(dh, dw);
        for (std::size_t h = 0; h < p.grid.h; ++h) {
            for (std::size_t w = 0; w < p.grid.w; ++w) {
                double* dst = scene.video.data() +
                              ((fidx * p.grid.h + h) * p.grid.w + w) * p.channels;
                std::size_t sh = wrap(static_cast<long>(h) - dh, p.grid.h);
                std::size_t sw = wrap(static_cast<long>(w) - dw, p.grid.w);
                if (p.whole_frame) {
                    // the whole reference frame rides the torus
                    fill_cell(dst, p, fabric, sh, sw, true, true, p.subject_drift);
                } else {
                    // static background; only the sprite moves over it
                    auto [lh, lw] = sprite_local(p, sh, sw);
                    if (lh >= 0) {
                        fill_cell(dst, p, fabric, sh, sw, false, true,
                                  p.subject_drift);
                    } else {
                        fill_cell(dst, p, fabric, h, w, true, false,
                                  p.subject_drift);
                    }
                }
            }
        }
    }
    scene.video.seal();
    return scene;
}

Tensor repeat_reference(const Scene& scene, std::size_t frames) {
    const SceneParams& p = scene.params;
    Tensor out({frames, p.grid.h, p.grid.w, p.channels},
               scene.reference.dtype());
    const std::size_t per = p.grid.per_frame() * p.channels;
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t i = 0; i < per; ++i) out[f * per + i] = scene.reference[i];
    out.seal();
    return out;
}

FlowField gt_flow(const Scene& scene, FlowDirection dir) {
    const SceneParams& p = scene.params;
    FlowField flow;
    flow.grid = p.grid;
    flow.dir = dir;
    flow.match.resize(p.grid.tokens());
    for (std::size_t f = 0; f < p.grid.frames; ++f) {
        const int dh = scene.shift[f].first, dw = scene.shift[f].second;
        for (std::size_t h = 0; h < p.grid.h; ++h) {
            for (std::size_t w = 0; w < p.grid.w; ++w) {
                const std::size_t anchor = (f * p.grid.h + h) * p.grid.w + w;
                std::size_t mh, mw;
                if (dir == FlowDirection::RefToGen) {
                    // where in the reference does clip content at (h, w) live
                    mh = wrap(static_cast<long>(h) - dh, p.grid.h);
                    mw = wrap(static_cast<long>(w) - dw, p.grid.w);
                    if (!p.whole_frame) {
                        auto [lh, lw] = sprite_local(p, mh, mw);
                        if (lh < 0) {  // background is static
                            mh = h;
                            mw = w;
                        }
                    }
                } else {
                    // anchor on the reference frame: where did its content go
                    mh = wrap(static_cast<long>(h) + dh, p.grid.h);
                    mw = wrap(static_cast<long>(w) + dw, p.grid.w);
                    if (!p.whole_frame) {
                        auto [lh, lw] = sprite_local(p, h, w);
                        if (lh < 0) {
                            mh = h;
                            mw = w;
                        }
                    }
                }
                flow.match[anchor] = mh * p.grid.w + mw;
            }
        }
    }
    flow.validate();
    return flow;
}

Tensor gt_mask(const Scene& scene) {
    const SceneParams& p = scene.params;
    Tensor mask({p.grid.tokens()});
    for (std::size_t f = 0; f < p.grid.frames; ++f) {
        const int dh = scene.shift[f].first, dw = scene.shift[f].second;
        for (std::size_t h = 0; h < p.grid.h; ++h) {
            for (std::size_t w = 0; w < p.grid.w; ++w) {
                std::size_t sh = wrap(static_cast<long>(h) - dh, p.grid.h);
                std::size_t sw = wrap(static_cast<long>(w) - dw, p.grid.w);
                auto [lh, lw] = sprite_local(p, sh, sw);
                mask[(f * p.grid.h + h) * p.grid.w + w] = lh >= 0 ? 1.0 : 0.0;
            }
        }
    }
    mask.seal();
    return mask;
}

Tensor gt_reference_mask(const Scene& scene) {
    const SceneParams& p = scene.params;
    Tensor mask({p.grid.per_frame()});
    for (std::size_t h = 0; h < p.grid.h; ++h)
        for (std::size_t w = 0; w < p.grid.w; ++w)
            mask[h * p.grid.w + w] =
                sprite_local(p, h, w).first >= 0 ? 1.0 : 0.0;
    mask.seal();
    return mask;
}

std::vector<Tensor> make_reference_set(const Scene& scene, std::size_t count) {
    if (count == 0) throw ConfigError("make_reference_set: count must be positive");
    const SceneParams& p = scene.params;
    std::vector<Tensor> refs;
    refs.push_back(scene.reference);
    SeededRng rng = SeededRng(p.seed).split(7);
    for (std::size_t i = 1; i < count; ++i) {
        // same subject, re-placed on the torus
        SceneParams q = p;
        q.grid.frames = 1;
        q.origin_h = static_cast<int>(rng.next_below(p.grid.h));
        q.origin_w = static_cast<int>(rng.next_below(p.grid.w));
        q.step_h = q.step_w = 0;
        q.subject_drift = 0.0;
        Scene variant = make_scene(q);
        refs.push_back(variant.reference);
    }
    return refs;
}

void save_scene(const std::filesystem::path& dir, const Scene& scene) {
    std::filesystem::create_directories(dir);
    const SceneParams& p = scene.params;
    KvFile kv("wk-scene-1");
    kv.set_int("frames", static_cast<long long>(p.grid.frames));
    kv.set_int("grid_h", static_cast<long long>(p.grid.h));
    kv.set_int("grid_w", static_cast<long long>(p.grid.w));
    kv.set_int("channels", static_cast<long long>(p.channels));
    kv.set_int("sprite", static_cast<long long>(p.sprite));
    kv.set_int("origin_h", p.origin_h);
    kv.set_int("origin_w", p.origin_w);
    kv.set_int("step_h", p.step_h);
    kv.set_int("step_w", p.step_w);
    kv.set_int("whole_frame", p.whole_frame ? 1 : 0);
    kv.set_double("base_gain", p.base_gain);
    kv.set_double("subject_gain", p.subject_gain);
    kv.set_double("signature_gain", p.signature_gain);
    kv.set_double("background_gain", p.background_gain);
    kv.set_double("subject_drift", p.subject_drift);
    std::string chans;
    for (std::size_t i = 0; i < p.subject_channels.size(); ++i) {
        if (i) chans += ",";
        chans += std::to_string(p.subject_channels[i]);
    }
    kv.set("subject_channels", chans);
    kv.set_int("seed", static_cast<long long>(p.seed));
    kv.save(dir / "scene.kv");
    save_tensor(dir / "video.wkt", scene.video);
    save_tensor(dir / "reference.wkt", scene.reference);
}

Scene load_scene(const std::filesystem::path& dir) {
    KvFile kv = KvFile::load(dir / "scene.kv", "wk-scene-1");
    SceneParams p;
    p.grid.frames = static_cast<std::size_t>(kv.get_int("frames"));
    p.grid.h = static_cast<std::size_t>(kv.get_int("grid_h"));
    p.grid.w = static_cast<std::size_t>(kv.get_int("grid_w"));
    p.channels = static_cast<std::size_t>(kv.get_int("channels"));
    p.sprite = static_cast<std::size_t>(kv.get_int("sprite"));
    p.origin_h = static_cast<int>(kv.get_int("origin_h"));
    p.origin_w = static_cast<int>(kv.get_int("origin_w"));
    p.step_h = static_cast<int>(kv.get_int("step_h"));
    p.step_w = static_cast<int>(kv.get_int("step_w"));
    p.whole_frame = kv.get_int("whole_frame") != 0;
    p.base_gain = kv.get_double("base_gain");
    p.subject_gain = kv.get_double("subject_gain");
    p.signature_gain = kv.get_double("signature_gain");
    p.background_gain = kv.get_double("background_gain");
    p.subject_drift = kv.get_double("subject_drift");
    p.subject_channels.clear();
    std::string chans = kv.get("subject_channels");
    std::size_t pos = 0;
    while (pos < chans.size()) {
        std::size_t comma = chans.find(',', pos);
        if (comma == std::string::npos) comma = chans.size();
        p.subject_channels.push_back(
            static_cast<std::size_t>(std::stoull(chans.substr(pos, comma - pos))));
        pos = comma + 1;
    }
    p.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
    p.validate();

    Scene scene;
    scene.params = p;
    scene.video = load_tensor(dir / "video.wkt");
    scene.reference = load_tensor(dir / "reference.wkt");
    if (scene.video.shape() !=
        std::vector<std::size_t>{p.grid.frames, p.grid.h, p.grid.w, p.channels})
        throw ConfigError("scene: video tensor does not match scene.kv");
    if (scene.reference.shape() !=
        std::vector<std::size_t>{1, p.grid.h, p.grid.w, p.channels})
        throw ConfigError("scene: reference tensor does not match scene.kv");
    for (std::size_t f = 0; f < p.grid.frames; ++f)
        scene.shift.emplace_back(p.step_h * static_cast<int>(f),
                                 p.step_w * static_cast<int>(f));
    return scene;
}

}  // namespace warpkit
