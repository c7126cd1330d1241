#include "warpkit/autograd.hpp"

#include <cmath>

#include "warpkit/error.hpp"

namespace warpkit {

namespace {
// tanh-form gelu, same curve transformer stacks usually ship with
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_fwd(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}
}  // namespace

const Tensor& Var::value() const {
    if (!valid()) throw ContractError("value() on invalid Var");
    return tape->value_of(*this);
}

const Tensor& GradTape::value_of(Var v) const {
    int id = check_var(v, "value_of");
    return nodes_[static_cast<std::size_t>(id)].value;
}

int GradTape::check_var(Var v, const char* who) const {
    if (!v.valid() || v.tape != this)
        throw ContractError(std::string(who) + ": Var does not belong to this tape");
    if (static_cast<std::size_t>(v.id) >= nodes_.size())
        throw ContractError(std::string(who) + ": Var id out of range");
    return v.id;
}

Var GradTape::leaf(Tensor value) {
    if (frozen_) throw ContractError("tape is frozen after backward");
    Node n;
    n.value = std::move(value);
    n.is_leaf = true;
    n.needs_grad = recording_;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var GradTape::constant(Tensor value) {
    if (frozen_) throw ContractError("tape is frozen after backward");
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void GradTape::accum(int id, const Tensor& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.empty()) {
        n.grad = g;
    } else {
        n.grad = warpkit::add(n.grad, g);
    }
}

Var GradTape::push(Tensor value, const std::vector<int>& parents,
                   std::function<void()> backprop) {
    if (frozen_) throw ContractError("tape is frozen after backward");
    Node n;
    n.value = std::move(value);
    if (recording_) {
        for (int p : parents) {
            if (nodes_[static_cast<std::size_t>(p)].needs_grad) {
                n.needs_grad = true;
                break;
            }
        }
        if (n.needs_grad) n.backprop = std::move(backprop);
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void GradTape::backward(Var loss) {
    int root = check_var(loss, "backward");
    if (!recording_) throw ContractError("backward on a non-recording tape");
    if (frozen_) throw ContractError("backward already ran on this tape");
    const Tensor& lv = val(root);
    if (lv.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + lv.shape_str());
    frozen_ = true;
    Node& rn = nodes_[static_cast<std::size_t>(root)];
    if (!rn.needs_grad)
        throw ContractError("backward: loss does not depend on any leaf");
    rn.grad = Tensor::full(lv.shape(), 1.0, lv.dtype());
    for (int id = root; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad || n.grad.empty() || !n.backprop) continue;
        ++backward_visits_;
        n.backprop();
        if (!n.is_leaf) n.backprop = nullptr;  // free closure, keep leaf grads
    }
    // leaves the loss never reached get a well-defined zero gradient
    for (Node& n : nodes_) {
        if (n.is_leaf && n.grad.empty())
            n.grad = Tensor::zeros(n.value.shape(), n.value.dtype());
    }
}

const Tensor& GradTape::grad(Var leaf_var) const {
    int id = check_var(leaf_var, "grad");
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.is_leaf) throw ContractError("grad: only leaf gradients are exposed");
    if (!frozen_) throw ContractError("grad: call backward first");
    return n.grad;
}

const Tensor& GradTape::grad_of(int id) const {
    return nodes_[static_cast<std::size_t>(id)].grad;
}

// ---- ops ------------------------------------------------------------------

Var GradTape::matmul(Var a, Var b) {
    int ia = check_var(a, "matmul"), ib = check_var(b, "matmul");
    Tensor out = warpkit::matmul(val(ia), val(ib));
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia, ib}, [this, ia, ib, out_id] {
        const Tensor& g = grad_of(out_id);
        accum(ia, warpkit::matmul_nt(g, val(ib)));
        accum(ib, warpkit::matmul_tn(val(ia), g));
    });
}

Var GradTape::matmul_nt(Var a, Var b) {
    int ia = check_var(a, "matmul_nt"), ib = check_var(b, "matmul_nt");
    Tensor out = warpkit::matmul_nt(val(ia), val(ib));
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia, ib}, [this, ia, ib, out_id] {
        const Tensor& g = grad_of(out_id);
        accum(ia, warpkit::matmul(g, val(ib)));
        accum(ib, warpkit::matmul_tn(g, val(ia)));
    });
}

Var GradTape::add(Var a, Var b) {
    int ia = check_var(a, "add"), ib = check_var(b, "add");
    Tensor out = warpkit::add(val(ia), val(ib));
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia, ib}, [this, ia, ib, out_id] {
        const Tensor& g = grad_of(out_id);
        accum(ia, g);
        accum(ib, g);
    });
}

Var GradTape::sub(Var a, Var b) {
    int ia = check_var(a, "sub"), ib = check_var(b, "sub");
    Tensor out = warpkit::sub(val(ia), val(ib));
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia, ib}, [this, ia, ib, out_id] {
        const Tensor& g = grad_of(out_id);
        accum(ia, g);
        accum(ib, warpkit::scale(g, -1.0));
    });
}

Var GradTape::mul(Var a, Var b) {
    int ia = check_var(a, "mul"), ib = check_var(b, "mul");
    Tensor out = warpkit::mul(val(ia), val(ib));
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia, ib}, [this, ia, ib, out_id] {
        const Tensor& g = grad_of(out_id);
        accum(ia, warpkit::mul(g, val(ib)));
        accum(ib, warpkit::mul(g, val(ia)));
    });
}

Var GradTape::scale(Var a, double s) {
    int ia = check_var(a, "scale");
    Tensor out = warpkit::scale(val(ia), s);
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, s, out_id] {
        accum(ia, warpkit::scale(grad_of(out_id), s));
    });
}

Var GradTape::add_rowvec(Var m, Var v) {
    int im = check_var(m, "add_rowvec"), iv = check_var(v, "add_rowvec");
    const Tensor& mv = val(im);
    const Tensor& vv = val(iv);
    if (mv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != mv.dim(1))
        throw ShapeError("add_rowvec: " + mv.shape_str() + " + " + vv.shape_str());
    std::size_t r = mv.dim(0), c = mv.dim(1);
    Tensor out(mv.shape(), mv.dtype() == DType::F64 || vv.dtype() == DType::F64
                               ? DType::F64
                               : DType::F32);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(i, j) = mv(i, j) + vv[j];
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {im, iv}, [this, im, iv, r, c, out_id] {
        const Tensor& g = grad_of(out_id);
        accum(im, g);
        Tensor gv({c}, g.dtype());
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gv[j] += g(i, j);
        gv.seal();
        accum(iv, gv);
    });
}

Var GradTape::replace_row(Var m, std::size_t row, Var v) {
    int im = check_var(m, "replace_row"), iv = check_var(v, "replace_row");
    const Tensor& mv = val(im);
    const Tensor& vv = val(iv);
    if (mv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != mv.dim(1))
        throw ShapeError("replace_row: " + mv.shape_str() + " row <- " + vv.shape_str());
    if (row >= mv.dim(0)) throw ShapeError("replace_row: row out of range");
    std::size_t c = mv.dim(1);
    Tensor out = mv;
    for (std::size_t j = 0; j < c; ++j) out(row, j) = vv[j];
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {im, iv}, [this, im, iv, row, c, out_id] {
        const Tensor& g = grad_of(out_id);
        Tensor gm = g;
        Tensor gv({c}, g.dtype());
        for (std::size_t j = 0; j < c; ++j) {
            gv[j] = g(row, j);
            gm(row, j) = 0.0;
        }
        gm.seal();
        gv.seal();
        accum(im, gm);
        accum(iv, gv);
    });
}

Var GradTape::gather_rows(Var table, std::vector<std::size_t> rows) {
    int it = check_var(table, "gather_rows");
    const Tensor& tv = val(it);
    if (tv.rank() != 2) throw ShapeError("gather_rows: table must be rank-2");
    std::size_t c = tv.dim(1);
    Tensor out({rows.size(), c}, tv.dtype());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= tv.dim(0)) throw ShapeError("gather_rows: row out of range");
        for (std::size_t j = 0; j < c; ++j) out(i, j) = tv(rows[i], j);
    }
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    auto rows_copy = rows;  // keep ids alive in the closure
    return push(std::move(out), {it},
                [this, it, rows_copy = std::move(rows_copy), c, out_id] {
                    const Tensor& g = grad_of(out_id);
                    Tensor gt(val(it).shape(), g.dtype());
                    // repeated ids accumulate, as embedding grads must
                    for (std::size_t i = 0; i < rows_copy.size(); ++i)
                        for (std::size_t j = 0; j < c; ++j)
                            gt(rows_copy[i], j) += g(i, j);
                    gt.seal();
                    accum(it, gt);
                });
}

Var GradTape::concat_rows(Var a, Var b) {
    int ia = check_var(a, "concat_rows"), ib = check_var(b, "concat_rows");
    const Tensor& av = val(ia);
    const Tensor& bv = val(ib);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
        throw ShapeError("concat_rows: " + av.shape_str() + " | " + bv.shape_str());
    std::size_t ra = av.dim(0), rb = bv.dim(0), c = av.dim(1);
    Tensor out({ra + rb, c},
               av.dtype() == DType::F64 || bv.dtype() == DType::F64 ? DType::F64
                                                                    : DType::F32);
    for (std::size_t i = 0; i < ra * c; ++i) out[i] = av[i];
    for (std::size_t i = 0; i < rb * c; ++i) out[ra * c + i] = bv[i];
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia, ib}, [this, ia, ib, ra, rb, c, out_id] {
        const Tensor& g = grad_of(out_id);
        Tensor ga({ra, c}, g.dtype());
        Tensor gb({rb, c}, g.dtype());
        for (std::size_t i = 0; i < ra * c; ++i) ga[i] = g[i];
        for (std::size_t i = 0; i < rb * c; ++i) gb[i] = g[ra * c + i];
        ga.seal();
        gb.seal();
        accum(ia, ga);
        accum(ib, gb);
    });
}

Var GradTape::slice_rows(Var a, std::size_t begin, std::size_t end) {
    int ia = check_var(a, "slice_rows");
    const Tensor& av = val(ia);
    if (av.rank() != 2) throw ShapeError("slice_rows: want rank-2");
    if (begin >= end || end > av.dim(0))
        throw ShapeError("slice_rows: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") for " + av.shape_str());
    std::size_t c = av.dim(1), r = end - begin;
    Tensor out({r, c}, av.dtype());
    for (std::size_t i = 0; i < r * c; ++i) out[i] = av[begin * c + i];
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, begin, r, c, out_id] {
        const Tensor& g = grad_of(out_id);
        Tensor ga(val(ia).shape(), g.dtype());
        for (std::size_t i = 0; i < r * c; ++i) ga[begin * c + i] = g[i];
        ga.seal();
        accum(ia, ga);
    });
}

Var GradTape::slice_cols(Var a, std::size_t begin, std::size_t end) {
    int ia = check_var(a, "slice_cols");
    const Tensor& av = val(ia);
    if (av.rank() != 2) throw ShapeError("slice_cols: want rank-2");
    if (begin >= end || end > av.dim(1))
        throw ShapeError("slice_cols: bad range for " + av.shape_str());
    std::size_t r = av.dim(0), c = av.dim(1), w = end - begin;
    Tensor out({r, w}, av.dtype());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) out(i, j) = av(i, begin + j);
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, begin, r, c, w, out_id] {
        const Tensor& g = grad_of(out_id);
        Tensor ga({r, c}, g.dtype());
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) ga(i, begin + j) = g(i, j);
        ga.seal();
        accum(ia, ga);
    });
}

Var GradTape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    std::vector<int> ids;
    std::size_t r = 0, c = 0;
    DType dt = DType::F32;
    for (Var p : parts) {
        int ip = check_var(p, "concat_cols");
        const Tensor& pv = val(ip);
        if (pv.rank() != 2) throw ShapeError("concat_cols: want rank-2 parts");
        if (ids.empty())
            r = pv.dim(0);
        else if (pv.dim(0) != r)
            throw ShapeError("concat_cols: row mismatch");
        if (pv.dtype() == DType::F64) dt = DType::F64;
        c += pv.dim(1);
        ids.push_back(ip);
    }
    Tensor out({r, c}, dt);
    std::vector<std::size_t> offs;
    std::size_t off = 0;
    for (int ip : ids) {
        const Tensor& pv = val(ip);
        offs.push_back(off);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pv.dim(1); ++j) out(i, off + j) = pv(i, j);
        off += pv.dim(1);
    }
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), ids, [this, ids, offs, r, out_id] {
        const Tensor& g = grad_of(out_id);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const Tensor& pv = val(ids[k]);
            Tensor gp({r, pv.dim(1)}, g.dtype());
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < pv.dim(1); ++j)
                    gp(i, j) = g(i, offs[k] + j);
            gp.seal();
            accum(ids[k], gp);
        }
    });
}

Var GradTape::transpose(Var a) {
    int ia = check_var(a, "transpose");
    Tensor out = warpkit::transpose2d(val(ia));
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, out_id] {
        accum(ia, warpkit::transpose2d(grad_of(out_id)));
    });
}

Var GradTape::softmax_rows(Var a) {
    int ia = check_var(a, "softmax_rows");
    const Tensor& av = val(ia);
    if (av.rank() != 2) throw ShapeError("softmax_rows: want rank-2");
    Tensor out = warpkit::softmax(av, 1);
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, out_id] {
        const Tensor& g = grad_of(out_id);
        const Tensor& p = val(out_id);
        std::size_t r = p.dim(0), c = p.dim(1);
        Tensor ga({r, c}, g.dtype());
        for (std::size_t i = 0; i < r; ++i) {
            double gp = 0.0;
            for (std::size_t j = 0; j < c; ++j) gp += g(i, j) * p(i, j);
            for (std::size_t j = 0; j < c; ++j)
                ga(i, j) = p(i, j) * (g(i, j) - gp);
        }
        ga.seal();
        accum(ia, ga);
    });
}

Var GradTape::rmsnorm_rows(Var x, Var gain, double eps) {
    int ix = check_var(x, "rmsnorm_rows"), ig = check_var(gain, "rmsnorm_rows");
    const Tensor& xv = val(ix);
    const Tensor& gv = val(ig);
    if (xv.rank() != 2 || gv.rank() != 1 || gv.dim(0) != xv.dim(1))
        throw ShapeError("rmsnorm_rows: " + xv.shape_str() + " with gain " +
                         gv.shape_str());
    std::size_t r = xv.dim(0), c = xv.dim(1);
    Tensor out(xv.shape(),
               xv.dtype() == DType::F64 || gv.dtype() == DType::F64 ? DType::F64
                                                                    : DType::F32);
    std::vector<double> rms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < c; ++j) ss += xv(i, j) * xv(i, j);
        rms[i] = std::sqrt(ss / static_cast<double>(c) + eps);
        for (std::size_t j = 0; j < c; ++j) out(i, j) = xv(i, j) / rms[i] * gv[j];
    }
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ix, ig},
                [this, ix, ig, r, c, rms = std::move(rms), out_id] {
                    const Tensor& g = grad_of(out_id);
                    const Tensor& xv2 = val(ix);
                    const Tensor& gv2 = val(ig);
                    Tensor gx({r, c}, g.dtype());
                    Tensor gg({c}, g.dtype());
                    for (std::size_t i = 0; i < r; ++i) {
                        double dotgx = 0.0;  // (gain .* g) . x
                        for (std::size_t j = 0; j < c; ++j)
                            dotgx += gv2[j] * g(i, j) * xv2(i, j);
                        double r3 = rms[i] * rms[i] * rms[i];
                        for (std::size_t j = 0; j < c; ++j) {
                            gx(i, j) = gv2[j] * g(i, j) / rms[i] -
                                       xv2(i, j) * dotgx /
                                           (static_cast<double>(c) * r3);
                            gg[j] += g(i, j) * xv2(i, j) / rms[i];
                        }
                    }
                    gx.seal();
                    gg.seal();
                    accum(ix, gx);
                    accum(ig, gg);
                });
}

Var GradTape::gelu(Var a) {
    int ia = check_var(a, "gelu");
    const Tensor& av = val(ia);
    Tensor out(av.shape(), av.dtype());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = gelu_fwd(av[i]);
    out.seal();
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, out_id] {
        const Tensor& g = grad_of(out_id);
        const Tensor& av2 = val(ia);
        Tensor ga(av2.shape(), g.dtype());
        for (std::size_t i = 0; i < av2.numel(); ++i)
            ga[i] = g[i] * gelu_grad(av2[i]);
        ga.seal();
        accum(ia, ga);
    });
}

Var GradTape::sum_all(Var a) {
    int ia = check_var(a, "sum_all");
    const Tensor& av = val(ia);
    Tensor out = Tensor::from_values({1}, {warpkit::sum(av)}, av.dtype());
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, out_id] {
        const Tensor& g = grad_of(out_id);
        accum(ia, Tensor::full(val(ia).shape(), g[0], g.dtype()));
    });
}

Var GradTape::mean_all(Var a) {
    int ia = check_var(a, "mean_all");
    const Tensor& av = val(ia);
    Tensor out = Tensor::from_values({1}, {warpkit::mean(av)}, av.dtype());
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, out_id] {
        const Tensor& g = grad_of(out_id);
        double n = static_cast<double>(val(ia).numel());
        accum(ia, Tensor::full(val(ia).shape(), g[0] / n, g.dtype()));
    });
}

Var GradTape::mse(Var a, Var b) {
    int ia = check_var(a, "mse"), ib = check_var(b, "mse");
    const Tensor& av = val(ia);
    const Tensor& bv = val(ib);
    if (!av.same_shape(bv))
        throw ShapeError("mse: " + av.shape_str() + " vs " + bv.shape_str());
    double acc = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) {
        double d = av[i] - bv[i];
        acc += d * d;
    }
    double n = static_cast<double>(av.numel());
    Tensor out = Tensor::from_values(
        {1}, {acc / n},
        av.dtype() == DType::F64 || bv.dtype() == DType::F64 ? DType::F64
                                                             : DType::F32);
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia, ib}, [this, ia, ib, n, out_id] {
        const Tensor& g = grad_of(out_id);
        const Tensor& av2 = val(ia);
        const Tensor& bv2 = val(ib);
        Tensor ga(av2.shape(), g.dtype());
        for (std::size_t i = 0; i < av2.numel(); ++i)
            ga[i] = g[0] * 2.0 * (av2[i] - bv2[i]) / n;
        ga.seal();
        accum(ia, ga);
        accum(ib, warpkit::scale(ga, -1.0));
    });
}

Var GradTape::reshape(Var a, std::vector<std::size_t> shape) {
    int ia = check_var(a, "reshape");
    Tensor out = val(ia).reshaped(shape);
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out), {ia}, [this, ia, out_id] {
        accum(ia, grad_of(out_id).reshaped(val(ia).shape()));
    });
}

Var GradTape::unary_op(Var a, Tensor value,
                       std::function<Tensor(const Tensor&)> back) {
    int ia = check_var(a, "unary_op");
    int out_id = static_cast<int>(nodes_.size());
    return push(std::move(value), {ia}, [this, ia, back = std::move(back), out_id] {
        accum(ia, back(grad_of(out_id)));
    });
}

// ---- finite differences -----------------------------------------------------

FiniteDiffResult finite_diff_check(
    const std::function<double(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& params, const std::vector<Tensor>& analytic,
    double step, std::size_t coords_per_leaf, SeededRng* coord_rng,
    double zero_floor) {
    if (params.size() != analytic.size())
        throw ContractError("finite_diff_check: params/grads size mismatch");
    FiniteDiffResult res;
    std::vector<Tensor> work = params;
    for (std::size_t p = 0; p < work.size(); ++p) {
        if (!params[p].same_shape(analytic[p]))
            throw ShapeError("finite_diff_check: grad shape mismatch at leaf " +
                             std::to_string(p));
        std::vector<std::size_t> coords;
        std::size_t n = params[p].numel();
        if (coords_per_leaf == 0 || coords_per_leaf >= n) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            if (!coord_rng)
                throw ContractError("finite_diff_check: sampling needs an rng");
            for (std::size_t i = 0; i < coords_per_leaf; ++i)
                coords.push_back(coord_rng->next_below(n));
        }
        for (std::size_t i : coords) {
            double orig = work[p][i];
            auto central = [&](double h) {
                work[p][i] = orig + h;
                double fp = f(work);
                work[p][i] = orig - h;
                double fm = f(work);
                work[p][i] = orig;
                if (!std::isfinite(fp) || !std::isfinite(fm))
                    throw NumericError("finite_diff_check: non-finite objective");
                return (fp - fm) / (2.0 * h);
            };
            // Richardson-extrapolated central difference: kills the h^2 term
            double num = (4.0 * central(step) - central(2.0 * step)) / 3.0;
            double ana = analytic[p][i];
            double denom = std::max(std::fabs(num), std::fabs(ana));
            double err = (denom < zero_floor) ? 0.0 : std::fabs(num - ana) / denom;
            res.max_rel_err = std::max(res.max_rel_err, err);
            ++res.coords_checked;
        }
    }
    return res;
}

}  // namespace warpkit
