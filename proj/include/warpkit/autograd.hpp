#pragma once

#include <functional>
#include <vector>

#include "warpkit/tensor.hpp"

namespace warpkit {

class GradTape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
    GradTape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
};

// Reverse-mode tape. Nodes are appended in execution order, so walking ids in
// descending order is a topological sort and backward touches each node once.
// A non-recording tape runs the same ops value-only (inference mode). After
// backward() the tape is frozen: no new ops, gradients of leaves readable.
class GradTape {
public:
    explicit GradTape(bool recording = true) : recording_(recording) {}
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }
    std::size_t backward_visits() const { return backward_visits_; }

    // leaf: gradient exposed after backward. constant: never differentiated.
    Var leaf(Tensor value);
    Var constant(Tensor value);

    void backward(Var loss);
    const Tensor& grad(Var leaf_var) const;
    const Tensor& value_of(Var v) const;

    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_rowvec(Var m, Var v);  // m [r,c] + v [c] broadcast over rows
    Var replace_row(Var m, std::size_t row, Var v);
    Var gather_rows(Var table, std::vector<std::size_t> rows);
    Var concat_rows(Var a, Var b);
    Var slice_rows(Var a, std::size_t begin, std::size_t end);
    Var slice_cols(Var a, std::size_t begin, std::size_t end);
    Var concat_cols(const std::vector<Var>& parts);
    Var transpose(Var a);
    Var softmax_rows(Var a);
    Var rmsnorm_rows(Var x, Var gain, double eps = 1e-6);
    Var gelu(Var a);
    Var sum_all(Var a);
    Var mean_all(Var a);
    Var mse(Var a, Var b);
    Var reshape(Var a, std::vector<std::size_t> shape);

    // extension point for ops living outside this file (rotary embedding);
    // `back` maps the output gradient to the input gradient
    Var unary_op(Var a, Tensor value,
                 std::function<Tensor(const Tensor& out_grad)> back);

private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated on first accumulation
        bool needs_grad = false;
        bool is_leaf = false;
        std::function<void()> backprop;  // set only when recording & needed
    };

    const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& grad_of(int id) const;
    void accum(int id, const Tensor& g);
    Var push(Tensor value, const std::vector<int>& parents,
             std::function<void()> backprop);
    int check_var(Var v, const char* who) const;

    std::vector<Node> nodes_;
    bool recording_ = true;
    bool frozen_ = false;
    std::size_t backward_visits_ = 0;
};

// Numeric gradient check via Richardson-extrapolated central differences
// (evaluations at step and 2*step, h^2 term cancelled); compares with the
// analytic grads and returns the worst relative error.
// `coords_per_leaf` == 0 means every coordinate. Coordinates where both
// values sit below `zero_floor` count as exact: a central difference of a
// ~1-scale objective carries ~eps/step absolute noise, so gradients under
// that floor cannot be certified in relative terms.
struct FiniteDiffResult {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
};

FiniteDiffResult finite_diff_check(
    const std::function<double(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& params, const std::vector<Tensor>& analytic,
    double step, std::size_t coords_per_leaf = 0,
    SeededRng* coord_rng = nullptr, double zero_floor = 1e-10);

}  // namespace warpkit
