#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "warpkit/error.hpp"
#include "warpkit/rng.hpp"

namespace warpkit {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

// Per-run default precision. Ops that create tensors without an explicit
// dtype pick this up; the CLI sets it once from config / WARPKIT_PRECISION.
DType default_dtype();
void set_default_dtype(DType dt);
const char* dtype_name(DType dt);
DType dtype_from_name(const std::string& name);

// Dense row-major tensor. Values are always held as doubles; an f32 tensor
// is rounded through float after every producing op, so f32 runs behave like
// float storage with double accumulation inside each op. seal() does the
// rounding and rejects non-finite values.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, DType dt = default_dtype());

    static Tensor zeros(std::vector<std::size_t> shape, DType dt = default_dtype());
    static Tensor full(std::vector<std::size_t> shape, double value,
                       DType dt = default_dtype());
    static Tensor from_values(std::vector<std::size_t> shape,
                              std::vector<double> values,
                              DType dt = default_dtype());
    static Tensor identity(std::size_t n, DType dt = default_dtype());
    static Tensor gaussian(std::vector<std::size_t> shape, SeededRng& rng,
                           double stddev = 1.0, DType dt = default_dtype());

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return data_.size(); }
    DType dtype() const { return dtype_; }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double operator[](std::size_t flat) const { return data_[flat]; }
    double& operator[](std::size_t flat) { return data_[flat]; }

    // rank-2 accessors (hot path in tests and small oracles)
    double operator()(std::size_t i, std::size_t j) const;
    double& operator()(std::size_t i, std::size_t j);

    double at(const std::vector<std::size_t>& idx) const;
    void set(const std::vector<std::size_t>& idx, double v);

    Tensor to(DType dt) const;
    Tensor reshaped(std::vector<std::size_t> shape) const;
    bool same_shape(const Tensor& other) const;
    std::string shape_str() const;

    // round to dtype and verify finiteness; every op calls this on its output
    void seal();

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    DType dtype_ = DType::F32;
};

// ---- ops ----------------------------------------------------------------
// Result dtype is f64 if either input is f64, else f32.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // [m,k]^T x [m,n]
Tensor transpose2d(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& a, double s);
Tensor softmax(const Tensor& a, std::size_t axis);

// smallest index wins ties; result layout = input shape with `axis` removed
std::vector<std::size_t> argmax(const Tensor& a, std::size_t axis);

double sum(const Tensor& a);
double mean(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
double dot(const Tensor& a, const Tensor& b);

bool bit_equal(const Tensor& a, const Tensor& b);
bool allclose(const Tensor& a, const Tensor& b, double tol);

}  // namespace warpkit
