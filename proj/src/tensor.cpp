#include "warpkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace warpkit {

namespace {

DType g_default_dtype = DType::F32;

std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor dims must be positive");
        if (d > std::numeric_limits<std::size_t>::max() / n)
            throw ShapeError("tensor shape overflows size_t");
        n *= d;
    }
    return n;
}

DType promote(DType a, DType b) {
    return (a == DType::F64 || b == DType::F64) ? DType::F64 : DType::F32;
}

void require_rank2(const Tensor& t, const char* who) {
    if (t.rank() != 2)
        throw ShapeError(std::string(who) + ": want rank-2, got " + t.shape_str());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(who) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

}  // namespace

DType default_dtype() { return g_default_dtype; }
void set_default_dtype(DType dt) { g_default_dtype = dt; }

const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

DType dtype_from_name(const std::string& name) {
    if (name == "f32") return DType::F32;
    if (name == "f64") return DType::F64;
    throw ConfigError("unknown precision '" + name + "' (want f32 or f64)");
}

Tensor::Tensor(std::vector<std::size_t> shape, DType dt)
    : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0), dtype_(dt) {}

Tensor Tensor::zeros(std::vector<std::size_t> shape, DType dt) {
    return Tensor(std::move(shape), dt);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, DType dt) {
    Tensor t(std::move(shape), dt);
    std::fill(t.data_.begin(), t.data_.end(), value);
    t.seal();
    return t;
}

Tensor Tensor::from_values(std::vector<std::size_t> shape,
                           std::vector<double> values, DType dt) {
    std::size_t n = checked_numel(shape);
    if (values.size() != n)
        throw ShapeError("from_values: got " + std::to_string(values.size()) +
                         " values for " + std::to_string(n) + " elements");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    t.dtype_ = dt;
    t.seal();
    return t;
}

Tensor Tensor::identity(std::size_t n, DType dt) {
    Tensor t({n, n}, dt);
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
}

Tensor Tensor::gaussian(std::vector<std::size_t> shape, SeededRng& rng,
                        double stddev, DType dt) {
    Tensor t(std::move(shape), dt);
    for (auto& v : t.data_) v = rng.gaussian() * stddev;
    t.seal();
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size())
        throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " +
                         shape_str());
    return shape_[axis];
}

double Tensor::operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
}

double& Tensor::operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
}

double Tensor::at(const std::vector<std::size_t>& idx) const {
    if (idx.size() != shape_.size())
        throw ShapeError("at: index rank mismatch for " + shape_str());
    std::size_t flat = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= shape_[i]) throw ShapeError("at: index out of range");
        flat = flat * shape_[i] + idx[i];
    }
    return data_[flat];
}

void Tensor::set(const std::vector<std::size_t>& idx, double v) {
    if (idx.size() != shape_.size())
        throw ShapeError("set: index rank mismatch for " + shape_str());
    std::size_t flat = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= shape_[i]) throw ShapeError("set: index out of range");
        flat = flat * shape_[i] + idx[i];
    }
    data_[flat] = v;
    seal();
}

Tensor Tensor::to(DType dt) const {
    Tensor t = *this;
    t.dtype_ = dt;
    t.seal();
    return t;
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (checked_numel(shape) != numel())
        throw ShapeError("reshape: element count mismatch " + shape_str());
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

bool Tensor::same_shape(const Tensor& other) const {
    return shape_ == other.shape_;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ',';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

void Tensor::seal() {
    if (dtype_ == DType::F32) {
        for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
    }
    for (double v : data_) {
        if (!std::isfinite(v))
            throw NumericError("non-finite value in tensor " + shape_str());
    }
}

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dims " + a.shape_str() + " x " + b.shape_str());
    Tensor out({m, n}, promote(a.dtype(), b.dtype()));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    // ikj order: streams through b and out rows, decent on one core
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* orow = po + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    out.seal();
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        throw ShapeError("matmul_nt: inner dims " + a.shape_str() + " x " +
                         b.shape_str() + "^T");
    Tensor out({m, n}, promote(a.dtype(), b.dtype()));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            po[i * n + j] = acc;
        }
    }
    out.seal();
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_tn");
    require_rank2(b, "matmul_tn");
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != m)
        throw ShapeError("matmul_tn: inner dims " + a.shape_str() + "^T x " +
                         b.shape_str());
    Tensor out({k, n}, promote(a.dtype(), b.dtype()));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        const double* brow = pb + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            double* orow = po + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    out.seal();
    return out;
}

Tensor transpose2d(const Tensor& a) {
    require_rank2(a, "transpose2d");
    std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m}, a.dtype());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
    out.seal();
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape(), promote(a.dtype(), b.dtype()));
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    out.seal();
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape(), promote(a.dtype(), b.dtype()));
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    out.seal();
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape(), promote(a.dtype(), b.dtype()));
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    out.seal();
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape(), a.dtype());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    out.seal();
    return out;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         a.shape_str());
    std::size_t axis_n = a.dim(axis);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    std::size_t outer = a.numel() / (axis_n * inner);
    Tensor out(a.shape(), a.dtype());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * axis_n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t x = 0; x < axis_n; ++x)
                mx = std::max(mx, a[base + x * inner]);
            double denom = 0.0;
            for (std::size_t x = 0; x < axis_n; ++x) {
                double e = std::exp(a[base + x * inner] - mx);
                out[base + x * inner] = e;
                denom += e;
            }
            for (std::size_t x = 0; x < axis_n; ++x) out[base + x * inner] /= denom;
        }
    }
    out.seal();
    return out;
}

std::vector<std::size_t> argmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank())
        throw ShapeError("argmax: axis " + std::to_string(axis) + " out of range for " +
                         a.shape_str());
    std::size_t axis_n = a.dim(axis);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    std::size_t outer = a.numel() / (axis_n * inner);
    std::vector<std::size_t> out(outer * inner, 0);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * axis_n * inner + in;
            double best = a[base];
            std::size_t best_i = 0;
            for (std::size_t x = 1; x < axis_n; ++x) {
                double v = a[base + x * inner];
                if (v > best) {  // strict: ties keep the smallest index
                    best = v;
                    best_i = x;
                }
            }
            out[o * inner + in] = best_i;
        }
    }
    return out;
}

double sum(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
    return acc;
}

double mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean of empty tensor");
    return sum(a) / static_cast<double>(a.numel());
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i]));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    return acc;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
}

bool allclose(const Tensor& a, const Tensor& b, double tol) {
    if (!a.same_shape(b)) return false;
    return max_abs_diff(a, b) <= tol;
}

}  // namespace warpkit
