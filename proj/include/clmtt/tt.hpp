#pragma once

// Tensor-train vectors and matrices.
//
// A TtVector with K cores represents
//     x(i_1, ..., i_K) = G_1(i_1) G_2(i_2) ... G_K(i_K)
// where G_k(i) is an r_{k-1} x r_k matrix and r_0 = r_K = 1. Core k is stored
// column-major with index a + r_{k-1} (i + n_k b), so the left unfolding
// (r_{k-1} n_k) x r_k and the right unfolding r_{k-1} x (n_k r_k) are both
// plain views of the same buffer.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace clmtt::tt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

/// Largest tensor that dense conversions will materialize.
inline constexpr std::size_t kDenseLimit = 10'000'000;

/// Row-major dense tensor (last index varies fastest).
struct DenseTensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    DenseTensor() = default;
    explicit DenseTensor(std::vector<std::size_t> shape_, double fill = 0.0);

    std::size_t size() const { return data.size(); }
    std::size_t linear(std::span<const std::size_t> index) const;
    double& operator()(std::span<const std::size_t> index) { return data[linear(index)]; }
    double operator()(std::span<const std::size_t> index) const { return data[linear(index)]; }
    double norm() const;
};

/// Three-way core of shape (r0, n, r1).
class Core {
public:
    Core() = default;
    Core(std::size_t r0, std::size_t n, std::size_t r1);

    std::size_t r0() const { return r0_; }
    std::size_t n() const { return n_; }
    std::size_t r1() const { return r1_; }

    double& operator()(std::size_t a, std::size_t i, std::size_t b) {
        return data_[a + r0_ * (i + n_ * b)];
    }
    double operator()(std::size_t a, std::size_t i, std::size_t b) const {
        return data_[a + r0_ * (i + n_ * b)];
    }

    /// (r0 n) x r1 view.
    MatrixMap left() { return {data_.data(), static_cast<Eigen::Index>(r0_ * n_), static_cast<Eigen::Index>(r1_)}; }
    ConstMatrixMap left() const { return {data_.data(), static_cast<Eigen::Index>(r0_ * n_), static_cast<Eigen::Index>(r1_)}; }
    /// r0 x (n r1) view.
    MatrixMap right() { return {data_.data(), static_cast<Eigen::Index>(r0_), static_cast<Eigen::Index>(n_ * r1_)}; }
    ConstMatrixMap right() const { return {data_.data(), static_cast<Eigen::Index>(r0_), static_cast<Eigen::Index>(n_ * r1_)}; }

    /// r0 x r1 slice for mode index i.
    Matrix slice(std::size_t i) const;
    void set_slice(std::size_t i, const Matrix& m);

    Vector& data() { return data_; }
    const Vector& data() const { return data_; }

    static Core from_left(const Matrix& m, std::size_t r0, std::size_t n);
    static Core from_right(const Matrix& m, std::size_t n, std::size_t r1);

private:
    std::size_t r0_ = 0;
    std::size_t n_ = 0;
    std::size_t r1_ = 0;
    Vector data_;
};

class TtVector {
public:
    TtVector() = default;
    explicit TtVector(std::vector<Core> cores);

    std::size_t dim_count() const { return cores_.size(); }
    std::vector<std::size_t> mode_sizes() const;
    /// r_0, ..., r_K (boundary ranks included).
    std::vector<std::size_t> ranks() const;
    std::size_t max_rank() const;
    /// Number of stored floating values.
    std::size_t storage() const;

    const Core& core(std::size_t k) const { return cores_.at(k); }
    Core& core(std::size_t k) { return cores_.at(k); }
    const std::vector<Core>& cores() const { return cores_; }

    double entry(std::span<const std::size_t> index) const;

    static TtVector rank_one(const std::vector<Vector>& factors);
    static TtVector constant(std::span<const std::size_t> modes, double value);
    static TtVector random(std::span<const std::size_t> modes, std::span<const std::size_t> inner_ranks,
                           std::mt19937_64& rng);

    /// Throws DimensionError unless ranks chain and boundary ranks are 1.
    void check() const;

private:
    std::vector<Core> cores_;
};

/// Operator core of shape (r0, n, m, r1) stored with index a + r0 (i + n (j + m b)),
/// i the row (output) mode and j the column (input) mode.
class OpCore {
public:
    OpCore() = default;
    OpCore(std::size_t r0, std::size_t n, std::size_t m, std::size_t r1);

    std::size_t r0() const { return r0_; }
    std::size_t n() const { return n_; }
    std::size_t m() const { return m_; }
    std::size_t r1() const { return r1_; }

    double& operator()(std::size_t a, std::size_t i, std::size_t j, std::size_t b) {
        return data_[a + r0_ * (i + n_ * (j + m_ * b))];
    }
    double operator()(std::size_t a, std::size_t i, std::size_t j, std::size_t b) const {
        return data_[a + r0_ * (i + n_ * (j + m_ * b))];
    }

    Vector& data() { return data_; }
    const Vector& data() const { return data_; }

    /// Same buffer viewed as a vector core of mode size n m.
    Core as_vector_core() const;
    static OpCore from_vector_core(const Core& c, std::size_t n, std::size_t m);

    /// Largest |i - j| with a nonzero entry.
    std::size_t bandwidth() const;

private:
    std::size_t r0_ = 0;
    std::size_t n_ = 0;
    std::size_t m_ = 0;
    std::size_t r1_ = 0;
    Vector data_;
};

class TtMatrix {
public:
    TtMatrix() = default;
    explicit TtMatrix(std::vector<OpCore> cores);

    std::size_t dim_count() const { return cores_.size(); }
    std::vector<std::size_t> row_sizes() const;
    std::vector<std::size_t> col_sizes() const;
    std::vector<std::size_t> ranks() const;
    std::size_t max_rank() const;

    const OpCore& core(std::size_t k) const { return cores_.at(k); }
    OpCore& core(std::size_t k) { return cores_.at(k); }
    const std::vector<OpCore>& cores() const { return cores_; }

    double entry(std::span<const std::size_t> row, std::span<const std::size_t> col) const;

    static TtMatrix identity(std::span<const std::size_t> modes);
    /// diag(x) as an operator.
    static TtMatrix diagonal(const TtVector& x);
    /// Kronecker product of one matrix per dimension.
    static TtMatrix kronecker(const std::vector<Matrix>& factors);

    TtVector as_vector() const;
    static TtMatrix from_vector(const TtVector& v, std::span<const std::size_t> rows,
                                std::span<const std::size_t> cols);

    TtMatrix transpose() const;

    void check() const;

private:
    std::vector<OpCore> cores_;
};

// ---------------------------------------------------------------------------
// Conversions

DenseTensor to_dense(const TtVector& x);
TtVector from_dense(const DenseTensor& dense, double tolerance, std::size_t max_rank = SIZE_MAX);
/// Row-major dense matrix of the operator (rows and columns in grid order).
Matrix to_dense(const TtMatrix& a);

// ---------------------------------------------------------------------------
// Algebra

TtVector add(const TtVector& a, const TtVector& b);
TtVector scale(const TtVector& a, double c);
TtVector hadamard(const TtVector& a, const TtVector& b);
double dot(const TtVector& a, const TtVector& b);
double norm(const TtVector& a);
TtVector matvec(const TtMatrix& a, const TtVector& x);
/// Matrix-vector product truncated core by core; never forms the full-rank
/// product.
TtVector matvec_round(const TtMatrix& a, const TtVector& x, double tolerance,
                      std::size_t max_rank = SIZE_MAX);
TtMatrix add(const TtMatrix& a, const TtMatrix& b);
TtMatrix scale(const TtMatrix& a, double c);
/// Operator composition a * b.
TtMatrix compose(const TtMatrix& a, const TtMatrix& b);

/// Quasi-optimal truncation to relative Frobenius accuracy `tolerance`.
TtVector round(const TtVector& x, double tolerance, std::size_t max_rank = SIZE_MAX);
TtMatrix round(const TtMatrix& a, double tolerance, std::size_t max_rank = SIZE_MAX);

/// Makes cores 1..K-1 right-orthonormal; returns the norm carried by core 0.
double right_orthogonalize(TtVector& x);
/// Makes cores 0..K-2 left-orthonormal; returns the norm carried by the last core.
double left_orthogonalize(TtVector& x);

/// Contracts each dimension d with weights[d] unless keep[d]; the result
/// keeps the remaining dimensions in order. If nothing is kept the result is
/// a single-core TtVector of mode size 1.
TtVector contract(const TtVector& x, const std::vector<Vector>& weights,
                  const std::vector<bool>& keep);
/// contract(hadamard(a, b), weights, keep) without forming the product cores.
TtVector contract_product(const TtVector& a, const TtVector& b, const std::vector<Vector>& weights,
                          const std::vector<bool>& keep);
/// Full contraction with per-dimension weights.
double weighted_sum(const TtVector& x, const std::vector<Vector>& weights);

/// Multiplies mode d of x by diag(w).
TtVector scale_mode(const TtVector& x, std::size_t d, const Vector& w);

// ---------------------------------------------------------------------------
// Binary dump: "CLMTT1\0\0", u64 dimension count, u64 mode sizes, u64 ranks
// (K + 1 values), then every core's little-endian float64 data in order.

void write_binary(const std::string& path, const TtVector& x);
TtVector read_binary(const std::string& path);

}  // namespace clmtt::tt
