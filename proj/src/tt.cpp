#include "clmtt/tt.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <Eigen/QR>
#include <Eigen/SVD>

#include "clmtt/error.hpp"

namespace clmtt::tt {

namespace {

constexpr std::size_t kDenseMatrixLimit = 25'000'000;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

std::size_t product(std::span<const std::size_t> v) {
    std::size_t p = 1;
    for (auto x : v) {
        if (x != 0 && p > SIZE_MAX / x) return SIZE_MAX;
        p *= x;
    }
    return p;
}

// Smallest rank whose discarded tail has squared norm <= delta^2.
std::size_t truncation_rank(const Vector& s, double delta, std::size_t max_rank) {
    const auto n = static_cast<std::size_t>(s.size());
    std::size_t r = n;
    double tail = 0.0;
    const double budget = delta * delta;
    while (r > 1) {
        const double next = tail + s(idx(r - 1)) * s(idx(r - 1));
        if (next > budget) break;
        tail = next;
        --r;
    }
    return std::max<std::size_t>(1, std::min(r, max_rank));
}

struct Truncated {
    Matrix u;   // left factor, orthonormal columns
    Matrix sv;  // S V^T
};

Truncated truncated_svd(const Matrix& m, double delta, std::size_t max_rank) {
    Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const std::size_t r = truncation_rank(s, delta, max_rank);
    Truncated t;
    t.u = svd.matrixU().leftCols(idx(r));
    t.sv = s.head(idx(r)).asDiagonal() * svd.matrixV().leftCols(idx(r)).transpose();
    return t;
}

// Row-major <-> first-index-fastest permutations of a dense buffer.
std::vector<double> to_fortran_order(const DenseTensor& t) {
    const std::size_t d = t.shape.size();
    std::vector<std::size_t> stride(d, 1);
    for (std::size_t k = 1; k < d; ++k) stride[k] = stride[k - 1] * t.shape[k - 1];
    std::vector<double> out(t.data.size());
    std::vector<std::size_t> index(d, 0);
    for (std::size_t lin = 0; lin < t.data.size(); ++lin) {
        std::size_t f = 0;
        for (std::size_t k = 0; k < d; ++k) f += index[k] * stride[k];
        out[f] = t.data[lin];
        for (std::size_t k = d; k-- > 0;) {
            if (++index[k] < t.shape[k]) break;
            index[k] = 0;
        }
    }
    return out;
}

DenseTensor from_fortran_order(std::vector<std::size_t> shape, const double* f_data) {
    DenseTensor t(std::move(shape));
    const std::size_t d = t.shape.size();
    std::vector<std::size_t> stride(d, 1);
    for (std::size_t k = 1; k < d; ++k) stride[k] = stride[k - 1] * t.shape[k - 1];
    std::vector<std::size_t> index(d, 0);
    for (std::size_t lin = 0; lin < t.data.size(); ++lin) {
        std::size_t f = 0;
        for (std::size_t k = 0; k < d; ++k) f += index[k] * stride[k];
        t.data[lin] = f_data[f];
        for (std::size_t k = d; k-- > 0;) {
            if (++index[k] < t.shape[k]) break;
            index[k] = 0;
        }
    }
    return t;
}

void require_same_modes(const TtVector& a, const TtVector& b, const char* op) {
    if (a.mode_sizes() != b.mode_sizes()) {
        throw DimensionError(std::string(op) + ": mode sizes differ");
    }
}

}  // namespace

// ---------------------------------------------------------------------------

DenseTensor::DenseTensor(std::vector<std::size_t> shape_, double fill) : shape(std::move(shape_)) {
    const std::size_t total = product(shape);
    if (total > kDenseLimit) throw SizeGuardError("dense tensor exceeds the size guard");
    data.assign(total, fill);
}

std::size_t DenseTensor::linear(std::span<const std::size_t> index) const {
    if (index.size() != shape.size()) throw IndexError("dense index has wrong length");
    std::size_t lin = 0;
    for (std::size_t k = 0; k < shape.size(); ++k) {
        if (index[k] >= shape[k]) throw IndexError("dense index out of range");
        lin = lin * shape[k] + index[k];
    }
    return lin;
}

double DenseTensor::norm() const {
    double acc = 0.0;
    for (double v : data) acc += v * v;
    return std::sqrt(acc);
}

// ---------------------------------------------------------------------------

Core::Core(std::size_t r0, std::size_t n, std::size_t r1)
    : r0_(r0), n_(n), r1_(r1), data_(Vector::Zero(idx(r0 * n * r1))) {}

Matrix Core::slice(std::size_t i) const {
    Matrix m(idx(r0_), idx(r1_));
    for (std::size_t b = 0; b < r1_; ++b) {
        for (std::size_t a = 0; a < r0_; ++a) m(idx(a), idx(b)) = (*this)(a, i, b);
    }
    return m;
}

void Core::set_slice(std::size_t i, const Matrix& m) {
    for (std::size_t b = 0; b < r1_; ++b) {
        for (std::size_t a = 0; a < r0_; ++a) (*this)(a, i, b) = m(idx(a), idx(b));
    }
}

Core Core::from_left(const Matrix& m, std::size_t r0, std::size_t n) {
    if (static_cast<std::size_t>(m.rows()) != r0 * n) throw DimensionError("Core::from_left: shape");
    Core c(r0, n, static_cast<std::size_t>(m.cols()));
    c.left() = m;
    return c;
}

Core Core::from_right(const Matrix& m, std::size_t n, std::size_t r1) {
    if (static_cast<std::size_t>(m.cols()) != n * r1) throw DimensionError("Core::from_right: shape");
    Core c(static_cast<std::size_t>(m.rows()), n, r1);
    c.right() = m;
    return c;
}

// ---------------------------------------------------------------------------

TtVector::TtVector(std::vector<Core> cores) : cores_(std::move(cores)) { check(); }

void TtVector::check() const {
    if (cores_.empty()) throw DimensionError("tensor train has no cores");
    if (cores_.front().r0() != 1 || cores_.back().r1() != 1) {
        throw DimensionError("tensor train boundary ranks must be 1");
    }
    for (std::size_t k = 0; k < cores_.size(); ++k) {
        if (cores_[k].r0() == 0 || cores_[k].r1() == 0 || cores_[k].n() == 0) {
            throw DimensionError("tensor train core with zero extent");
        }
        if (k + 1 < cores_.size() && cores_[k].r1() != cores_[k + 1].r0()) {
            throw DimensionError("tensor train ranks do not chain at core " + std::to_string(k));
        }
    }
}

std::vector<std::size_t> TtVector::mode_sizes() const {
    std::vector<std::size_t> n;
    for (const auto& c : cores_) n.push_back(c.n());
    return n;
}

std::vector<std::size_t> TtVector::ranks() const {
    std::vector<std::size_t> r{1};
    for (const auto& c : cores_) r.push_back(c.r1());
    return r;
}

std::size_t TtVector::max_rank() const {
    const auto r = ranks();
    return *std::max_element(r.begin(), r.end());
}

std::size_t TtVector::storage() const {
    std::size_t s = 0;
    for (const auto& c : cores_) s += static_cast<std::size_t>(c.data().size());
    return s;
}

double TtVector::entry(std::span<const std::size_t> index) const {
    if (index.size() != cores_.size()) throw IndexError("TtVector::entry: index length");
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Ones(1);
    for (std::size_t k = 0; k < cores_.size(); ++k) {
        const Core& c = cores_[k];
        if (index[k] >= c.n()) throw IndexError("TtVector::entry: index out of range");
        Eigen::RowVectorXd next = Eigen::RowVectorXd::Zero(idx(c.r1()));
        for (std::size_t b = 0; b < c.r1(); ++b) {
            double acc = 0.0;
            for (std::size_t a = 0; a < c.r0(); ++a) acc += row(idx(a)) * c(a, index[k], b);
            next(idx(b)) = acc;
        }
        row = std::move(next);
    }
    return row(0);
}

TtVector TtVector::rank_one(const std::vector<Vector>& factors) {
    std::vector<Core> cores;
    for (const auto& f : factors) {
        Core c(1, static_cast<std::size_t>(f.size()), 1);
        c.data() = f;
        cores.push_back(std::move(c));
    }
    return TtVector(std::move(cores));
}

TtVector TtVector::constant(std::span<const std::size_t> modes, double value) {
    std::vector<Vector> f;
    for (std::size_t k = 0; k < modes.size(); ++k) {
        f.push_back(Vector::Constant(idx(modes[k]), k == 0 ? value : 1.0));
    }
    return rank_one(f);
}

TtVector TtVector::random(std::span<const std::size_t> modes, std::span<const std::size_t> inner_ranks,
                          std::mt19937_64& rng) {
    if (inner_ranks.size() + 1 != modes.size()) throw DimensionError("TtVector::random: rank count");
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Core> cores;
    for (std::size_t k = 0; k < modes.size(); ++k) {
        const std::size_t r0 = k == 0 ? 1 : inner_ranks[k - 1];
        const std::size_t r1 = k + 1 == modes.size() ? 1 : inner_ranks[k];
        Core c(r0, modes[k], r1);
        for (Eigen::Index e = 0; e < c.data().size(); ++e) c.data()(e) = normal(rng);
        cores.push_back(std::move(c));
    }
    return TtVector(std::move(cores));
}

// ---------------------------------------------------------------------------

OpCore::OpCore(std::size_t r0, std::size_t n, std::size_t m, std::size_t r1)
    : r0_(r0), n_(n), m_(m), r1_(r1), data_(Vector::Zero(idx(r0 * n * m * r1))) {}

Core OpCore::as_vector_core() const {
    Core c(r0_, n_ * m_, r1_);
    c.data() = data_;
    return c;
}

OpCore OpCore::from_vector_core(const Core& c, std::size_t n, std::size_t m) {
    if (c.n() != n * m) throw DimensionError("OpCore::from_vector_core: mode size");
    OpCore o(c.r0(), n, m, c.r1());
    o.data_ = c.data();
    return o;
}

std::size_t OpCore::bandwidth() const {
    std::size_t band = 0;
    for (std::size_t b = 0; b < r1_; ++b) {
        for (std::size_t j = 0; j < m_; ++j) {
            for (std::size_t i = 0; i < n_; ++i) {
                const std::size_t dist = i > j ? i - j : j - i;
                if (dist <= band) continue;
                for (std::size_t a = 0; a < r0_; ++a) {
                    if ((*this)(a, i, j, b) != 0.0) {
                        band = dist;
                        break;
                    }
                }
            }
        }
    }
    return band;
}

TtMatrix::TtMatrix(std::vector<OpCore> cores) : cores_(std::move(cores)) { check(); }

void TtMatrix::check() const {
    if (cores_.empty()) throw DimensionError("tensor-train operator has no cores");
    if (cores_.front().r0() != 1 || cores_.back().r1() != 1) {
        throw DimensionError("tensor-train operator boundary ranks must be 1");
    }
    for (std::size_t k = 0; k + 1 < cores_.size(); ++k) {
        if (cores_[k].r1() != cores_[k + 1].r0()) {
            throw DimensionError("tensor-train operator ranks do not chain at core " +
                                 std::to_string(k));
        }
    }
}

std::vector<std::size_t> TtMatrix::row_sizes() const {
    std::vector<std::size_t> n;
    for (const auto& c : cores_) n.push_back(c.n());
    return n;
}

std::vector<std::size_t> TtMatrix::col_sizes() const {
    std::vector<std::size_t> m;
    for (const auto& c : cores_) m.push_back(c.m());
    return m;
}

std::vector<std::size_t> TtMatrix::ranks() const {
    std::vector<std::size_t> r{1};
    for (const auto& c : cores_) r.push_back(c.r1());
    return r;
}

std::size_t TtMatrix::max_rank() const {
    const auto r = ranks();
    return *std::max_element(r.begin(), r.end());
}

double TtMatrix::entry(std::span<const std::size_t> row, std::span<const std::size_t> col) const {
    if (row.size() != cores_.size() || col.size() != cores_.size()) {
        throw IndexError("TtMatrix::entry: index length");
    }
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Ones(1);
    for (std::size_t k = 0; k < cores_.size(); ++k) {
        const OpCore& c = cores_[k];
        Eigen::RowVectorXd next = Eigen::RowVectorXd::Zero(idx(c.r1()));
        for (std::size_t b = 0; b < c.r1(); ++b) {
            double s = 0.0;
            for (std::size_t a = 0; a < c.r0(); ++a) s += acc(idx(a)) * c(a, row[k], col[k], b);
            next(idx(b)) = s;
        }
        acc = std::move(next);
    }
    return acc(0);
}

TtMatrix TtMatrix::identity(std::span<const std::size_t> modes) {
    std::vector<Matrix> f;
    for (auto n : modes) f.push_back(Matrix::Identity(idx(n), idx(n)));
    return kronecker(f);
}

TtMatrix TtMatrix::diagonal(const TtVector& x) {
    std::vector<OpCore> cores;
    for (const auto& c : x.cores()) {
        OpCore o(c.r0(), c.n(), c.n(), c.r1());
        for (std::size_t b = 0; b < c.r1(); ++b) {
            for (std::size_t i = 0; i < c.n(); ++i) {
                for (std::size_t a = 0; a < c.r0(); ++a) o(a, i, i, b) = c(a, i, b);
            }
        }
        cores.push_back(std::move(o));
    }
    return TtMatrix(std::move(cores));
}

TtMatrix TtMatrix::kronecker(const std::vector<Matrix>& factors) {
    std::vector<OpCore> cores;
    for (const auto& f : factors) {
        OpCore o(1, static_cast<std::size_t>(f.rows()), static_cast<std::size_t>(f.cols()), 1);
        for (Eigen::Index j = 0; j < f.cols(); ++j) {
            for (Eigen::Index i = 0; i < f.rows(); ++i) {
                o(0, static_cast<std::size_t>(i), static_cast<std::size_t>(j), 0) = f(i, j);
            }
        }
        cores.push_back(std::move(o));
    }
    return TtMatrix(std::move(cores));
}

TtVector TtMatrix::as_vector() const {
    std::vector<Core> cores;
    for (const auto& c : cores_) cores.push_back(c.as_vector_core());
    return TtVector(std::move(cores));
}

TtMatrix TtMatrix::from_vector(const TtVector& v, std::span<const std::size_t> rows,
                               std::span<const std::size_t> cols) {
    if (rows.size() != v.dim_count() || cols.size() != v.dim_count()) {
        throw DimensionError("TtMatrix::from_vector: dimension count");
    }
    std::vector<OpCore> cores;
    for (std::size_t k = 0; k < v.dim_count(); ++k) {
        cores.push_back(OpCore::from_vector_core(v.core(k), rows[k], cols[k]));
    }
    return TtMatrix(std::move(cores));
}

TtMatrix TtMatrix::transpose() const {
    std::vector<OpCore> cores;
    for (const auto& c : cores_) {
        OpCore t(c.r0(), c.m(), c.n(), c.r1());
        for (std::size_t b = 0; b < c.r1(); ++b) {
            for (std::size_t j = 0; j < c.m(); ++j) {
                for (std::size_t i = 0; i < c.n(); ++i) {
                    for (std::size_t a = 0; a < c.r0(); ++a) t(a, j, i, b) = c(a, i, j, b);
                }
            }
        }
        cores.push_back(std::move(t));
    }
    return TtMatrix(std::move(cores));
}

// ---------------------------------------------------------------------------

DenseTensor to_dense(const TtVector& x) {
    const auto modes = x.mode_sizes();
    if (product(modes) > kDenseLimit) throw SizeGuardError("to_dense: tensor exceeds the size guard");
    // Contract left to right; rows of `acc` enumerate the prefix with the first
    // index fastest.
    Matrix acc = Matrix::Ones(1, 1);
    for (const auto& c : x.cores()) {
        Matrix next = acc * c.right();  // P x (n r1)
        const Eigen::Index rows = acc.rows() * idx(c.n());
        acc = Eigen::Map<Matrix>(next.data(), rows, idx(c.r1()));
    }
    return from_fortran_order(modes, acc.data());
}

TtVector from_dense(const DenseTensor& dense, double tolerance, std::size_t max_rank) {
    const std::size_t d = dense.shape.size();
    if (d == 0) throw DimensionError("from_dense: tensor has no dimensions");
    if (dense.size() > kDenseLimit) throw SizeGuardError("from_dense: tensor exceeds the size guard");
    if (tolerance < 0.0) throw DomainError("from_dense: negative tolerance");

    std::vector<double> f = to_fortran_order(dense);
    if (d == 1) {
        Core c(1, dense.shape[0], 1);
        c.data() = Eigen::Map<Vector>(f.data(), idx(f.size()));
        return TtVector({c});
    }
    const double delta = tolerance * dense.norm() / std::sqrt(static_cast<double>(d - 1));
    std::vector<Core> cores;
    Matrix rest = Eigen::Map<Matrix>(f.data(), idx(dense.shape[0]), idx(f.size() / dense.shape[0]));
    std::size_t r_prev = 1;
    for (std::size_t k = 0; k + 1 < d; ++k) {
        Truncated t = truncated_svd(rest, delta, max_rank);
        const auto r = static_cast<std::size_t>(t.u.cols());
        cores.push_back(Core::from_left(t.u, r_prev, dense.shape[k]));
        const Eigen::Index cols = t.sv.cols() / idx(dense.shape[k + 1]);
        rest = Eigen::Map<Matrix>(t.sv.data(), idx(r * dense.shape[k + 1]), cols);
        r_prev = r;
    }
    cores.push_back(Core::from_left(rest, r_prev, dense.shape[d - 1]));
    return TtVector(std::move(cores));
}

Matrix to_dense(const TtMatrix& a) {
    const auto rows = a.row_sizes();
    const auto cols = a.col_sizes();
    const std::size_t nr = product(rows);
    const std::size_t nc = product(cols);
    if (nr * nc > kDenseMatrixLimit) throw SizeGuardError("to_dense: operator exceeds the size guard");
    Matrix m(idx(nr), idx(nc));
    const std::size_t d = rows.size();
    std::vector<std::size_t> ri(d, 0);
    for (std::size_t r = 0; r < nr; ++r) {
        std::vector<std::size_t> ci(d, 0);
        for (std::size_t c = 0; c < nc; ++c) {
            m(idx(r), idx(c)) = a.entry(ri, ci);
            for (std::size_t k = d; k-- > 0;) {
                if (++ci[k] < cols[k]) break;
                ci[k] = 0;
            }
        }
        for (std::size_t k = d; k-- > 0;) {
            if (++ri[k] < rows[k]) break;
            ri[k] = 0;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------

TtVector add(const TtVector& a, const TtVector& b) {
    require_same_modes(a, b, "add");
    const std::size_t d = a.dim_count();
    if (d == 1) {
        Core c = a.core(0);
        c.data() += b.core(0).data();
        return TtVector({c});
    }
    std::vector<Core> cores;
    for (std::size_t k = 0; k < d; ++k) {
        const Core& x = a.core(k);
        const Core& y = b.core(k);
        const bool first = k == 0;
        const bool last = k + 1 == d;
        const std::size_t r0 = first ? 1 : x.r0() + y.r0();
        const std::size_t r1 = last ? 1 : x.r1() + y.r1();
        Core c(r0, x.n(), r1);
        const std::size_t oa = first ? 0 : x.r0();
        const std::size_t ob = last ? 0 : x.r1();
        for (std::size_t i = 0; i < x.n(); ++i) {
            for (std::size_t q = 0; q < x.r1(); ++q) {
                for (std::size_t p = 0; p < x.r0(); ++p) c(p, i, q) = x(p, i, q);
            }
            for (std::size_t q = 0; q < y.r1(); ++q) {
                for (std::size_t p = 0; p < y.r0(); ++p) c(oa + p, i, ob + q) = y(p, i, q);
            }
        }
        cores.push_back(std::move(c));
    }
    return TtVector(std::move(cores));
}

TtVector scale(const TtVector& a, double c) {
    TtVector out = a;
    out.core(0).data() *= c;
    return out;
}

TtVector hadamard(const TtVector& a, const TtVector& b) {
    require_same_modes(a, b, "hadamard");
    std::vector<Core> cores;
    for (std::size_t k = 0; k < a.dim_count(); ++k) {
        const Core& x = a.core(k);
        const Core& y = b.core(k);
        Core c(x.r0() * y.r0(), x.n(), x.r1() * y.r1());
        for (std::size_t qx = 0; qx < x.r1(); ++qx) {
            for (std::size_t qy = 0; qy < y.r1(); ++qy) {
                for (std::size_t i = 0; i < x.n(); ++i) {
                    for (std::size_t px = 0; px < x.r0(); ++px) {
                        const double xv = x(px, i, qx);
                        for (std::size_t py = 0; py < y.r0(); ++py) {
                            c(py + y.r0() * px, i, qy + y.r1() * qx) = xv * y(py, i, qy);
                        }
                    }
                }
            }
        }
        cores.push_back(std::move(c));
    }
    return TtVector(std::move(cores));
}

double dot(const TtVector& a, const TtVector& b) {
    require_same_modes(a, b, "dot");
    Matrix w = Matrix::Ones(1, 1);
    for (std::size_t k = 0; k < a.dim_count(); ++k) {
        const Core& x = a.core(k);
        const Core& y = b.core(k);
        Matrix t = w * y.right();  // ra0 x (n rb1)
        Eigen::Map<Matrix> tl(t.data(), idx(x.r0() * x.n()), idx(y.r1()));
        w = x.left().transpose() * tl;
    }
    return w(0, 0);
}

double norm(const TtVector& a) {
    TtVector c = a;
    return right_orthogonalize(c);
}

double right_orthogonalize(TtVector& x) {
    for (std::size_t k = x.dim_count(); k-- > 1;) {
        Core& c = x.core(k);
        Matrix rt = c.right().transpose();  // (n r1) x r0
        Eigen::HouseholderQR<Matrix> qr(rt);
        const Eigen::Index r = std::min(rt.rows(), rt.cols());
        Matrix q = qr.householderQ() * Matrix::Identity(rt.rows(), r);
        Matrix rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
        x.core(k) = Core::from_right(q.transpose(), c.n(), c.r1());
        Core& prev = x.core(k - 1);
        Matrix left = prev.left() * rr.transpose();
        x.core(k - 1) = Core::from_left(left, prev.r0(), prev.n());
    }
    return x.core(0).data().norm();
}

double left_orthogonalize(TtVector& x) {
    for (std::size_t k = 0; k + 1 < x.dim_count(); ++k) {
        Core& c = x.core(k);
        Matrix l = c.left();
        Eigen::HouseholderQR<Matrix> qr(l);
        const Eigen::Index r = std::min(l.rows(), l.cols());
        Matrix q = qr.householderQ() * Matrix::Identity(l.rows(), r);
        Matrix rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
        x.core(k) = Core::from_left(q, c.r0(), c.n());
        Core& next = x.core(k + 1);
        Matrix right = rr * next.right();
        x.core(k + 1) = Core::from_right(right, next.n(), next.r1());
    }
    return x.core(x.dim_count() - 1).data().norm();
}

TtVector round(const TtVector& x, double tolerance, std::size_t max_rank) {
    TtVector y = x;
    const double nrm = right_orthogonalize(y);
    const std::size_t d = y.dim_count();
    if (d == 1) return y;
    const double delta = tolerance * nrm / std::sqrt(static_cast<double>(d - 1));
    for (std::size_t k = 0; k + 1 < d; ++k) {
        const Core& c = y.core(k);
        Truncated t = truncated_svd(c.left(), delta, max_rank);
        const std::size_t r0 = c.r0();
        const std::size_t n = c.n();
        y.core(k) = Core::from_left(t.u, r0, n);
        const Core& next = y.core(k + 1);
        Matrix right = t.sv * next.right();
        y.core(k + 1) = Core::from_right(right, next.n(), next.r1());
    }
    return y;
}

TtMatrix round(const TtMatrix& a, double tolerance, std::size_t max_rank) {
    return TtMatrix::from_vector(round(a.as_vector(), tolerance, max_rank), a.row_sizes(),
                                 a.col_sizes());
}

TtVector matvec(const TtMatrix& a, const TtVector& x) {
    if (a.col_sizes() != x.mode_sizes()) throw DimensionError("matvec: column modes differ");
    std::vector<Core> cores;
    for (std::size_t k = 0; k < x.dim_count(); ++k) {
        const OpCore& A = a.core(k);
        const Core& X = x.core(k);
        const std::size_t ra0 = A.r0();
        const std::size_t ra1 = A.r1();
        Core c(ra0 * X.r0(), A.n(), ra1 * X.r1());
        for (std::size_t b = 0; b < X.r1(); ++b) {
            for (std::size_t beta = 0; beta < ra1; ++beta) {
                for (std::size_t j = 0; j < A.m(); ++j) {
                    for (std::size_t i = 0; i < A.n(); ++i) {
                        for (std::size_t alpha = 0; alpha < ra0; ++alpha) {
                            const double av = A(alpha, i, j, beta);
                            if (av == 0.0) continue;
                            for (std::size_t p = 0; p < X.r0(); ++p) {
                                c(alpha + ra0 * p, i, beta + ra1 * b) += av * X(p, j, b);
                            }
                        }
                    }
                }
            }
        }
        cores.push_back(std::move(c));
    }
    return TtVector(std::move(cores));
}

TtVector matvec_round(const TtMatrix& a, const TtVector& x, double tolerance,
                      std::size_t max_rank) {
    if (a.col_sizes() != x.mode_sizes()) throw DimensionError("matvec_round: column modes differ");
    const std::size_t d = x.dim_count();
    const double delta_rel = tolerance / std::sqrt(static_cast<double>(std::max<std::size_t>(1, d - 1)));
    std::vector<Core> cores;
    // carry: r' x (RA rx), column index alpha + RA a.
    Matrix carry = Matrix::Ones(1, 1);
    for (std::size_t k = 0; k < d; ++k) {
        const OpCore& A = a.core(k);
        const Core& X = x.core(k);
        const std::size_t rp = static_cast<std::size_t>(carry.rows());
        const std::size_t ra0 = A.r0();
        const std::size_t ra1 = A.r1();
        const std::size_t n = A.n();
        const std::size_t m = A.m();
        // Y(a', alpha, j, b) = sum_a carry(a', alpha, a) X(a, j, b)
        Eigen::Map<const Matrix> cm(carry.data(), idx(rp * ra0), idx(X.r0()));
        Matrix y = cm * X.right();  // (rp ra0) x (m rx1)
        // T(a', i, beta, b) = sum_{alpha, j} Y(a', alpha, j, b) A(alpha, i, j, beta)
        Matrix t = Matrix::Zero(idx(rp * n), idx(ra1 * X.r1()));
        for (std::size_t beta = 0; beta < ra1; ++beta) {
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t alpha = 0; alpha < ra0; ++alpha) {
                        const double av = A(alpha, i, j, beta);
                        if (av == 0.0) continue;
                        for (std::size_t b = 0; b < X.r1(); ++b) {
                            t.block(idx(rp * i), idx(beta + ra1 * b), idx(rp), 1) +=
                                av * y.block(idx(rp * alpha), idx(j + m * b), idx(rp), 1);
                        }
                    }
                }
            }
        }
        if (k + 1 == d) {
            cores.push_back(Core::from_left(t, rp, n));
            break;
        }
        Eigen::BDCSVD<Matrix> svd(t, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const Vector& s = svd.singularValues();
        const std::size_t r = truncation_rank(s, delta_rel * s.norm(), max_rank);
        cores.push_back(Core::from_left(svd.matrixU().leftCols(idx(r)), rp, n));
        carry = s.head(idx(r)).asDiagonal() * svd.matrixV().leftCols(idx(r)).transpose();
    }
    return TtVector(std::move(cores));
}

TtMatrix add(const TtMatrix& a, const TtMatrix& b) {
    if (a.row_sizes() != b.row_sizes() || a.col_sizes() != b.col_sizes()) {
        throw DimensionError("add: operator shapes differ");
    }
    return TtMatrix::from_vector(add(a.as_vector(), b.as_vector()), a.row_sizes(), a.col_sizes());
}

TtMatrix scale(const TtMatrix& a, double c) {
    TtMatrix out = a;
    out.core(0).data() *= c;
    return out;
}

TtMatrix compose(const TtMatrix& a, const TtMatrix& b) {
    if (a.col_sizes() != b.row_sizes()) throw DimensionError("compose: inner modes differ");
    std::vector<OpCore> cores;
    for (std::size_t k = 0; k < a.dim_count(); ++k) {
        const OpCore& A = a.core(k);
        const OpCore& B = b.core(k);
        OpCore c(A.r0() * B.r0(), A.n(), B.m(), A.r1() * B.r1());
        for (std::size_t bb = 0; bb < B.r1(); ++bb) {
            for (std::size_t ba = 0; ba < A.r1(); ++ba) {
                for (std::size_t kk = 0; kk < B.m(); ++kk) {
                    for (std::size_t j = 0; j < A.m(); ++j) {
                        for (std::size_t i = 0; i < A.n(); ++i) {
                            for (std::size_t aa = 0; aa < A.r0(); ++aa) {
                                const double av = A(aa, i, j, ba);
                                if (av == 0.0) continue;
                                for (std::size_t ab = 0; ab < B.r0(); ++ab) {
                                    c(aa + A.r0() * ab, i, kk, ba + A.r1() * bb) +=
                                        av * B(ab, j, kk, bb);
                                }
                            }
                        }
                    }
                }
            }
        }
        cores.push_back(std::move(c));
    }
    return TtMatrix(std::move(cores));
}

TtVector contract(const TtVector& x, const std::vector<Vector>& weights,
                  const std::vector<bool>& keep) {
    const std::size_t d = x.dim_count();
    if (weights.size() != d || keep.size() != d) throw DimensionError("contract: argument sizes");
    std::vector<Core> kept;
    Matrix pending = Matrix::Identity(1, 1);
    for (std::size_t k = 0; k < d; ++k) {
        const Core& c = x.core(k);
        if (keep[k]) {
            Matrix right = pending * c.right();
            kept.push_back(Core::from_right(right, c.n(), c.r1()));
            pending = Matrix::Identity(idx(c.r1()), idx(c.r1()));
            continue;
        }
        const Vector& w = weights[k];
        if (w.size() != 0 && static_cast<std::size_t>(w.size()) != c.n()) {
            throw DimensionError("contract: weight length differs from mode size");
        }
        Matrix m = Matrix::Zero(idx(c.r0()), idx(c.r1()));
        for (std::size_t i = 0; i < c.n(); ++i) {
            const double wi = w.size() == 0 ? 1.0 : w(idx(i));
            m += wi * c.slice(i);
        }
        pending = pending * m;
    }
    if (kept.empty()) {
        Core scalar(1, 1, 1);
        scalar(0, 0, 0) = pending(0, 0);
        return TtVector({scalar});
    }
    Core& last = kept.back();
    Matrix left = last.left() * pending;
    last = Core::from_left(left, last.r0(), last.n());
    return TtVector(std::move(kept));
}

namespace {

// Slice-wise Kronecker product laid out as in hadamard.
Matrix kron_slice(const Matrix& x, const Matrix& y) {
    Matrix out(x.rows() * y.rows(), x.cols() * y.cols());
    for (Eigen::Index qx = 0; qx < x.cols(); ++qx) {
        for (Eigen::Index px = 0; px < x.rows(); ++px) {
            out.block(y.rows() * px, y.cols() * qx, y.rows(), y.cols()) = x(px, qx) * y;
        }
    }
    return out;
}

}  // namespace

TtVector contract_product(const TtVector& a, const TtVector& b, const std::vector<Vector>& weights,
                          const std::vector<bool>& keep) {
    require_same_modes(a, b, "contract_product");
    const std::size_t d = a.dim_count();
    if (weights.size() != d || keep.size() != d) throw DimensionError("contract_product: argument sizes");
    std::vector<Core> kept;
    Matrix pending = Matrix::Identity(1, 1);
    for (std::size_t k = 0; k < d; ++k) {
        const Core& x = a.core(k);
        const Core& y = b.core(k);
        const std::size_t r0 = x.r0() * y.r0();
        const std::size_t r1 = x.r1() * y.r1();
        if (keep[k]) {
            Core c(static_cast<std::size_t>(pending.rows()), x.n(), r1);
            for (std::size_t i = 0; i < x.n(); ++i) c.set_slice(i, pending * kron_slice(x.slice(i), y.slice(i)));
            kept.push_back(std::move(c));
            pending = Matrix::Identity(idx(r1), idx(r1));
            continue;
        }
        const Vector& w = weights[k];
        if (w.size() != 0 && static_cast<std::size_t>(w.size()) != x.n()) {
            throw DimensionError("contract_product: weight length differs from mode size");
        }
        Matrix m = Matrix::Zero(idx(r0), idx(r1));
        for (std::size_t i = 0; i < x.n(); ++i) {
            const double wi = w.size() == 0 ? 1.0 : w(idx(i));
            if (wi != 0.0) m += wi * kron_slice(x.slice(i), y.slice(i));
        }
        pending = pending * m;
    }
    if (kept.empty()) {
        Core scalar(1, 1, 1);
        scalar(0, 0, 0) = pending(0, 0);
        return TtVector({scalar});
    }
    Core& last = kept.back();
    Matrix left = last.left() * pending;
    last = Core::from_left(left, last.r0(), last.n());
    return TtVector(std::move(kept));
}

double weighted_sum(const TtVector& x, const std::vector<Vector>& weights) {
    const TtVector s = contract(x, weights, std::vector<bool>(x.dim_count(), false));
    return s.core(0)(0, 0, 0);
}

TtVector scale_mode(const TtVector& x, std::size_t d, const Vector& w) {
    if (d >= x.dim_count() || static_cast<std::size_t>(w.size()) != x.core(d).n()) {
        throw DimensionError("scale_mode: bad dimension or weight length");
    }
    TtVector y = x;
    Core& c = y.core(d);
    for (std::size_t b = 0; b < c.r1(); ++b) {
        for (std::size_t i = 0; i < c.n(); ++i) {
            for (std::size_t a = 0; a < c.r0(); ++a) c(a, i, b) *= w(idx(i));
        }
    }
    return y;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'L', 'M', 'T', 'T', '1', '\0', '\0'};

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw Error("truncated tensor-train dump");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(out, bits);
}

double get_f64(std::istream& in) {
    const std::uint64_t bits = get_u64(in);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

}  // namespace

void write_binary(const std::string& path, const TtVector& x) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path + "'");
    out.write(kMagic, sizeof kMagic);
    put_u64(out, x.dim_count());
    for (auto n : x.mode_sizes()) put_u64(out, n);
    for (auto r : x.ranks()) put_u64(out, r);
    for (const auto& c : x.cores()) {
        for (Eigen::Index e = 0; e < c.data().size(); ++e) put_f64(out, c.data()(e));
    }
}

TtVector read_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw Error("'" + path + "' is not a tensor-train dump");
    const std::uint64_t d = get_u64(in);
    if (d == 0 || d > 4096) throw Error("implausible dimension count in '" + path + "'");
    std::vector<std::size_t> n(d), r(d + 1);
    for (auto& v : n) v = get_u64(in);
    for (auto& v : r) v = get_u64(in);
    std::vector<Core> cores;
    for (std::size_t k = 0; k < d; ++k) {
        Core c(r[k], n[k], r[k + 1]);
        for (Eigen::Index e = 0; e < c.data().size(); ++e) c.data()(e) = get_f64(in);
        cores.push_back(std::move(c));
    }
    return TtVector(std::move(cores));
}

}  // namespace clmtt::tt
