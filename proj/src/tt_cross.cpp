#include "clmtt/tt_cross.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "clmtt/error.hpp"

namespace clmtt::tt {

namespace {

using IndexSet = std::vector<std::vector<std::size_t>>;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

class Sampler {
public:
    explicit Sampler(const IndexFunction& f) : f_(f) {}

    double operator()(std::span<const std::size_t> index) {
        ++count_;
        const double v = f_(index);
        if (!std::isfinite(v)) {
            std::ostringstream msg;
            msg << "cross: non-finite function value at index (";
            for (std::size_t k = 0; k < index.size(); ++k) msg << (k ? "," : "") << index[k];
            msg << ")";
            throw EvaluationError(msg.str());
        }
        return v;
    }

    std::size_t count() const { return count_; }

private:
    const IndexFunction& f_;
    std::size_t count_ = 0;
};

// f(I[a], i, j, J[b]) arranged as (|I| n_k) x (n_{k+1} |J|) with row a + |I| i
// and column j + n_{k+1} b.
Matrix supercore(Sampler& f, const IndexSet& left, std::size_t nk, std::size_t nk1,
                 const IndexSet& right) {
    const std::size_t rl = left.size();
    const std::size_t rr = right.size();
    Matrix m(idx(rl * nk), idx(nk1 * rr));
    std::vector<std::size_t> full;
    for (std::size_t b = 0; b < rr; ++b) {
        for (std::size_t j = 0; j < nk1; ++j) {
            for (std::size_t i = 0; i < nk; ++i) {
                for (std::size_t a = 0; a < rl; ++a) {
                    full.clear();
                    full.insert(full.end(), left[a].begin(), left[a].end());
                    full.push_back(i);
                    full.push_back(j);
                    full.insert(full.end(), right[b].begin(), right[b].end());
                    m(idx(a + rl * i), idx(j + nk1 * b)) = f(full);
                }
            }
        }
    }
    return m;
}

std::size_t svd_rank(const Vector& s, double rel_tol, std::size_t max_rank, std::size_t kick) {
    const double total = s.squaredNorm();
    const double budget = rel_tol * rel_tol * total;
    std::size_t r = static_cast<std::size_t>(s.size());
    double tail = 0.0;
    while (r > 1) {
        const double next = tail + s(idx(r - 1)) * s(idx(r - 1));
        if (next > budget) break;
        tail = next;
        --r;
    }
    // Extra directions let the index sets grow past a mode on which the
    // sampled slice happens to be degenerate.
    r = std::min<std::size_t>(r + kick, static_cast<std::size_t>(s.size()));
    return std::max<std::size_t>(1, std::min(r, max_rank));
}

std::vector<std::size_t> random_index(std::span<const std::size_t> modes, std::mt19937_64& rng) {
    std::vector<std::size_t> i(modes.size());
    for (std::size_t k = 0; k < modes.size(); ++k) {
        i[k] = std::uniform_int_distribution<std::size_t>(0, modes[k] - 1)(rng);
    }
    return i;
}

}  // namespace

std::vector<std::size_t> maxvol(const Matrix& a, double tolerance, std::size_t max_iterations) {
    const Eigen::Index m = a.rows();
    const Eigen::Index r = a.cols();
    if (r > m) throw DimensionError("maxvol: matrix must be tall");
    if (r == 0) return {};

    // Greedy start: Gaussian elimination with row pivoting.
    Matrix work = a;
    std::vector<std::size_t> rows;
    std::vector<bool> used(static_cast<std::size_t>(m), false);
    for (Eigen::Index c = 0; c < r; ++c) {
        Eigen::Index best = -1;
        double best_val = -1.0;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (used[static_cast<std::size_t>(i)]) continue;
            const double v = std::abs(work(i, c));
            if (v > best_val) {
                best_val = v;
                best = i;
            }
        }
        used[static_cast<std::size_t>(best)] = true;
        rows.push_back(static_cast<std::size_t>(best));
        if (best_val > 0.0 && c + 1 < r) {
            const Eigen::RowVectorXd pivot_row = work.row(best).tail(r - c - 1) / work(best, c);
            work.rightCols(r - c - 1) -= work.col(c) * pivot_row;
        }
    }

    for (std::size_t it = 0; it < max_iterations; ++it) {
        Matrix sub(r, r);
        for (Eigen::Index k = 0; k < r; ++k) sub.row(k) = a.row(idx(rows[static_cast<std::size_t>(k)]));
        Eigen::FullPivLU<Matrix> lu(sub);
        if (!lu.isInvertible()) break;
        const Matrix z = a * lu.inverse();
        Eigen::Index bi = 0;
        Eigen::Index bj = 0;
        const double peak = z.cwiseAbs().maxCoeff(&bi, &bj);
        if (peak <= tolerance) break;
        if (used[static_cast<std::size_t>(bi)]) break;
        used[rows[static_cast<std::size_t>(bj)]] = false;
        used[static_cast<std::size_t>(bi)] = true;
        rows[static_cast<std::size_t>(bj)] = static_cast<std::size_t>(bi);
    }
    return rows;
}

double sampled_error(const IndexFunction& f, const TtVector& t, std::size_t samples,
                     std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto modes = t.mode_sizes();
    double num = 0.0;
    double den = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        const auto i = random_index(modes, rng);
        const double fv = f(i);
        if (!std::isfinite(fv)) throw EvaluationError("sampled_error: non-finite function value");
        const double d = fv - t.entry(i);
        num += d * d;
        den += fv * fv;
    }
    if (den == 0.0) return std::sqrt(num);
    return std::sqrt(num / den);
}

CrossResult cross(const IndexFunction& f, std::span<const std::size_t> modes,
                  const CrossOptions& options) {
    const std::size_t d = modes.size();
    if (d == 0) throw DimensionError("cross: no dimensions");
    for (auto n : modes) {
        if (n == 0) throw DimensionError("cross: zero mode size");
    }
    Sampler sample(f);
    CrossResult result;

    if (d == 1) {
        Core c(1, modes[0], 1);
        std::vector<std::size_t> i(1);
        for (i[0] = 0; i[0] < modes[0]; ++i[0]) c(0, i[0], 0) = sample(i);
        result.tensor = TtVector({c});
        result.evaluations = sample.count();
        return result;
    }

    std::mt19937_64 rng(options.seed);
    std::vector<IndexSet> left(d + 1);
    std::vector<IndexSet> right(d + 1);
    left[0] = {{}};
    right[d] = {{}};
    // Random nested right index sets.
    for (std::size_t k = d; k-- > 1;) {
        std::size_t available = 1;
        for (std::size_t q = k; q < d && available < options.initial_rank; ++q) available *= modes[q];
        const std::size_t r = std::min(options.initial_rank, available);
        std::set<std::vector<std::size_t>> chosen;
        std::size_t guard = 0;
        while (chosen.size() < r && guard++ < 100 * r) {
            const auto& tail = right[k + 1][std::uniform_int_distribution<std::size_t>(
                0, right[k + 1].size() - 1)(rng)];
            std::vector<std::size_t> idxs{std::uniform_int_distribution<std::size_t>(0, modes[k] - 1)(rng)};
            idxs.insert(idxs.end(), tail.begin(), tail.end());
            chosen.insert(idxs);
        }
        right[k].assign(chosen.begin(), chosen.end());
    }

    std::vector<Core> cores(d);
    const double local_tol = options.tolerance / std::sqrt(static_cast<double>(d - 1));
    const std::uint64_t verify_seed = options.seed ^ 0x9e3779b97f4a7c15ULL;

    for (std::size_t sweep = 0; sweep < options.max_sweeps; ++sweep) {
        const bool forward = sweep % 2 == 0;
        if (forward) {
            for (std::size_t k = 0; k + 1 < d; ++k) {
                const Matrix m = supercore(sample, left[k], modes[k], modes[k + 1], right[k + 2]);
                Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
                const std::size_t r = svd_rank(svd.singularValues(), local_tol, options.max_rank, options.kick_rank);
                const Matrix u = svd.matrixU().leftCols(idx(r));
                const auto rows = maxvol(u);
                Matrix sub(idx(r), idx(r));
                for (std::size_t q = 0; q < r; ++q) sub.row(idx(q)) = u.row(idx(rows[q]));
                const Matrix core = u * Eigen::FullPivLU<Matrix>(sub).inverse();
                cores[k] = Core::from_left(core, left[k].size(), modes[k]);
                IndexSet next;
                for (std::size_t q = 0; q < r; ++q) {
                    const std::size_t a = rows[q] % left[k].size();
                    const std::size_t i = rows[q] / left[k].size();
                    auto prefix = left[k][a];
                    prefix.push_back(i);
                    next.push_back(std::move(prefix));
                }
                left[k + 1] = std::move(next);
                if (k + 2 == d) {
                    Matrix last(idx(r), m.cols());
                    for (std::size_t q = 0; q < r; ++q) last.row(idx(q)) = m.row(idx(rows[q]));
                    cores[d - 1] = Core::from_right(last, modes[d - 1], 1);
                }
            }
        } else {
            for (std::size_t k = d - 1; k-- > 0;) {
                const Matrix m = supercore(sample, left[k], modes[k], modes[k + 1], right[k + 2]);
                Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
                const std::size_t r = svd_rank(svd.singularValues(), local_tol, options.max_rank, options.kick_rank);
                const Matrix v = svd.matrixV().leftCols(idx(r));  // (n_{k+1} |J|) x r
                const auto cols = maxvol(v);
                Matrix sub(idx(r), idx(r));
                for (std::size_t q = 0; q < r; ++q) sub.row(idx(q)) = v.row(idx(cols[q]));
                const Matrix core = (v * Eigen::FullPivLU<Matrix>(sub).inverse()).transpose();
                cores[k + 1] = Core::from_right(core, modes[k + 1], right[k + 2].size());
                IndexSet next;
                for (std::size_t q = 0; q < r; ++q) {
                    const std::size_t j = cols[q] % modes[k + 1];
                    const std::size_t b = cols[q] / modes[k + 1];
                    std::vector<std::size_t> suffix{j};
                    suffix.insert(suffix.end(), right[k + 2][b].begin(), right[k + 2][b].end());
                    next.push_back(std::move(suffix));
                }
                right[k + 1] = std::move(next);
                if (k == 0) {
                    Matrix first(m.rows(), idx(r));
                    for (std::size_t q = 0; q < r; ++q) first.col(idx(q)) = m.col(idx(cols[q]));
                    cores[0] = Core::from_left(first, 1, modes[0]);
                }
            }
        }
        result.tensor = TtVector(cores);
        if (options.kick_rank > 0) result.tensor = round(result.tensor, local_tol * 1e-2);
        result.sweeps = sweep + 1;
        result.sampled_error =
            sampled_error([&](std::span<const std::size_t> i) { return sample(i); }, result.tensor,
                          options.verify_samples, verify_seed + sweep);
        if (result.sampled_error <= options.tolerance && sweep >= 1) break;
    }
    result.evaluations = sample.count();
    return result;
}

}  // namespace clmtt::tt
