#include "clmtt/amen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "clmtt/error.hpp"

namespace clmtt::tt {

namespace {

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// Interface between a test frame y, the operator and a trial frame x, stored
// flat as (ry, ra, rx) with index a' + ry (alpha + ra a).
struct OpInterface {
    std::size_t ry = 1, ra = 1, rx = 1;
    Vector data = Vector::Ones(1);

    // (ry ra) x rx view.
    ConstMatrixMap by_trial() const { return {data.data(), idx(ry * ra), idx(rx)}; }
    // ry x (ra rx) view.
    ConstMatrixMap by_test() const { return {data.data(), idx(ry), idx(ra * rx)}; }
    double operator()(std::size_t a, std::size_t al, std::size_t b) const {
        return data[idx(a + ry * (al + ra * b))];
    }
};

// Projection of a TT vector onto a frame: ry x rb.
using VecInterface = Matrix;

// T2(a' + ry i, beta + ra1 b) = sum_{alpha, j} A(alpha, i, j, beta) T1(a' + ry alpha, j + m b)
Matrix apply_core(const OpCore& A, const Matrix& t1, std::size_t ry, std::size_t rb) {
    const std::size_t n = A.n();
    const std::size_t m = A.m();
    const std::size_t ra0 = A.r0();
    const std::size_t ra1 = A.r1();
    Matrix t2 = Matrix::Zero(idx(ry * n), idx(ra1 * rb));
    for (std::size_t beta = 0; beta < ra1; ++beta) {
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t al = 0; al < ra0; ++al) {
                    const double v = A(al, i, j, beta);
                    if (v == 0.0) continue;
                    for (std::size_t b = 0; b < rb; ++b) {
                        t2.block(idx(ry * i), idx(beta + ra1 * b), idx(ry), 1) +=
                            v * t1.block(idx(ry * al), idx(j + m * b), idx(ry), 1);
                    }
                }
            }
        }
    }
    return t2;
}

// Local operator  L (x) A_k (x) R  acting on cores of shape (rx0, m, rx1) and
// producing cores of shape (ry0, n, ry1).
struct LocalOp {
    const OpInterface& left;
    const OpCore& core;
    const OpInterface& right;

    std::size_t rows() const { return left.ry * core.n() * right.ry; }
    std::size_t cols() const { return left.rx * core.m() * right.rx; }

    Matrix apply(const Matrix& u_left) const {
        // u_left: (rx0 m) x rx1
        ConstMatrixMap ur(u_left.data(), idx(left.rx), idx(core.m() * right.rx));
        Matrix t1 = left.by_trial() * ur;  // (ry0 ra0) x (m rx1)
        Matrix t2 = apply_core(core, t1, left.ry, right.rx);
        ConstMatrixMap r(right.data.data(), idx(right.ry), idx(right.ra * right.rx));
        return t2 * r.transpose();  // (ry0 n) x ry1
    }

    Vector diagonal() const {
        const std::size_t ry0 = left.ry, n = core.n(), ry1 = right.ry;
        Vector d = Vector::Zero(idx(rows()));
        for (std::size_t b = 0; b < ry1; ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t a = 0; a < ry0; ++a) {
                    double s = 0.0;
                    for (std::size_t al = 0; al < core.r0(); ++al) {
                        const double l = left(a, al, a);
                        if (l == 0.0) continue;
                        for (std::size_t be = 0; be < core.r1(); ++be) {
                            s += l * core(al, i, i, be) * right(b, be, b);
                        }
                    }
                    d[idx(a + ry0 * (i + n * b))] = s;
                }
            }
        }
        return d;
    }

    Matrix dense() const {
        const std::size_t ry0 = left.ry, rx0 = left.rx, n = core.n(), m = core.m();
        const std::size_t ry1 = right.ry, rx1 = right.rx;
        Matrix out = Matrix::Zero(idx(rows()), idx(cols()));
        for (std::size_t be = 0; be < core.r1(); ++be) {
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t al = 0; al < core.r0(); ++al) {
                        const double v = core(al, i, j, be);
                        if (v == 0.0) continue;
                        for (std::size_t b = 0; b < rx1; ++b) {
                            for (std::size_t bp = 0; bp < ry1; ++bp) {
                                const double c = v * right(bp, be, b);
                                if (c == 0.0) continue;
                                for (std::size_t a = 0; a < rx0; ++a) {
                                    const std::size_t col = a + rx0 * (j + m * b);
                                    for (std::size_t ap = 0; ap < ry0; ++ap) {
                                        out(idx(ap + ry0 * (i + n * bp)), idx(col)) +=
                                            c * left(ap, al, a);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        return out;
    }
};

// Local right-hand side: (ry0 n) x ry1.
Matrix local_rhs(const VecInterface& left, const Core& b, const VecInterface& right) {
    Matrix t = left * b.right();  // ry0 x (n rb1)
    ConstMatrixMap tl(t.data(), idx(left.rows() * b.n()), idx(b.r1()));
    return tl * right.transpose();
}

OpInterface next_left(const OpInterface& phi, const Core& y, const OpCore& A, const Core& x) {
    Matrix t1 = phi.by_trial() * x.right();  // (ry0 ra0) x (m rx1)
    Matrix t2 = apply_core(A, t1, phi.ry, x.r1());  // (ry0 n) x (ra1 rx1)
    OpInterface out;
    out.ry = y.r1();
    out.ra = A.r1();
    out.rx = x.r1();
    Matrix p = y.left().transpose() * t2;
    out.data = Eigen::Map<Vector>(p.data(), p.size());
    return out;
}

OpInterface next_right(const OpInterface& phi, const Core& y, const OpCore& A, const Core& x) {
    // S1(a0 + rx0 j, a'1 + ry1 beta)
    ConstMatrixMap ph(phi.data.data(), idx(phi.ry * phi.ra), idx(phi.rx));
    Matrix s1 = x.left() * ph.transpose();
    const std::size_t rx0 = x.r0(), m = A.m(), n = A.n(), ry1 = y.r1(), ra0 = A.r0();
    Matrix s2 = Matrix::Zero(idx(n * ry1), idx(ra0 * rx0));
    for (std::size_t be = 0; be < A.r1(); ++be) {
        for (std::size_t j = 0; j < m; ++j) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t al = 0; al < ra0; ++al) {
                    const double v = A(al, i, j, be);
                    if (v == 0.0) continue;
                    for (std::size_t a0 = 0; a0 < rx0; ++a0) {
                        for (std::size_t a1 = 0; a1 < ry1; ++a1) {
                            s2(idx(i + n * a1), idx(al + ra0 * a0)) +=
                                v * s1(idx(a0 + rx0 * j), idx(a1 + ry1 * be));
                        }
                    }
                }
            }
        }
    }
    OpInterface out;
    out.ry = y.r0();
    out.ra = ra0;
    out.rx = rx0;
    Matrix p = y.right() * s2;
    out.data = Eigen::Map<Vector>(p.data(), p.size());
    return out;
}

VecInterface next_left(const VecInterface& psi, const Core& y, const Core& b) {
    Matrix t = psi * b.right();
    ConstMatrixMap tl(t.data(), idx(psi.rows() * b.n()), idx(b.r1()));
    return y.left().transpose() * tl;
}

VecInterface next_right(const VecInterface& psi, const Core& y, const Core& b) {
    Matrix t = b.left() * psi.transpose();  // (rb0 n) x ry1
    ConstMatrixMap tr(t.data(), idx(b.r0()), idx(b.n() * y.r1()));
    return y.right() * tr.transpose();
}

// Restarted GMRES with right Jacobi preconditioning.
Vector gmres(const LocalOp& op, const Vector& rhs, const Vector& guess, double tol,
             std::size_t restart, std::size_t max_iter) {
    const Eigen::Index n = rhs.size();
    Vector dinv = op.diagonal();
    for (Eigen::Index k = 0; k < n; ++k) dinv[k] = std::abs(dinv[k]) > 1e-300 ? 1.0 / dinv[k] : 1.0;
    const std::size_t r0 = op.left.rx, m = op.core.m(), r1 = op.right.rx;
    auto apply = [&](const Vector& v) {
        Matrix u = Eigen::Map<const Matrix>(v.data(), idx(r0 * m), idx(r1));
        Matrix y = op.apply(u);
        return Vector(Eigen::Map<Vector>(y.data(), y.size()));
    };
    const double bnorm = rhs.norm();
    if (bnorm == 0.0) return Vector::Zero(n);
    Vector x = guess;
    std::size_t iters = 0;
    while (iters < max_iter) {
        Vector r = rhs - apply(x);
        double beta = r.norm();
        if (beta <= tol * bnorm) break;
        const std::size_t k_max = std::min<std::size_t>(restart, static_cast<std::size_t>(n));
        Matrix V(n, idx(k_max + 1));
        Matrix H = Matrix::Zero(idx(k_max + 1), idx(k_max));
        Vector g = Vector::Zero(idx(k_max + 1));
        Vector cs = Vector::Zero(idx(k_max)), sn = Vector::Zero(idx(k_max));
        V.col(0) = r / beta;
        g[0] = beta;
        std::size_t k = 0;
        for (; k < k_max && iters < max_iter; ++k, ++iters) {
            Vector w = apply(dinv.cwiseProduct(V.col(idx(k))));
            for (std::size_t q = 0; q <= k; ++q) {
                H(idx(q), idx(k)) = w.dot(V.col(idx(q)));
                w -= H(idx(q), idx(k)) * V.col(idx(q));
            }
            H(idx(k + 1), idx(k)) = w.norm();
            if (H(idx(k + 1), idx(k)) > 0.0) V.col(idx(k + 1)) = w / H(idx(k + 1), idx(k));
            for (std::size_t q = 0; q < k; ++q) {
                const double t = cs[idx(q)] * H(idx(q), idx(k)) + sn[idx(q)] * H(idx(q + 1), idx(k));
                H(idx(q + 1), idx(k)) = -sn[idx(q)] * H(idx(q), idx(k)) + cs[idx(q)] * H(idx(q + 1), idx(k));
                H(idx(q), idx(k)) = t;
            }
            const double h0 = H(idx(k), idx(k)), h1 = H(idx(k + 1), idx(k));
            const double den = std::hypot(h0, h1);
            cs[idx(k)] = den > 0.0 ? h0 / den : 1.0;
            sn[idx(k)] = den > 0.0 ? h1 / den : 0.0;
            H(idx(k), idx(k)) = den;
            H(idx(k + 1), idx(k)) = 0.0;
            g[idx(k + 1)] = -sn[idx(k)] * g[idx(k)];
            g[idx(k)] = cs[idx(k)] * g[idx(k)];
            if (std::abs(g[idx(k + 1)]) <= tol * bnorm || h1 == 0.0) {
                ++k;
                ++iters;
                break;
            }
        }
        Vector y = H.topLeftCorner(idx(k), idx(k)).triangularView<Eigen::Upper>().solve(g.head(idx(k)));
        x += dinv.cwiseProduct(V.leftCols(idx(k)) * y);
    }
    return x;
}

Matrix solve_local(const LocalOp& op, const Matrix& rhs, const Matrix& guess, double tol,
                   const AmenOptions& opt) {
    const std::size_t n = op.rows();
    if (n <= opt.local_dense_limit) {
        Matrix dense = op.dense();
        Vector f = Eigen::Map<const Vector>(rhs.data(), rhs.size());
        Vector u = dense.partialPivLu().solve(f);
        if (!u.allFinite()) u = dense.completeOrthogonalDecomposition().solve(f);
        return Eigen::Map<Matrix>(u.data(), guess.rows(), guess.cols());
    }
    Vector f = Eigen::Map<const Vector>(rhs.data(), rhs.size());
    Vector g = Eigen::Map<const Vector>(guess.data(), guess.size());
    Vector u = gmres(op, f, g, tol, opt.gmres_restart, opt.gmres_max_iterations);
    return Eigen::Map<Matrix>(u.data(), guess.rows(), guess.cols());
}

struct Svd {
    Matrix u;
    Vector s;
    Matrix v;
};

Svd truncate(const Matrix& m, double rel_tol, std::size_t max_rank) {
    Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const double budget = rel_tol * rel_tol * s.squaredNorm();
    std::size_t r = static_cast<std::size_t>(s.size());
    double tail = 0.0;
    while (r > 1) {
        const double next = tail + s[idx(r - 1)] * s[idx(r - 1)];
        if (next > budget) break;
        tail = next;
        --r;
    }
    r = std::max<std::size_t>(1, std::min(r, max_rank));
    return {svd.matrixU().leftCols(idx(r)), s.head(idx(r)), svd.matrixV().leftCols(idx(r))};
}

Matrix orth(const Matrix& m, Matrix* r_out = nullptr) {
    Eigen::HouseholderQR<Matrix> qr(m);
    const Eigen::Index k = std::min(m.rows(), m.cols());
    Matrix q = qr.householderQ() * Matrix::Identity(m.rows(), k);
    if (r_out) *r_out = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    return q;
}

// Right-orthogonalizes cores k = d-1..1, pushing the factors left.
void right_orth(std::vector<Core>& cores) {
    for (std::size_t k = cores.size(); k-- > 1;) {
        Core& c = cores[k];
        Matrix rt;
        Matrix q = orth(c.right().transpose(), &rt);  // (n r1) x r, rt: r x r0
        Matrix qt = q.transpose();
        Core& prev = cores[k - 1];
        Matrix pl = prev.left() * rt.transpose();
        prev = Core::from_left(pl, prev.r0(), prev.n());
        c = Core::from_right(qt, c.n(), c.r1());
    }
}

}  // namespace

double bilinear(const TtVector& x, const TtMatrix& a, const TtVector& y) {
    if (a.row_sizes() != x.mode_sizes() || a.col_sizes() != y.mode_sizes()) {
        throw DimensionError("bilinear: mode sizes differ");
    }
    OpInterface phi;
    for (std::size_t k = 0; k < x.dim_count(); ++k) phi = next_left(phi, x.core(k), a.core(k), y.core(k));
    return phi.data[0];
}

double relative_residual(const TtMatrix& a, const TtVector& x, const TtVector& b) {
    const double bn = norm(b);
    TtVector ax = matvec_round(a, x, 1e-12);
    TtVector r = add(ax, scale(b, -1.0));
    const double rn = norm(r);
    return bn == 0.0 ? rn : rn / bn;
}

AmenResult amen_solve(const TtMatrix& a, const TtVector& b, const AmenOptions& opt,
                      const TtVector* x0) {
    const std::size_t d = b.dim_count();
    if (a.row_sizes() != a.col_sizes()) throw DimensionError("amen_solve: operator is not square");
    if (a.col_sizes() != b.mode_sizes()) throw DimensionError("amen_solve: operator and right-hand side differ in modes");
    if (x0 && x0->mode_sizes() != b.mode_sizes()) throw DimensionError("amen_solve: initial guess has wrong modes");
    if (!(opt.tolerance > 0.0)) throw DomainError("amen_solve: tolerance must be positive");
    const double bnorm = norm(b);
    if (bnorm == 0.0) throw DomainError("amen_solve: right-hand side is zero");

    AmenResult result;
    const auto modes = b.mode_sizes();
    std::mt19937_64 rng(opt.seed);

    std::vector<Core> x = x0 ? x0->cores() : round(b, 1e-2 * opt.tolerance, opt.max_rank).cores();
    const std::size_t kick = std::max<std::size_t>(1, opt.kick_rank);
    std::vector<std::size_t> zr(d > 0 ? d - 1 : 0, kick);
    std::vector<Core> z = TtVector::random(modes, zr, rng).cores();

    std::vector<OpInterface> xa_l(d + 1), xa_r(d + 1), za_l(d + 1), za_r(d + 1);
    std::vector<VecInterface> xb_l(d + 1, Matrix::Ones(1, 1)), xb_r(d + 1, Matrix::Ones(1, 1));
    std::vector<VecInterface> zb_l(d + 1, Matrix::Ones(1, 1)), zb_r(d + 1, Matrix::Ones(1, 1));

    auto rebuild_right = [&]() {
        right_orth(x);
        right_orth(z);
        for (std::size_t k = d; k-- > 1;) {
            xa_r[k] = next_right(xa_r[k + 1], x[k], a.core(k), x[k]);
            xb_r[k] = next_right(xb_r[k + 1], x[k], b.core(k));
            za_r[k] = next_right(za_r[k + 1], z[k], a.core(k), x[k]);
            zb_r[k] = next_right(zb_r[k + 1], z[k], b.core(k));
        }
    };

    const double local_tol = opt.tolerance / std::sqrt(static_cast<double>(std::max<std::size_t>(d, 1)));
    double best = std::numeric_limits<double>::infinity();
    TtVector best_x;
    bool rank_capped = false;

    for (std::size_t sweep = 0; sweep < opt.max_sweeps; ++sweep) {
        rebuild_right();
        for (std::size_t k = 0; k < d; ++k) {
            const LocalOp op{xa_l[k], a.core(k), xa_r[k + 1]};
            const Matrix rhs = local_rhs(xb_l[k], b.core(k), xb_r[k + 1]);
            const Matrix guess = x[k].left();
            Matrix u = solve_local(op, rhs, guess, 0.1 * local_tol, opt);
            const std::size_t r0 = x[k].r0(), n = x[k].n();
            if (k + 1 == d) {
                x[k] = Core::from_left(u, r0, n);
                break;
            }
            Svd t = truncate(u, local_tol, opt.max_rank);
            if (t.s.size() >= static_cast<Eigen::Index>(opt.max_rank)) rank_capped = true;
            const Matrix sv = t.s.asDiagonal() * t.v.transpose();
            const Matrix ut = t.u * sv;

            // Residual projections for the enrichment and the next z core.
            const LocalOp zop{za_l[k], a.core(k), za_r[k + 1]};
            Matrix crz = zop.apply(ut) - local_rhs(zb_l[k], b.core(k), zb_r[k + 1]);
            Matrix zq = orth(crz);
            if (static_cast<std::size_t>(zq.cols()) < z[k].r1()) {
                const Eigen::Index have = zq.cols();
                zq.conservativeResize(Eigen::NoChange, idx(z[k].r1()));
                zq.rightCols(idx(z[k].r1()) - have).setZero();
            }
            z[k] = Core::from_left(zq.leftCols(idx(z[k].r1())), z[k].r0(), z[k].n());

            const LocalOp xzop{xa_l[k], a.core(k), za_r[k + 1]};
            Matrix crs = xzop.apply(ut) - local_rhs(xb_l[k], b.core(k), zb_r[k + 1]);
            const std::size_t r = static_cast<std::size_t>(t.u.cols());
            const std::size_t extra = std::min<std::size_t>(
                static_cast<std::size_t>(crs.cols()), opt.max_rank > r ? opt.max_rank - r : 0);
            Matrix enriched(t.u.rows(), idx(r + extra));
            enriched << t.u, crs.leftCols(idx(extra));
            Matrix rr;
            Matrix q = orth(enriched, &rr);
            Matrix pad = Matrix::Zero(idx(r + extra), sv.cols());
            pad.topRows(idx(r)) = sv;
            Matrix carry = rr * pad;  // rn x rx1
            x[k] = Core::from_left(q, r0, n);
            Core& next = x[k + 1];
            Matrix nr = carry * next.right();
            next = Core::from_right(nr, next.n(), next.r1());

            xa_l[k + 1] = next_left(xa_l[k], x[k], a.core(k), x[k]);
            xb_l[k + 1] = next_left(xb_l[k], x[k], b.core(k));
            za_l[k + 1] = next_left(za_l[k], z[k], a.core(k), x[k]);
            zb_l[k + 1] = next_left(zb_l[k], z[k], b.core(k));
        }

        TtVector xt(x);
        const double res = relative_residual(a, xt, b);
        if (res < best) {
            best = res;
            best_x = xt;
        }
        result.report.residual_history.push_back(best);
        result.report.sweeps = sweep + 1;
        if (best <= opt.tolerance) break;
    }

    result.x = best_x.dim_count() ? best_x : TtVector(x);
    result.report.residual = best;
    result.report.max_rank = result.x.max_rank();
    result.report.converged = best <= opt.tolerance;
    if (!result.report.converged && rank_capped && opt.throw_on_rank_cap &&
        best > 100.0 * opt.tolerance) {
        throw ConvergenceError("amen_solve: rank cap " + std::to_string(opt.max_rank) +
                               " reached with relative residual " + std::to_string(best));
    }
    return result;
}

}  // namespace clmtt::tt
