#pragma once

// Numerical checks of the attention/MLP decomposition identities on raw
// single-head attention without projections, in 64-bit arithmetic.

#include "m2iv/common.hpp"

#include <algorithm>
#include <random>
#include <vector>

namespace m2iv {

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

namespace detail {

inline void check_attn_dims(const VectorXd& h, const MatrixXd& K, const MatrixXd& V) {
    if (K.rows() == 0) throw DimensionError("attention needs at least one key row");
    if (K.rows() != V.rows()) throw DimensionError("K and V row counts differ");
    if (K.cols() != h.size() || V.cols() != h.size()) throw DimensionError("column dimension differs from query");
}

inline VectorXd scores(const VectorXd& h, const MatrixXd& K) {
    return (K * h) / std::sqrt(static_cast<double>(h.size()));
}

}  // namespace detail

/// softmax(h K^T / sqrt(d)) V.
inline VectorXd attn(const VectorXd& h, const MatrixXd& K, const MatrixXd& V) {
    detail::check_attn_dims(h, K, V);
    VectorXd s = detail::scores(h, K);
    VectorXd e = (s.array() - s.maxCoeff()).exp();
    return (V.transpose() * e) / e.sum();
}

/// Unnormalized softmax mass of a block of keys, relative to `shift`.
inline double block_mass(const VectorXd& h, const MatrixXd& K, double shift) {
    return (detail::scores(h, K).array() - shift).exp().sum();
}

struct DecompositionResult {
    double zeta = 0, eta = 0;
    VectorXd context_term;  // attn over the context block(s) alone
    VectorXd query_term;    // attn over the query block alone
    VectorXd lhs;           // attention over the concatenation
    VectorXd combined;      // weighted reconstruction
    std::vector<double> thetas;                 // multi-block weights
    std::vector<VectorXd> context_terms;        // one per block
    double varpi = 0;
    double max_abs_error = 0;
};

inline MatrixXd vstack(const std::vector<const MatrixXd*>& blocks) {
    Eigen::Index rows = 0;
    for (auto* b : blocks) rows += b->rows();
    MatrixXd out(rows, blocks.front()->cols());
    Eigen::Index r = 0;
    for (auto* b : blocks) {
        out.middleRows(r, b->rows()) = *b;
        r += b->rows();
    }
    return out;
}

/// attn(h,[C;Q],[C;Q]) = zeta * attn(h,C,C) + eta * attn(h,Q,Q).
inline DecompositionResult verify_theorem1(const VectorXd& h, const MatrixXd& C, const MatrixXd& Q) {
    detail::check_attn_dims(h, C, C);
    detail::check_attn_dims(h, Q, Q);
    DecompositionResult r;
    MatrixXd CQ = vstack({&C, &Q});
    double shift = detail::scores(h, CQ).maxCoeff();
    double sC = block_mass(h, C, shift), sQ = block_mass(h, Q, shift);
    r.zeta = sC / (sC + sQ);
    r.eta = sQ / (sC + sQ);
    r.context_term = attn(h, C, C);
    r.query_term = attn(h, Q, Q);
    r.lhs = attn(h, CQ, CQ);
    r.combined = r.zeta * r.context_term + r.eta * r.query_term;
    r.thetas = {r.zeta};
    r.context_terms = {r.context_term};
    r.varpi = r.eta;
    r.max_abs_error = (r.lhs - r.combined).cwiseAbs().maxCoeff();
    return r;
}

/// Linear MLP: (zeta a_C + eta a_Q) W = zeta (a_C W) + eta (a_Q W).
inline double verify_theorem2(const VectorXd& a_C, const VectorXd& a_Q, double zeta, double eta, const MatrixXd& W) {
    if (a_C.size() != a_Q.size() || W.rows() != a_C.size()) throw DimensionError("theorem 2 dimension mismatch");
    VectorXd mixed = zeta * a_C + eta * a_Q;
    VectorXd lhs = W.transpose() * mixed;
    VectorXd rhs = zeta * (W.transpose() * a_C) + eta * (W.transpose() * a_Q);
    return (lhs - rhs).cwiseAbs().maxCoeff();
}

/// Same comparison through a GELU MLP; reported, not expected to vanish.
inline double nonlinear_mlp_residual(const VectorXd& a_C, const VectorXd& a_Q, double zeta, double eta,
                                     const MatrixXd& W1, const MatrixXd& W2) {
    auto mlp = [&](const VectorXd& x) {
        VectorXd pre = W1.transpose() * x;
        VectorXd act = pre.unaryExpr([](double v) {
            return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
        });
        return VectorXd(W2.transpose() * act);
    };
    return (mlp(zeta * a_C + eta * a_Q) - (zeta * mlp(a_C) + eta * mlp(a_Q))).cwiseAbs().maxCoeff();
}

/// Multi-block version by recursive peeling: block t takes share zeta_t of
/// what the blocks before it left over.
inline DecompositionResult verify_theorem3(const VectorXd& h, const std::vector<MatrixXd>& Cs, const MatrixXd& Q) {
    if (Cs.empty()) throw DimensionError("theorem 3 needs at least one context block");
    for (const auto& C : Cs) detail::check_attn_dims(h, C, C);
    detail::check_attn_dims(h, Q, Q);
    std::vector<const MatrixXd*> blocks;
    for (const auto& C : Cs) blocks.push_back(&C);
    blocks.push_back(&Q);
    MatrixXd all = vstack(blocks);
    double shift = detail::scores(h, all).maxCoeff();

    const std::size_t n = Cs.size();
    std::vector<double> mass(n + 1);
    for (std::size_t t = 0; t <= n; ++t) mass[t] = block_mass(h, *blocks[t], shift);

    DecompositionResult r;
    r.lhs = attn(h, all, all);
    r.query_term = attn(h, Q, Q);
    double carried = 1.0;  // product of eta_{k-1}, starting from eta_0 = 1
    r.combined = VectorXd::Zero(h.size());
    for (std::size_t t = 0; t < n; ++t) {
        double rest = 0;
        for (std::size_t k = t + 1; k <= n; ++k) rest += mass[k];
        double zeta = mass[t] / (mass[t] + rest);
        double eta = rest / (mass[t] + rest);
        if (t == 0) {
            r.zeta = zeta;
            r.eta = eta;
        }
        r.thetas.push_back(zeta * carried);
        r.context_terms.push_back(attn(h, Cs[t], Cs[t]));
        r.combined += r.thetas.back() * r.context_terms.back();
        carried *= eta;
    }
    r.varpi = carried;
    r.combined += r.varpi * r.query_term;
    r.context_term = r.context_terms.front();
    r.max_abs_error = (r.lhs - r.combined).cwiseAbs().maxCoeff();
    return r;
}

struct TheoryReport {
    int trials = 0;
    double theorem1 = 0;
    double theorem2 = 0;
    double theorem3 = 0;
    double weight_sum = 0;         // max |sum(thetas) + varpi - 1|
    double nonlinear_residual = 0;  // max residual of the GELU variant
};

/// Seeded random trials: d=16, 1..5 rows per context block, 3 query rows,
/// 1..3 context blocks. The query vector is a row of Q.
inline TheoryReport run_theory_trials(int trials, std::uint64_t seed, int d = 16) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> N(0.0, 1.0);
    std::uniform_int_distribution<int> rows(1, 5), tasks(1, 3);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto randm = [&](Eigen::Index r, Eigen::Index c) {
        MatrixXd m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = N(gen);
        return m;
    };
    TheoryReport rep;
    rep.trials = trials;
    for (int t = 0; t < trials; ++t) {
        MatrixXd Q = randm(3, d);
        VectorXd h = Q.row(2).transpose();
        MatrixXd C = randm(rows(gen), d);
        rep.theorem1 = std::max(rep.theorem1, verify_theorem1(h, C, Q).max_abs_error);

        std::vector<MatrixXd> Cs;
        int n = tasks(gen);
        for (int k = 0; k < n; ++k) Cs.push_back(randm(rows(gen), d));
        auto r3 = verify_theorem3(h, Cs, Q);
        rep.theorem3 = std::max(rep.theorem3, r3.max_abs_error);
        double sum = r3.varpi;
        for (double th : r3.thetas) sum += th;
        rep.weight_sum = std::max(rep.weight_sum, std::abs(sum - 1.0));

        VectorXd aC = randm(d, 1), aQ = randm(d, 1);
        double z = U(gen);
        rep.theorem2 = std::max(rep.theorem2, verify_theorem2(aC, aQ, z, 1.0 - z, randm(d, d)));
        rep.nonlinear_residual =
            std::max(rep.nonlinear_residual, nonlinear_mlp_residual(aC, aQ, z, 1.0 - z, randm(d, 4 * d), randm(4 * d, d)));
    }
    return rep;
}

}  // namespace m2iv
