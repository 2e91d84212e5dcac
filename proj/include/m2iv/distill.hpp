#pragma once

// Self-distillation of steering vectors: a frozen teacher reads the n-shot
// context, the student reads only the query with Theta injected, and Theta
// is trained on mimicry + synergy + supervised losses.

#include "m2iv/datapipe.hpp"
#include "m2iv/intervention.hpp"
#include "m2iv/optim.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <optional>

namespace m2iv {

struct LossConfig {
    double temperature = 1.0;
    double gamma = 0.05;
    double lambda_mim = 0.8;
    double lambda_syn = 0.6;
    double lambda_sup = 0.6;

    void validate() const {
        if (!(temperature > 0)) throw ConfigError("temperature must be positive");
        if (gamma < 0) throw ConfigError("gamma must be non-negative");
    }
};

struct TrainConfig {
    double lr_v = 1e-2;
    double lr_alpha = 1e-3;
    double weight_decay = 1e-4;
    double warmup_factor = 1e-3;
    int epochs = 15;
    int batch_size = 2;
    std::uint64_t seed = 0;
    std::optional<ManyShotConfig> many_shot;  // teacher contexts longer than the model window
    std::string task;
    std::string strategy = "RS";

    void validate() const {
        if (!(lr_v > 0) || !(lr_alpha > 0)) throw ConfigError("learning rates must be positive");
        if (epochs < 0) throw ConfigError("epochs must be non-negative");
        if (batch_size < 1) throw ConfigError("batch size must be positive");
    }
};

inline nlohmann::json to_json(const LossConfig& c) {
    return {{"T", c.temperature},
            {"gamma", c.gamma},
            {"lambda_mim", c.lambda_mim},
            {"lambda_syn", c.lambda_syn},
            {"lambda_sup", c.lambda_sup}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j{{"lr_V", c.lr_v},         {"lr_alpha", c.lr_alpha}, {"weight_decay", c.weight_decay},
                     {"warmup_factor", c.warmup_factor}, {"epochs", c.epochs},     {"batch_size", c.batch_size},
                     {"seed", c.seed}};
    if (c.many_shot) j["many_shot"] = {{"window", c.many_shot->window}, {"overlap", c.many_shot->overlap}};
    return j;
}

struct LossParts {
    double mim = 0, syn = 0, sup = 0, total = 0;
};

inline double total_loss(const LossParts& p, const LossConfig& c) {
    return c.lambda_mim * p.mim + c.lambda_syn * p.syn + c.lambda_sup * p.sup;
}

// ---------------------------------------------------------------------------
// Teacher

/// Teacher logits at the answer positions of [demos; query; answer[:-1]].
/// With `many_shot`, contexts that overflow the window are split into
/// windows whose aggregated final-layer MLP state replaces the MLP output at
/// the answer positions of the last window's run.
template <typename Real>
Matrix<Real> teacher_logits(const MicroModel<Real>& model, std::span<const Instance> demos, const Instance& query,
                            TokenId separator, const ManyShotConfig* many_shot = nullptr) {
    auto p = teacher_forced_prompt(demos, query, separator);
    Hooks<Real> hooks;
    if (static_cast<int>(p.seq.size()) > model.config().max_seq_len) {
        if (!many_shot) throw LengthError("teacher context exceeds the model window");
        auto agg = aggregate_many_shot(model, demos, render_query(query), separator, *many_shot);
        auto [b, e] = agg.windows.back();
        p = teacher_forced_prompt(demos.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(e - b)), query,
                                  separator);
        const int last = model.config().num_layers - 1;
        for (int pos : p.predict_positions)
            hooks.mlp_overrides.push_back({last, pos, agg.mlp[static_cast<std::size_t>(last)]});
    }
    Matrix<Real> logits = forward(model, p.seq, hooks);
    Matrix<Real> out(static_cast<Eigen::Index>(p.predict_positions.size()), logits.cols());
    for (std::size_t t = 0; t < p.predict_positions.size(); ++t)
        out.row(static_cast<Eigen::Index>(t)) = logits.row(p.predict_positions[t]);
    return out;
}

template <typename Real>
Matrix<Real> softmax_rows(const Matrix<Real>& logits, double temperature = 1.0) {
    Matrix<Real> out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        auto z = (logits.row(i).array() / static_cast<Real>(temperature)).eval();
        auto e = (z - z.maxCoeff()).exp().eval();
        out.row(i) = (e / e.sum()).matrix();
    }
    return out;
}

/// Teacher distributions P(. | C, Q, A_<t), one row per answer token.
template <typename Real>
Matrix<Real> teacher_forward(const MicroModel<Real>& model, std::span<const Instance> demos, const Instance& query,
                             TokenId separator, const ManyShotConfig* many_shot = nullptr) {
    return softmax_rows(teacher_logits(model, demos, query, separator, many_shot));
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {

/// log softmax(z / T) of one row, in double.
template <typename Derived>
Eigen::ArrayXd log_softmax_t(const Eigen::MatrixBase<Derived>& row, double T) {
    Eigen::ArrayXd z = row.transpose().template cast<double>().array() / T;
    double mx = z.maxCoeff();
    return z - mx - std::log((z - mx).exp().sum());
}

}  // namespace detail

/// T^2 * mean over rows of KL(softmax(t/T) || softmax(s/T)). If `dstudent`
/// is given it receives dL/ds (same shape as `student`).
template <typename Real>
double mimicry_loss(const Matrix<Real>& teacher, const Matrix<Real>& student, double T, Matrix<Real>* dstudent = nullptr) {
    if (teacher.rows() != student.rows() || teacher.cols() != student.cols())
        throw DimensionError("teacher and student logits differ in shape");
    if (!(T > 0)) throw ConfigError("temperature must be positive");
    const auto N = teacher.rows();
    if (dstudent) dstudent->setZero(student.rows(), student.cols());
    double kl = 0;
    for (Eigen::Index i = 0; i < N; ++i) {
        Eigen::ArrayXd lp = detail::log_softmax_t(teacher.row(i), T);
        Eigen::ArrayXd lq = detail::log_softmax_t(student.row(i), T);
        Eigen::ArrayXd p = lp.exp();
        kl += (p * (lp - lq)).sum();
        if (dstudent) dstudent->row(i) = ((lq.exp() - p) * (T / static_cast<double>(N))).matrix().transpose().template cast<Real>();
    }
    return N ? T * T * kl / static_cast<double>(N) : 0.0;
}

/// -sum_t log P(A_t) from logits rows aligned with `answer`.
template <typename Real>
double supervised_loss(const Matrix<Real>& student, std::span<const TokenId> answer, Matrix<Real>* dstudent = nullptr) {
    if (answer.empty()) throw ValidationError("empty answer");
    if (static_cast<Eigen::Index>(answer.size()) != student.rows()) throw DimensionError("answer length differs from logits rows");
    if (dstudent) dstudent->setZero(student.rows(), student.cols());
    double loss = 0;
    for (std::size_t t = 0; t < answer.size(); ++t) {
        if (answer[t] < 0 || answer[t] >= student.cols()) throw VocabError("answer token outside vocabulary");
        const auto ti = static_cast<Eigen::Index>(t);
        Eigen::ArrayXd lq = detail::log_softmax_t(student.row(ti), 1.0);
        loss -= lq(answer[t]);
        if (dstudent) {
            dstudent->row(ti) = lq.exp().matrix().transpose().template cast<Real>();
            (*dstudent)(ti, answer[t]) -= Real(1);
        }
    }
    return loss;
}

struct SynergyReport {
    std::vector<Eigen::MatrixXd> M;  // per layer, d x d
    std::vector<double> diagonal, off_diagonal;
};

namespace detail {

/// Columns centered and scaled to unit norm; constant columns become zero.
inline Eigen::MatrixXd standardize_columns(const Eigen::MatrixXd& X, Eigen::VectorXd& norms) {
    Eigen::MatrixXd C = X.rowwise() - X.colwise().mean();
    norms = C.colwise().norm().transpose();
    for (Eigen::Index j = 0; j < C.cols(); ++j) {
        if (norms(j) > 1e-12 * std::max(1.0, X.col(j).cwiseAbs().maxCoeff()))
            C.col(j) /= norms(j);
        else {
            C.col(j).setZero();
            norms(j) = 0;
        }
    }
    return C;
}

inline Eigen::MatrixXd standardize_backward(const Eigen::MatrixXd& Z, const Eigen::VectorXd& norms,
                                            const Eigen::MatrixXd& dZ) {
    Eigen::MatrixXd dX = Eigen::MatrixXd::Zero(Z.rows(), Z.cols());
    for (Eigen::Index j = 0; j < Z.cols(); ++j) {
        if (norms(j) == 0) continue;
        Eigen::VectorXd dc = (dZ.col(j) - Z.col(j) * Z.col(j).dot(dZ.col(j))) / norms(j);
        dX.col(j) = dc.array() - dc.mean();
    }
    return dX;
}

}  // namespace detail

/// sum_l [ sum_i (1 - M_ii)^2 + gamma * sum_{i != j} M_ij^2 ], M = Z_a^T Z_m
/// with Z the column-standardized rows of A_l and M_l. Gradients (if asked)
/// are w.r.t. the raw rows.
template <typename Real>
double synergistic_loss(const std::vector<Matrix<Real>>& A, const std::vector<Matrix<Real>>& Mrows, double gamma,
                        std::vector<Matrix<Real>>* dA = nullptr, std::vector<Matrix<Real>>* dM = nullptr,
                        SynergyReport* report = nullptr) {
    if (A.size() != Mrows.size()) throw DimensionError("branch layer counts differ");
    if (dA) dA->assign(A.size(), Matrix<Real>());
    if (dM) dM->assign(A.size(), Matrix<Real>());
    double total = 0;
    for (std::size_t l = 0; l < A.size(); ++l) {
        if (A[l].rows() < 2) throw NormalizationError("synergy loss needs at least two contributing positions");
        if (A[l].rows() != Mrows[l].rows() || A[l].cols() != Mrows[l].cols())
            throw DimensionError("branch outputs differ in shape");
        Eigen::VectorXd na, nm;
        Eigen::MatrixXd Za = detail::standardize_columns(A[l].template cast<double>(), na);
        Eigen::MatrixXd Zm = detail::standardize_columns(Mrows[l].template cast<double>(), nm);
        Eigen::MatrixXd M = Za.transpose() * Zm;
        double diag = 0, off = 0;
        Eigen::MatrixXd G(M.rows(), M.cols());
        for (Eigen::Index i = 0; i < M.rows(); ++i)
            for (Eigen::Index j = 0; j < M.cols(); ++j) {
                if (i == j) {
                    diag += (1 - M(i, i)) * (1 - M(i, i));
                    G(i, j) = -2 * (1 - M(i, i));
                } else {
                    off += M(i, j) * M(i, j);
                    G(i, j) = 2 * gamma * M(i, j);
                }
            }
        total += diag + gamma * off;
        if (report) {
            report->M.push_back(M);
            report->diagonal.push_back(diag);
            report->off_diagonal.push_back(gamma * off);
        }
        if (dA) (*dA)[l] = detail::standardize_backward(Za, na, Zm * G.transpose()).template cast<Real>();
        if (dM) (*dM)[l] = detail::standardize_backward(Zm, nm, Za * G).template cast<Real>();
    }
    return total;
}

// ---------------------------------------------------------------------------
// Batch objective

/// A teacher target bound to one of the batch's distinct student prompts.
template <typename Real>
struct DistillTarget {
    std::size_t student = 0;
    Matrix<Real> teacher;  // logits at the student's answer positions
};

/// Loss over one batch and, optionally, its gradients w.r.t. Theta and the
/// model weights (teacher targets held fixed).
template <typename Real>
LossParts distill_objective(const MicroModel<Real>& model, const Theta<Real>& theta, const InjectionPlan& plan,
                            std::span<const Prompt> students, std::span<const DistillTarget<Real>> targets,
                            const LossConfig& cfg, Theta<Real>* dtheta = nullptr, ModelParams<Real>* dmodel = nullptr,
                            SynergyReport* report = nullptr) {
    cfg.validate();
    const int L = model.config().num_layers;
    const auto Lu = static_cast<std::size_t>(L);
    auto inj = make_injection(theta, plan);
    Hooks<Real> hooks;
    hooks.injection = &inj;

    std::vector<ForwardCache<Real>> caches(students.size());
    for (std::size_t s = 0; s < students.size(); ++s) forward_cached(model, students[s].seq, hooks, caches[s]);
    auto answer_rows = [&](std::size_t s) {
        const auto& p = students[s];
        Matrix<Real> rows(static_cast<Eigen::Index>(p.predict_positions.size()), caches[s].logits.cols());
        for (std::size_t t = 0; t < p.predict_positions.size(); ++t)
            rows.row(static_cast<Eigen::Index>(t)) = caches[s].logits.row(p.predict_positions[t]);
        return rows;
    };
    const bool want_grad = dtheta || dmodel;
    std::vector<Matrix<Real>> dlogits(students.size());
    for (std::size_t s = 0; s < students.size(); ++s)
        dlogits[s] = Matrix<Real>::Zero(caches[s].logits.rows(), caches[s].logits.cols());
    auto scatter = [&](std::size_t s, const Matrix<Real>& drows, double w) {
        const auto& p = students[s];
        for (std::size_t t = 0; t < p.predict_positions.size(); ++t)
            dlogits[s].row(p.predict_positions[t]) += drows.row(static_cast<Eigen::Index>(t)) * static_cast<Real>(w);
    };

    LossParts parts;
    // Mimicry: mean KL over every answer position of every target.
    std::size_t positions = 0;
    for (const auto& t : targets) positions += static_cast<std::size_t>(t.teacher.rows());
    for (const auto& t : targets) {
        if (t.teacher.rows() == 0) continue;
        Matrix<Real> srows = answer_rows(t.student), d;
        double kl = mimicry_loss(t.teacher, srows, cfg.temperature, want_grad ? &d : nullptr);
        const double share = static_cast<double>(t.teacher.rows()) / static_cast<double>(positions);
        parts.mim += kl * share;
        if (want_grad) scatter(t.student, d, cfg.lambda_mim * share);
    }
    // Supervised: answer NLL, averaged over targets.
    for (const auto& t : targets) {
        const auto& p = students[t.student];
        Matrix<Real> srows = answer_rows(t.student), d;
        double nll = supervised_loss(srows, std::span<const TokenId>(p.targets), want_grad ? &d : nullptr);
        parts.sup += nll / static_cast<double>(targets.size());
        if (want_grad) scatter(t.student, d, cfg.lambda_sup / static_cast<double>(targets.size()));
    }
    // Synergy over all positions of the distinct student runs.
    std::vector<Matrix<Real>> Arows(Lu), Mrows(Lu);
    Eigen::Index total_rows = 0;
    for (const auto& c : caches) total_rows += c.trace.a[0].rows();
    for (std::size_t l = 0; l < Lu; ++l) {
        Arows[l].resize(total_rows, model.config().hidden_dim);
        Mrows[l].resize(total_rows, model.config().hidden_dim);
        Eigen::Index r = 0;
        for (const auto& c : caches) {
            Arows[l].middleRows(r, c.trace.a[l].rows()) = c.trace.a[l];
            Mrows[l].middleRows(r, c.trace.m[l].rows()) = c.trace.m[l];
            r += c.trace.a[l].rows();
        }
    }
    std::vector<Matrix<Real>> dA, dM;
    parts.syn = synergistic_loss(Arows, Mrows, cfg.gamma, want_grad ? &dA : nullptr, want_grad ? &dM : nullptr, report);
    parts.total = total_loss(parts, cfg);
    if (!want_grad) return parts;

    if (dtheta) *dtheta = Theta<Real>::zeros(L, model.config().hidden_dim);
    Eigen::Index r0 = 0;
    for (std::size_t s = 0; s < students.size(); ++s) {
        const auto rows = caches[s].trace.a[0].rows();
        StreamGrads<Real> extra;
        extra.attn.resize(Lu);
        extra.mlp.resize(Lu);
        for (std::size_t l = 0; l < Lu; ++l) {
            extra.attn[l] = dA[l].middleRows(r0, rows) * static_cast<Real>(cfg.lambda_syn);
            extra.mlp[l] = dM[l].middleRows(r0, rows) * static_cast<Real>(cfg.lambda_syn);
        }
        r0 += rows;
        auto g = backward(model, students[s].seq, caches[s], dlogits[s], &extra, dmodel);
        if (!dtheta || plan.null_plan) continue;
        for (int l : plan.layers) {
            const auto lu = static_cast<std::size_t>(l);
            if (plan.mha) {
                Vector<Real> sum = g.attn[lu].colwise().sum().transpose();
                dtheta->v_a.row(l) += (theta.alpha_a(l) * sum).transpose();
                dtheta->alpha_a(l) += theta.v_a.row(l).dot(sum.transpose());
            }
            if (plan.mlp) {
                Vector<Real> sum = g.mlp[lu].colwise().sum().transpose();
                dtheta->v_m.row(l) += (theta.alpha_m(l) * sum).transpose();
                dtheta->alpha_m(l) += theta.v_m.row(l).dot(sum.transpose());
            }
        }
    }
    return parts;
}

// ---------------------------------------------------------------------------
// Training

struct EpochMetrics {
    int epoch = 0;
    long step = 0;
    LossParts parts;
    double lr = 0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
    return {{"epoch", m.epoch}, {"step", m.step},         {"L_mim", m.parts.mim}, {"L_syn", m.parts.syn},
            {"L_sup", m.parts.sup}, {"L_total", m.parts.total}, {"lr", m.lr}};
}

inline void write_metrics(const std::string& path, std::span<const EpochMetrics> log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    for (const auto& m : log) out << to_json(m).dump() << '\n';
}

struct TrainResult {
    MIVBundle bundle;
    std::vector<EpochMetrics> log;
    bool aborted = false;
    std::string diagnostic;
};

inline std::string config_hash(const LossConfig& lc, const TrainConfig& tc) {
    std::string s = nlohmann::json{{"loss", to_json(lc)}, {"train", to_json(tc)}}.dump();
    auto d = Sha256().update(s).finish();
    return to_hex(std::span<const std::uint8_t>(d.data(), 8));
}

/// Student prompt: the query alone, teacher-forced over its answer.
inline Prompt student_prompt(const Instance& query) { return teacher_forced_prompt({}, query, 0); }

/// Trains Theta with the model frozen. Contexts are grouped by query so a
/// query's original and shuffled contexts land in the same batch.
template <typename Real>
TrainResult train_miv(const MicroModel<Real>& model, std::span<const Instance> queries,
                      std::span<const ContextSample> contexts, const LossConfig& lc, const TrainConfig& tc,
                      TokenId separator, const InjectionPlan& plan_in = {},
                      const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    lc.validate();
    tc.validate();
    const int L = model.config().num_layers, d = model.config().hidden_dim;
    InjectionPlan plan = plan_in.layers.empty() && !plan_in.null_plan ? InjectionPlan::all(L) : plan_in;
    plan.validate(L);

    TrainResult res;
    res.bundle = init_bundle(model, tc.seed);
    res.bundle.meta = {tc.task, contexts.empty() ? 0 : static_cast<int>(contexts.front().demonstrations.size()),
                       tc.strategy, config_hash(lc, tc)};
    if (tc.epochs == 0) return res;

    std::map<std::uint64_t, std::size_t> qindex;
    for (std::size_t i = 0; i < queries.size(); ++i) qindex[queries[i].id] = i;
    std::vector<Prompt> students;
    for (const auto& q : queries) students.push_back(student_prompt(q));
    std::vector<std::vector<std::size_t>> by_query(queries.size());
    std::vector<Matrix<Real>> teacher(contexts.size());
    for (std::size_t c = 0; c < contexts.size(); ++c) {
        auto it = qindex.find(contexts[c].query_id);
        if (it == qindex.end()) throw ValidationError("context refers to unknown query " + std::to_string(contexts[c].query_id));
        by_query[it->second].push_back(c);
        teacher[c] = teacher_logits(model, contexts[c].demonstrations, queries[it->second], separator,
                                    tc.many_shot ? &*tc.many_shot : nullptr);
    }
    std::vector<std::size_t> owner(contexts.size());
    for (std::size_t q = 0; q < by_query.size(); ++q)
        for (auto c : by_query[q]) owner[c] = q;

    auto theta = Theta<Real>::from_bundle(res.bundle);
    const std::size_t n_v = static_cast<std::size_t>(2 * L * d);
    AdamW<Real> opt_v(n_v), opt_a(static_cast<std::size_t>(2 * L));
    const long per_epoch = static_cast<long>((contexts.size() + static_cast<std::size_t>(tc.batch_size) - 1) /
                                             static_cast<std::size_t>(tc.batch_size));
    const long total_steps = per_epoch * tc.epochs;
    std::mt19937_64 gen(derive_seed(tc.seed, 0xD15));
    long step = 0;
    MIVBundle last_good = res.bundle;

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        std::vector<std::size_t> qorder(queries.size());
        std::iota(qorder.begin(), qorder.end(), 0);
        std::shuffle(qorder.begin(), qorder.end(), gen);
        std::vector<std::size_t> order;
        for (auto q : qorder)
            for (auto c : by_query[q]) order.push_back(c);

        LossParts sum;
        long steps_this_epoch = 0;
        double lr_mult = 1;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(tc.batch_size), ++step) {
            std::vector<Prompt> bs;
            std::vector<DistillTarget<Real>> bt;
            std::map<std::size_t, std::size_t> local;
            for (std::size_t k = b0; k < std::min(order.size(), b0 + static_cast<std::size_t>(tc.batch_size)); ++k) {
                auto c = order[k];
                auto [it, fresh] = local.try_emplace(owner[c], bs.size());
                if (fresh) bs.push_back(students[owner[c]]);
                bt.push_back({it->second, teacher[c]});
            }
            Theta<Real> g;
            LossParts parts = distill_objective<Real>(model, theta, plan, bs, bt, lc, &g);
            if (!std::isfinite(parts.total) || !g.v_a.allFinite() || !g.v_m.allFinite() || !g.alpha_a.allFinite() ||
                !g.alpha_m.allFinite()) {
                res.bundle = last_good;
                res.aborted = true;
                res.diagnostic = "non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step);
                return res;
            }
            lr_mult = warmup_multiplier(step, total_steps, tc.warmup_factor);
            opt_v.begin_step();
            opt_a.begin_step();
            opt_v.update(0, theta.v_a.data(), g.v_a.data(), static_cast<std::size_t>(theta.v_a.size()), tc.lr_v * lr_mult,
                         tc.weight_decay);
            opt_v.update(static_cast<std::size_t>(theta.v_a.size()), theta.v_m.data(), g.v_m.data(),
                         static_cast<std::size_t>(theta.v_m.size()), tc.lr_v * lr_mult, tc.weight_decay);
            opt_a.update(0, theta.alpha_a.data(), g.alpha_a.data(), static_cast<std::size_t>(L), tc.lr_alpha * lr_mult,
                         tc.weight_decay);
            opt_a.update(static_cast<std::size_t>(L), theta.alpha_m.data(), g.alpha_m.data(), static_cast<std::size_t>(L),
                         tc.lr_alpha * lr_mult, tc.weight_decay);
            theta.store(res.bundle);
            last_good = res.bundle;
            sum.mim += parts.mim;
            sum.syn += parts.syn;
            sum.sup += parts.sup;
            sum.total += parts.total;
            ++steps_this_epoch;
        }
        const double n = static_cast<double>(std::max<long>(1, steps_this_epoch));
        EpochMetrics m{epoch, step, {sum.mim / n, sum.syn / n, sum.sup / n, sum.total / n}, tc.lr_v * lr_mult};
        res.log.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckReport {
    double max_rel_error = 0;
    int coordinates = 0;
    int theta_coordinates = 0;
};

/// Compares analytic gradients of the batch objective against central
/// differences on every Theta coordinate plus sampled model weights, until
/// at least `min_coordinates` are covered.
inline GradCheckReport grad_check(const MicroModel<double>& model_in, std::span<const Prompt> students,
                                  std::span<const DistillTarget<double>> targets, const MIVBundle& bundle,
                                  const LossConfig& cfg, double eps = 1e-5, int min_coordinates = 200,
                                  std::uint64_t seed = 0, const InjectionPlan& plan_in = {}) {
    MicroModel<double> model = model_in;
    const int L = model.config().num_layers;
    InjectionPlan plan = plan_in.layers.empty() && !plan_in.null_plan ? InjectionPlan::all(L) : plan_in;
    auto theta = Theta<double>::from_bundle(bundle);
    Theta<double> gt;
    auto gm = ModelParams<double>::zeros(model.config());
    distill_objective(model, theta, plan, students, targets, cfg, &gt, &gm);

    GradCheckReport rep;
    auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); };
    auto loss = [&]() { return distill_objective(model, theta, plan, students, targets, cfg).total; };
    auto probe = [&](double* x, double analytic) {
        double orig = *x;
        *x = orig + eps;
        double up = loss();
        *x = orig - eps;
        double dn = loss();
        *x = orig;
        rep.max_rel_error = std::max(rep.max_rel_error, rel(analytic, (up - dn) / (2 * eps)));
        ++rep.coordinates;
    };
    std::vector<std::pair<double*, double*>> tcoords;
    auto addt = [&](auto& val, auto& grad) {
        for (Eigen::Index i = 0; i < val.size(); ++i) tcoords.emplace_back(val.data() + i, grad.data() + i);
    };
    addt(theta.alpha_a, gt.alpha_a);
    addt(theta.v_a, gt.v_a);
    addt(theta.alpha_m, gt.alpha_m);
    addt(theta.v_m, gt.v_m);
    for (auto [x, g] : tcoords) probe(x, *g);
    rep.theta_coordinates = rep.coordinates;

    std::vector<std::pair<double*, double*>> mcoords;
    std::vector<double*> mp, mg;
    model.params().visit([&](const std::string&, double* d, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) mp.push_back(d + i);
    });
    gm.visit([&](const std::string&, double* d, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) mg.push_back(d + i);
    });
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<std::size_t> pick(0, mp.size() - 1);
    while (rep.coordinates < min_coordinates) {
        auto k = pick(gen);
        probe(mp[k], *mg[k]);
    }
    return rep;
}

}  // namespace m2iv
