#include "test_util.hpp"
#include "m2iv/vlibrary.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

using namespace m2iv;
using namespace m2iv::testing;

namespace {

MatrixXd row_of_logs(std::initializer_list<double> probs) {
    MatrixXd m(1, static_cast<Eigen::Index>(probs.size()));
    Eigen::Index j = 0;
    for (double p : probs) m(0, j++) = std::log(p);
    return m;
}

struct Fixture {
    ModelConfig cfg = tiny_config(2, 8, 2, 5);
    TokenLayout layout = TokenLayout::for_model(cfg);
    std::vector<Instance> pool;

    Fixture() {
        SyntheticTaskSpec s;
        s.operators = {Operator::Add};
        s.digit_hi = 3;
        pool = gen_tasks(s, layout).train;
    }

    std::vector<Instance> demos(std::size_t from, std::size_t n) const {
        return {pool.begin() + static_cast<long>(from), pool.begin() + static_cast<long>(from + n)};
    }
};

// Three queries, each with a 2-shot teacher.
template <typename Real>
void batch(const Fixture& f, const MicroModel<Real>& model, std::vector<Prompt>& students,
           std::vector<DistillTarget<Real>>& targets) {
    for (std::size_t q = 0; q < 3; ++q) {
        students.push_back(student_prompt(f.pool[q]));
        auto d = f.demos(4 + 2 * q, 2);
        targets.push_back({q, teacher_logits(model, std::span<const Instance>(d), f.pool[q], f.layout.separator())});
    }
}

}  // namespace

TEST(Mimicry, IdenticalDistributionsGiveZero) {
    auto t = row_of_logs({0.1, 0.2, 0.7});
    EXPECT_NEAR(mimicry_loss<double>(t, t, 1.0), 0.0, 1e-15);
    EXPECT_NEAR(mimicry_loss<double>(t, t, 2.5), 0.0, 1e-15);
}

TEST(Mimicry, UnitTemperatureIsPlainKl) {
    // KL((0.75, 0.25) || (0.5, 0.5)) = 0.75 ln 1.5 + 0.25 ln 0.5
    EXPECT_NEAR(mimicry_loss<double>(row_of_logs({0.75, 0.25}), row_of_logs({0.5, 0.5}), 1.0), 0.130812, 1e-6);
}

TEST(Mimicry, GradientMatchesFiniteDifference) {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> N;
    MatrixXd t(2, 5), s(2, 5);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        t.data()[i] = N(gen);
        s.data()[i] = N(gen);
    }
    MatrixXd g;
    mimicry_loss<double>(t, s, 1.7, &g);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        MatrixXd p = s, m = s;
        p.data()[i] += 1e-6;
        m.data()[i] -= 1e-6;
        double fd = (mimicry_loss<double>(t, p, 1.7) - mimicry_loss<double>(t, m, 1.7)) / 2e-6;
        EXPECT_NEAR(g.data()[i], fd, 1e-7);
    }
}

TEST(Supervised, CertainAnswerCostsNothing) {
    MatrixXd s = MatrixXd::Constant(1, 10, -1e3);
    s(0, 4) = 0;
    std::vector<TokenId> a{4};
    EXPECT_EQ(supervised_loss<double>(s, a), 0.0);
}

TEST(Supervised, UniformRowsCostLogVocabEach) {
    MatrixXd s = MatrixXd::Zero(3, 12);
    std::vector<TokenId> a{1, 5, 11};
    EXPECT_NEAR(supervised_loss<double>(s, a), 3 * std::log(12.0), 1e-12);
}

TEST(Supervised, TwoTokenAnswer) {
    MatrixXd s(2, 4);
    s.row(0) = row_of_logs({0.5, 0.2, 0.2, 0.1});
    s.row(1) = row_of_logs({0.25, 0.25, 0.25, 0.25});
    std::vector<TokenId> a{0, 2};
    EXPECT_NEAR(supervised_loss<double>(s, a), 2.07944, 1e-5);
}

TEST(Supervised, Errors) {
    MatrixXd s = MatrixXd::Zero(1, 4);
    std::vector<TokenId> none, far{9};
    EXPECT_THROW(supervised_loss<double>(s, none), ValidationError);
    EXPECT_THROW(supervised_loss<double>(s, far), VocabError);
}

namespace {

// 4 x 2 rows whose columns are already centered and orthonormal.
MatrixXd orthonormal_rows() {
    MatrixXd z(4, 2);
    z << 1, 1, 1, -1, -1, 1, -1, -1;
    return z / 2.0;
}

}  // namespace

TEST(Synergy, AlignedBranchesGiveZero) {
    std::vector<MatrixXd> A{orthonormal_rows(), orthonormal_rows()};
    EXPECT_NEAR(synergistic_loss<double>(A, A, 0.05), 0.0, 1e-14);
}

TEST(Synergy, ScaleAndShiftInvariant) {
    std::vector<MatrixXd> A{orthonormal_rows()};
    std::vector<MatrixXd> M{(orthonormal_rows() * 7.0).array() + 3.0};
    EXPECT_NEAR(synergistic_loss<double>(A, M, 0.05), 0.0, 1e-13);
}

TEST(Synergy, NegatedBranchCostsFourPerDimension) {
    std::vector<MatrixXd> A{orthonormal_rows(), orthonormal_rows(), orthonormal_rows()};
    std::vector<MatrixXd> M;
    for (const auto& a : A) M.push_back(-a);
    EXPECT_NEAR(synergistic_loss<double>(A, M, 0.05), 3 * 4.0 * 2, 1e-12);
}

TEST(Synergy, ZeroGammaKeepsDiagonalOnly) {
    std::mt19937_64 gen(8);
    std::normal_distribution<double> N;
    MatrixXd a(6, 3), m(6, 3);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        a.data()[i] = N(gen);
        m.data()[i] = N(gen);
    }
    std::vector<MatrixXd> A{a}, M{m};
    SynergyReport rep;
    double loss = synergistic_loss<double>(A, M, 0.0, nullptr, nullptr, &rep);
    double diag = 0;
    for (int i = 0; i < 3; ++i) diag += (1 - rep.M[0](i, i)) * (1 - rep.M[0](i, i));
    EXPECT_NEAR(loss, diag, 1e-14);
    EXPECT_EQ(rep.off_diagonal[0], 0.0);
}

TEST(Synergy, GradientMatchesFiniteDifference) {
    std::mt19937_64 gen(9);
    std::normal_distribution<double> N;
    MatrixXd a(5, 3), m(5, 3);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        a.data()[i] = N(gen);
        m.data()[i] = N(gen);
    }
    std::vector<MatrixXd> dA, dM;
    synergistic_loss<double>({a}, {m}, 0.3, &dA, &dM);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        MatrixXd p = a, q = a;
        p.data()[i] += 1e-6;
        q.data()[i] -= 1e-6;
        double fd = (synergistic_loss<double>({p}, {m}, 0.3) - synergistic_loss<double>({q}, {m}, 0.3)) / 2e-6;
        EXPECT_NEAR(dA[0].data()[i], fd, 1e-6);
    }
}

TEST(Synergy, SingleRowRejected) {
    std::vector<MatrixXd> A{MatrixXd::Ones(1, 3)};
    EXPECT_THROW(synergistic_loss<double>(A, A, 0.05), NormalizationError);
}

TEST(TotalLoss, Weighting) {
    LossParts p{1, 2, 3, 0};
    LossConfig c;
    c.lambda_mim = c.lambda_syn = c.lambda_sup = 0;
    EXPECT_EQ(total_loss(p, c), 0.0);
    c.lambda_mim = c.lambda_syn = c.lambda_sup = 0.5;
    EXPECT_DOUBLE_EQ(total_loss(p, c), 3.0);
    c.lambda_mim = 0.8;
    c.lambda_syn = 0.8;
    c.lambda_sup = 0.5;
    EXPECT_DOUBLE_EQ(total_loss(p, c), 0.8 + 1.6 + 1.5);
}

TEST(Teacher, RowsAreDistributionsOverAnswerTokens) {
    Fixture f;
    auto model = random_model<double>(f.cfg, 2);
    auto d = f.demos(1, 3);
    auto P = teacher_forward(model, std::span<const Instance>(d), f.pool[0], f.layout.separator());
    ASSERT_EQ(P.rows(), 1);
    ASSERT_EQ(P.cols(), f.cfg.vocab_size);
    EXPECT_NEAR(P.sum(), 1.0, 1e-12);
    EXPECT_GE(P.minCoeff(), 0.0);

    // Same as the softmax of a plain forward pass at the last query position.
    auto p = teacher_forced_prompt(std::span<const Instance>(d), f.pool[0], f.layout.separator());
    MatrixXd logits = forward(model, p.seq);
    Eigen::ArrayXd z = logits.row(p.predict_positions[0]).transpose().array();
    Eigen::ArrayXd e = (z - z.maxCoeff()).exp();
    EXPECT_LE((P.row(0).transpose().array() - e / e.sum()).abs().maxCoeff(), 1e-12);
}

TEST(Objective, GradientsMatchFiniteDifferences) {
    Fixture f;
    auto model = random_model<double>(f.cfg, 4);
    std::vector<Prompt> students;
    std::vector<DistillTarget<double>> targets;
    batch(f, model, students, targets);
    auto bundle = init_bundle(model, 6);
    // Larger vectors so the injection moves the loss measurably.
    for (auto& v : bundle.v_a) v *= 30.f;
    for (auto& v : bundle.v_m) v *= 30.f;
    LossConfig lc;
    auto rep = grad_check(model, students, targets, bundle, lc, 1e-5, 200, 1);
    EXPECT_GE(rep.coordinates, 200);
    EXPECT_EQ(rep.theta_coordinates, 2 * 2 + 2 * 2 * 8);
    EXPECT_LE(rep.max_rel_error, 1e-4);
}

TEST(Objective, LinearInTheWeights) {
    Fixture f;
    auto model = random_model<double>(f.cfg, 4);
    std::vector<Prompt> students;
    std::vector<DistillTarget<double>> targets;
    batch(f, model, students, targets);
    auto theta = Theta<double>::from_bundle(init_bundle(model, 6));
    auto plan = InjectionPlan::all(2);
    auto run = [&](double a, double b, double c, Theta<double>& g) {
        LossConfig lc;
        lc.lambda_mim = a;
        lc.lambda_syn = b;
        lc.lambda_sup = c;
        return distill_objective<double>(model, theta, plan, students, targets, lc, &g);
    };
    Theta<double> g1, g2, g3, gall;
    auto p1 = run(1, 0, 0, g1), p2 = run(0, 1, 0, g2), p3 = run(0, 0, 1, g3), pall = run(1, 1, 1, gall);
    EXPECT_NEAR(p1.total, p1.mim, 1e-14);
    EXPECT_NEAR(p2.total, p2.syn, 1e-14);
    EXPECT_NEAR(p3.total, p3.sup, 1e-14);
    EXPECT_NEAR(pall.total, p1.total + p2.total + p3.total, 1e-12);
    EXPECT_LE((gall.v_a - g1.v_a - g2.v_a - g3.v_a).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((gall.alpha_m - g1.alpha_m - g2.alpha_m - g3.alpha_m).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Objective, ScaleAndVectorGradientsAgree) {
    // alpha * dL/dalpha == v . dL/dv, since both go through the product alpha v.
    Fixture f;
    auto model = random_model<double>(f.cfg, 4);
    std::vector<Prompt> students;
    std::vector<DistillTarget<double>> targets;
    batch(f, model, students, targets);
    auto theta = Theta<double>::from_bundle(init_bundle(model, 6));
    Theta<double> g;
    distill_objective<double>(model, theta, InjectionPlan::all(2), students, targets, LossConfig{}, &g);
    for (int l = 0; l < 2; ++l) {
        EXPECT_NEAR(theta.alpha_a(l) * g.alpha_a(l), theta.v_a.row(l).dot(g.v_a.row(l)), 1e-12);
        EXPECT_NEAR(theta.alpha_m(l) * g.alpha_m(l), theta.v_m.row(l).dot(g.v_m.row(l)), 1e-12);
    }
}

namespace {

struct TrainSetup {
    Fixture f;
    std::vector<Instance> queries;
    std::vector<ContextSample> contexts;

    TrainSetup() {
        queries = f.demos(0, 4);
        for (std::size_t q = 0; q < queries.size(); ++q) {
            auto d = f.demos(5 + 2 * q, 2);
            contexts.push_back({queries[q].id, d, false});
            contexts.push_back({queries[q].id, {d[1], d[0]}, true});
        }
    }
};

TrainConfig quick_train(int epochs) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.seed = 11;
    tc.task = "add";
    return tc;
}

}  // namespace

TEST(TrainMiv, ZeroEpochsReturnsInitialBundle) {
    TrainSetup s;
    auto model = random_model<float>(s.f.cfg, 1);
    auto res = train_miv<float>(model, s.queries, s.contexts, LossConfig{}, quick_train(0), s.f.layout.separator());
    auto init = init_bundle(model, 11);
    EXPECT_EQ(res.bundle.alpha_a, init.alpha_a);
    EXPECT_EQ(res.bundle.v_m.size(), init.v_m.size());
    for (std::size_t l = 0; l < init.v_a.size(); ++l) EXPECT_TRUE(res.bundle.v_a[l] == init.v_a[l]);
    EXPECT_TRUE(res.log.empty());
    EXPECT_FALSE(res.aborted);
}

TEST(TrainMiv, DeterministicAndLeavesModelUntouched) {
    TrainSetup s;
    auto model = random_model<float>(s.f.cfg, 1);
    const auto before = model.weights_hash();
    auto a = train_miv<float>(model, s.queries, s.contexts, LossConfig{}, quick_train(3), s.f.layout.separator());
    auto b = train_miv<float>(model, s.queries, s.contexts, LossConfig{}, quick_train(3), s.f.layout.separator());
    EXPECT_EQ(model.weights_hash(), before);
    EXPECT_TRUE(a.bundle == b.bundle);
    EXPECT_EQ(serialize_bundle(a.bundle), serialize_bundle(b.bundle));
    ASSERT_EQ(a.log.size(), 3u);
    EXPECT_EQ(a.log.back().step, 3 * 4);  // 8 contexts, batch 2
    EXPECT_EQ(a.bundle.meta.shots, 2);
    EXPECT_EQ(a.bundle.meta.task, "add");
    EXPECT_EQ(a.bundle.meta.config_hash, config_hash(LossConfig{}, quick_train(3)));
    EXPECT_TRUE(a.bundle.fingerprint == fingerprint_of(model));
}

TEST(TrainMiv, ConfigHashTracksSettings) {
    auto tc = quick_train(3);
    LossConfig lc;
    auto h = config_hash(lc, tc);
    EXPECT_EQ(h, config_hash(lc, tc));
    lc.gamma = 0.07;
    EXPECT_NE(h, config_hash(lc, tc));
}

TEST(TrainMiv, LossFallsOnOperatorTask) {
    // A briefly pretrained model gives the teacher something worth copying.
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.vocab_size = 96;
    c.visual_vocab_size = 32;
    c.max_seq_len = 128;
    c.mlp_hidden_dim = 32;
    c.seed = 3;
    const auto layout = TokenLayout::for_model(c);
    SyntheticTaskSpec spec;
    spec.operators = {Operator::Add};
    spec.digit_hi = 4;
    PretrainConfig pc;
    pc.epochs = 1;
    pc.steps_per_epoch = 150;
    pc.batch_size = 4;
    pc.shots = 4;
    pc.eval_episodes = 8;
    pc.seed = 2;
    auto model = pretrain_micro<float>(c, TaskSuite(layout, {spec}), pc).model;

    auto pool = gen_tasks(spec, layout).train;
    std::vector<Instance> queries(pool.begin(), pool.begin() + 6);
    std::vector<ContextSample> contexts;
    for (std::size_t q = 0; q < queries.size(); ++q)
        contexts.push_back({queries[q].id, {pool.begin() + 6 + 3 * q, pool.begin() + 9 + 3 * q}, false});
    auto tc = quick_train(6);
    tc.lr_v = 5e-3;
    tc.batch_size = 6;  // one batch per epoch, so the synergy rows are the same each time
    LossConfig lc;
    lc.lambda_syn = 1e-3;  // same weighting as the acceptance fixture
    auto res = train_miv<float>(model, queries, contexts, lc, tc, layout.separator());
    ASSERT_EQ(res.log.size(), 6u);
    int down = 0;
    for (std::size_t e = 1; e < res.log.size(); ++e) down += res.log[e].parts.total <= res.log[e - 1].parts.total;
    EXPECT_GE(down, 4);
}

TEST(TrainMiv, NonFiniteLossAbortsWithLastGoodBundle) {
    TrainSetup s;
    auto model = random_model<float>(s.f.cfg, 1);
    model.params().unembed(0, 0) = std::numeric_limits<float>::quiet_NaN();
    auto res = train_miv<float>(model, s.queries, s.contexts, LossConfig{}, quick_train(2), s.f.layout.separator());
    EXPECT_TRUE(res.aborted);
    EXPECT_FALSE(res.diagnostic.empty());
    EXPECT_EQ(res.bundle.alpha_a, init_bundle(model, 11).alpha_a);
}

TEST(TrainMiv, UnknownQueryRejected) {
    TrainSetup s;
    auto model = random_model<float>(s.f.cfg, 1);
    s.contexts[0].query_id = 987654321;
    EXPECT_THROW(train_miv<float>(model, s.queries, s.contexts, LossConfig{}, quick_train(1), s.f.layout.separator()),
                 ValidationError);
}

TEST(Metrics, OneJsonLinePerEpoch) {
    TempDir dir("metrics");
    std::vector<EpochMetrics> log{{0, 4, {1, 2, 3, 4}, 0.01}, {1, 8, {0.5, 1, 1.5, 2}, 0.01}};
    write_metrics(dir.file("m.jsonl"), log);
    std::ifstream in(dir.file("m.jsonl"));
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("epoch").get<int>(), n);
        ++n;
    }
    EXPECT_EQ(n, 2);
}
