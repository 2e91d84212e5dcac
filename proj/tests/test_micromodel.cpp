#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace m2iv;
using namespace m2iv::testing;

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // rows

// Straight loop-nest evaluation of the forward pass, written independently
// of the Eigen implementation.
struct Oracle {
    const MicroModel<double>& model;

    static double at(const Matrix<double>& m, int r, int c) { return m(r, c); }

    Mat rms(const Mat& x, const Vector<double>& g, bool on) const {
        if (!on) return x;
        Mat y = x;
        for (auto& row : y) {
            double ms = 0;
            for (double v : row) ms += v * v;
            ms /= static_cast<double>(row.size());
            const double r = std::sqrt(ms + 1e-5);
            for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] / r * g(static_cast<Eigen::Index>(j));
        }
        return y;
    }
    static Mat matmul(const Mat& x, const Matrix<double>& w) {
        Mat y(x.size(), Vec(static_cast<std::size_t>(w.cols()), 0.0));
        for (std::size_t i = 0; i < x.size(); ++i)
            for (int k = 0; k < w.rows(); ++k)
                for (int j = 0; j < w.cols(); ++j) y[i][static_cast<std::size_t>(j)] += x[i][static_cast<std::size_t>(k)] * w(k, j);
        return y;
    }
    void rotate(Mat& x, int heads, int dh) const {
        for (std::size_t p = 0; p < x.size(); ++p)
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < dh / 2; ++i) {
                    const double th = static_cast<double>(p) / std::pow(10000.0, 2.0 * i / dh);
                    double& a = x[p][static_cast<std::size_t>(h * dh + 2 * i)];
                    double& b = x[p][static_cast<std::size_t>(h * dh + 2 * i + 1)];
                    const double ra = a * std::cos(th) - b * std::sin(th), rb = a * std::sin(th) + b * std::cos(th);
                    a = ra;
                    b = rb;
                }
    }
    static double gelu(double x) { return 0.5 * x * (1 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

    Mat run(const TokenSequence& s) const {
        const auto& c = model.config();
        const auto& p = model.params();
        const int d = c.hidden_dim, H = c.num_heads, dh = c.head_dim();
        const std::size_t I = s.size();
        Mat h(I, Vec(static_cast<std::size_t>(d)));
        for (std::size_t i = 0; i < I; ++i)
            for (int j = 0; j < d; ++j) h[i][static_cast<std::size_t>(j)] = p.tok_emb(s.ids[i], j);
        for (const auto& w : p.layers) {
            Mat x = rms(h, w.attn_gain, c.norm_enabled);
            Mat q = matmul(x, w.wq), k = matmul(x, w.wk), v = matmul(x, w.wv);
            rotate(q, H, dh);
            rotate(k, H, dh);
            Mat o(I, Vec(static_cast<std::size_t>(d), 0.0));
            for (int hd = 0; hd < H; ++hd)
                for (std::size_t i = 0; i < I; ++i) {
                    Vec sc(i + 1);
                    double mx = -1e300;
                    for (std::size_t j = 0; j <= i; ++j) {
                        double dot = 0;
                        for (int t = 0; t < dh; ++t)
                            dot += q[i][static_cast<std::size_t>(hd * dh + t)] * k[j][static_cast<std::size_t>(hd * dh + t)];
                        sc[j] = dot / std::sqrt(static_cast<double>(dh));
                        mx = std::max(mx, sc[j]);
                    }
                    double z = 0;
                    for (auto& e : sc) z += (e = std::exp(e - mx));
                    for (std::size_t j = 0; j <= i; ++j)
                        for (int t = 0; t < dh; ++t)
                            o[i][static_cast<std::size_t>(hd * dh + t)] += sc[j] / z * v[j][static_cast<std::size_t>(hd * dh + t)];
                }
            Mat a = matmul(o, w.wo);
            Mat u = h;
            for (std::size_t i = 0; i < I; ++i)
                for (int j = 0; j < d; ++j) u[i][static_cast<std::size_t>(j)] += a[i][static_cast<std::size_t>(j)];
            Mat pre = matmul(rms(u, w.mlp_gain, c.norm_enabled), w.w1);
            for (auto& row : pre)
                for (std::size_t j = 0; j < row.size(); ++j) row[j] = gelu(row[j] + w.b1(static_cast<Eigen::Index>(j)));
            Mat m = matmul(pre, w.w2);
            for (std::size_t i = 0; i < I; ++i)
                for (int j = 0; j < d; ++j) h[i][static_cast<std::size_t>(j)] = u[i][static_cast<std::size_t>(j)] + m[i][static_cast<std::size_t>(j)] + w.b2(j);
        }
        return matmul(rms(h, p.final_gain, c.norm_enabled), p.unembed);
    }
};

}  // namespace

TEST(Forward, ZeroUnembeddingGivesUniformSoftmax) {
    auto m = random_model<double>(tiny_config(), 3);
    m.params().unembed.setZero();
    std::mt19937_64 gen(1);
    auto logits = forward(m, random_sequence(m.config(), gen, 9));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Vector<double> p = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
        p /= p.sum();
        for (Eigen::Index v = 0; v < p.size(); ++v) EXPECT_DOUBLE_EQ(p(v), 1.0 / m.config().vocab_size);
    }
}

TEST(Forward, Deterministic) {
    auto m = random_model<float>(tiny_config(), 4);
    std::mt19937_64 gen(2);
    auto s = random_sequence(m.config(), gen, 12);
    EXPECT_TRUE(forward(m, s) == forward(m, s));
}

TEST(Forward, MatchesLoopNestOracle) {
    for (bool norm : {true, false}) {
        auto cfg = tiny_config(2, 8, 2, 5);
        cfg.norm_enabled = norm;
        auto m = random_model<double>(cfg, 6);
        std::mt19937_64 gen(3);
        for (int trial = 0; trial < 5; ++trial) {
            auto s = random_sequence(cfg, gen, 3 + trial * 3);
            auto got = forward(m, s);
            auto want = Oracle{m}.run(s);
            double err = 0;
            for (Eigen::Index i = 0; i < got.rows(); ++i)
                for (Eigen::Index j = 0; j < got.cols(); ++j)
                    err = std::max(err, std::abs(got(i, j) - want[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
            EXPECT_LE(err, 1e-10) << "norm " << norm << " trial " << trial;
        }
    }
}

TEST(ForwardTraced, ResidualIdentityIsExact) {
    auto m = random_model<float>(tiny_config(3, 8, 2), 7);
    std::mt19937_64 gen(4);
    for (int t = 0; t < 10; ++t) {
        auto s = random_sequence(m.config(), gen, 5 + t);
        auto [logits, tr] = forward_traced(m, s);
        ASSERT_EQ(tr.h.size(), 4u);
        for (std::size_t l = 0; l < 3; ++l) {
            Matrix<float> r = tr.h[l + 1] - tr.h[l] - tr.a[l] - tr.m[l];
            Matrix<float> sum = tr.h[l] + tr.a[l];
            sum += tr.m[l];
            EXPECT_TRUE(sum == tr.h[l + 1]);
            // In exact arithmetic the residual is zero; in floats it is at rounding level.
            EXPECT_LE(r.cwiseAbs().maxCoeff(), 1e-5f);
        }
        EXPECT_TRUE(logits == forward(m, s));
    }
}

TEST(ForwardTraced, ZeroMlpWeightsLeaveBiasPath) {
    auto m = random_model<double>(tiny_config(), 8);
    for (auto& l : m.params().layers) l.w2.setZero();
    std::mt19937_64 gen(5);
    auto s = random_sequence(m.config(), gen, 6);
    auto [_, tr] = forward_traced(m, s);
    for (std::size_t l = 0; l < tr.m.size(); ++l)
        for (Eigen::Index i = 0; i < tr.m[l].rows(); ++i)
            EXPECT_TRUE(tr.m[l].row(i) == m.params().layers[l].b2.transpose());

    // w1 = 0: every row sees gelu(b1) W2 + b2 regardless of its input.
    auto m2 = random_model<double>(tiny_config(), 9);
    for (auto& l : m2.params().layers) l.w1.setZero();
    auto [__, tr2] = forward_traced(m2, s);
    for (std::size_t l = 0; l < tr2.m.size(); ++l) {
        const auto& w = m2.params().layers[l];
        Vector<double> g = w.b1.unaryExpr([](double x) { return 0.5 * x * (1 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x))); });
        Vector<double> want = w.w2.transpose() * g + w.b2;
        for (Eigen::Index i = 0; i < tr2.m[l].rows(); ++i)
            EXPECT_LE((tr2.m[l].row(i).transpose() - want).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Forward, Causality) {
    auto m = random_model<double>(tiny_config(), 10);
    std::mt19937_64 gen(6);
    auto s = random_sequence(m.config(), gen, 10);
    auto base = forward(m, s);
    for (int j = 0; j < 10; ++j) {
        auto t = s;
        t.ids[static_cast<std::size_t>(j)] = (t.ids[static_cast<std::size_t>(j)] + 7) % m.config().vocab_size;
        auto changed = forward(m, t);
        for (int i = 0; i < j; ++i) EXPECT_TRUE(changed.row(i) == base.row(i)) << "j " << j << " i " << i;
    }
}

TEST(Forward, Errors) {
    auto m = random_model<float>(tiny_config(), 11);
    TokenSequence empty;
    EXPECT_THROW(forward(m, empty), LengthError);
    TokenSequence bad;
    bad.push(m.config().vocab_size, Role::Question);
    EXPECT_THROW(forward(m, bad), VocabError);
    bad.ids[0] = -1;
    EXPECT_THROW(forward(m, bad), VocabError);
    std::mt19937_64 gen(7);
    EXPECT_THROW(forward(m, random_sequence(m.config(), gen, m.config().max_seq_len + 1)), LengthError);
}

TEST(ModelConfig, Validation) {
    auto c = tiny_config();
    c.num_heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config(2, 6, 2);  // head dim 3 is odd
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config();
    c.visual_vocab_size = c.vocab_size;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Init, SameSeedSameWeights) {
    auto c = tiny_config(2, 8, 2, 42);
    auto a = MicroModel<float>::init(c), b = MicroModel<float>::init(c);
    EXPECT_EQ(a.weights_hash(), b.weights_hash());
    c.seed = 43;
    EXPECT_NE(MicroModel<float>::init(c).weights_hash(), a.weights_hash());
}

TEST(Generate, ForcedTokenRepeats) {
    auto m = random_model<double>(tiny_config(), 12);
    m.params().unembed.setZero();
    m.params().unembed(0, 20) = 1e3;
    for (auto& g : m.params().final_gain) g = 1.0;
    // Make the final stream's first coordinate strictly positive for every input.
    m.params().tok_emb.col(0).setConstant(1e3);
    for (auto& l : m.params().layers) {
        l.wo.setZero();
        l.w2.setZero();
        l.b2.setZero();
    }
    std::mt19937_64 gen(8);
    auto s = random_sequence(m.config(), gen, 4);
    auto out = generate_answer(m, s, 5);
    ASSERT_EQ(out.size(), 9u);
    for (std::size_t i = 4; i < 9; ++i) {
        EXPECT_EQ(out.ids[i], 20);
        EXPECT_EQ(out.roles[i], Role::Answer);
    }
    EXPECT_EQ(generate_answer(m, s, 1).size(), 5u);
    EXPECT_EQ(generate_answer(m, s, 5, TokenId{20}).size(), 5u);  // stops at once
    EXPECT_THROW(generate_answer(m, s, 0), ConfigError);
}

TEST(Generate, EqualsIterativeArgmax) {
    auto m = random_model<float>(tiny_config(), 13);
    std::mt19937_64 gen(9);
    auto s = random_sequence(m.config(), gen, 5);
    auto out = generate_answer(m, s, 6);
    auto seq = s;
    for (int k = 0; k < 6; ++k) {
        auto logits = forward(m, seq);
        Eigen::Index best;
        logits.row(logits.rows() - 1).maxCoeff(&best);
        seq.push(static_cast<TokenId>(best), Role::Answer);
    }
    EXPECT_EQ(out.ids, seq.ids);
}

TEST(Generate, AllowedSetRestrictsArgmax) {
    Vector<float> v(5);
    v << 0.f, 3.f, 1.f, 1.f, 2.f;
    std::vector<TokenId> allowed{0, 2, 3};
    EXPECT_EQ(argmax_token<float>(v), 1);
    EXPECT_EQ(argmax_token<float>(v, allowed), 2);  // tie between 2 and 3 goes to the lower id
}

TEST(Checkpoint, RoundTripAndCorruption) {
    TempDir dir("ckpt");
    auto m = random_model<float>(tiny_config(), 14);
    save_model(m, dir.file("m.bin"));
    auto back = load_model<float>(dir.file("m.bin"));
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(back.weights_hash(), m.weights_hash());
    auto bytes = serialize_model(m);
    bytes[bytes.size() / 2] ^= 0x01;
    EXPECT_THROW(deserialize_model<float>(bytes), CorruptionError);
    auto cut = serialize_model(m);
    cut.resize(cut.size() - 3);
    EXPECT_THROW(deserialize_model<float>(cut), CorruptionError);
}

TEST(Backward, ParameterGradientsMatchFiniteDifferences) {
    auto m = random_model<double>(tiny_config(2, 8, 2), 15, 0.2);
    std::mt19937_64 gen(10);
    auto s = random_sequence(m.config(), gen, 6);
    // Loss = sum(logits .* R) for a fixed random R.
    Matrix<double> R = Matrix<double>::Random(6, m.config().vocab_size);
    ForwardCache<double> cache;
    forward_cached(m, s, Hooks<double>{}, cache);
    auto grads = ModelParams<double>::zeros(m.config());
    backward(m, s, cache, R, nullptr, &grads);

    std::vector<double*> pw, pg;
    std::vector<Eigen::Index> sizes;
    m.params().visit([&](const std::string&, double* d, Eigen::Index n) {
        pw.push_back(d);
        sizes.push_back(n);
    });
    grads.visit([&](const std::string&, double* d, Eigen::Index) { pg.push_back(d); });
    auto loss = [&] { return forward(m, s).cwiseProduct(R).sum(); };
    std::uniform_int_distribution<std::size_t> pick_t(0, pw.size() - 1);
    double worst = 0;
    for (int k = 0; k < 60; ++k) {
        std::size_t t = pick_t(gen);
        std::uniform_int_distribution<Eigen::Index> pick_i(0, sizes[t] - 1);
        Eigen::Index i = pick_i(gen);
        double keep = pw[t][i];
        const double eps = 1e-6;
        pw[t][i] = keep + eps;
        double up = loss();
        pw[t][i] = keep - eps;
        double dn = loss();
        pw[t][i] = keep;
        double fd = (up - dn) / (2 * eps);
        worst = std::max(worst, std::abs(fd - pg[t][i]) / std::max(1e-6, std::abs(fd) + std::abs(pg[t][i])));
    }
    EXPECT_LE(worst, 1e-5);
}
