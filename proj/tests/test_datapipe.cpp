#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace m2iv;
using namespace m2iv::testing;

namespace {

const TokenLayout kLayout{64, 512};

std::vector<Instance> op_dataset(int hi = 4, int styles = 2, Operator op = Operator::Add) {
    SyntheticTaskSpec s;
    s.operators = {op};
    s.digit_hi = hi;
    s.glyph_styles = styles;
    return gen_tasks(s, kLayout).train;
}

/// Embeddings supplied explicitly per instance id.
class TableEmbedder final : public EmbeddingProvider {
   public:
    std::map<std::uint64_t, std::pair<Embedding, Embedding>> rows;
    int d = 0;
    int dim() const override { return d; }
    Embedding embed_image(const Instance& i) const override { return rows.at(i.id).first; }
    Embedding embed_question(const Instance& i) const override { return rows.at(i.id).second; }
};

Instance bare(std::uint64_t id) {
    Instance i;
    i.id = id;
    i.image = {1};
    i.question = {kLayout.question(TaskFamily::OperatorInduction)};
    i.answers = {{kLayout.digit(0)}};
    return i;
}

}  // namespace

TEST(Embedding, IdenticalInstancesIdenticalEmbeddings) {
    HashingEmbedder h;
    auto d = op_dataset();
    auto copy = d[3];
    copy.id = 999;
    EXPECT_TRUE(embed_joint(d[3], h) == embed_joint(copy, h));
}

TEST(Embedding, QuestionOnlyDifferenceTouchesSecondHalf) {
    HashingEmbedder h;
    auto a = op_dataset()[0];
    auto b = a;
    b.question = {kLayout.question(TaskFamily::TokenMapping)};
    auto ea = embed_joint(a, h), eb = embed_joint(b, h);
    EXPECT_TRUE(ea.head(64) == eb.head(64));
    EXPECT_FALSE(ea.tail(64) == eb.tail(64));
    EXPECT_NEAR(ea.head(64).norm(), 1.0, 1e-15);
    EXPECT_NEAR(ea.tail(64).norm(), 1.0, 1e-15);
}

TEST(Embedding, HashingGoldenVector) {
    HashingEmbedder h(16, 0);
    std::vector<TokenId> toks{3, 17, 42, 5};
    const double golden[16] = {0, 0, 0, 0, -1, 0, 0, 0, 0, 0, -0.5, 0.5, 0.5, 0, -0.5, 1};
    auto e = h.embed_tokens(toks, 1);
    for (int i = 0; i < 16; ++i) EXPECT_EQ(e(i), golden[i]) << i;
}

TEST(Embedding, ZeroVectorIsRejected) {
    TableEmbedder t;
    t.d = 2;
    t.rows[1] = {Embedding::Zero(2), Embedding::Ones(2)};
    EXPECT_THROW(embed_joint(bare(1), t), NormalizationError);
}

TEST(Embedding, FileProviderRoundTrip) {
    TempDir dir("emb");
    auto d = op_dataset();
    HashingEmbedder h(32);
    FileEmbeddingProvider::write(dir.file("e.bin"), d, h);
    FileEmbeddingProvider f(dir.file("e.bin"), d);
    EXPECT_EQ(f.dim(), 32);
    for (const auto& inst : d) {
        EXPECT_LE((embed_joint(inst, f) - embed_joint(inst, h)).cwiseAbs().maxCoeff(), 1e-7);
    }
    std::vector<Instance> fewer(d.begin(), d.begin() + 3);
    EXPECT_THROW(FileEmbeddingProvider(dir.file("e.bin"), fewer), ValidationError);
}

TEST(QuerySet, KEqualsDatasetSize) {
    auto d = op_dataset(2, 1);
    HashingEmbedder h;
    auto qs = build_query_set(d, static_cast<int>(d.size()), h, 1);
    EXPECT_EQ(qs.queries.size(), d.size());
    EXPECT_TRUE(qs.support.empty());
    ContextSetOptions opt;
    opt.shots = 1;
    EXPECT_THROW(build_context_set(qs.queries, qs.support, opt, h), SizeError);
}

TEST(QuerySet, OneRepresentativePerSeparatedGroup) {
    TableEmbedder t;
    t.d = 3;
    std::vector<Instance> d;
    std::mt19937_64 gen(3);
    std::normal_distribution<double> N(0, 0.05);
    for (int g = 0; g < 3; ++g)
        for (int k = 0; k < 5; ++k) {
            auto i = bare(static_cast<std::uint64_t>(g * 10 + k));
            Embedding e = Embedding::Unit(3, g);
            for (int j = 0; j < 3; ++j) e(j) += N(gen);
            t.rows[i.id] = {e, Embedding::Ones(3)};
            d.push_back(i);
        }
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto qs = build_query_set(d, 3, t, seed);
        std::set<std::uint64_t> groups;
        for (const auto& q : qs.queries) groups.insert(q.id / 10);
        EXPECT_EQ(groups.size(), 3u) << "seed " << seed;
        EXPECT_EQ(qs.support.size(), 12u);
    }
}

TEST(QuerySet, SingleClusterPicksNearestToMeanDirection) {
    auto d = op_dataset(4, 1);
    HashingEmbedder h;
    auto qs = build_query_set(d, 1, h, 4);
    ASSERT_EQ(qs.queries.size(), 1u);
    // Brute force: the centroid of one cluster is the normalized mean of the unit embeddings.
    Embedding mean = Embedding::Zero(128);
    std::vector<Embedding> E;
    for (const auto& i : d) {
        E.push_back(embed_joint(i, h));
        mean += E.back() / E.back().norm();
    }
    mean.normalize();
    std::size_t best = 0;
    for (std::size_t i = 1; i < d.size(); ++i)
        if (E[i].dot(mean) / E[i].norm() > E[best].dot(mean) / E[best].norm()) best = i;
    EXPECT_EQ(qs.queries[0].id, d[best].id);
}

TEST(QuerySet, DeterministicAndPartitions) {
    auto d = op_dataset();
    HashingEmbedder h;
    auto a = build_query_set(d, 8, h, 5), b = build_query_set(d, 8, h, 5);
    EXPECT_EQ(a.queries, b.queries);
    EXPECT_EQ(a.queries.size() + a.support.size(), d.size());
    std::set<std::uint64_t> q;
    for (const auto& i : a.queries) q.insert(i.id);
    for (const auto& i : a.support) EXPECT_FALSE(q.count(i.id));
    EXPECT_THROW(build_query_set(d, 0, h, 1), SizeError);
}

TEST(KMeans, ObjectiveNeverIncreases) {
    std::mt19937_64 gen(6);
    std::normal_distribution<double> N(0, 1);
    for (int run = 0; run < 50; ++run) {
        std::vector<Embedding> X;
        for (int i = 0; i < 60; ++i) {
            Embedding e(8);
            for (int j = 0; j < 8; ++j) e(j) = N(gen);
            X.push_back(e);
        }
        auto r = spherical_kmeans(X, 2 + run % 7, static_cast<std::uint64_t>(run));
        for (std::size_t k = 1; k < r.objective.size(); ++k)
            EXPECT_LE(r.objective[k], r.objective[k - 1] + 1e-12) << "run " << run << " iter " << k;
    }
}

TEST(Retrieve, ExactSupportSizeReturnsAll) {
    auto d = op_dataset(2, 1);
    HashingEmbedder h;
    auto q = d[0];
    std::vector<Instance> support(d.begin() + 1, d.begin() + 5);
    for (auto s : {Strategy::RS, Strategy::I2I, Strategy::IQ2IQ}) {
        auto r = retrieve(s, q, support, 4, h, 1);
        std::set<std::uint64_t> got, want;
        for (const auto& i : r) got.insert(i.id);
        for (const auto& i : support) want.insert(i.id);
        EXPECT_EQ(got, want);
    }
    EXPECT_THROW(retrieve(Strategy::RS, q, support, 5, h, 1), SizeError);
}

TEST(Retrieve, SameImageRanksFirst) {
    auto d = op_dataset(4, 2);
    HashingEmbedder h;
    auto q = d[0];
    auto twin = q;
    twin.id = 77777;
    twin.answers = {{kLayout.digit(9)}};
    std::vector<Instance> support(d.begin() + 1, d.end());
    support.insert(support.begin() + 10, twin);
    EXPECT_EQ(retrieve(Strategy::I2I, q, support, 3, h, 0).front().id, 77777u);
    EXPECT_EQ(retrieve(Strategy::IQ2IQ, q, support, 3, h, 0).front().id, 77777u);
}

TEST(Retrieve, DescendingSimilarityWithIdTieBreak) {
    auto d = op_dataset(4, 2);
    HashingEmbedder h;
    auto q = d[5];
    auto r = retrieve(Strategy::IQ2IQ, q, d, 12, h, 0);
    auto e = embed_joint(q, h);
    for (std::size_t k = 1; k < r.size(); ++k) {
        double a = cosine(e, embed_joint(r[k - 1], h)), b = cosine(e, embed_joint(r[k], h));
        EXPECT_GE(a, b);
        if (a == b) {
            EXPECT_LT(r[k - 1].id, r[k].id);
        }
    }
    for (const auto& i : r) EXPECT_NE(i.id, q.id);
}

TEST(Retrieve, RandomIsSeededAndDeterministic) {
    auto d = op_dataset();
    HashingEmbedder h;
    auto a = retrieve(Strategy::RS, d[0], d, 6, h, 3), b = retrieve(Strategy::RS, d[0], d, 6, h, 3);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, retrieve(Strategy::RS, d[0], d, 6, h, 4));
    std::set<std::uint64_t> ids;
    for (const auto& i : a) ids.insert(i.id);
    EXPECT_EQ(ids.size(), 6u);
}

TEST(Oracle, SingleStepEqualsExhaustiveArgmax) {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 16;
    c.num_heads = 2;
    auto m = random_model<float>(c, 8, 0.2);
    auto d = op_dataset(4, 2, Operator::Mul);
    std::mt19937_64 gen(9);
    for (int trial = 0; trial < 20; ++trial) {
        std::shuffle(d.begin(), d.end(), gen);
        const int size = 1 + trial % 8;
        std::vector<Instance> support(d.begin() + 1, d.begin() + 1 + size);
        const auto& q = d[0];
        auto got = retrieve_oracle(m, q, support, 1, kLayout.separator());
        std::size_t best = 0;
        double best_s = -1e300;
        for (std::size_t j = 0; j < support.size(); ++j) {
            std::vector<Instance> one{support[j]};
            double s = answer_log_likelihood(m, std::span<const Instance>(one), q, kLayout.separator());
            if (s > best_s || (s == best_s && support[j].id < support[best].id)) {
                best_s = s;
                best = j;
            }
        }
        ASSERT_EQ(got.size(), 1u);
        EXPECT_EQ(got[0].id, support[best].id) << "trial " << trial;
    }
}

TEST(Oracle, ZeroShotsIsZeroShotLikelihood) {
    auto m = random_model<float>(ModelConfig{.num_layers = 1, .hidden_dim = 16, .num_heads = 2}, 10, 0.2);
    auto d = op_dataset();
    auto r = retrieve_oracle(m, d[0], std::span<const Instance>(d).subspan(1, 4), 0, kLayout.separator());
    EXPECT_TRUE(r.empty());
    std::vector<Instance> none;
    auto p = teacher_forced_prompt(none, d[0], kLayout.separator());
    EXPECT_EQ(p.context_tokens, 0);
    EXPECT_LE(answer_log_likelihood(m, std::span<const Instance>(none), d[0], kLayout.separator()), 0.0);
    EXPECT_THROW(retrieve_oracle(m, d[0], std::span<const Instance>(d).subspan(0, 1), 1, kLayout.separator()), SizeError);
}

TEST(ContextSet, SingleShotShuffleIsIdentity) {
    auto d = op_dataset();
    HashingEmbedder h;
    std::vector<Instance> queries(d.begin(), d.begin() + 3), support(d.begin() + 3, d.end());
    ContextSetOptions opt;
    opt.shots = 1;
    auto ctx = build_context_set(queries, support, opt, h);
    ASSERT_EQ(ctx.size(), 6u);
    for (std::size_t k = 0; k < ctx.size(); k += 2) EXPECT_EQ(ctx[k].demonstrations, ctx[k + 1].demonstrations);
}

TEST(ContextSet, SixteenShotShuffleIsAPermutation) {
    auto d = op_dataset();
    HashingEmbedder h;
    std::vector<Instance> queries(d.begin(), d.begin() + 4), support(d.begin() + 4, d.end());
    ContextSetOptions opt;
    opt.shots = 16;
    opt.seed = 3;
    for (auto s : {Strategy::RS, Strategy::I2I, Strategy::IQ2IQ}) {
        opt.strategy = s;
        auto ctx = build_context_set(queries, support, opt, h);
        for (std::size_t k = 0; k < ctx.size(); k += 2) {
            EXPECT_FALSE(ctx[k].shuffled);
            EXPECT_TRUE(ctx[k + 1].shuffled);
            EXPECT_NE(ctx[k].demonstrations, ctx[k + 1].demonstrations);
            std::multiset<std::uint64_t> a, b;
            for (const auto& i : ctx[k].demonstrations) a.insert(i.id);
            for (const auto& i : ctx[k + 1].demonstrations) b.insert(i.id);
            EXPECT_EQ(a, b);
        }
    }
}

TEST(ContextSet, CountsAndNoLeakage) {
    auto d = op_dataset();
    HashingEmbedder h;
    auto qs = build_query_set(d, 5, h, 2);
    ContextSetOptions opt;
    opt.shots = 4;
    auto ctx = build_context_set(qs.queries, qs.support, opt, h);
    EXPECT_EQ(ctx.size(), 10u);
    std::map<std::uint64_t, int> seen;
    for (const auto& c : ctx) ++seen[c.query_id];
    for (const auto& q : qs.queries) EXPECT_EQ(seen[q.id], 2);
    EXPECT_FALSE(has_query_leakage(ctx));
    // Even when the query sits in the support, it never becomes its own demonstration.
    opt.strategy = Strategy::IQ2IQ;
    auto self = build_context_set(std::span<const Instance>(d).subspan(0, 5), d, opt, h);
    EXPECT_FALSE(has_query_leakage(self));
}

TEST(ContextSet, FileRoundTrip) {
    TempDir dir("ctx");
    auto d = op_dataset();
    HashingEmbedder h;
    auto qs = build_query_set(d, 4, h, 2);
    ContextSetOptions opt;
    opt.shots = 3;
    auto ctx = build_context_set(qs.queries, qs.support, opt, h);
    write_context_set(dir.file("c.jsonl"), ctx);
    auto back = read_context_set(dir.file("c.jsonl"), qs.support);
    ASSERT_EQ(back.size(), ctx.size());
    for (std::size_t k = 0; k < ctx.size(); ++k) {
        EXPECT_EQ(back[k].query_id, ctx[k].query_id);
        EXPECT_EQ(back[k].shuffled, ctx[k].shuffled);
        EXPECT_EQ(back[k].demonstrations, ctx[k].demonstrations);
    }
    EXPECT_THROW(read_context_set(dir.file("c.jsonl"), qs.queries), SizeError);
}

TEST(Permutation, NeverIdentityForTwoOrMore) {
    for (int n = 2; n < 6; ++n)
        for (std::uint64_t s = 0; s < 200; ++s) {
            auto p = non_identity_permutation(n, s);
            EXPECT_FALSE(std::is_sorted(p.begin(), p.end()));
        }
    EXPECT_EQ(non_identity_permutation(1, 3), std::vector<int>{0});
}
