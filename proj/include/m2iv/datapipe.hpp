#pragma once

// Query-set and context-set construction: joint embeddings, spherical
// k-means representative selection, demonstration retrieval and shuffle
// augmentation.

#include "m2iv/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <unordered_map>

namespace m2iv {

using Embedding = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Embedding providers

class EmbeddingProvider {
   public:
    virtual ~EmbeddingProvider() = default;
    virtual int dim() const = 0;
    virtual Embedding embed_image(const Instance& inst) const = 0;
    virtual Embedding embed_question(const Instance& inst) const = 0;
};

/// Feature hashing over token ids: each token contributes a signed unit to a
/// token bucket and a half-weight signed unit to a (token, position) bucket.
class HashingEmbedder final : public EmbeddingProvider {
   public:
    explicit HashingEmbedder(int dim = 64, std::uint64_t salt = 0) : dim_(dim), salt_(salt) {
        if (dim < 1) throw ConfigError("embedding dimension must be positive");
    }
    int dim() const override { return dim_; }
    Embedding embed_image(const Instance& inst) const override { return embed_tokens(inst.image, 1); }
    Embedding embed_question(const Instance& inst) const override { return embed_tokens(inst.question, 2); }

    Embedding embed_tokens(std::span<const TokenId> toks, std::uint64_t field) const {
        Embedding e = Embedding::Zero(dim_);
        for (std::size_t p = 0; p < toks.size(); ++p) {
            auto tok = static_cast<std::uint64_t>(static_cast<std::uint32_t>(toks[p]));
            add(e, derive_seed(salt_ ^ field, tok), 1.0);
            add(e, derive_seed(salt_ ^ field ^ 0xA5A5, (tok << 20) ^ p), 0.5);
        }
        return e;
    }

   private:
    void add(Embedding& e, std::uint64_t h, double w) const {
        e(static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(dim_))) += (h >> 63) ? -w : w;
    }
    int dim_;
    std::uint64_t salt_;
};

/// Precomputed embeddings: header (u64 count, u64 d_e) then, per instance in
/// dataset order, d_e image floats followed by d_e question floats.
class FileEmbeddingProvider final : public EmbeddingProvider {
   public:
    FileEmbeddingProvider(const std::string& path, std::span<const Instance> dataset) {
        auto bytes = read_file(path);
        ByteReader r(bytes);
        auto count = r.get<std::uint64_t>();
        dim_ = static_cast<int>(r.get<std::uint64_t>());
        if (count != dataset.size()) throw ValidationError("embedding file count differs from dataset size");
        std::vector<float> row(static_cast<std::size_t>(2 * dim_));
        for (const auto& inst : dataset) {
            r.get_floats(row);
            Eigen::Map<Eigen::VectorXf> all(row.data(), 2 * dim_);
            rows_[inst.id] = {all.head(dim_).cast<double>(), all.tail(dim_).cast<double>()};
        }
        if (!r.done()) throw CorruptionError("trailing bytes in embedding file");
    }
    int dim() const override { return dim_; }
    Embedding embed_image(const Instance& inst) const override { return lookup(inst).first; }
    Embedding embed_question(const Instance& inst) const override { return lookup(inst).second; }

    static void write(const std::string& path, std::span<const Instance> dataset, const EmbeddingProvider& p) {
        ByteWriter w;
        w.put<std::uint64_t>(dataset.size());
        w.put<std::uint64_t>(static_cast<std::uint64_t>(p.dim()));
        for (const auto& inst : dataset) {
            Eigen::VectorXf a = p.embed_image(inst).cast<float>(), b = p.embed_question(inst).cast<float>();
            w.put_floats(std::span<const float>(a.data(), static_cast<std::size_t>(a.size())));
            w.put_floats(std::span<const float>(b.data(), static_cast<std::size_t>(b.size())));
        }
        write_file(path, w.bytes());
    }

   private:
    const std::pair<Embedding, Embedding>& lookup(const Instance& inst) const {
        auto it = rows_.find(inst.id);
        if (it == rows_.end()) throw SizeError("no precomputed embedding for id " + std::to_string(inst.id));
        return it->second;
    }
    int dim_ = 0;
    std::unordered_map<std::uint64_t, std::pair<Embedding, Embedding>> rows_;
};

inline Embedding unit(const Embedding& e, const char* what) {
    double n = e.norm();
    if (!(n > 0) || !std::isfinite(n)) throw NormalizationError(std::string("zero ") + what + " embedding");
    return e / n;
}

inline Embedding embed_image_unit(const Instance& inst, const EmbeddingProvider& p) {
    return unit(p.embed_image(inst), "image");
}

/// [unit(image) ; unit(question)], dimension 2 d_e.
inline Embedding embed_joint(const Instance& inst, const EmbeddingProvider& p) {
    Embedding a = unit(p.embed_image(inst), "image");
    Embedding b = unit(p.embed_question(inst), "question");
    Embedding out(a.size() + b.size());
    out << a, b;
    return out;
}

inline double cosine(const Embedding& a, const Embedding& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0 || nb == 0) return 0;
    return a.dot(b) / (na * nb);
}

// ---------------------------------------------------------------------------
// Spherical k-means

struct KMeansResult {
    std::vector<int> assignment;
    std::vector<Embedding> centroids;  // unit vectors
    std::vector<double> objective;     // mean cosine distance after each assignment step
    int iterations = 0;
};

/// Cosine k-means on the rows of `X`. Seeding draws each next centroid from
/// the data with probability proportional to its distance from the chosen
/// ones; ties in assignment go to the lowest centroid index.
inline KMeansResult spherical_kmeans(const std::vector<Embedding>& X, int K, std::uint64_t seed, int max_iter = 100,
                                     double rel_tol = 1e-6) {
    const int n = static_cast<int>(X.size());
    if (K < 1 || K > n) throw SizeError("k-means needs 1 <= K <= number of points");
    std::vector<Embedding> U;
    for (const auto& x : X) U.push_back(unit(x, "k-means input"));

    KMeansResult res;
    if (K == n) {
        res.assignment.resize(static_cast<std::size_t>(n));
        std::iota(res.assignment.begin(), res.assignment.end(), 0);
        res.centroids = U;
        res.objective = {0.0};
        return res;
    }

    std::mt19937_64 gen(derive_seed(seed, 0x5EED));
    std::vector<bool> chosen(static_cast<std::size_t>(n), false);
    std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    auto choose = [&](int idx) {
        chosen[static_cast<std::size_t>(idx)] = true;
        res.centroids.push_back(U[static_cast<std::size_t>(idx)]);
        for (int i = 0; i < n; ++i)
            dist[static_cast<std::size_t>(i)] = std::min(
                dist[static_cast<std::size_t>(i)], std::max(0.0, 1.0 - U[static_cast<std::size_t>(i)].dot(U[static_cast<std::size_t>(idx)])));
    };
    choose(std::uniform_int_distribution<int>(0, n - 1)(gen));
    while (static_cast<int>(res.centroids.size()) < K) {
        double total = 0;
        for (int i = 0; i < n; ++i)
            if (!chosen[static_cast<std::size_t>(i)]) total += dist[static_cast<std::size_t>(i)];
        int pick = -1;
        if (total > 0) {
            double r = std::uniform_real_distribution<double>(0.0, total)(gen);
            for (int i = 0; i < n; ++i) {
                if (chosen[static_cast<std::size_t>(i)]) continue;
                pick = i;
                r -= dist[static_cast<std::size_t>(i)];
                if (r <= 0 && dist[static_cast<std::size_t>(i)] > 0) break;
            }
        } else {
            std::vector<int> rest;
            for (int i = 0; i < n; ++i)
                if (!chosen[static_cast<std::size_t>(i)]) rest.push_back(i);
            pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(gen)];
        }
        choose(pick);
    }

    res.assignment.assign(static_cast<std::size_t>(n), 0);
    for (int it = 0; it < max_iter; ++it) {
        double obj = 0;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_sim = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < K; ++k) {
                double s = U[static_cast<std::size_t>(i)].dot(res.centroids[static_cast<std::size_t>(k)]);
                if (s > best_sim) {
                    best_sim = s;
                    best = k;
                }
            }
            res.assignment[static_cast<std::size_t>(i)] = best;
            obj += 1.0 - best_sim;
        }
        obj /= n;
        res.objective.push_back(obj);
        res.iterations = it + 1;

        std::vector<Embedding> sums(static_cast<std::size_t>(K), Embedding::Zero(U.front().size()));
        std::vector<int> counts(static_cast<std::size_t>(K), 0);
        for (int i = 0; i < n; ++i) {
            auto k = static_cast<std::size_t>(res.assignment[static_cast<std::size_t>(i)]);
            sums[k] += U[static_cast<std::size_t>(i)];
            ++counts[k];
        }
        for (int k = 0; k < K; ++k) {
            auto ku = static_cast<std::size_t>(k);
            if (counts[ku] == 0) {
                // Empty cluster: re-seed from the point farthest from its centroid.
                int far = 0;
                double far_d = -1;
                for (int i = 0; i < n; ++i) {
                    double dd = 1.0 - U[static_cast<std::size_t>(i)].dot(
                                          res.centroids[static_cast<std::size_t>(res.assignment[static_cast<std::size_t>(i)])]);
                    if (dd > far_d) {
                        far_d = dd;
                        far = i;
                    }
                }
                res.centroids[ku] = U[static_cast<std::size_t>(far)];
            } else if (sums[ku].norm() > 1e-12) {
                res.centroids[ku] = sums[ku] / sums[ku].norm();
            }
        }
        if (res.objective.size() >= 2) {
            double prev = res.objective[res.objective.size() - 2];
            if (std::abs(prev - obj) <= rel_tol * std::max(prev, 1e-300)) break;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Query set

struct QuerySet {
    std::vector<Instance> queries;  // cluster representatives; answers kept for the supervised loss
    std::vector<Instance> support;  // everything else, dataset order
    KMeansResult clustering;
};

inline QuerySet build_query_set(std::span<const Instance> dataset, int K, const EmbeddingProvider& provider,
                                std::uint64_t seed) {
    if (K < 1 || K > static_cast<int>(dataset.size())) throw SizeError("K must be in [1, |D|]");
    std::vector<Embedding> E;
    for (const auto& inst : dataset) E.push_back(embed_joint(inst, provider));
    QuerySet qs;
    qs.clustering = spherical_kmeans(E, K, seed);
    std::vector<bool> picked(dataset.size(), false);
    for (int k = 0; k < K; ++k) {
        int best = -1;
        double best_sim = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < dataset.size(); ++i) {
            if (qs.clustering.assignment[i] != k) continue;
            double s = E[i].dot(qs.clustering.centroids[static_cast<std::size_t>(k)]) / E[i].norm();
            if (s > best_sim || (s == best_sim && dataset[i].id < dataset[static_cast<std::size_t>(best)].id)) {
                best_sim = s;
                best = static_cast<int>(i);
            }
        }
        if (best < 0) continue;  // cluster emptied on the final re-seed
        picked[static_cast<std::size_t>(best)] = true;
        qs.queries.push_back(dataset[static_cast<std::size_t>(best)]);
    }
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (!picked[i]) qs.support.push_back(dataset[i]);
    return qs;
}

// ---------------------------------------------------------------------------
// Retrieval

enum class Strategy { RS, I2I, IQ2IQ, Oracle };

inline std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::RS: return "RS";
        case Strategy::I2I: return "I2I";
        case Strategy::IQ2IQ: return "IQ2IQ";
        case Strategy::Oracle: return "Oracle";
    }
    return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
    if (s == "RS") return Strategy::RS;
    if (s == "I2I") return Strategy::I2I;
    if (s == "IQ2IQ") return Strategy::IQ2IQ;
    if (s == "Oracle") return Strategy::Oracle;
    throw ConfigError("unknown retrieval strategy '" + s + "'");
}

/// Support instances other than the query itself.
inline std::vector<const Instance*> candidates_for(const Instance& query, std::span<const Instance> support) {
    std::vector<const Instance*> out;
    for (const auto& s : support)
        if (s.id != query.id) out.push_back(&s);
    return out;
}

inline std::vector<Instance> retrieve(Strategy strategy, const Instance& query, std::span<const Instance> support, int n,
                                      const EmbeddingProvider& provider, std::uint64_t seed) {
    if (strategy == Strategy::Oracle) throw ConfigError("oracle retrieval needs a model; use retrieve_oracle");
    auto cand = candidates_for(query, support);
    if (n < 0 || n > static_cast<int>(cand.size()))
        throw SizeError("cannot retrieve " + std::to_string(n) + " demonstrations from " + std::to_string(cand.size()));
    std::vector<Instance> out;
    if (n == 0) return out;
    if (strategy == Strategy::RS) {
        std::mt19937_64 gen(derive_seed(seed, query.id));
        std::vector<std::size_t> idx(cand.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (int k = 0; k < n; ++k) {
            std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), idx.size() - 1);
            std::swap(idx[static_cast<std::size_t>(k)], idx[pick(gen)]);
            out.push_back(*cand[idx[static_cast<std::size_t>(k)]]);
        }
        return out;
    }
    auto emb = [&](const Instance& i) {
        return strategy == Strategy::I2I ? embed_image_unit(i, provider) : embed_joint(i, provider);
    };
    Embedding q = emb(query);
    std::vector<std::pair<double, const Instance*>> scored;
    for (auto* c : cand) scored.emplace_back(cosine(q, emb(*c)), c);
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second->id < b.second->id;
    });
    for (int k = 0; k < n; ++k) out.push_back(*scored[static_cast<std::size_t>(k)].second);
    return out;
}

/// Sum over answer tokens of log P(A_t | demos, query, A_<t).
template <typename Real>
double answer_log_likelihood(const MicroModel<Real>& model, std::span<const Instance> demos, const Instance& query,
                             TokenId separator) {
    auto p = teacher_forced_prompt(demos, query, separator);
    Matrix<Real> logits = forward(model, p.seq);
    double s = 0;
    for (std::size_t t = 0; t < p.targets.size(); ++t) {
        auto row = logits.row(p.predict_positions[t]).template cast<double>();
        double mx = row.maxCoeff();
        s += row(p.targets[t]) - mx - std::log((row.array() - mx).exp().sum());
    }
    return s;
}

/// Greedy likelihood-maximizing retrieval over a seeded candidate pool; each
/// step appends the candidate that raises the answer log-likelihood most.
template <typename Real>
std::vector<Instance> retrieve_oracle(const MicroModel<Real>& model, const Instance& query,
                                      std::span<const Instance> support, int n, TokenId separator, int pool_size = 32,
                                      std::uint64_t seed = 0) {
    auto cand = candidates_for(query, support);
    if (cand.empty() || pool_size < 1) throw SizeError("oracle candidate pool is empty");
    std::vector<const Instance*> pool;
    if (static_cast<int>(cand.size()) <= pool_size) {
        pool = cand;
    } else {
        std::mt19937_64 gen(derive_seed(seed, query.id ^ 0x0AC1E));
        std::vector<std::size_t> idx(cand.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (int k = 0; k < pool_size; ++k) {
            std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), idx.size() - 1);
            std::swap(idx[static_cast<std::size_t>(k)], idx[pick(gen)]);
            pool.push_back(cand[idx[static_cast<std::size_t>(k)]]);
        }
    }
    if (n < 0 || n > static_cast<int>(pool.size())) throw SizeError("oracle pool smaller than n");
    std::vector<Instance> ctx;
    std::vector<bool> used(pool.size(), false);
    for (int step = 0; step < n; ++step) {
        int best = -1;
        double best_s = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < pool.size(); ++j) {
            if (used[j]) continue;
            ctx.push_back(*pool[j]);
            double s = answer_log_likelihood(model, ctx, query, separator);
            ctx.pop_back();
            if (best < 0 || s > best_s || (s == best_s && pool[j]->id < pool[static_cast<std::size_t>(best)]->id)) {
                best = static_cast<int>(j);
                best_s = s;
            }
        }
        used[static_cast<std::size_t>(best)] = true;
        ctx.push_back(*pool[static_cast<std::size_t>(best)]);
    }
    return ctx;
}

// ---------------------------------------------------------------------------
// Context set

struct ContextSample {
    std::uint64_t query_id = 0;
    std::vector<Instance> demonstrations;
    bool shuffled = false;
};

/// A seeded permutation of [0, n) that is never the identity when n >= 2.
inline std::vector<int> non_identity_permutation(int n, std::uint64_t seed) {
    std::vector<int> perm(static_cast<std::size_t>(std::max(n, 0)));
    std::iota(perm.begin(), perm.end(), 0);
    if (n < 2) return perm;
    std::mt19937_64 gen(seed);
    std::shuffle(perm.begin(), perm.end(), gen);
    if (std::is_sorted(perm.begin(), perm.end())) std::rotate(perm.begin(), perm.begin() + 1, perm.end());
    return perm;
}

struct ContextSetOptions {
    Strategy strategy = Strategy::RS;
    int shots = 16;
    std::uint64_t seed = 0;
    int oracle_pool = 32;
};

/// Two samples per query: the retrieved context, then a shuffled copy.
template <typename Real = float>
std::vector<ContextSample> build_context_set(std::span<const Instance> queries, std::span<const Instance> support,
                                             const ContextSetOptions& opt, const EmbeddingProvider& provider,
                                             const MicroModel<Real>* model = nullptr, TokenId separator = 0) {
    if (opt.shots >= 1 && support.empty()) throw SizeError("empty support set");
    std::vector<ContextSample> out;
    for (const auto& q : queries) {
        std::vector<Instance> demos;
        if (opt.strategy == Strategy::Oracle) {
            if (!model) throw ConfigError("oracle retrieval needs a model");
            demos = retrieve_oracle(*model, q, support, opt.shots, separator, opt.oracle_pool, opt.seed);
        } else {
            demos = retrieve(opt.strategy, q, support, opt.shots, provider, opt.seed);
        }
        auto perm = non_identity_permutation(static_cast<int>(demos.size()), derive_seed(opt.seed ^ 0x5F, q.id));
        ContextSample orig{q.id, demos, false};
        ContextSample shuf{q.id, {}, true};
        for (int i : perm) shuf.demonstrations.push_back(demos[static_cast<std::size_t>(i)]);
        out.push_back(std::move(orig));
        out.push_back(std::move(shuf));
    }
    return out;
}

inline bool has_query_leakage(std::span<const ContextSample> contexts) {
    for (const auto& c : contexts)
        for (const auto& d : c.demonstrations)
            if (d.id == c.query_id) return true;
    return false;
}

/// Context-set file: one line per sample {query_id, shuffled, demonstrations: [ids]}.
inline void write_context_set(const std::string& path, std::span<const ContextSample> contexts) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    for (const auto& c : contexts) {
        std::vector<std::uint64_t> ids;
        for (const auto& d : c.demonstrations) ids.push_back(d.id);
        out << nlohmann::json{{"query_id", c.query_id}, {"shuffled", c.shuffled}, {"demonstrations", ids}}.dump() << '\n';
    }
}

/// Reads a context-set file, resolving demonstration ids against `pool`.
inline std::vector<ContextSample> read_context_set(const std::string& path, std::span<const Instance> pool) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::unordered_map<std::uint64_t, const Instance*> by_id;
    for (const auto& inst : pool) by_id[inst.id] = &inst;
    std::vector<ContextSample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto j = nlohmann::json::parse(line);
        ContextSample c;
        c.query_id = j.at("query_id").get<std::uint64_t>();
        c.shuffled = j.value("shuffled", false);
        for (auto id : j.at("demonstrations").get<std::vector<std::uint64_t>>()) {
            auto it = by_id.find(id);
            if (it == by_id.end()) throw SizeError("context references unknown instance " + std::to_string(id));
            c.demonstrations.push_back(*it->second);
        }
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace m2iv
