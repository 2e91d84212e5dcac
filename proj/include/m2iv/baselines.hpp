#pragma once

// Training-free steering baselines extracted from hidden states: task
// vectors, function vectors, in-context vectors and I2CL branch means.

#include "m2iv/evaluate.hpp"
#include "m2iv/intervention.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <random>
#include <string>
#include <vector>

namespace m2iv {

enum class SteeringKind : std::uint8_t { TV = 0, FV = 1, ICV = 2, I2CL = 3 };

inline std::string to_string(SteeringKind k) {
    switch (k) {
        case SteeringKind::TV: return "TV";
        case SteeringKind::FV: return "FV";
        case SteeringKind::ICV: return "ICV";
        case SteeringKind::I2CL: return "I2CL";
    }
    return "?";
}

inline SteeringKind steering_kind_from_string(const std::string& s) {
    if (s == "TV") return SteeringKind::TV;
    if (s == "FV") return SteeringKind::FV;
    if (s == "ICV") return SteeringKind::ICV;
    if (s == "I2CL") return SteeringKind::I2CL;
    throw ConfigError("unknown steering kind '" + s + "'");
}

struct HeadRef {
    int layer = 0;
    int head = 0;
    friend bool operator==(const HeadRef&, const HeadRef&) = default;
};

/// Payload fields are used according to `kind`:
///   TV    layer, vector (overwrites the last query position)
///   FV    layer, vector (added at the last query position), heads
///   ICV   directions (one per layer, jointly unit norm), strength
///   I2CL  delta_a, delta_m, coef_a, coef_m (per layer)
struct SteeringArtifact {
    SteeringKind kind = SteeringKind::TV;
    Fingerprint fingerprint;
    int layer = 0;
    Eigen::VectorXd vector;
    std::vector<HeadRef> heads;
    std::vector<Eigen::VectorXd> directions;
    double strength = 1e-3;
    std::vector<Eigen::VectorXd> delta_a, delta_m;
    std::vector<double> coef_a, coef_m;

    void validate() const {
        const auto L = static_cast<int>(fingerprint.num_layers);
        const auto d = static_cast<Eigen::Index>(fingerprint.hidden_dim);
        switch (kind) {
            case SteeringKind::TV:
            case SteeringKind::FV:
                if (layer < 0 || layer >= L) throw ValidationError("steering layer outside model");
                if (vector.size() != d) throw ValidationError("steering vector length differs from hidden dim");
                if (kind == SteeringKind::FV && heads.empty()) throw ValidationError("function vector selects no heads");
                break;
            case SteeringKind::ICV: {
                if (static_cast<int>(directions.size()) != L) throw ValidationError("ICV needs one direction per layer");
                double sq = 0;
                for (const auto& v : directions) {
                    if (v.size() != d) throw ValidationError("ICV direction length differs from hidden dim");
                    sq += v.squaredNorm();
                }
                if (std::abs(sq - 1.0) > 1e-6) throw ValidationError("ICV direction is not unit norm");
                break;
            }
            case SteeringKind::I2CL:
                if (static_cast<int>(delta_a.size()) != L || static_cast<int>(delta_m.size()) != L ||
                    static_cast<int>(coef_a.size()) != L || static_cast<int>(coef_m.size()) != L)
                    throw ValidationError("I2CL payload needs one entry per layer");
                for (int l = 0; l < L; ++l)
                    if (delta_a[static_cast<std::size_t>(l)].size() != d || delta_m[static_cast<std::size_t>(l)].size() != d)
                        throw ValidationError("I2CL delta length differs from hidden dim");
                break;
        }
    }

    friend bool operator==(const SteeringArtifact& a, const SteeringArtifact& b) {
        auto same = [](const Eigen::VectorXd& x, const Eigen::VectorXd& y) { return x.size() == y.size() && x == y; };
        auto same_all = [&](const std::vector<Eigen::VectorXd>& x, const std::vector<Eigen::VectorXd>& y) {
            return x.size() == y.size() && std::equal(x.begin(), x.end(), y.begin(), same);
        };
        return a.kind == b.kind && a.fingerprint == b.fingerprint && a.layer == b.layer && same(a.vector, b.vector) &&
               a.heads == b.heads && same_all(a.directions, b.directions) && a.strength == b.strength &&
               same_all(a.delta_a, b.delta_a) && same_all(a.delta_m, b.delta_m) && a.coef_a == b.coef_a &&
               a.coef_m == b.coef_m;
    }
};

/// Converts an artifact into hooks. `scale` multiplies the payload; 0 gives
/// an empty steering (zero-shot behaviour) for every kind.
template <typename Real>
Steering<Real> to_steering(const SteeringArtifact& art, const MicroModel<Real>& model, double scale = 1.0) {
    if (!(art.fingerprint == fingerprint_of(model))) throw CompatibilityError("artifact fingerprint does not match the model");
    art.validate();
    Steering<Real> s;
    if (scale == 0.0) return s;
    const int L = model.config().num_layers;
    switch (art.kind) {
        case SteeringKind::TV:
            s.edits.push_back({art.layer, (scale * art.vector).cast<Real>(), EditMode::Overwrite});
            break;
        case SteeringKind::FV:
            s.edits.push_back({art.layer, (scale * art.vector).cast<Real>(), EditMode::Add});
            break;
        case SteeringKind::ICV: {
            BranchInjection<Real> inj(L);
            const double a = scale * art.strength;
            if (a != 0.0)
                for (int l = 0; l < L; ++l)
                    inj.mlp[static_cast<std::size_t>(l)] = (a * art.directions[static_cast<std::size_t>(l)]).cast<Real>();
            s.injection = std::move(inj);
            break;
        }
        case SteeringKind::I2CL: {
            BranchInjection<Real> inj(L);
            for (std::size_t l = 0; l < static_cast<std::size_t>(L); ++l) {
                const double ca = scale * art.coef_a[l], cm = scale * art.coef_m[l];
                if (ca != 0.0) inj.attn[l] = (ca * art.delta_a[l]).cast<Real>();
                if (cm != 0.0) inj.mlp[l] = (cm * art.delta_m[l]).cast<Real>();
            }
            s.injection = std::move(inj);
            break;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Task vector

/// Mean of h_{layer+1} at the last token of each context run.
template <typename Real>
SteeringArtifact extract_tv(const MicroModel<Real>& model, std::span<const TokenSequence> contexts, int layer) {
    const int L = model.config().num_layers;
    if (layer < 0 || layer >= L) throw ValidationError("task vector layer " + std::to_string(layer) + " outside model");
    if (contexts.empty()) throw SizeError("task vector needs at least one context");
    SteeringArtifact art;
    art.kind = SteeringKind::TV;
    art.fingerprint = fingerprint_of(model);
    art.layer = layer;
    art.vector = Eigen::VectorXd::Zero(model.config().hidden_dim);
    for (const auto& ctx : contexts) {
        auto [logits, trace] = forward_traced(model, ctx);
        const auto& h = trace.h[static_cast<std::size_t>(layer + 1)];
        art.vector += h.row(h.rows() - 1).transpose().template cast<double>();
    }
    art.vector /= static_cast<double>(contexts.size());
    return art;
}

// ---------------------------------------------------------------------------
// Function vector

struct HeadEffect {
    HeadRef head;
    double effect = 0;  // mean gain in answer probability over the corrupted runs
};

struct FVResult {
    SteeringArtifact artifact;
    std::vector<HeadEffect> ranking;             // strongest first
    std::vector<Eigen::VectorXd> head_means;     // L*H entries, head_dim each (before Wo)
    std::vector<Eigen::VectorXd> head_outputs;   // L*H entries, d each (after Wo)
};

namespace detail {

/// Prompt truncated so its last position predicts the first answer token.
inline TokenSequence first_prediction_run(const Prompt& p) {
    if (p.predict_positions.empty()) throw ValidationError("prompt has no prediction position");
    TokenSequence s;
    const auto n = static_cast<std::size_t>(p.predict_positions.front() + 1);
    s.ids.assign(p.seq.ids.begin(), p.seq.ids.begin() + static_cast<std::ptrdiff_t>(n));
    s.roles.assign(p.seq.roles.begin(), p.seq.roles.begin() + static_cast<std::ptrdiff_t>(n));
    return s;
}

template <typename Real>
double target_probability(const Matrix<Real>& logits, TokenId target) {
    Eigen::VectorXd row = logits.row(logits.rows() - 1).transpose().template cast<double>();
    double mx = row.maxCoeff();
    return std::exp(row(target) - mx) / (row.array() - mx).exp().sum();
}

}  // namespace detail

/// Mean probability of the first answer token over `runs` with the listed
/// heads replaced by their means at the last position.
template <typename Real>
double patched_answer_probability(const MicroModel<Real>& model, std::span<const Prompt> runs,
                                  std::span<const HeadRef> heads, const std::vector<Eigen::VectorXd>& head_means) {
    const int H = model.config().num_heads;
    double total = 0;
    for (const auto& p : runs) {
        TokenSequence s = detail::first_prediction_run(p);
        Hooks<Real> hooks;
        for (const auto& hr : heads)
            hooks.head_patches.push_back({hr.layer, hr.head, static_cast<int>(s.size()) - 1,
                                          head_means[static_cast<std::size_t>(hr.layer * H + hr.head)].cast<Real>()});
        total += detail::target_probability(forward(model, s, hooks), p.targets.front());
    }
    return runs.empty() ? 0.0 : total / static_cast<double>(runs.size());
}

/// Head means over `clean` runs, ranked by how much patching each one alone
/// raises the answer probability on `corrupted` (shuffled-label) runs. The
/// top `head_budget` heads' projected outputs are summed into the vector,
/// which is applied at `layer`.
template <typename Real>
FVResult extract_fv(const MicroModel<Real>& model, std::span<const Prompt> clean, std::span<const Prompt> corrupted,
                    int head_budget, int layer) {
    const auto& c = model.config();
    const int L = c.num_layers, H = c.num_heads, dh = c.head_dim();
    if (head_budget == 0) throw ValidationError("function vector with a head budget of 0 would be empty");
    if (head_budget < 0 || head_budget > L * H) throw ConfigError("head budget outside [1, L*H]");
    if (layer < 0 || layer >= L) throw ValidationError("function vector layer outside model");
    if (clean.size() < 2) throw SizeError("function vector needs at least two contexts");
    if (corrupted.empty()) throw SizeError("function vector needs corrupted runs to rank heads");

    FVResult res;
    res.head_means.assign(static_cast<std::size_t>(L * H), Eigen::VectorXd::Zero(dh));
    for (const auto& p : clean) {
        TokenSequence s = detail::first_prediction_run(p);
        ForwardCache<Real> cache;
        forward_cached(model, s, Hooks<Real>{}, cache);
        for (int l = 0; l < L; ++l) {
            const auto& o = cache.layers[static_cast<std::size_t>(l)].o;
            for (int h = 0; h < H; ++h)
                res.head_means[static_cast<std::size_t>(l * H + h)] +=
                    o.row(o.rows() - 1).segment(h * dh, dh).transpose().template cast<double>();
        }
    }
    for (auto& m : res.head_means) m /= static_cast<double>(clean.size());
    for (int l = 0; l < L; ++l) {
        Eigen::MatrixXd wo = model.params().layers[static_cast<std::size_t>(l)].wo.template cast<double>();
        for (int h = 0; h < H; ++h)
            res.head_outputs.push_back(wo.middleRows(h * dh, dh).transpose() * res.head_means[static_cast<std::size_t>(l * H + h)]);
    }

    const double base = patched_answer_probability<Real>(model, corrupted, {}, res.head_means);
    for (int l = 0; l < L; ++l)
        for (int h = 0; h < H; ++h) {
            HeadRef hr{l, h};
            double p = patched_answer_probability<Real>(model, corrupted, std::span<const HeadRef>(&hr, 1), res.head_means);
            res.ranking.push_back({hr, p - base});
        }
    std::stable_sort(res.ranking.begin(), res.ranking.end(),
                     [](const HeadEffect& a, const HeadEffect& b) { return a.effect > b.effect; });

    auto& art = res.artifact;
    art.kind = SteeringKind::FV;
    art.fingerprint = fingerprint_of(model);
    art.layer = layer;
    art.vector = Eigen::VectorXd::Zero(c.hidden_dim);
    for (int k = 0; k < head_budget; ++k) {
        const auto& hr = res.ranking[static_cast<std::size_t>(k)].head;
        art.heads.push_back(hr);
        art.vector += res.head_outputs[static_cast<std::size_t>(hr.layer * H + hr.head)];
    }
    return res;
}

/// Copies of `prompts` whose demonstration answers are permuted among the
/// demonstrations (the query answer is kept).
inline std::vector<Prompt> shuffled_label_prompts(std::span<const std::vector<Instance>> demo_sets,
                                                  std::span<const Instance> queries, TokenId separator, std::uint64_t seed) {
    if (demo_sets.size() != queries.size()) throw SizeError("one demonstration set per query expected");
    std::vector<Prompt> out;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        auto demos = demo_sets[i];
        std::vector<std::vector<std::vector<TokenId>>> answers;
        for (const auto& d : demos) answers.push_back(d.answers);
        std::mt19937_64 gen(derive_seed(seed, queries[i].id));
        std::shuffle(answers.begin(), answers.end(), gen);
        for (std::size_t k = 0; k < demos.size(); ++k) demos[k].answers = answers[k];
        out.push_back(teacher_forced_prompt(demos, queries[i], separator));
    }
    return out;
}

// ---------------------------------------------------------------------------
// In-context vector

/// First principal direction of the rows of D without centering (top
/// eigenvector of D^T D), oriented so the mean projection is positive; when
/// that mean is zero the first non-zero coordinate is made positive.
inline Eigen::VectorXd icv_principal_component(const Eigen::MatrixXd& D) {
    if (D.rows() == 0 || D.cols() == 0) throw SizeError("no difference vectors");
    const double scale = D.cwiseAbs().maxCoeff();
    if (!(scale > 0)) throw NormalizationError("difference vectors have rank 0; no principal component");
    // Eigen-decompose the smaller Gram matrix and map back.
    Eigen::MatrixXd G = D * D.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    Eigen::VectorXd u = es.eigenvectors().col(es.eigenvalues().size() - 1);
    Eigen::VectorXd pc = D.transpose() * u;
    double n = pc.norm();
    if (!(n > 0)) throw NormalizationError("degenerate principal component");
    pc /= n;
    double mean_proj = (D * pc).mean();
    if (std::abs(mean_proj) <= 1e-12 * scale) {
        for (Eigen::Index i = 0; i < pc.size(); ++i)
            if (std::abs(pc(i)) > 1e-12) {
                if (pc(i) < 0) pc = -pc;
                break;
            }
    } else if (mean_proj < 0) {
        pc = -pc;
    }
    return pc;
}

/// Concatenated last-token states h_1..h_L of a run.
template <typename Real>
Eigen::VectorXd last_token_states(const MicroModel<Real>& model, const TokenSequence& seq) {
    const int L = model.config().num_layers, d = model.config().hidden_dim;
    auto [logits, trace] = forward_traced(model, seq);
    Eigen::VectorXd out(L * d);
    for (int l = 0; l < L; ++l) {
        const auto& h = trace.h[static_cast<std::size_t>(l + 1)];
        out.segment(l * d, d) = h.row(h.rows() - 1).transpose().template cast<double>();
    }
    return out;
}

/// Differences h(y) - h(x) between the answer run and the input run of each
/// demonstration, reduced to their first principal direction.
template <typename Real>
SteeringArtifact extract_icv(const MicroModel<Real>& model, std::span<const Instance> demonstrations,
                             double strength = 1e-3) {
    if (demonstrations.size() < 2) throw SizeError("in-context vector needs at least two demonstrations");
    const int L = model.config().num_layers, d = model.config().hidden_dim;
    Eigen::MatrixXd D(static_cast<Eigen::Index>(demonstrations.size()), L * d);
    for (std::size_t i = 0; i < demonstrations.size(); ++i) {
        TokenSequence x = render_query(demonstrations[i]);
        TokenSequence y;
        y.append(demonstrations[i].answer(), Role::Answer);
        D.row(static_cast<Eigen::Index>(i)) = (last_token_states(model, y) - last_token_states(model, x)).transpose();
    }
    Eigen::VectorXd pc = icv_principal_component(D);
    SteeringArtifact art;
    art.kind = SteeringKind::ICV;
    art.fingerprint = fingerprint_of(model);
    art.strength = strength;
    for (int l = 0; l < L; ++l) art.directions.push_back(pc.segment(l * d, d));
    return art;
}

// ---------------------------------------------------------------------------
// I2CL

/// Element-wise means of the MHA and MLP branch outputs at the last token of
/// each demonstration (image, question, answer).
template <typename Real>
SteeringArtifact extract_i2cl(const MicroModel<Real>& model, std::span<const Instance> demonstrations,
                              double coefficient = 0.1) {
    if (demonstrations.empty()) throw SizeError("I2CL needs at least one demonstration");
    const int L = model.config().num_layers, d = model.config().hidden_dim;
    SteeringArtifact art;
    art.kind = SteeringKind::I2CL;
    art.fingerprint = fingerprint_of(model);
    art.delta_a.assign(static_cast<std::size_t>(L), Eigen::VectorXd::Zero(d));
    art.delta_m.assign(static_cast<std::size_t>(L), Eigen::VectorXd::Zero(d));
    for (const auto& demo : demonstrations) {
        TokenSequence s = render_query(demo);
        s.append(demo.answer(), Role::Answer);
        auto [logits, trace] = forward_traced(model, s);
        for (std::size_t l = 0; l < static_cast<std::size_t>(L); ++l) {
            art.delta_a[l] += trace.a[l].row(trace.a[l].rows() - 1).transpose().template cast<double>();
            art.delta_m[l] += trace.m[l].row(trace.m[l].rows() - 1).transpose().template cast<double>();
        }
    }
    const double n = static_cast<double>(demonstrations.size());
    for (std::size_t l = 0; l < static_cast<std::size_t>(L); ++l) {
        art.delta_a[l] /= n;
        art.delta_m[l] /= n;
    }
    art.coef_a.assign(static_cast<std::size_t>(L), coefficient);
    art.coef_m.assign(static_cast<std::size_t>(L), coefficient);
    return art;
}

struct CalibrationResult {
    double coefficient = 0;
    std::vector<std::pair<double, double>> scores;  // (coefficient, accuracy)
};

/// Grid search of a shared coefficient on a held-out split; at most
/// `max_instances` held-out queries are drawn with `seed`. Ties keep the
/// earlier grid value.
template <typename Real>
CalibrationResult calibrate_i2cl(const MicroModel<Real>& model, SteeringArtifact& art, std::span<const Instance> heldout,
                                 std::span<const TokenId> allowed, TokenId separator, std::uint64_t seed,
                                 std::vector<double> grid = {0.01, 0.05, 0.1, 0.5}, std::size_t max_instances = 64) {
    if (art.kind != SteeringKind::I2CL) throw ValidationError("calibration applies to I2CL artifacts");
    if (grid.empty()) throw ConfigError("empty calibration grid");
    if (heldout.empty()) throw SizeError("calibration needs held-out instances");
    std::vector<Instance> pool(heldout.begin(), heldout.end());
    std::mt19937_64 gen(derive_seed(seed, 0x12C1));
    std::shuffle(pool.begin(), pool.end(), gen);
    if (pool.size() > max_instances) pool.resize(max_instances);

    CalibrationResult res;
    double best = -1;
    for (double c : grid) {
        std::fill(art.coef_a.begin(), art.coef_a.end(), c);
        std::fill(art.coef_m.begin(), art.coef_m.end(), c);
        auto s = to_steering(art, model);
        double acc = evaluate(model, std::span<const Instance>(pool), DemoSource{}, s, allowed, separator).accuracy;
        res.scores.emplace_back(c, acc);
        if (acc > best) {
            best = acc;
            res.coefficient = c;
        }
    }
    std::fill(art.coef_a.begin(), art.coef_a.end(), res.coefficient);
    std::fill(art.coef_m.begin(), art.coef_m.end(), res.coefficient);
    return res;
}

// ---------------------------------------------------------------------------
// Serialization: magic, version, kind, fingerprint, kind-specific payload in
// f64, checksum.

inline constexpr char kSteeringMagic[8] = {'M', '2', 'I', 'V', 'S', 'T', 'R', 'A'};
inline constexpr std::uint32_t kSteeringVersion = 1;

namespace detail {

inline void put_vec(ByteWriter& w, const Eigen::VectorXd& v) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) w.put<double>(v(i));
}

inline Eigen::VectorXd get_vec(ByteReader& r) {
    auto n = r.get<std::uint32_t>();
    if (n > (1u << 24)) throw CorruptionError("implausible vector length");
    Eigen::VectorXd v(n);
    for (std::uint32_t i = 0; i < n; ++i) v(i) = r.get<double>();
    return v;
}

inline void put_vecs(ByteWriter& w, const std::vector<Eigen::VectorXd>& vs) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(vs.size()));
    for (const auto& v : vs) put_vec(w, v);
}

inline std::vector<Eigen::VectorXd> get_vecs(ByteReader& r) {
    auto n = r.get<std::uint32_t>();
    if (n > (1u << 16)) throw CorruptionError("implausible layer count");
    std::vector<Eigen::VectorXd> out;
    for (std::uint32_t i = 0; i < n; ++i) out.push_back(get_vec(r));
    return out;
}

inline void put_doubles(ByteWriter& w, const std::vector<double>& xs) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(xs.size()));
    for (double x : xs) w.put<double>(x);
}

inline std::vector<double> get_doubles(ByteReader& r) {
    auto n = r.get<std::uint32_t>();
    if (n > (1u << 16)) throw CorruptionError("implausible layer count");
    std::vector<double> out(n);
    for (auto& x : out) x = r.get<double>();
    return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_artifact(const SteeringArtifact& a) {
    a.validate();
    ByteWriter w;
    w.put_bytes({reinterpret_cast<const std::uint8_t*>(kSteeringMagic), 8});
    w.put<std::uint32_t>(kSteeringVersion);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(a.kind));
    w.put<std::uint32_t>(a.fingerprint.num_layers);
    w.put<std::uint32_t>(a.fingerprint.hidden_dim);
    w.put_bytes(a.fingerprint.weights_hash);
    switch (a.kind) {
        case SteeringKind::TV:
        case SteeringKind::FV:
            w.put<std::int32_t>(a.layer);
            detail::put_vec(w, a.vector);
            w.put<std::uint32_t>(static_cast<std::uint32_t>(a.heads.size()));
            for (const auto& h : a.heads) {
                w.put<std::int32_t>(h.layer);
                w.put<std::int32_t>(h.head);
            }
            break;
        case SteeringKind::ICV:
            w.put<double>(a.strength);
            detail::put_vecs(w, a.directions);
            break;
        case SteeringKind::I2CL:
            detail::put_vecs(w, a.delta_a);
            detail::put_vecs(w, a.delta_m);
            detail::put_doubles(w, a.coef_a);
            detail::put_doubles(w, a.coef_m);
            break;
    }
    w.seal();
    return w.take();
}

inline SteeringArtifact deserialize_artifact(std::span<const std::uint8_t> bytes) {
    auto r = ByteReader::sealed(bytes);
    auto magic = r.get_array<8>();
    if (!std::equal(magic.begin(), magic.end(), kSteeringMagic)) throw CorruptionError("not a steering artifact");
    if (r.get<std::uint32_t>() != kSteeringVersion) throw CorruptionError("unsupported steering artifact version");
    SteeringArtifact a;
    auto kind = r.get<std::uint8_t>();
    if (kind > 3) throw CorruptionError("unknown steering kind");
    a.kind = static_cast<SteeringKind>(kind);
    a.fingerprint.num_layers = r.get<std::uint32_t>();
    a.fingerprint.hidden_dim = r.get<std::uint32_t>();
    a.fingerprint.weights_hash = r.get_array<32>();
    switch (a.kind) {
        case SteeringKind::TV:
        case SteeringKind::FV: {
            a.layer = r.get<std::int32_t>();
            a.vector = detail::get_vec(r);
            auto n = r.get<std::uint32_t>();
            if (n > (1u << 16)) throw CorruptionError("implausible head count");
            for (std::uint32_t i = 0; i < n; ++i) {
                HeadRef h;
                h.layer = r.get<std::int32_t>();
                h.head = r.get<std::int32_t>();
                a.heads.push_back(h);
            }
            break;
        }
        case SteeringKind::ICV:
            a.strength = r.get<double>();
            a.directions = detail::get_vecs(r);
            break;
        case SteeringKind::I2CL:
            a.delta_a = detail::get_vecs(r);
            a.delta_m = detail::get_vecs(r);
            a.coef_a = detail::get_doubles(r);
            a.coef_m = detail::get_doubles(r);
            break;
    }
    if (!r.done()) throw CorruptionError("trailing bytes in steering artifact");
    try {
        a.validate();
    } catch (const ValidationError& e) {
        throw CorruptionError(std::string("invalid steering payload: ") + e.what());
    }
    return a;
}

inline void save_artifact(const SteeringArtifact& a, const std::string& path) { write_file(path, serialize_artifact(a)); }
inline SteeringArtifact load_artifact(const std::string& path) { return deserialize_artifact(read_file(path)); }

}  // namespace m2iv
