#pragma once

// Per-layer, per-branch steering vectors (alpha, v) added uniformly to the
// residual stream, plus many-shot MLP-state aggregation.

#include "m2iv/dataset.hpp"

#include <random>
#include <string>
#include <vector>

namespace m2iv {

struct Fingerprint {
    std::uint32_t num_layers = 0;
    std::uint32_t hidden_dim = 0;
    Digest weights_hash{};

    friend bool operator==(const Fingerprint&, const Fingerprint&) = default;
};

template <typename Real>
Fingerprint fingerprint_of(const MicroModel<Real>& model) {
    return {static_cast<std::uint32_t>(model.config().num_layers), static_cast<std::uint32_t>(model.config().hidden_dim),
            model.weights_hash()};
}

struct MIVMetadata {
    std::string task;
    int shots = 0;
    std::string strategy;
    std::string config_hash;

    friend bool operator==(const MIVMetadata&, const MIVMetadata&) = default;
};

/// The persistent artifact. Entries are stored in f32, which is also the
/// on-disk precision, so a save/load round trip is exact.
struct MIVBundle {
    Fingerprint fingerprint;
    std::vector<float> alpha_a, alpha_m;
    std::vector<Eigen::VectorXf> v_a, v_m;
    MIVMetadata meta;

    int num_layers() const { return static_cast<int>(alpha_a.size()); }
    int dim() const { return v_a.empty() ? 0 : static_cast<int>(v_a.front().size()); }

    void validate() const {
        const auto L = alpha_a.size();
        if (alpha_m.size() != L || v_a.size() != L || v_m.size() != L)
            throw ValidationError("bundle branches disagree on layer count");
        if (L != fingerprint.num_layers) throw ValidationError("bundle layer count differs from its fingerprint");
        for (std::size_t l = 0; l < L; ++l) {
            if (v_a[l].size() != static_cast<Eigen::Index>(fingerprint.hidden_dim) ||
                v_m[l].size() != static_cast<Eigen::Index>(fingerprint.hidden_dim))
                throw ValidationError("bundle vector length differs from hidden dim");
            if (!std::isfinite(alpha_a[l]) || !std::isfinite(alpha_m[l]) || !v_a[l].allFinite() || !v_m[l].allFinite())
                throw ValidationError("bundle contains non-finite entries");
        }
    }

    friend bool operator==(const MIVBundle& a, const MIVBundle& b) {
        if (!(a.fingerprint == b.fingerprint && a.alpha_a == b.alpha_a && a.alpha_m == b.alpha_m && a.meta == b.meta))
            return false;
        if (a.v_a.size() != b.v_a.size() || a.v_m.size() != b.v_m.size()) return false;
        for (std::size_t l = 0; l < a.v_a.size(); ++l)
            if (a.v_a[l] != b.v_a[l] || a.v_m[l] != b.v_m[l]) return false;
        return true;
    }
};

template <typename Real>
void check_compatible(const MIVBundle& bundle, const MicroModel<Real>& model) {
    if (!(bundle.fingerprint == fingerprint_of(model)))
        throw CompatibilityError("bundle fingerprint does not match the model");
}

/// Initial values: v ~ N(0, 0.01^2); alpha_a decays and alpha_m grows with depth.
inline MIVBundle init_bundle(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const int L = config.num_layers, d = config.hidden_dim;
    MIVBundle b;
    b.fingerprint.num_layers = static_cast<std::uint32_t>(L);
    b.fingerprint.hidden_dim = static_cast<std::uint32_t>(d);
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> dist(0.0, 0.01);
    for (int l = 1; l <= L; ++l) {
        b.alpha_a.push_back(static_cast<float>(0.1 * (1.0 - l / (L + 1e-6))));
        b.alpha_m.push_back(static_cast<float>(0.1 * l / static_cast<double>(L)));
        Eigen::VectorXf va(d), vm(d);
        for (int i = 0; i < d; ++i) va(i) = static_cast<float>(dist(gen));
        for (int i = 0; i < d; ++i) vm(i) = static_cast<float>(dist(gen));
        b.v_a.push_back(std::move(va));
        b.v_m.push_back(std::move(vm));
    }
    return b;
}

template <typename Real>
MIVBundle init_bundle(const MicroModel<Real>& model, std::uint64_t seed) {
    auto b = init_bundle(model.config(), seed);
    b.fingerprint = fingerprint_of(model);
    return b;
}

// ---------------------------------------------------------------------------
// Plans. Layers are 0-based here and everywhere else in the library.

struct InjectionPlan {
    std::vector<int> layers;
    bool mha = true;
    bool mlp = true;
    bool null_plan = false;

    static InjectionPlan all(int L) {
        InjectionPlan p;
        for (int l = 0; l < L; ++l) p.layers.push_back(l);
        return p;
    }
    static InjectionPlan none() {
        InjectionPlan p;
        p.null_plan = true;
        return p;
    }
    static InjectionPlan range(int begin, int end) {
        InjectionPlan p;
        for (int l = begin; l < end; ++l) p.layers.push_back(l);
        return p;
    }
    static InjectionPlan first(int k, int L) { return range(0, std::min(k, L)); }
    static InjectionPlan last(int k, int L) { return range(std::max(0, L - k), L); }
    static InjectionPlan middle(int k, int L) {
        int begin = std::max(0, (L - k) / 2);
        return range(begin, std::min(L, begin + k));
    }

    void validate(int L) const {
        if (null_plan) return;
        if (layers.empty()) throw ValidationError("empty injection plan");
        if (!mha && !mlp) throw ValidationError("injection plan selects no branch");
        for (int l : layers)
            if (l < 0 || l >= L) throw ValidationError("plan layer " + std::to_string(l) + " outside model");
    }
};

// ---------------------------------------------------------------------------
// Trainable view of a bundle in working precision.

template <typename Real>
struct Theta {
    Vector<Real> alpha_a, alpha_m;  // L
    Matrix<Real> v_a, v_m;          // L x d

    static Theta zeros(int L, int d) {
        return {Vector<Real>::Zero(L), Vector<Real>::Zero(L), Matrix<Real>::Zero(L, d), Matrix<Real>::Zero(L, d)};
    }
    static Theta from_bundle(const MIVBundle& b) {
        b.validate();
        auto t = zeros(b.num_layers(), b.dim());
        for (int l = 0; l < b.num_layers(); ++l) {
            const auto lu = static_cast<std::size_t>(l);
            t.alpha_a(l) = static_cast<Real>(b.alpha_a[lu]);
            t.alpha_m(l) = static_cast<Real>(b.alpha_m[lu]);
            t.v_a.row(l) = b.v_a[lu].cast<Real>().transpose();
            t.v_m.row(l) = b.v_m[lu].cast<Real>().transpose();
        }
        return t;
    }
    /// Writes values into `b`, keeping its fingerprint and metadata.
    void store(MIVBundle& b) const {
        const auto L = static_cast<std::size_t>(alpha_a.size());
        b.alpha_a.resize(L);
        b.alpha_m.resize(L);
        b.v_a.resize(L);
        b.v_m.resize(L);
        for (std::size_t l = 0; l < L; ++l) {
            const auto li = static_cast<Eigen::Index>(l);
            b.alpha_a[l] = static_cast<float>(alpha_a(li));
            b.alpha_m[l] = static_cast<float>(alpha_m(li));
            b.v_a[l] = v_a.row(li).transpose().template cast<float>();
            b.v_m[l] = v_m.row(li).transpose().template cast<float>();
        }
    }

    std::size_t size() const { return static_cast<std::size_t>(2 * alpha_a.size() + 2 * v_a.size()); }

    /// Visits (data, size) blocks in a fixed order: alpha_a, v_a, alpha_m, v_m.
    template <typename F>
    void visit(F&& f) {
        f(alpha_a.data(), alpha_a.size());
        f(v_a.data(), v_a.size());
        f(alpha_m.data(), alpha_m.size());
        f(v_m.data(), v_m.size());
    }
};

/// Per-layer injected vectors alpha * v for the layers and branches of `plan`.
/// Branches whose coefficient is exactly zero are left untouched.
template <typename Real>
BranchInjection<Real> make_injection(const Theta<Real>& theta, const InjectionPlan& plan) {
    const int L = static_cast<int>(theta.alpha_a.size());
    plan.validate(L);
    BranchInjection<Real> inj(L);
    if (plan.null_plan) return inj;
    for (int l : plan.layers) {
        const auto lu = static_cast<std::size_t>(l);
        if (plan.mha && theta.alpha_a(l) != Real(0))
            inj.attn[lu] = (theta.alpha_a(l) * theta.v_a.row(l)).transpose();
        if (plan.mlp && theta.alpha_m(l) != Real(0))
            inj.mlp[lu] = (theta.alpha_m(l) * theta.v_m.row(l)).transpose();
    }
    return inj;
}

template <typename Real>
BranchInjection<Real> make_injection(const MIVBundle& bundle, const MicroModel<Real>& model, const InjectionPlan& plan) {
    check_compatible(bundle, model);
    bundle.validate();
    return make_injection(Theta<Real>::from_bundle(bundle), plan);
}

template <typename Real>
std::pair<Matrix<Real>, ResidualTrace<Real>> forward_injected(const MicroModel<Real>& model, const TokenSequence& seq,
                                                              const MIVBundle& bundle, const InjectionPlan& plan) {
    auto inj = make_injection(bundle, model, plan);
    Hooks<Real> hooks;
    hooks.injection = &inj;
    return forward_traced(model, seq, hooks);
}

// ---------------------------------------------------------------------------
// MLP-state extraction and many-shot aggregation.

/// m[l] at the last position of [window; query], one d-vector per layer.
template <typename Real>
std::vector<Vector<Real>> extract_mlp_states(const MicroModel<Real>& model, const TokenSequence& window,
                                             const TokenSequence& query) {
    TokenSequence s = window;
    s.append(query);
    auto [logits, trace] = forward_traced(model, s);
    std::vector<Vector<Real>> out;
    for (const auto& m : trace.m) out.push_back(m.row(m.rows() - 1).transpose());
    return out;
}

struct ManyShotConfig {
    int window = 16;
    int overlap = 0;

    void validate() const {
        if (window < 1) throw ConfigError("window length must be positive");
        if (overlap < 0 || overlap >= window) throw ConfigError("overlap must satisfy 0 <= o < w");
    }
};

/// Half-open demonstration ranges [begin, end) covered by each window.
inline std::vector<std::pair<int, int>> many_shot_windows(int num_demos, const ManyShotConfig& cfg) {
    cfg.validate();
    if (num_demos < 1) throw SizeError("many-shot aggregation needs at least one demonstration");
    std::vector<std::pair<int, int>> out;
    for (int start = 0;; start += cfg.window - cfg.overlap) {
        int end = std::min(start + cfg.window, num_demos);
        out.emplace_back(start, end);
        if (end == num_demos) break;
    }
    return out;
}

template <typename Real>
struct ManyShotState {
    std::vector<Vector<Real>> mlp;  // per layer
    std::vector<std::pair<int, int>> windows;
};

/// Windowed MLP states merged by a token-count-weighted running mean.
template <typename Real>
ManyShotState<Real> aggregate_many_shot(const MicroModel<Real>& model, std::span<const Instance> demos,
                                        const TokenSequence& query, TokenId separator, const ManyShotConfig& cfg) {
    ManyShotState<Real> out;
    out.windows = many_shot_windows(static_cast<int>(demos.size()), cfg);
    double total = 0;
    for (auto [b, e] : out.windows) {
        auto window = render_context(demos.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(e - b)), separator);
        auto s = extract_mlp_states(model, window, query);
        const double c = static_cast<double>(window.size());
        if (out.mlp.empty()) {
            out.mlp = std::move(s);
        } else {
            for (std::size_t l = 0; l < s.size(); ++l)
                out.mlp[l] = ((static_cast<Real>(total) * out.mlp[l]) + static_cast<Real>(c) * s[l]) /
                             static_cast<Real>(total + c);
        }
        total += c;
    }
    return out;
}

}  // namespace m2iv
