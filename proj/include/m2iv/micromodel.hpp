#pragma once

// Desk-scale decoder-only transformer whose residual stream follows
//
//   a_l = MHA(h_{l-1})
//   m_l = MLP(h_{l-1} + a_l)
//   h_l = h_{l-1} + a_l + m_l
//
// with optional RMS normalization at each branch input and rotary positions
// inside attention. Every forward pass
// records the stream and both branch outputs, and accepts hooks for
// steering (uniform branch injection, stream edits, head patches, MLP
// overrides). Backward is written by hand and exposes the gradient at both
// branch outputs, which is what steering-vector training needs.

#include "m2iv/common.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <optional>
#include <type_traits>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace m2iv {

enum class Role : std::uint8_t { Image = 0, Question = 1, Answer = 2, Separator = 3 };

struct ModelConfig {
    int num_layers = 8;
    int hidden_dim = 64;
    int num_heads = 4;
    int vocab_size = 512;
    int visual_vocab_size = 64;  // ids [0, visual_vocab_size) are visual, the rest text
    int max_seq_len = 512;
    int mlp_hidden_dim = 256;
    bool norm_enabled = true;
    std::uint64_t seed = 0;

    int head_dim() const { return hidden_dim / num_heads; }

    void validate() const {
        if (num_layers <= 0 || hidden_dim <= 0 || num_heads <= 0 || vocab_size <= 0 || visual_vocab_size <= 0 ||
            max_seq_len <= 0 || mlp_hidden_dim <= 0)
            throw ConfigError("model dimensions must be positive");
        if (hidden_dim % num_heads != 0) throw ConfigError("hidden_dim must be divisible by num_heads");
        if (head_dim() % 2 != 0) throw ConfigError("head dimension must be even for rotary positions");
        if (visual_vocab_size >= vocab_size) throw ConfigError("visual ids must leave room for text ids");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<Role> roles;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }

    void push(TokenId id, Role role) {
        ids.push_back(id);
        roles.push_back(role);
    }
    void append(std::span<const TokenId> toks, Role role) {
        for (auto t : toks) push(t, role);
    }
    void append(const TokenSequence& other) {
        ids.insert(ids.end(), other.ids.begin(), other.ids.end());
        roles.insert(roles.end(), other.roles.begin(), other.roles.end());
    }

    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// ---------------------------------------------------------------------------
// Parameters

template <typename Real>
struct LayerParams {
    Vector<Real> attn_gain;
    Matrix<Real> wq, wk, wv, wo;  // d x d, row-vector convention: x * W
    Vector<Real> mlp_gain;
    Matrix<Real> w1;  // d x f
    Vector<Real> b1;
    Matrix<Real> w2;  // f x d
    Vector<Real> b2;
};

template <typename Real>
struct ModelParams {
    Matrix<Real> tok_emb;  // V x d
    std::vector<LayerParams<Real>> layers;
    Vector<Real> final_gain;
    Matrix<Real> unembed;  // d x V

    static ModelParams zeros(const ModelConfig& c) {
        const int d = c.hidden_dim, f = c.mlp_hidden_dim;
        ModelParams p;
        p.tok_emb = Matrix<Real>::Zero(c.vocab_size, d);
        p.layers.resize(static_cast<std::size_t>(c.num_layers));
        for (auto& l : p.layers) {
            l.attn_gain = Vector<Real>::Zero(d);
            l.wq = l.wk = l.wv = l.wo = Matrix<Real>::Zero(d, d);
            l.mlp_gain = Vector<Real>::Zero(d);
            l.w1 = Matrix<Real>::Zero(d, f);
            l.b1 = Vector<Real>::Zero(f);
            l.w2 = Matrix<Real>::Zero(f, d);
            l.b2 = Vector<Real>::Zero(d);
        }
        p.final_gain = Vector<Real>::Zero(d);
        p.unembed = Matrix<Real>::Zero(d, c.vocab_size);
        return p;
    }

    /// Visits every tensor in declared (checkpoint) order as (name, data, size).
    template <typename F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <typename F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t num_scalars() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Real*, Eigen::Index k) { n += static_cast<std::size_t>(k); });
        return n;
    }

   private:
    template <typename Self, typename F>
    static void visit_impl(Self& s, F& f) {
        f(std::string("tok_emb"), s.tok_emb.data(), s.tok_emb.size());
        for (std::size_t i = 0; i < s.layers.size(); ++i) {
            auto& l = s.layers[i];
            const std::string p = "layer" + std::to_string(i) + ".";
            f(p + "attn_gain", l.attn_gain.data(), l.attn_gain.size());
            f(p + "wq", l.wq.data(), l.wq.size());
            f(p + "wk", l.wk.data(), l.wk.size());
            f(p + "wv", l.wv.data(), l.wv.size());
            f(p + "wo", l.wo.data(), l.wo.size());
            f(p + "mlp_gain", l.mlp_gain.data(), l.mlp_gain.size());
            f(p + "w1", l.w1.data(), l.w1.size());
            f(p + "b1", l.b1.data(), l.b1.size());
            f(p + "w2", l.w2.data(), l.w2.size());
            f(p + "b2", l.b2.data(), l.b2.size());
        }
        f(std::string("final_gain"), s.final_gain.data(), s.final_gain.size());
        f(std::string("unembed"), s.unembed.data(), s.unembed.size());
    }
};

template <typename Real>
class MicroModel {
   public:
    MicroModel() = default;
    MicroModel(ModelConfig config, ModelParams<Real> params) : config_(config), params_(std::move(params)) {}

    /// Seeded initialization; identical (config, seed) gives identical weights.
    static MicroModel init(const ModelConfig& config) {
        config.validate();
        auto p = ModelParams<double>::zeros(config);
        std::mt19937_64 gen(config.seed);
        const double resid_scale = 1.0 / std::sqrt(2.0 * config.num_layers);
        auto fill = [&](auto& m, double sd) {
            std::normal_distribution<double> dist(0.0, sd);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(gen);
        };
        fill(p.tok_emb, 0.02);
        for (auto& l : p.layers) {
            l.attn_gain.setOnes();
            fill(l.wq, 0.02);
            fill(l.wk, 0.02);
            fill(l.wv, 0.02);
            fill(l.wo, 0.02 * resid_scale);
            l.mlp_gain.setOnes();
            fill(l.w1, 0.02);
            fill(l.w2, 0.02 * resid_scale);
        }
        p.final_gain.setOnes();
        fill(p.unembed, 0.02);
        return MicroModel<double>(config, std::move(p)).template cast<Real>();
    }

    const ModelConfig& config() const { return config_; }
    ModelParams<Real>& params() { return params_; }
    const ModelParams<Real>& params() const { return params_; }

    template <typename To>
    MicroModel<To> cast() const {
        auto out = ModelParams<To>::zeros(config_);
        std::vector<const Real*> src;
        params_.visit([&](const std::string&, const Real* d, Eigen::Index) { src.push_back(d); });
        std::size_t k = 0;
        out.visit([&](const std::string&, To* d, Eigen::Index n) {
            for (Eigen::Index i = 0; i < n; ++i) d[i] = static_cast<To>(src[k][i]);
            ++k;
        });
        return MicroModel<To>(config_, std::move(out));
    }

    bool all_finite() const {
        bool ok = true;
        params_.visit([&](const std::string&, const Real* d, Eigen::Index n) {
            for (Eigen::Index i = 0; i < n && ok; ++i) ok = std::isfinite(d[i]);
        });
        return ok;
    }

    /// SHA-256 over the weights rounded to f32 in declared order, so a model
    /// and its float/double cast share one hash.
    Digest weights_hash() const {
        Sha256 h;
        params_.visit([&](const std::string&, const Real* d, Eigen::Index n) {
            for (Eigen::Index i = 0; i < n; ++i) {
                float v = static_cast<float>(d[i]);
                h.update(&v, sizeof(v));
            }
        });
        return h.finish();
    }

   private:
    ModelConfig config_{};
    ModelParams<Real> params_{};
};

// ---------------------------------------------------------------------------
// Hooks

/// Per-layer vectors added to every position of a branch output
/// (nullopt: branch untouched at that layer).
template <typename Real>
struct BranchInjection {
    std::vector<std::optional<Vector<Real>>> attn, mlp;

    explicit BranchInjection(int num_layers = 0)
        : attn(static_cast<std::size_t>(num_layers)), mlp(static_cast<std::size_t>(num_layers)) {}
};

enum class EditMode { Overwrite, Add };

/// Edits the stream h_{layer+1}, i.e. the output of 0-based `layer`.
template <typename Real>
struct StreamEdit {
    int layer = 0;
    int position = 0;
    Vector<Real> value;
    EditMode mode = EditMode::Add;
};

/// Replaces one head's attention output (before the output projection).
template <typename Real>
struct HeadPatch {
    int layer = 0;
    int head = 0;
    int position = 0;
    Vector<Real> value;
};

/// Replaces the MLP branch output of a layer at one position.
template <typename Real>
struct MlpOverride {
    int layer = 0;
    int position = 0;
    Vector<Real> value;
};

template <typename Real>
struct Hooks {
    const BranchInjection<Real>* injection = nullptr;
    std::vector<StreamEdit<Real>> stream_edits;
    std::vector<HeadPatch<Real>> head_patches;
    std::vector<MlpOverride<Real>> mlp_overrides;

    bool differentiable() const { return stream_edits.empty() && head_patches.empty() && mlp_overrides.empty(); }
};

// ---------------------------------------------------------------------------
// Trace and cache. Layers are 0-based: h[0] is the embedding stream and
// h[l+1] = h[l] + a[l] + m[l] where a[l], m[l] are the values actually added
// (including any injected vector).

template <typename Real>
struct ResidualTrace {
    std::vector<Matrix<Real>> h;  // L+1 entries, I x d
    std::vector<Matrix<Real>> a;  // L entries
    std::vector<Matrix<Real>> m;  // L entries
};

template <typename Real>
struct LayerCache {
    Matrix<Real> xa;  // normalized attention input
    Vector<Real> rms_a;
    Matrix<Real> q, k, v;  // q and k after rotary encoding
    std::vector<Matrix<Real>> probs;  // per head, I x I
    Matrix<Real> o;                   // concatenated head outputs
    Matrix<Real> u;                   // MLP input before normalization: h + a
    Matrix<Real> xm;
    Vector<Real> rms_m;
    Matrix<Real> pre, act;
};

template <typename Real>
struct ForwardCache {
    ResidualTrace<Real> trace;
    std::vector<LayerCache<Real>> layers;
    Matrix<Real> xf;
    Vector<Real> rms_f;
    Matrix<Real> logits;
    bool differentiable = true;
};

/// Gradients of the loss at each layer's branch outputs (values added to
/// the stream), I x d per layer.
template <typename Real>
struct StreamGrads {
    std::vector<Matrix<Real>> attn, mlp;
};

namespace detail {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kRopeBase = 10000.0;

template <typename Real>
void rms_norm(const Matrix<Real>& x, const Vector<Real>& gain, Matrix<Real>& y, Vector<Real>& rms) {
    const auto d = x.cols();
    rms.resize(x.rows());
    y.resize(x.rows(), d);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Real ms = x.row(i).squaredNorm() / static_cast<Real>(d);
        rms(i) = std::sqrt(ms + static_cast<Real>(kNormEps));
        y.row(i) = (x.row(i).array() / rms(i)) * gain.transpose().array();
    }
}

template <typename Real>
Matrix<Real> rms_norm_backward(const Matrix<Real>& x, const Vector<Real>& rms, const Vector<Real>& gain,
                               const Matrix<Real>& dy, Vector<Real>* dgain) {
    const auto d = static_cast<Real>(x.cols());
    Matrix<Real> dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        auto gy = (dy.row(i).array() * gain.transpose().array()).matrix();
        Real r = rms(i);
        Real dot = gy.dot(x.row(i));
        dx.row(i) = gy / r - x.row(i) * (dot / (d * r * r * r));
        if (dgain) *dgain += (dy.row(i).array() * x.row(i).array() / r).matrix().transpose();
    }
    return dx;
}

template <typename Real>
Real gelu(Real x) {
    constexpr Real k = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
    return static_cast<Real>(0.5) * x * (Real(1) + std::tanh(k * (x + static_cast<Real>(0.044715) * x * x * x)));
}

template <typename Real>
Real gelu_grad(Real x) {
    constexpr Real k = static_cast<Real>(0.7978845608028654);
    constexpr Real c = static_cast<Real>(0.044715);
    Real t = std::tanh(k * (x + c * x * x * x));
    return static_cast<Real>(0.5) * (Real(1) + t) +
           static_cast<Real>(0.5) * x * (Real(1) - t * t) * k * (Real(1) + Real(3) * c * x * x);
}

/// Rotary position encoding applied in place to every head of q or k
/// (inverse rotation when `inverse`, which is also the backward map).
template <typename Real>
void rope(Matrix<Real>& x, int heads, int head_dim, bool inverse = false) {
    const int half = head_dim / 2;
    for (Eigen::Index pos = 0; pos < x.rows(); ++pos)
        for (int i = 0; i < half; ++i) {
            double theta = static_cast<double>(pos) * std::pow(kRopeBase, -2.0 * i / head_dim);
            Real cs = static_cast<Real>(std::cos(theta));
            Real sn = static_cast<Real>(inverse ? -std::sin(theta) : std::sin(theta));
            for (int h = 0; h < heads; ++h) {
                Real& a = x(pos, h * head_dim + 2 * i);
                Real& b = x(pos, h * head_dim + 2 * i + 1);
                Real ra = a * cs - b * sn;
                Real rb = a * sn + b * cs;
                a = ra;
                b = rb;
            }
        }
}

}  // namespace detail

inline void check_sequence(const ModelConfig& c, const TokenSequence& seq) {
    if (seq.empty()) throw LengthError("empty token sequence");
    if (seq.roles.size() != seq.ids.size()) throw ValidationError("roles and ids differ in length");
    if (static_cast<int>(seq.size()) > c.max_seq_len)
        throw LengthError("sequence of length " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                          std::to_string(c.max_seq_len));
    for (auto id : seq.ids)
        if (id < 0 || id >= c.vocab_size) throw VocabError("token id " + std::to_string(id) + " outside vocabulary");
}

/// Full instrumented forward pass. All public forward entry points route
/// through here so their logits agree bit for bit.
template <typename Real>
void forward_cached(const MicroModel<Real>& model, const TokenSequence& seq, const Hooks<Real>& hooks,
                    ForwardCache<Real>& cache) {
    const auto& c = model.config();
    const auto& p = model.params();
    check_sequence(c, seq);
    const int L = c.num_layers, d = c.hidden_dim, H = c.num_heads, dh = c.head_dim();
    const auto I = static_cast<Eigen::Index>(seq.size());
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));

    if (hooks.injection) {
        if (static_cast<int>(hooks.injection->attn.size()) != L || static_cast<int>(hooks.injection->mlp.size()) != L)
            throw CompatibilityError("injection layer count does not match model");
    }

    cache.differentiable = hooks.differentiable();
    auto& tr = cache.trace;
    tr.h.assign(static_cast<std::size_t>(L + 1), Matrix<Real>());
    tr.a.assign(static_cast<std::size_t>(L), Matrix<Real>());
    tr.m.assign(static_cast<std::size_t>(L), Matrix<Real>());
    cache.layers.resize(static_cast<std::size_t>(L));

    Matrix<Real>& h0 = tr.h[0];
    h0.resize(I, d);
    for (Eigen::Index i = 0; i < I; ++i) h0.row(i) = p.tok_emb.row(seq.ids[static_cast<std::size_t>(i)]);

    for (int l = 0; l < L; ++l) {
        const auto lu = static_cast<std::size_t>(l);
        const auto& w = p.layers[lu];
        auto& lc = cache.layers[lu];
        const Matrix<Real>& h = tr.h[lu];

        // MHA branch.
        if (c.norm_enabled)
            detail::rms_norm(h, w.attn_gain, lc.xa, lc.rms_a);
        else
            lc.xa = h;
        lc.q.noalias() = lc.xa * w.wq;
        lc.k.noalias() = lc.xa * w.wk;
        lc.v.noalias() = lc.xa * w.wv;
        detail::rope(lc.q, H, dh);
        detail::rope(lc.k, H, dh);
        lc.o.resize(I, d);
        lc.probs.resize(static_cast<std::size_t>(H));
        for (int hd = 0; hd < H; ++hd) {
            auto& P = lc.probs[static_cast<std::size_t>(hd)];
            P.noalias() = (lc.q.middleCols(hd * dh, dh) * lc.k.middleCols(hd * dh, dh).transpose()) * scale;
            for (Eigen::Index i = 0; i < I; ++i) {
                Real mx = P(i, 0);
                for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, P(i, j));
                Real sum = 0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    P(i, j) = std::exp(P(i, j) - mx);
                    sum += P(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) P(i, j) /= sum;
                for (Eigen::Index j = i + 1; j < I; ++j) P(i, j) = 0;
            }
            lc.o.middleCols(hd * dh, dh).noalias() = P * lc.v.middleCols(hd * dh, dh);
        }
        for (const auto& hp : hooks.head_patches) {
            if (hp.layer != l) continue;
            if (hp.position < 0 || hp.position >= I || hp.head < 0 || hp.head >= H || hp.value.size() != dh)
                throw ValidationError("head patch out of range");
            lc.o.row(hp.position).segment(hp.head * dh, dh) = hp.value.transpose();
        }
        Matrix<Real>& A = tr.a[lu];
        A.noalias() = lc.o * w.wo;

        // MLP branch sees the un-injected attention output of this layer.
        lc.u = h + A;
        if (c.norm_enabled)
            detail::rms_norm(lc.u, w.mlp_gain, lc.xm, lc.rms_m);
        else
            lc.xm = lc.u;
        lc.pre.noalias() = lc.xm * w.w1;
        lc.pre.rowwise() += w.b1.transpose();
        lc.act = lc.pre.unaryExpr([](Real x) { return detail::gelu(x); });
        Matrix<Real>& M = tr.m[lu];
        M.noalias() = lc.act * w.w2;
        M.rowwise() += w.b2.transpose();
        for (const auto& mo : hooks.mlp_overrides) {
            if (mo.layer != l) continue;
            if (mo.position < 0 || mo.position >= I || mo.value.size() != d)
                throw ValidationError("mlp override out of range");
            M.row(mo.position) = mo.value.transpose();
        }

        if (hooks.injection) {
            if (const auto& va = hooks.injection->attn[lu]) A.rowwise() += va->transpose();
            if (const auto& vm = hooks.injection->mlp[lu]) M.rowwise() += vm->transpose();
        }

        // Summation order (h, then a, then m) is part of the trace contract.
        Matrix<Real>& hn = tr.h[lu + 1];
        hn = h + A;
        hn += M;

        for (const auto& e : hooks.stream_edits) {
            if (e.layer != l) continue;
            if (e.position < 0 || e.position >= I || e.value.size() != d) throw ValidationError("stream edit out of range");
            if (e.mode == EditMode::Overwrite)
                hn.row(e.position) = e.value.transpose();
            else
                hn.row(e.position) += e.value.transpose();
        }
    }

    if (c.norm_enabled)
        detail::rms_norm(tr.h[static_cast<std::size_t>(L)], p.final_gain, cache.xf, cache.rms_f);
    else
        cache.xf = tr.h[static_cast<std::size_t>(L)];
    cache.logits.noalias() = cache.xf * p.unembed;
}

template <typename Real>
Matrix<Real> forward(const MicroModel<Real>& model, const TokenSequence& seq, const Hooks<Real>& hooks = {}) {
    ForwardCache<Real> cache;
    forward_cached(model, seq, hooks, cache);
    return std::move(cache.logits);
}

template <typename Real>
std::pair<Matrix<Real>, ResidualTrace<Real>> forward_traced(const MicroModel<Real>& model, const TokenSequence& seq,
                                                            const Hooks<Real>& hooks = {}) {
    ForwardCache<Real> cache;
    forward_cached(model, seq, hooks, cache);
    return {std::move(cache.logits), std::move(cache.trace)};
}

/// Backpropagates dlogits (I x V) through a cached forward. `extra` adds
/// gradients directly at branch outputs (for losses defined on them);
/// `grads`, when given, accumulates parameter gradients.
template <typename Real>
StreamGrads<Real> backward(const MicroModel<Real>& model, const TokenSequence& seq, const ForwardCache<Real>& cache,
                           const Matrix<Real>& dlogits, const std::type_identity_t<StreamGrads<Real>>* extra = nullptr,
                           std::type_identity_t<ModelParams<Real>>* grads = nullptr) {
    if (!cache.differentiable) throw ValidationError("backward through stream edits or patches is not supported");
    const auto& c = model.config();
    const auto& p = model.params();
    const int L = c.num_layers, H = c.num_heads, hdim = c.head_dim();
    const auto I = static_cast<Eigen::Index>(seq.size());
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hdim));
    const auto Lu = static_cast<std::size_t>(L);

    StreamGrads<Real> out;
    out.attn.resize(Lu);
    out.mlp.resize(Lu);

    if (grads) grads->unembed.noalias() += cache.xf.transpose() * dlogits;
    Matrix<Real> dxf = dlogits * p.unembed.transpose();
    Matrix<Real> dh;
    if (c.norm_enabled)
        dh = detail::rms_norm_backward(cache.trace.h[Lu], cache.rms_f, p.final_gain, dxf,
                                       grads ? &grads->final_gain : nullptr);
    else
        dh = std::move(dxf);

    for (int l = L - 1; l >= 0; --l) {
        const auto lu = static_cast<std::size_t>(l);
        const auto& w = p.layers[lu];
        const auto& lc = cache.layers[lu];
        LayerParams<Real>* gw = grads ? &grads->layers[lu] : nullptr;

        // h_{l+1} = (h_l + A) + M
        Matrix<Real> dM = dh;
        if (extra && !extra->mlp.empty() && extra->mlp[lu].size()) dM += extra->mlp[lu];
        Matrix<Real> dA = dh;
        if (extra && !extra->attn.empty() && extra->attn[lu].size()) dA += extra->attn[lu];

        // MLP
        if (gw) {
            gw->w2.noalias() += lc.act.transpose() * dM;
            gw->b2 += dM.colwise().sum().transpose();
        }
        Matrix<Real> dpre = dM * w.w2.transpose();
        dpre.array() *= lc.pre.unaryExpr([](Real x) { return detail::gelu_grad(x); }).array();
        if (gw) {
            gw->w1.noalias() += lc.xm.transpose() * dpre;
            gw->b1 += dpre.colwise().sum().transpose();
        }
        Matrix<Real> dxm = dpre * w.w1.transpose();
        Matrix<Real> du = c.norm_enabled ? detail::rms_norm_backward(lc.u, lc.rms_m, w.mlp_gain, dxm,
                                                                     gw ? &gw->mlp_gain : nullptr)
                                         : dxm;

        Matrix<Real> da = dA + du;
        Matrix<Real> dprev = dh + du;

        // MHA
        if (gw) gw->wo.noalias() += lc.o.transpose() * da;
        Matrix<Real> dO = da * w.wo.transpose();
        Matrix<Real> dQ(I, c.hidden_dim), dK(I, c.hidden_dim), dV(I, c.hidden_dim);
        for (int hd = 0; hd < H; ++hd) {
            const auto& P = lc.probs[static_cast<std::size_t>(hd)];
            auto dOh = dO.middleCols(hd * hdim, hdim);
            Matrix<Real> dP = dOh * lc.v.middleCols(hd * hdim, hdim).transpose();
            dV.middleCols(hd * hdim, hdim).noalias() = P.transpose() * dOh;
            Matrix<Real> dS = P.cwiseProduct(dP);
            Vector<Real> rs = dS.rowwise().sum();
            dS -= P.cwiseProduct(rs.replicate(1, I));
            dS *= scale;
            dQ.middleCols(hd * hdim, hdim).noalias() = dS * lc.k.middleCols(hd * hdim, hdim);
            dK.middleCols(hd * hdim, hdim).noalias() = dS.transpose() * lc.q.middleCols(hd * hdim, hdim);
        }
        detail::rope(dQ, H, hdim, true);
        detail::rope(dK, H, hdim, true);
        if (gw) {
            gw->wq.noalias() += lc.xa.transpose() * dQ;
            gw->wk.noalias() += lc.xa.transpose() * dK;
            gw->wv.noalias() += lc.xa.transpose() * dV;
        }
        Matrix<Real> dxa = dQ * w.wq.transpose();
        dxa.noalias() += dK * w.wk.transpose();
        dxa.noalias() += dV * w.wv.transpose();
        if (c.norm_enabled)
            dprev += detail::rms_norm_backward(cache.trace.h[lu], lc.rms_a, w.attn_gain, dxa,
                                               gw ? &gw->attn_gain : nullptr);
        else
            dprev += dxa;

        out.attn[lu] = std::move(dA);
        out.mlp[lu] = std::move(dM);
        dh = std::move(dprev);
    }

    if (grads) {
        for (Eigen::Index i = 0; i < I; ++i) {
            grads->tok_emb.row(seq.ids[static_cast<std::size_t>(i)]) += dh.row(i);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Decoding

/// Index of the largest entry; ties resolve to the lowest index. When
/// `allowed` is non-empty only those ids compete.
template <typename Real>
TokenId argmax_token(const Eigen::Ref<const Vector<Real>>& logits, std::span<const TokenId> allowed = {}) {
    TokenId best = -1;
    Real best_v = -std::numeric_limits<Real>::infinity();
    if (allowed.empty()) {
        for (Eigen::Index i = 0; i < logits.size(); ++i)
            if (best < 0 || logits(i) > best_v) {
                best = static_cast<TokenId>(i);
                best_v = logits(i);
            }
    } else {
        for (auto t : allowed)
            if (best < 0 || logits(t) > best_v || (logits(t) == best_v && t < best)) {
                best = t;
                best_v = logits(t);
            }
    }
    return best;
}

/// Greedy decoding. Appends argmax tokens (role Answer) until `stop_token`
/// is produced or `max_new_tokens` are appended; returns the extended sequence.
template <typename Real>
TokenSequence generate_answer(const MicroModel<Real>& model, TokenSequence seq, int max_new_tokens,
                              std::optional<TokenId> stop_token = std::nullopt, const Hooks<Real>& hooks = {},
                              std::span<const TokenId> allowed = {}) {
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
    check_sequence(model.config(), seq);
    for (int step = 0; step < max_new_tokens; ++step) {
        Matrix<Real> logits = forward(model, seq, hooks);
        Vector<Real> last = logits.row(logits.rows() - 1).transpose();
        TokenId t = argmax_token<Real>(last, allowed);
        seq.push(t, stop_token && t == *stop_token ? Role::Separator : Role::Answer);
        if (stop_token && t == *stop_token) break;
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, config, f32 tensors in declared order, checksum.

inline constexpr char kModelMagic[8] = {'M', '2', 'I', 'V', 'M', 'O', 'D', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

template <typename Real>
std::vector<std::uint8_t> serialize_model(const MicroModel<Real>& model) {
    ByteWriter w;
    for (char ch : kModelMagic) w.put<char>(ch);
    w.put<std::uint32_t>(kModelVersion);
    const auto& c = model.config();
    for (int v : {c.num_layers, c.hidden_dim, c.num_heads, c.vocab_size, c.visual_vocab_size, c.max_seq_len,
                  c.mlp_hidden_dim})
        w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    w.put<std::uint8_t>(c.norm_enabled ? 1 : 0);
    w.put<std::uint64_t>(c.seed);
    model.params().visit([&](const std::string&, const Real* d, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) w.put<float>(static_cast<float>(d[i]));
    });
    w.seal();
    return w.take();
}

template <typename Real>
MicroModel<Real> deserialize_model(std::span<const std::uint8_t> bytes) {
    auto r = ByteReader::sealed(bytes);
    for (char ch : kModelMagic)
        if (r.get<char>() != ch) throw CorruptionError("not a model checkpoint");
    if (r.get<std::uint32_t>() != kModelVersion) throw CorruptionError("unsupported checkpoint version");
    ModelConfig c;
    c.num_layers = static_cast<int>(r.get<std::uint32_t>());
    c.hidden_dim = static_cast<int>(r.get<std::uint32_t>());
    c.num_heads = static_cast<int>(r.get<std::uint32_t>());
    c.vocab_size = static_cast<int>(r.get<std::uint32_t>());
    c.visual_vocab_size = static_cast<int>(r.get<std::uint32_t>());
    c.max_seq_len = static_cast<int>(r.get<std::uint32_t>());
    c.mlp_hidden_dim = static_cast<int>(r.get<std::uint32_t>());
    c.norm_enabled = r.get<std::uint8_t>() != 0;
    c.seed = r.get<std::uint64_t>();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw CorruptionError(std::string("invalid checkpoint config: ") + e.what());
    }
    auto p = ModelParams<Real>::zeros(c);
    p.visit([&](const std::string&, Real* d, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) d[i] = static_cast<Real>(r.get<float>());
    });
    if (!r.done()) throw CorruptionError("trailing bytes in checkpoint");
    return MicroModel<Real>(c, std::move(p));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path);
}

template <typename Real>
void save_model(const MicroModel<Real>& model, const std::string& path) {
    write_file(path, serialize_model(model));
}

template <typename Real = float>
MicroModel<Real> load_model(const std::string& path) {
    return deserialize_model<Real>(read_file(path));
}

}  // namespace m2iv
