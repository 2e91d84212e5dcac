#pragma once

// Answer scoring, per-query evaluation with optional steering, and the
// closed-form inference cost model.

#include "m2iv/dataset.hpp"

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace m2iv {

inline constexpr int kVqaReferences = 10;

/// min(1, 3 * matches / 10) over the references padded (cyclically) or
/// truncated to ten. An empty prediction scores 0.
inline double vqa_accuracy(std::span<const TokenId> prediction, std::span<const std::vector<TokenId>> ground_truths) {
    if (ground_truths.empty()) throw ValidationError("vqa_accuracy needs at least one reference");
    if (prediction.empty()) return 0.0;
    int matches = 0;
    for (int r = 0; r < kVqaReferences; ++r) {
        const auto& ref = ground_truths[static_cast<std::size_t>(r) % ground_truths.size()];
        if (std::equal(prediction.begin(), prediction.end(), ref.begin(), ref.end())) ++matches;
    }
    return std::min(1.0, 3.0 * matches / kVqaReferences);
}

struct InferenceCost {
    long tokens = 0;
    double flops = 0;
};

/// Tokens pushed through the model for a prompt of `prompt_tokens` followed by
/// `continuation` fed-back tokens, and a FLOP estimate for one forward over
/// all of them (multiply-add = 2):
///   per layer  2*I*4d^2 (q,k,v,o projections) + 4*I^2*d (scores and mixing)
///              + 4*I*d*f (two MLP matrices)
///   plus       2*I*d*V for the unembedding.
inline InferenceCost count_inference_cost(long prompt_tokens, long continuation, const ModelConfig& c) {
    if (prompt_tokens < 0 || continuation < 0) throw ValidationError("token counts must be non-negative");
    const double I = static_cast<double>(prompt_tokens + continuation);
    const double d = c.hidden_dim, f = c.mlp_hidden_dim, V = c.vocab_size;
    double per_layer = 2 * I * 4 * d * d + 4 * I * I * d + 4 * I * d * f;
    return {prompt_tokens + continuation, c.num_layers * per_layer + 2 * I * d * V};
}

inline InferenceCost count_inference_cost(const TokenSequence& seq, long continuation, const ModelConfig& c) {
    return count_inference_cost(static_cast<long>(seq.size()), continuation, c);
}

/// How a method alters a plain query run: branch injections at every
/// position and/or edits of the stream at the query's last position.
template <typename Real>
struct Steering {
    struct LastPositionEdit {
        int layer = 0;
        Vector<Real> value;
        EditMode mode = EditMode::Add;
    };

    std::optional<BranchInjection<Real>> injection;
    std::vector<LastPositionEdit> edits;

    bool empty() const { return !injection && edits.empty(); }

    Hooks<Real> hooks(int query_last) const {
        Hooks<Real> h;
        if (injection) h.injection = &*injection;
        for (const auto& e : edits) h.stream_edits.push_back({e.layer, query_last, e.value, e.mode});
        return h;
    }
};

struct InstanceRecord {
    std::uint64_t id = 0;
    std::vector<TokenId> prediction;
    double score = 0;
    long tokens = 0;
    double flops = 0;
};

struct EvalOutcome {
    double accuracy = 0;
    std::vector<InstanceRecord> records;
    long tokens = 0;
    double flops = 0;
};

/// Demonstrations to prepend for a query; empty function means none.
using DemoSource = std::function<std::vector<Instance>(const Instance&)>;

/// Greedy decoding of the answer length, restricted to `allowed` when non-empty.
template <typename Real>
InstanceRecord evaluate_one(const MicroModel<Real>& model, const Instance& query, std::span<const Instance> demos,
                            const Steering<Real>& steering, std::span<const TokenId> allowed, TokenId separator) {
    TokenSequence seq = render_context(demos, separator);
    seq.append(render_query(query));
    const auto prompt_len = static_cast<long>(seq.size());
    const int n = static_cast<int>(query.answer().size());
    auto hooks = steering.hooks(static_cast<int>(prompt_len) - 1);
    TokenSequence out = generate_answer(model, seq, n, std::nullopt, hooks, allowed);

    InstanceRecord r;
    r.id = query.id;
    r.prediction.assign(out.ids.begin() + prompt_len, out.ids.end());
    r.score = vqa_accuracy(r.prediction, query.answers);
    auto cost = count_inference_cost(prompt_len, n - 1, model.config());
    r.tokens = cost.tokens;
    r.flops = cost.flops;
    return r;
}

template <typename Real>
EvalOutcome evaluate(const MicroModel<Real>& model, std::span<const Instance> queries, const DemoSource& demos,
                     const Steering<Real>& steering, std::span<const TokenId> allowed, TokenId separator) {
    EvalOutcome out;
    for (const auto& q : queries) {
        std::vector<Instance> ctx;
        if (demos) ctx = demos(q);
        auto r = evaluate_one(model, q, ctx, steering, allowed, separator);
        out.accuracy += r.score;
        out.tokens += r.tokens;
        out.flops += r.flops;
        out.records.push_back(std::move(r));
    }
    if (!queries.empty()) out.accuracy /= static_cast<double>(queries.size());
    return out;
}

}  // namespace m2iv
