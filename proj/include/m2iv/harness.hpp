#pragma once

// Benchmark sweeps over methods, shot counts and retrieval strategies, and
// partial-layer injection sweeps. Reports are plain data written as JSONL.

#include "m2iv/baselines.hpp"
#include "m2iv/datapipe.hpp"
#include "m2iv/tasks.hpp"

#include <json.hpp>

#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace m2iv {

struct EvalReport {
    std::string method;
    int shots = 0;
    std::string strategy;  // "none" for rows without retrieval
    double accuracy = 0;
    std::vector<InstanceRecord> records;
    long tokens = 0;
    double flops = 0;
    std::string note;  // warnings, plan names, chosen layers

    void validate() const {
        if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw ValidationError("accuracy outside [0, 1]");
        if (tokens < 0 || flops < 0) throw ValidationError("negative cost");
    }
};

inline nlohmann::json to_json(const EvalReport& r, bool with_records = false) {
    nlohmann::json j{{"method", r.method},   {"shots", r.shots}, {"strategy", r.strategy},
                     {"accuracy", r.accuracy}, {"instances", r.records.size()},
                     {"tokens", r.tokens},   {"flops", r.flops}};
    if (!r.note.empty()) j["note"] = r.note;
    if (with_records) {
        auto& arr = j["records"] = nlohmann::json::array();
        for (const auto& rec : r.records)
            arr.push_back({{"id", rec.id}, {"prediction", rec.prediction}, {"score", rec.score}, {"tokens", rec.tokens}});
    }
    return j;
}

inline std::string to_jsonl(std::span<const EvalReport> reports, bool with_records = false) {
    std::string out;
    for (const auto& r : reports) out += to_json(r, with_records).dump() + "\n";
    return out;
}

inline void write_reports(const std::string& path, std::span<const EvalReport> reports, bool with_records = false) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write " + path);
    f << to_jsonl(reports, with_records);
}

inline EvalReport make_report(std::string method, int shots, std::string strategy, EvalOutcome o) {
    EvalReport r;
    r.method = std::move(method);
    r.shots = shots;
    r.strategy = std::move(strategy);
    r.accuracy = o.accuracy;
    r.records = std::move(o.records);
    r.tokens = o.tokens;
    r.flops = o.flops;
    return r;
}

/// Injection of a bundle through `plan` as a steering.
template <typename Real>
Steering<Real> steering_from_bundle(const MIVBundle& bundle, const MicroModel<Real>& model, const InjectionPlan& plan) {
    Steering<Real> s;
    s.injection = make_injection(bundle, model, plan);
    return s;
}

/// Everything evaluation needs besides the model and the method.
struct EvalData {
    std::vector<Instance> eval;     // queries
    std::vector<Instance> support;  // demonstration pool
    std::vector<TokenId> allowed;   // answer vocabulary (empty: unrestricted)
    TokenId separator = 0;
};

/// Demonstrations for `shots` and `strategy`; Oracle needs the model.
template <typename Real>
DemoSource demo_source(const MicroModel<Real>& model, const EvalData& data, int shots, Strategy strategy,
                       const EmbeddingProvider& provider, std::uint64_t seed, int oracle_pool = 32) {
    if (shots == 0) return {};
    return [&model, &data, shots, strategy, &provider, seed, oracle_pool](const Instance& q) {
        if (strategy == Strategy::Oracle)
            return retrieve_oracle(model, q, data.support, shots, data.separator, oracle_pool, seed);
        return retrieve(strategy, q, data.support, shots, provider, seed);
    };
}

inline const std::vector<int>& default_shot_sweep() {
    static const std::vector<int> s{0, 1, 2, 4, 8, 16};
    return s;
}

struct BenchmarkSweep {
    std::vector<int> shots = default_shot_sweep();
    std::vector<Strategy> strategies = {Strategy::RS};
    std::uint64_t seed = 0;
};

/// A steered zero-shot method. The provider returns nullopt when it has no
/// artifact for (shots, strategy); that cell becomes a warning row.
template <typename Real>
struct BenchmarkMethod {
    std::string tag;
    std::function<std::optional<Steering<Real>>(int shots, Strategy strategy)> steering;
};

/// Rows: zero-shot, then vanilla ICL per (shots, strategy), then every
/// method per (shots, strategy), in that order.
template <typename Real>
std::vector<EvalReport> run_benchmark(const MicroModel<Real>& model, std::span<const BenchmarkMethod<Real>> methods,
                                      const EvalData& data, const BenchmarkSweep& sweep,
                                      const EmbeddingProvider& provider) {
    std::vector<EvalReport> out;
    out.push_back(make_report("zero-shot", 0, "none",
                              evaluate(model, std::span<const Instance>(data.eval), DemoSource{}, Steering<Real>{},
                                       data.allowed, data.separator)));
    for (int n : sweep.shots)
        for (Strategy st : sweep.strategies)
            out.push_back(make_report("icl", n, to_string(st),
                                      evaluate(model, std::span<const Instance>(data.eval),
                                               demo_source(model, data, n, st, provider, sweep.seed), Steering<Real>{},
                                               data.allowed, data.separator)));
    for (const auto& m : methods)
        for (int n : sweep.shots)
            for (Strategy st : sweep.strategies) {
                auto s = m.steering(n, st);
                if (!s) {
                    EvalReport r;
                    r.method = m.tag;
                    r.shots = n;
                    r.strategy = to_string(st);
                    r.note = "warning: no artifact for this cell; skipped";
                    out.push_back(std::move(r));
                    continue;
                }
                out.push_back(make_report(m.tag, n, to_string(st),
                                          evaluate(model, std::span<const Instance>(data.eval), DemoSource{}, *s,
                                                   data.allowed, data.separator)));
            }
    return out;
}

struct NamedPlan {
    std::string name;
    InjectionPlan plan;
};

/// first/middle/last half of the layers, all layers, and the null plan.
inline std::vector<NamedPlan> default_partial_plans(int L) {
    const int k = std::max(1, L / 2);
    return {{"first-" + std::to_string(k), InjectionPlan::first(k, L)},
            {"middle-" + std::to_string(k), InjectionPlan::middle(k, L)},
            {"last-" + std::to_string(k), InjectionPlan::last(k, L)},
            {"all", InjectionPlan::all(L)},
            {"none", InjectionPlan::none()}};
}

template <typename Real>
std::vector<EvalReport> partial_injection_sweep(const MicroModel<Real>& model, const MIVBundle& bundle,
                                                std::span<const NamedPlan> plans, const EvalData& data) {
    std::vector<EvalReport> out;
    for (const auto& p : plans) {
        auto r = make_report("m2iv", bundle.meta.shots, bundle.meta.strategy.empty() ? "none" : bundle.meta.strategy,
                             evaluate(model, std::span<const Instance>(data.eval), DemoSource{},
                                      steering_from_bundle(bundle, model, p.plan), data.allowed, data.separator));
        r.note = "plan=" + p.name;
        out.push_back(std::move(r));
    }
    return out;
}

/// Task-vector accuracy averaged over every layer, as the method is reported.
template <typename Real>
EvalReport evaluate_tv_all_layers(const MicroModel<Real>& model, std::span<const TokenSequence> contexts,
                                  const EvalData& data, int shots, const std::string& strategy) {
    const int L = model.config().num_layers;
    EvalReport r;
    r.method = "TV";
    r.shots = shots;
    r.strategy = strategy;
    std::string per_layer;
    for (int l = 0; l < L; ++l) {
        auto art = extract_tv(model, contexts, l);
        auto o = evaluate(model, std::span<const Instance>(data.eval), DemoSource{}, to_steering(art, model),
                          data.allowed, data.separator);
        r.accuracy += o.accuracy / L;
        per_layer += (l ? "," : "") + std::to_string(o.accuracy);
        if (l == 0) {
            r.tokens = o.tokens;
            r.flops = o.flops;
            r.records = std::move(o.records);
        }
    }
    r.note = "mean over layers [" + per_layer + "]";
    return r;
}

/// Function-vector accuracy at every target layer; the best layer is reported.
template <typename Real>
EvalReport evaluate_fv_best_layer(const MicroModel<Real>& model, SteeringArtifact fv, const EvalData& data, int shots,
                                  const std::string& strategy) {
    const int L = model.config().num_layers;
    EvalReport best;
    best.accuracy = -1;
    std::string per_layer;
    for (int l = 0; l < L; ++l) {
        fv.layer = l;
        auto o = evaluate(model, std::span<const Instance>(data.eval), DemoSource{}, to_steering(fv, model), data.allowed,
                          data.separator);
        per_layer += (l ? "," : "") + std::to_string(o.accuracy);
        if (o.accuracy > best.accuracy) {
            best = make_report("FV", shots, strategy, std::move(o));
            best.note = "layer=" + std::to_string(l);
        }
    }
    best.note += " per-layer [" + per_layer + "]";
    return best;
}

struct BaselineOptions {
    int contexts = 32;         // support queries whose n-shot runs feed extraction
    int fv_head_budget = 4;
    int max_demonstrations = 64;  // pooled demonstrations for ICV and I2CL
    bool calibrate_i2cl = true;
    std::uint64_t seed = 0;
};

/// TV (mean over layers), FV (best layer), ICV and I2CL extracted from
/// n-shot runs over the support set, each evaluated zero-shot on data.eval.
template <typename Real>
std::vector<EvalReport> run_baselines(const MicroModel<Real>& model, const EvalData& data, int shots, Strategy strategy,
                                      const EmbeddingProvider& provider, const BaselineOptions& opt = {}) {
    const std::string st = to_string(strategy);
    std::vector<EvalReport> out;
    if (shots < 1) {
        for (const char* tag : {"TV", "FV", "ICV", "I2CL"}) {
            EvalReport r;
            r.method = tag;
            r.shots = shots;
            r.strategy = st;
            r.note = "warning: steering baselines need at least one demonstration; skipped";
            out.push_back(std::move(r));
        }
        return out;
    }
    std::vector<Instance> pool = data.support;
    std::mt19937_64 gen(derive_seed(opt.seed, 0xBA5E));
    std::shuffle(pool.begin(), pool.end(), gen);
    const auto nctx = std::min<std::size_t>(static_cast<std::size_t>(opt.contexts), pool.size());
    std::vector<Instance> queries(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(nctx));
    std::vector<Instance> heldout(pool.begin() + static_cast<std::ptrdiff_t>(nctx), pool.end());

    auto source = demo_source(model, data, shots, strategy, provider, opt.seed);
    std::vector<std::vector<Instance>> demo_sets;
    std::vector<Prompt> clean;
    std::vector<TokenSequence> runs;
    std::vector<Instance> demos;
    std::vector<std::uint64_t> seen;
    for (const auto& q : queries) {
        demo_sets.push_back(source(q));
        clean.push_back(teacher_forced_prompt(demo_sets.back(), q, data.separator));
        runs.push_back(detail::first_prediction_run(clean.back()));
        for (const auto& d : demo_sets.back())
            if (static_cast<int>(demos.size()) < opt.max_demonstrations &&
                std::find(seen.begin(), seen.end(), d.id) == seen.end()) {
                seen.push_back(d.id);
                demos.push_back(d);
            }
    }
    std::span<const Instance> ev(data.eval);

    out.push_back(evaluate_tv_all_layers(model, std::span<const TokenSequence>(runs), data, shots, st));

    auto corrupted = shuffled_label_prompts(demo_sets, queries, data.separator, opt.seed);
    const int budget = std::min(opt.fv_head_budget, model.config().num_layers * model.config().num_heads);
    auto fv = extract_fv(model, std::span<const Prompt>(clean), std::span<const Prompt>(corrupted), budget, 0);
    out.push_back(evaluate_fv_best_layer(model, fv.artifact, data, shots, st));

    if (demos.size() >= 2) {
        auto icv = extract_icv(model, std::span<const Instance>(demos));
        out.push_back(make_report("ICV", shots, st,
                                  evaluate(model, ev, DemoSource{}, to_steering(icv, model), data.allowed, data.separator)));
    } else {
        EvalReport r;
        r.method = "ICV";
        r.shots = shots;
        r.strategy = st;
        r.note = "warning: fewer than two demonstrations; skipped";
        out.push_back(std::move(r));
    }

    auto i2 = extract_i2cl(model, std::span<const Instance>(demos));
    std::string note = "coef=0.1";
    if (opt.calibrate_i2cl && !heldout.empty()) {
        auto cal = calibrate_i2cl(model, i2, std::span<const Instance>(heldout), data.allowed, data.separator, opt.seed);
        note = "coef=" + std::to_string(cal.coefficient) + " (calibrated)";
    }
    auto r = make_report("I2CL", shots, st,
                         evaluate(model, ev, DemoSource{}, to_steering(i2, model), data.allowed, data.separator));
    r.note = note;
    out.push_back(std::move(r));
    return out;
}

}  // namespace m2iv
