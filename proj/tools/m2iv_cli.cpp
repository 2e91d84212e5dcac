// m2iv_cli <subcommand> <config.json>
//
// Every subcommand reads one JSON config. Paths inside a config are taken
// as given (relative to the working directory).

#include "m2iv/config.hpp"
#include "m2iv/m2iv.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <memory>

using namespace m2iv;

namespace {

std::string req_str(const json& j, const char* key) {
    if (!j.contains(key)) throw ConfigError(std::string("missing key '") + key + "'");
    return j.at(key).get<std::string>();
}

std::unique_ptr<EmbeddingProvider> make_provider(const json& cfg, std::span<const Instance> dataset) {
    if (cfg.contains("embeddings"))
        return std::make_unique<FileEmbeddingProvider>(cfg.at("embeddings").get<std::string>(), dataset);
    return std::make_unique<HashingEmbedder>(cfg.value("embedding_dim", 64));
}

EvalData load_eval_data(const json& cfg, const MicroModel<float>& model) {
    auto layout = TokenLayout::for_model(model.config());
    EvalData d;
    d.eval = read_dataset(req_str(cfg, "eval"));
    if (cfg.contains("support")) d.support = read_dataset(cfg.at("support").get<std::string>());
    d.allowed = layout.digit_tokens();
    d.separator = layout.separator();
    return d;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const json& cfg) {
    check_keys(cfg, {"model", "task", "train_out", "eval_out"}, "gen-data");
    ModelConfig mc = cfg.contains("model") ? model_config_from_json(cfg.at("model")) : ModelConfig{};
    auto spec = task_spec_from_json(cfg.at("task"));
    auto ds = gen_tasks(spec, TokenLayout::for_model(mc));
    write_dataset(req_str(cfg, "train_out"), ds.train);
    if (cfg.contains("eval_out")) write_dataset(cfg.at("eval_out").get<std::string>(), ds.eval);
    std::cout << json{{"train", ds.train.size()}, {"eval", ds.eval.size()}}.dump() << "\n";
    return 0;
}

int cmd_pretrain(const json& cfg) {
    check_keys(cfg, {"model", "tasks", "pretrain", "out", "log"}, "pretrain");
    ModelConfig mc = cfg.contains("model") ? model_config_from_json(cfg.at("model")) : ModelConfig{};
    std::vector<SyntheticTaskSpec> specs;
    for (const auto& t : cfg.at("tasks")) specs.push_back(task_spec_from_json(t));
    TaskSuite suite(TokenLayout::for_model(mc), specs);
    auto pc = cfg.contains("pretrain") ? pretrain_config_from_json(cfg.at("pretrain")) : PretrainConfig{};
    std::unique_ptr<std::ofstream> log;
    if (cfg.contains("log")) log = std::make_unique<std::ofstream>(cfg.at("log").get<std::string>(), std::ios::trunc);
    auto res = pretrain_micro<float>(mc, suite, pc, [&](const PretrainRecord& r) {
        json j{{"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"icl_accuracy", r.icl_accuracy},
               {"zero_shot_accuracy", r.zero_shot_accuracy}};
        std::cout << j.dump() << std::endl;
        if (log) *log << j.dump() << "\n";
    });
    save_model(res.model, req_str(cfg, "out"));
    return 0;
}

int cmd_build_sets(const json& cfg) {
    check_keys(cfg, {"model", "dataset", "K", "shots", "strategy", "seed", "embeddings", "embedding_dim", "oracle_pool",
                     "queries_out", "support_out", "contexts_out"},
               "build-sets");
    auto model = load_model<float>(req_str(cfg, "model"));
    auto layout = TokenLayout::for_model(model.config());
    auto data = read_dataset(req_str(cfg, "dataset"));
    auto provider = make_provider(cfg, data);
    const auto seed = cfg.value("seed", std::uint64_t{0});
    auto qs = build_query_set(data, cfg.value("K", 128), *provider, seed);
    ContextSetOptions opt;
    opt.shots = cfg.value("shots", 16);
    opt.strategy = strategy_from_string(cfg.value("strategy", std::string("RS")));
    opt.seed = seed;
    opt.oracle_pool = cfg.value("oracle_pool", 32);
    auto ctx = build_context_set<float>(qs.queries, qs.support, opt, *provider, &model, layout.separator());
    if (has_query_leakage(ctx)) throw ValidationError("context set leaks a query into its own context");
    write_dataset(req_str(cfg, "queries_out"), qs.queries);
    write_dataset(req_str(cfg, "support_out"), qs.support);
    write_context_set(req_str(cfg, "contexts_out"), ctx);
    std::cout << json{{"queries", qs.queries.size()}, {"support", qs.support.size()}, {"contexts", ctx.size()},
                      {"kmeans_iterations", qs.clustering.iterations}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_train_miv(const json& cfg) {
    check_keys(cfg, {"model", "queries", "support", "contexts", "loss", "train", "plan", "bundle_out", "metrics_out",
                     "library"},
               "train-miv");
    auto model = load_model<float>(req_str(cfg, "model"));
    auto layout = TokenLayout::for_model(model.config());
    auto queries = read_dataset(req_str(cfg, "queries"));
    auto support = read_dataset(req_str(cfg, "support"));
    auto ctx = read_context_set(req_str(cfg, "contexts"), support);
    auto lc = cfg.contains("loss") ? loss_config_from_json(cfg.at("loss")) : LossConfig{};
    auto tc = cfg.contains("train") ? train_config_from_json(cfg.at("train")) : TrainConfig{};
    const int L = model.config().num_layers;
    auto plan = cfg.contains("plan") ? plan_from_json(cfg.at("plan"), L) : InjectionPlan::all(L);
    auto res = train_miv(model, std::span<const Instance>(queries), std::span<const ContextSample>(ctx), lc, tc,
                         layout.separator(), plan,
                         [](const EpochMetrics& m) { std::cout << to_json(m).dump() << std::endl; });
    if (cfg.contains("metrics_out")) write_metrics(cfg.at("metrics_out").get<std::string>(), res.log);
    save_bundle(res.bundle, req_str(cfg, "bundle_out"));
    if (cfg.contains("library")) {
        VLibrary lib(cfg.at("library").get<std::string>());
        auto s = lib.save(res.bundle);
        std::cout << json{{"key", s.key}, {"warning", s.warning}}.dump() << "\n";
    }
    if (res.aborted) {
        std::cerr << "training aborted: " << res.diagnostic << "\n";
        return 3;
    }
    return 0;
}

int cmd_eval(const json& cfg) {
    check_keys(cfg, {"model", "eval", "support", "method", "shots", "strategy", "bundle", "plan", "seed", "embeddings",
                     "embedding_dim", "out", "records", "baselines"},
               "eval");
    auto model = load_model<float>(req_str(cfg, "model"));
    auto data = load_eval_data(cfg, model);
    auto provider = make_provider(cfg, data.support);
    const std::string method = cfg.value("method", std::string("zero-shot"));
    const int shots = cfg.value("shots", 0);
    const auto strategy = strategy_from_string(cfg.value("strategy", std::string("RS")));
    const auto seed = cfg.value("seed", std::uint64_t{0});
    std::span<const Instance> ev(data.eval);
    std::vector<EvalReport> reports;
    if (method == "zero-shot") {
        reports.push_back(
            make_report("zero-shot", 0, "none", evaluate(model, ev, DemoSource{}, Steering<float>{}, data.allowed, data.separator)));
    } else if (method == "icl") {
        reports.push_back(make_report("icl", shots, to_string(strategy),
                                      evaluate(model, ev, demo_source(model, data, shots, strategy, *provider, seed),
                                               Steering<float>{}, data.allowed, data.separator)));
    } else if (method == "m2iv") {
        auto bundle = load_bundle(req_str(cfg, "bundle"));
        const int L = model.config().num_layers;
        auto plan = cfg.contains("plan") ? plan_from_json(cfg.at("plan"), L) : InjectionPlan::all(L);
        reports.push_back(make_report("m2iv", bundle.meta.shots, bundle.meta.strategy,
                                      evaluate(model, ev, DemoSource{}, steering_from_bundle(bundle, model, plan),
                                               data.allowed, data.separator)));
    } else if (method == "baselines") {
        BaselineOptions opt;
        opt.seed = seed;
        reports = run_baselines(model, data, shots, strategy, *provider, opt);
    } else {
        throw ConfigError("unknown method '" + method + "' (zero-shot, icl, m2iv, baselines)");
    }
    for (const auto& r : reports) std::cout << to_json(r).dump() << "\n";
    if (cfg.contains("out")) write_reports(cfg.at("out").get<std::string>(), reports, cfg.value("records", false));
    return 0;
}

int cmd_bench(const json& cfg) {
    check_keys(cfg, {"model", "eval", "support", "shots", "strategies", "bundles", "baselines", "partial_plans", "seed",
                     "embeddings", "embedding_dim", "out", "records"},
               "bench");
    auto model = load_model<float>(req_str(cfg, "model"));
    auto data = load_eval_data(cfg, model);
    auto provider = make_provider(cfg, data.support);
    BenchmarkSweep sweep;
    if (cfg.contains("shots")) sweep.shots = cfg.at("shots").get<std::vector<int>>();
    if (cfg.contains("strategies")) {
        sweep.strategies.clear();
        for (const auto& s : cfg.at("strategies")) sweep.strategies.push_back(strategy_from_string(s.get<std::string>()));
    }
    sweep.seed = cfg.value("seed", std::uint64_t{0});

    // Bundles keyed by (shots, strategy).
    std::map<std::pair<int, std::string>, MIVBundle> bundles;
    if (cfg.contains("bundles"))
        for (const auto& b : cfg.at("bundles")) {
            auto bundle = load_bundle(b.at("path").get<std::string>());
            bundles[{b.value("shots", bundle.meta.shots), b.value("strategy", bundle.meta.strategy)}] = std::move(bundle);
        }
    const int L = model.config().num_layers;
    std::vector<BenchmarkMethod<float>> methods;
    methods.push_back({"m2iv", [&](int n, Strategy st) -> std::optional<Steering<float>> {
                           auto it = bundles.find({n, to_string(st)});
                           if (it == bundles.end()) return std::nullopt;
                           return steering_from_bundle(it->second, model, InjectionPlan::all(L));
                       }});
    auto reports = run_benchmark(model, std::span<const BenchmarkMethod<float>>(methods), data, sweep, *provider);
    if (cfg.value("baselines", true)) {
        BaselineOptions opt;
        opt.seed = sweep.seed;
        for (int n : sweep.shots)
            for (Strategy st : sweep.strategies)
                for (auto& r : run_baselines(model, data, n, st, *provider, opt)) reports.push_back(std::move(r));
    }
    if (cfg.value("partial_plans", false)) {
        auto plans = default_partial_plans(L);
        for (const auto& [key, bundle] : bundles)
            for (auto& r : partial_injection_sweep(model, bundle, std::span<const NamedPlan>(plans), data))
                reports.push_back(std::move(r));
    }
    for (const auto& r : reports) std::cout << to_json(r).dump() << "\n";
    if (cfg.contains("out")) write_reports(cfg.at("out").get<std::string>(), reports, cfg.value("records", false));
    return 0;
}

std::vector<MIVBundle> load_bundles(const json& cfg) {
    std::vector<MIVBundle> out;
    if (cfg.contains("bundles"))
        for (const auto& p : cfg.at("bundles")) out.push_back(load_bundle(p.get<std::string>()));
    if (cfg.contains("keys")) {
        VLibrary lib(req_str(cfg, "library"));
        for (const auto& k : cfg.at("keys")) out.push_back(lib.load(k.get<std::string>()));
    }
    if (out.empty()) throw ConfigError("no bundles given ('bundles' paths or 'library' + 'keys')");
    return out;
}

int cmd_combine(const json& cfg) {
    check_keys(cfg, {"bundles", "library", "keys", "weights", "mode", "model", "data", "exclude", "loss", "train", "out",
                     "store"},
               "combine");
    auto bundles = load_bundles(cfg);
    auto w = cfg.at("weights").get<std::vector<double>>();
    const std::string mode = cfg.value("mode", std::string("training_free"));
    MIVBundle out;
    if (mode == "training_free") {
        out = combine_training_free(bundles, w);
    } else if (mode == "fine_tune") {
        auto model = load_model<float>(req_str(cfg, "model"));
        auto data = read_dataset(req_str(cfg, "data"));
        std::vector<std::uint64_t> used;
        if (cfg.contains("exclude"))
            for (const auto& p : cfg.at("exclude"))
                for (const auto& inst : read_dataset(p.get<std::string>())) used.push_back(inst.id);
        auto lc = cfg.contains("loss") ? loss_config_from_json(cfg.at("loss")) : LossConfig{};
        auto tc = cfg.contains("train") ? train_config_from_json(cfg.at("train")) : TrainConfig{};
        auto res = combine_fine_tune(std::span<const MIVBundle>(bundles), std::span<const double>(w), model,
                                     std::span<const Instance>(data), std::span<const std::uint64_t>(used), lc, tc);
        for (const auto& m : res.log) std::cout << to_json(m).dump() << "\n";
        out = res.bundle;
    } else {
        throw ConfigError("unknown combine mode '" + mode + "'");
    }
    save_bundle(out, req_str(cfg, "out"));
    if (cfg.value("store", false)) {
        VLibrary lib(req_str(cfg, "library"));
        auto s = lib.save(out);
        std::cout << json{{"key", s.key}, {"warning", s.warning}}.dump() << "\n";
    }
    std::cout << json{{"task", out.meta.task}, {"strategy", out.meta.strategy}}.dump() << "\n";
    return 0;
}

int cmd_transfer(const json& cfg) {
    check_keys(cfg, {"bundle", "target_model", "mode", "data", "loss", "train", "out"}, "transfer");
    auto bundle = load_bundle(req_str(cfg, "bundle"));
    auto target = load_model<float>(req_str(cfg, "target_model"));
    const std::string mode = cfg.value("mode", std::string("training_free"));
    CorrectionTrainResult res;
    if (mode == "training_free") {
        res = transfer(bundle, target, TransferMode::TrainingFree);
    } else if (mode == "fine_tune") {
        auto data = read_dataset(req_str(cfg, "data"));
        auto lc = cfg.contains("loss") ? loss_config_from_json(cfg.at("loss")) : LossConfig{};
        auto tc = cfg.contains("train") ? train_config_from_json(cfg.at("train")) : TrainConfig{};
        res = transfer(bundle, target, TransferMode::FineTune, std::span<const Instance>(data), lc, tc);
        for (const auto& m : res.log) std::cout << to_json(m).dump() << "\n";
    } else {
        throw ConfigError("unknown transfer mode '" + mode + "'");
    }
    save_bundle(res.bundle, req_str(cfg, "out"));
    return 0;
}

/// Cheap property checks: decomposition identities, injection no-op and
/// bundle round trips. Non-zero exit on any violation.
int cmd_verify(const json& cfg) {
    check_keys(cfg, {"trials", "seed", "dim", "noop_inputs", "roundtrips"}, "verify");
    const int trials = cfg.value("trials", 1000);
    const auto seed = cfg.value("seed", std::uint64_t{0});
    bool ok = true;

    auto rep = run_theory_trials(trials, seed, cfg.value("dim", 16));
    const bool t_ok = rep.theorem1 <= 1e-9 && rep.theorem3 <= 1e-9 && rep.theorem2 <= 1e-12;
    ok = ok && t_ok;
    std::cout << json{{"check", "theory"},
                      {"trials", rep.trials},
                      {"theorem1_max_error", rep.theorem1},
                      {"theorem2_max_error", rep.theorem2},
                      {"theorem3_max_error", rep.theorem3},
                      {"weight_sum_error", rep.weight_sum},
                      {"nonlinear_mlp_residual", rep.nonlinear_residual},
                      {"pass", t_ok}}
                     .dump()
              << "\n";

    ModelConfig mc;
    mc.num_layers = 2;
    mc.hidden_dim = 16;
    mc.num_heads = 2;
    mc.vocab_size = 96;
    mc.visual_vocab_size = 32;
    mc.max_seq_len = 64;
    mc.mlp_hidden_dim = 64;
    mc.seed = seed;
    auto model = MicroModel<float>::init(mc);
    auto zero = init_bundle(model, seed);
    std::fill(zero.alpha_a.begin(), zero.alpha_a.end(), 0.0f);
    std::fill(zero.alpha_m.begin(), zero.alpha_m.end(), 0.0f);
    auto trained = init_bundle(model, seed + 1);
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<int> tok(0, mc.vocab_size - 1), len(1, 32);
    bool noop_ok = true;
    const int inputs = cfg.value("noop_inputs", 100);
    for (int i = 0; i < inputs; ++i) {
        TokenSequence s;
        for (int k = len(gen); k > 0; --k) s.push(tok(gen), Role::Question);
        auto clean = forward(model, s);
        noop_ok = noop_ok && forward_injected(model, s, zero, InjectionPlan::all(2)).first == clean &&
                  forward_injected(model, s, trained, InjectionPlan::none()).first == clean;
    }
    ok = ok && noop_ok;
    std::cout << json{{"check", "injection_noop"}, {"inputs", inputs}, {"pass", noop_ok}}.dump() << "\n";

    bool rt_ok = true;
    const int roundtrips = cfg.value("roundtrips", 1000);
    std::normal_distribution<float> N(0.0f, 1.0f);
    for (int i = 0; i < roundtrips; ++i) {
        auto b = init_bundle(model, derive_seed(seed, static_cast<std::uint64_t>(i)));
        for (auto& a : b.alpha_a) a = N(gen);
        b.meta.task = "t" + std::to_string(i);
        auto bytes = serialize_bundle(b);
        rt_ok = rt_ok && deserialize_bundle(bytes) == b;
        auto bad = bytes;
        bad[std::uniform_int_distribution<std::size_t>(0, bad.size() - 1)(gen)] ^= 0x10;
        try {
            deserialize_bundle(bad);
            rt_ok = false;
        } catch (const CorruptionError&) {
        }
    }
    ok = ok && rt_ok;
    std::cout << json{{"check", "bundle_roundtrip"}, {"bundles", roundtrips}, {"pass", rt_ok}}.dump() << "\n";
    return ok ? 0 : 1;
}

int cmd_store(const json& cfg) {
    check_keys(cfg, {"library", "bundle"}, "store");
    VLibrary lib(req_str(cfg, "library"));
    auto s = lib.save(load_bundle(req_str(cfg, "bundle")));
    std::cout << json{{"key", s.key}, {"warning", s.warning}}.dump() << "\n";
    if (!s.warning.empty()) std::cerr << s.warning << "\n";
    return 0;
}

int cmd_fetch(const json& cfg) {
    check_keys(cfg, {"library", "key", "task", "shots", "out", "list"}, "fetch");
    VLibrary lib(req_str(cfg, "library"));
    if (cfg.value("list", false)) {
        for (const auto& e : lib.entries()) std::cout << to_json(e).dump() << "\n";
        return 0;
    }
    std::string key;
    if (cfg.contains("key")) {
        key = cfg.at("key").get<std::string>();
    } else {
        auto hits = lib.find_task(req_str(cfg, "task"));
        if (cfg.contains("shots")) {
            const int n = cfg.at("shots").get<int>();
            std::erase_if(hits, [n](const LibraryIndexEntry& e) { return e.shots != n; });
        }
        if (hits.empty()) throw NotFoundError("no bundle for task " + req_str(cfg, "task"));
        key = hits.back().key;  // most recent
    }
    auto b = lib.load(key);
    save_bundle(b, req_str(cfg, "out"));
    std::cout << json{{"key", key}, {"task", b.meta.task}, {"shots", b.meta.shots}}.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"m2iv: multimodal in-context vectors on a desk-scale transformer"};
    app.require_subcommand(1);
    std::string config;
    const std::vector<std::pair<const char*, int (*)(const json&)>> commands{
        {"gen-data", cmd_gen_data}, {"pretrain", cmd_pretrain}, {"build-sets", cmd_build_sets},
        {"train-miv", cmd_train_miv}, {"eval", cmd_eval},       {"bench", cmd_bench},
        {"combine", cmd_combine},   {"transfer", cmd_transfer}, {"verify", cmd_verify},
        {"store", cmd_store},       {"fetch", cmd_fetch}};
    for (const auto& [name, fn] : commands) app.add_subcommand(name)->add_option("config", config, "JSON config")->required();
    CLI11_PARSE(app, argc, argv);
    for (const auto& [name, fn] : commands) {
        if (!app.got_subcommand(name)) continue;
        try {
            return fn(read_json_file(config));
        } catch (const ConfigError& e) {
            std::cerr << name << ": config error: " << e.what() << "\n";
            return 2;
        } catch (const std::exception& e) {
            std::cerr << name << ": " << e.what() << "\n";
            return 1;
        }
    }
    return 2;
}
