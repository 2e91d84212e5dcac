#pragma once

// JSON config sections for the command-line tools. Missing keys keep their
// defaults; unknown keys are rejected so typos do not pass silently.

#include "m2iv/distill.hpp"
#include "m2iv/pretrain.hpp"
#include "m2iv/tasks.hpp"

#include <json.hpp>

#include <fstream>
#include <initializer_list>
#include <string>

namespace m2iv {

using nlohmann::json;

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
    if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) throw ConfigError("unknown key '" + k + "' in section '" + section + "'");
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

inline ModelConfig model_config_from_json(const json& j) {
    check_keys(j, {"num_layers", "hidden_dim", "num_heads", "vocab_size", "visual_vocab_size", "max_seq_len",
                   "mlp_hidden_dim", "norm_enabled", "seed"},
               "model");
    ModelConfig c;
    read_opt(j, "num_layers", c.num_layers);
    read_opt(j, "hidden_dim", c.hidden_dim);
    read_opt(j, "num_heads", c.num_heads);
    read_opt(j, "vocab_size", c.vocab_size);
    read_opt(j, "visual_vocab_size", c.visual_vocab_size);
    read_opt(j, "max_seq_len", c.max_seq_len);
    c.mlp_hidden_dim = 4 * c.hidden_dim;
    read_opt(j, "mlp_hidden_dim", c.mlp_hidden_dim);
    read_opt(j, "norm_enabled", c.norm_enabled);
    read_opt(j, "seed", c.seed);
    c.validate();
    return c;
}

inline json to_json(const ModelConfig& c) {
    return {{"num_layers", c.num_layers},     {"hidden_dim", c.hidden_dim},
            {"num_heads", c.num_heads},       {"vocab_size", c.vocab_size},
            {"visual_vocab_size", c.visual_vocab_size}, {"max_seq_len", c.max_seq_len},
            {"mlp_hidden_dim", c.mlp_hidden_dim}, {"norm_enabled", c.norm_enabled},
            {"seed", c.seed}};
}

inline SyntheticTaskSpec task_spec_from_json(const json& j) {
    check_keys(j, {"family", "digit_lo", "digit_hi", "glyph_len", "glyph_styles", "operators", "mappings", "mapping_pool",
                   "target_types", "object_types", "image_len", "images_per_target", "seed", "train_size", "eval_size"},
               "task");
    SyntheticTaskSpec s;
    if (j.contains("family")) s.family = family_from_string(j.at("family").get<std::string>());
    read_opt(j, "digit_lo", s.digit_lo);
    read_opt(j, "digit_hi", s.digit_hi);
    read_opt(j, "glyph_len", s.glyph_len);
    read_opt(j, "glyph_styles", s.glyph_styles);
    if (j.contains("operators")) {
        s.operators.clear();
        for (const auto& o : j.at("operators")) s.operators.push_back(operator_from_string(o.get<std::string>()));
    }
    read_opt(j, "mappings", s.mappings);
    read_opt(j, "mapping_pool", s.mapping_pool);
    read_opt(j, "target_types", s.target_types);
    read_opt(j, "object_types", s.object_types);
    read_opt(j, "image_len", s.image_len);
    read_opt(j, "images_per_target", s.images_per_target);
    read_opt(j, "seed", s.seed);
    read_opt(j, "train_size", s.train_size);
    read_opt(j, "eval_size", s.eval_size);
    return s;
}

inline PretrainConfig pretrain_config_from_json(const json& j) {
    check_keys(j, {"epochs", "steps_per_epoch", "batch_size", "shots", "lr", "min_lr_ratio", "weight_decay",
                   "warmup_fraction", "grad_clip", "seed", "eval_episodes", "icl_threshold"},
               "pretrain");
    PretrainConfig c;
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "steps_per_epoch", c.steps_per_epoch);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "shots", c.shots);
    read_opt(j, "lr", c.lr);
    read_opt(j, "min_lr_ratio", c.min_lr_ratio);
    read_opt(j, "weight_decay", c.weight_decay);
    read_opt(j, "warmup_fraction", c.warmup_fraction);
    read_opt(j, "grad_clip", c.grad_clip);
    read_opt(j, "seed", c.seed);
    read_opt(j, "eval_episodes", c.eval_episodes);
    read_opt(j, "icl_threshold", c.icl_threshold);
    return c;
}

/// Loss weights; accepts both the short table names and the long ones.
inline LossConfig loss_config_from_json(const json& j) {
    check_keys(j, {"T", "temperature", "gamma", "lambda_mim", "lambda_syn", "lambda_sup"}, "loss");
    LossConfig c;
    read_opt(j, "T", c.temperature);
    read_opt(j, "temperature", c.temperature);
    read_opt(j, "gamma", c.gamma);
    read_opt(j, "lambda_mim", c.lambda_mim);
    read_opt(j, "lambda_syn", c.lambda_syn);
    read_opt(j, "lambda_sup", c.lambda_sup);
    c.validate();
    return c;
}

inline TrainConfig train_config_from_json(const json& j) {
    check_keys(j, {"lr_V", "lr_alpha", "weight_decay", "warmup_factor", "epochs", "batch_size", "seed", "many_shot", "task",
                   "strategy"},
               "train");
    TrainConfig c;
    read_opt(j, "lr_V", c.lr_v);
    read_opt(j, "lr_alpha", c.lr_alpha);
    read_opt(j, "weight_decay", c.weight_decay);
    read_opt(j, "warmup_factor", c.warmup_factor);
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "seed", c.seed);
    read_opt(j, "task", c.task);
    read_opt(j, "strategy", c.strategy);
    if (j.contains("many_shot")) {
        const auto& m = j.at("many_shot");
        check_keys(m, {"window", "overlap"}, "many_shot");
        ManyShotConfig ms;
        read_opt(m, "window", ms.window);
        read_opt(m, "overlap", ms.overlap);
        ms.validate();
        c.many_shot = ms;
    }
    c.validate();
    return c;
}

inline InjectionPlan plan_from_json(const json& j, int L) {
    if (j.is_string()) {
        auto s = j.get<std::string>();
        if (s == "all") return InjectionPlan::all(L);
        if (s == "none") return InjectionPlan::none();
        throw ConfigError("unknown plan '" + s + "'");
    }
    check_keys(j, {"kind", "k", "layers", "mha", "mlp"}, "plan");
    InjectionPlan p;
    std::string kind = j.value("kind", "all");
    int k = j.value("k", L);
    if (kind == "all") p = InjectionPlan::all(L);
    else if (kind == "none") p = InjectionPlan::none();
    else if (kind == "first") p = InjectionPlan::first(k, L);
    else if (kind == "middle") p = InjectionPlan::middle(k, L);
    else if (kind == "last") p = InjectionPlan::last(k, L);
    else if (kind == "layers") read_opt(j, "layers", p.layers);
    else throw ConfigError("unknown plan kind '" + kind + "'");
    read_opt(j, "mha", p.mha);
    read_opt(j, "mlp", p.mlp);
    p.validate(L);
    return p;
}

}  // namespace m2iv
