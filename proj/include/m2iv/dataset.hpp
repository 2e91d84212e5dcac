#pragma once

// Instances (image, question, answers) and how they are laid out as
// token prompts, plus the line-delimited dataset file format.

#include "m2iv/micromodel.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace m2iv {

struct Instance {
    std::uint64_t id = 0;
    std::vector<TokenId> image;
    std::vector<TokenId> question;
    std::vector<std::vector<TokenId>> answers;  // references; the first one is used in demonstrations
    std::string task;                           // family/parameter tag, e.g. "operator_induction/mul"

    const std::vector<TokenId>& answer() const {
        if (answers.empty() || answers.front().empty()) throw ValidationError("instance has no answer");
        return answers.front();
    }

    friend bool operator==(const Instance&, const Instance&) = default;
};

/// A query prompt with teacher forcing: the logits at `predict_positions[t]`
/// are scored against `targets[t]`.
struct Prompt {
    TokenSequence seq;
    std::vector<int> predict_positions;
    std::vector<TokenId> targets;
    int context_tokens = 0;  // tokens spent on demonstrations
};

inline void render_demo(const Instance& inst, TokenId separator, TokenSequence& out) {
    out.append(inst.image, Role::Image);
    out.append(inst.question, Role::Question);
    out.append(inst.answer(), Role::Answer);
    out.push(separator, Role::Separator);
}

inline TokenSequence render_context(std::span<const Instance> demos, TokenId separator) {
    TokenSequence s;
    for (const auto& d : demos) render_demo(d, separator, s);
    return s;
}

inline TokenSequence render_query(const Instance& inst) {
    if (inst.image.empty() || inst.question.empty()) throw ValidationError("instance needs image and question tokens");
    TokenSequence s;
    s.append(inst.image, Role::Image);
    s.append(inst.question, Role::Question);
    return s;
}

/// [demos..., query, answer[:-1]] with one prediction position per answer token.
inline Prompt teacher_forced_prompt(std::span<const Instance> demos, const Instance& query, TokenId separator) {
    Prompt p;
    p.seq = render_context(demos, separator);
    p.context_tokens = static_cast<int>(p.seq.size());
    p.seq.append(render_query(query));
    const auto& ans = query.answer();
    for (std::size_t t = 0; t < ans.size(); ++t) {
        p.predict_positions.push_back(static_cast<int>(p.seq.size()) - 1);
        p.targets.push_back(ans[t]);
        if (t + 1 < ans.size()) p.seq.push(ans[t], Role::Answer);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Dataset file: one JSON object per line {id, image_tokens, question_tokens, answers[], task}.

inline nlohmann::json to_json(const Instance& inst) {
    return nlohmann::json{{"id", inst.id},
                          {"image_tokens", inst.image},
                          {"question_tokens", inst.question},
                          {"answers", inst.answers},
                          {"task", inst.task}};
}

inline Instance instance_from_json(const nlohmann::json& j) {
    Instance inst;
    inst.id = j.at("id").get<std::uint64_t>();
    inst.image = j.at("image_tokens").get<std::vector<TokenId>>();
    inst.question = j.at("question_tokens").get<std::vector<TokenId>>();
    inst.answers = j.at("answers").get<std::vector<std::vector<TokenId>>>();
    if (j.contains("task")) inst.task = j.at("task").get<std::string>();
    return inst;
}

inline void write_dataset(const std::string& path, std::span<const Instance> data) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    for (const auto& inst : data) out << to_json(inst).dump() << '\n';
}

inline std::vector<Instance> read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::vector<Instance> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(instance_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline const Instance& find_instance(std::span<const Instance> data, std::uint64_t id) {
    for (const auto& inst : data)
        if (inst.id == id) return inst;
    throw SizeError("instance id " + std::to_string(id) + " not found");
}

}  // namespace m2iv
