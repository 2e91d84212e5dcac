#pragma once

// Synthetic in-context task families standing in for multimodal ICL
// benchmarks. "Images" are runs of visual token ids; every family hides a
// task parameter (operator, mapping, counted object type) that can only be
// recovered from demonstrations.

#include "m2iv/dataset.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace m2iv {

enum class TaskFamily { OperatorInduction, TokenMapping, CountInduction };
enum class Operator { Add, Sub, Mul };

inline std::string to_string(TaskFamily f) {
    switch (f) {
        case TaskFamily::OperatorInduction: return "operator_induction";
        case TaskFamily::TokenMapping: return "token_mapping";
        case TaskFamily::CountInduction: return "count_induction";
    }
    return "?";
}

inline TaskFamily family_from_string(const std::string& s) {
    if (s == "operator_induction") return TaskFamily::OperatorInduction;
    if (s == "token_mapping") return TaskFamily::TokenMapping;
    if (s == "count_induction") return TaskFamily::CountInduction;
    throw ConfigError("unknown task family '" + s + "'");
}

inline std::string to_string(Operator op) {
    switch (op) {
        case Operator::Add: return "add";
        case Operator::Sub: return "sub";
        case Operator::Mul: return "mul";
    }
    return "?";
}

inline Operator operator_from_string(const std::string& s) {
    if (s == "add" || s == "+") return Operator::Add;
    if (s == "sub" || s == "-") return Operator::Sub;
    if (s == "mul" || s == "*" || s == "x") return Operator::Mul;
    throw ConfigError("unknown operator '" + s + "'");
}

inline int apply_operator(Operator op, int a, int b) {
    int r = 0;
    switch (op) {
        case Operator::Add: r = a + b; break;
        case Operator::Sub: r = a - b; break;
        case Operator::Mul: r = a * b; break;
    }
    return ((r % 10) + 10) % 10;
}

/// Fixed assignment of roles to token ids for a model's vocabulary.
struct TokenLayout {
    int visual_vocab = 64;
    int vocab = 512;

    static TokenLayout for_model(const ModelConfig& c) {
        TokenLayout t{c.visual_vocab_size, c.vocab_size};
        t.validate();
        return t;
    }

    void validate() const {
        if (visual_vocab < 16) throw ConfigError("visual vocabulary too small for task glyphs");
        if (vocab < visual_vocab + 26) throw ConfigError("text vocabulary too small for task tokens");
    }

    TokenId separator() const { return visual_vocab; }
    TokenId question(TaskFamily f) const { return visual_vocab + 1 + static_cast<int>(f); }
    TokenId digit(int v) const { return visual_vocab + 16 + v; }
    int glyph_capacity() const { return visual_vocab * 5 / 8; }
    /// k-th token of the glyph drawing `value` in visual style `style`.
    TokenId glyph(int value, int glyph_len, int k, int style = 0, int styles = 1) const {
        return (value * styles + style) * glyph_len + k;
    }
    int object_capacity() const { return visual_vocab - glyph_capacity(); }
    TokenId object(int type) const { return glyph_capacity() + type; }

    std::vector<TokenId> digit_tokens() const {
        std::vector<TokenId> out;
        for (int v = 0; v < 10; ++v) out.push_back(digit(v));
        return out;
    }
};

struct SyntheticTaskSpec {
    TaskFamily family = TaskFamily::OperatorInduction;
    // operator_induction / token_mapping
    int digit_lo = 0;
    int digit_hi = 9;
    int glyph_len = 1;
    int glyph_styles = 1;  // visual variants per digit; multiplies the instance count
    std::vector<Operator> operators{Operator::Add};
    std::vector<int> mappings{0};
    int mapping_pool = 4;
    // count_induction
    std::vector<int> target_types{0};
    int object_types = 3;
    int image_len = 6;
    int images_per_target = 200;

    std::uint64_t seed = 0;
    int train_size = 0;  // 0 and 0: every instance goes to train
    int eval_size = 0;
};

struct TaskDataset {
    std::vector<Instance> train;
    std::vector<Instance> eval;
};

/// The i-th hidden digit permutation. Fixed across seeds so a mapping index
/// names the same task in pretraining and in every dataset.
inline std::vector<int> digit_mapping(int index) {
    std::vector<int> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 gen(derive_seed(0x6D6170, static_cast<std::uint64_t>(index)));
    std::shuffle(perm.begin(), perm.end(), gen);
    return perm;
}

namespace detail {

inline void check_spec(const SyntheticTaskSpec& s, const TokenLayout& t) {
    t.validate();
    switch (s.family) {
        case TaskFamily::OperatorInduction:
        case TaskFamily::TokenMapping:
            if (s.digit_lo < 0 || s.digit_hi < s.digit_lo) throw ConfigError("empty digit range");
            if (s.glyph_len < 1 || s.glyph_styles < 1) throw ConfigError("glyph_len and glyph_styles must be positive");
            if ((s.digit_hi + 1) * s.glyph_len * s.glyph_styles > t.glyph_capacity())
                throw ConfigError("digit range does not fit the visual vocabulary");
            if (s.family == TaskFamily::OperatorInduction && s.operators.empty())
                throw ConfigError("empty operator set");
            if (s.family == TaskFamily::TokenMapping) {
                if (s.mappings.empty()) throw ConfigError("empty mapping set");
                for (int m : s.mappings)
                    if (m < 0 || m >= s.mapping_pool) throw ConfigError("mapping index outside pool");
            }
            break;
        case TaskFamily::CountInduction:
            if (s.target_types.empty() || s.object_types < 1 || s.image_len < 1 || s.images_per_target < 1)
                throw ConfigError("empty count-induction parameter range");
            if (s.object_types > t.object_capacity()) throw ConfigError("too many object types");
            if (s.image_len > 9) throw ConfigError("counts must stay single-digit");
            for (int tt : s.target_types)
                if (tt < 0 || tt >= s.object_types) throw ConfigError("target type outside object types");
            break;
    }
}

inline void push_glyph(std::vector<TokenId>& img, const TokenLayout& t, int value, int glyph_len, int style = 0,
                       int styles = 1) {
    for (int k = 0; k < glyph_len; ++k) img.push_back(t.glyph(value, glyph_len, k, style, styles));
}

inline int glyph_value(TokenId tok, int glyph_len, int styles) { return tok / glyph_len / styles; }

inline std::uint64_t family_id_base(TaskFamily f, int param) {
    return (static_cast<std::uint64_t>(f) + 1) * 1'000'000'000ull + static_cast<std::uint64_t>(param) * 1'000'000ull;
}

}  // namespace detail

inline Instance make_operator_instance(const TokenLayout& t, Operator op, int a, int b, int glyph_len,
                                       std::uint64_t id, int style_a = 0, int style_b = 0, int styles = 1) {
    Instance inst;
    inst.id = id;
    detail::push_glyph(inst.image, t, a, glyph_len, style_a, styles);
    detail::push_glyph(inst.image, t, b, glyph_len, style_b, styles);
    inst.question = {t.question(TaskFamily::OperatorInduction)};
    inst.answers = {{t.digit(apply_operator(op, a, b))}};
    inst.task = "operator_induction/" + to_string(op);
    return inst;
}

inline Instance make_mapping_instance(const TokenLayout& t, int mapping, int a, int glyph_len, std::uint64_t id,
                                      int style = 0, int styles = 1) {
    Instance inst;
    inst.id = id;
    detail::push_glyph(inst.image, t, a, glyph_len, style, styles);
    inst.question = {t.question(TaskFamily::TokenMapping)};
    inst.answers = {{t.digit(digit_mapping(mapping)[static_cast<std::size_t>(a % 10)])}};
    inst.task = "token_mapping/" + std::to_string(mapping);
    return inst;
}

inline Instance make_count_instance(const TokenLayout& t, int target, std::span<const int> objects, std::uint64_t id) {
    Instance inst;
    inst.id = id;
    int count = 0;
    for (int o : objects) {
        inst.image.push_back(t.object(o));
        count += o == target ? 1 : 0;
    }
    inst.question = {t.question(TaskFamily::CountInduction)};
    inst.answers = {{t.digit(count)}};
    inst.task = "count_induction/" + std::to_string(target);
    return inst;
}

/// Every instance a task spec describes, in canonical order, before any split.
inline std::vector<Instance> enumerate_instances(const SyntheticTaskSpec& s, const TokenLayout& t) {
    detail::check_spec(s, t);
    std::vector<Instance> out;
    switch (s.family) {
        case TaskFamily::OperatorInduction:
            for (auto op : s.operators) {
                std::uint64_t id = detail::family_id_base(s.family, static_cast<int>(op));
                for (int a = s.digit_lo; a <= s.digit_hi; ++a)
                    for (int sa = 0; sa < s.glyph_styles; ++sa)
                        for (int b = s.digit_lo; b <= s.digit_hi; ++b)
                            for (int sb = 0; sb < s.glyph_styles; ++sb)
                                out.push_back(
                                    make_operator_instance(t, op, a, b, s.glyph_len, id++, sa, sb, s.glyph_styles));
            }
            break;
        case TaskFamily::TokenMapping:
            for (int m : s.mappings) {
                std::uint64_t id = detail::family_id_base(s.family, m);
                for (int a = s.digit_lo; a <= s.digit_hi; ++a)
                    for (int sa = 0; sa < s.glyph_styles; ++sa)
                        out.push_back(make_mapping_instance(t, m, a, s.glyph_len, id++, sa, s.glyph_styles));
            }
            break;
        case TaskFamily::CountInduction: {
            std::mt19937_64 gen(derive_seed(s.seed, 0xC0));
            std::uniform_int_distribution<int> obj(0, s.object_types - 1);
            for (int target : s.target_types) {
                std::uint64_t id = detail::family_id_base(s.family, target);
                for (int k = 0; k < s.images_per_target; ++k) {
                    std::vector<int> objects(static_cast<std::size_t>(s.image_len));
                    for (auto& o : objects) o = obj(gen);
                    out.push_back(make_count_instance(t, target, objects, id++));
                }
            }
            break;
        }
    }
    return out;
}

/// Seeded shuffle of the enumerated instances split into disjoint train/eval.
inline TaskDataset gen_tasks(const SyntheticTaskSpec& s, const TokenLayout& t) {
    auto all = enumerate_instances(s, t);
    if (s.train_size < 0 || s.eval_size < 0) throw ConfigError("negative split size");
    std::size_t want = static_cast<std::size_t>(s.train_size) + static_cast<std::size_t>(s.eval_size);
    if (want > all.size())
        throw ConfigError("requested " + std::to_string(want) + " instances but only " + std::to_string(all.size()) +
                          " exist");
    std::mt19937_64 gen(derive_seed(s.seed, 0x5B));
    std::shuffle(all.begin(), all.end(), gen);
    TaskDataset ds;
    if (want == 0) {
        ds.train = std::move(all);
        return ds;
    }
    ds.train.assign(all.begin(), all.begin() + s.train_size);
    ds.eval.assign(all.begin() + s.train_size, all.begin() + static_cast<std::ptrdiff_t>(want));
    return ds;
}

/// Re-derives the answer of an instance from its image tokens alone.
inline int recompute_answer(const Instance& inst, const SyntheticTaskSpec& s, const TokenLayout& t) {
    auto slash = inst.task.find('/');
    std::string param = inst.task.substr(slash + 1);
    switch (s.family) {
        case TaskFamily::OperatorInduction: {
            int a = detail::glyph_value(inst.image[0], s.glyph_len, s.glyph_styles);
            int b = detail::glyph_value(inst.image[static_cast<std::size_t>(s.glyph_len)], s.glyph_len, s.glyph_styles);
            return apply_operator(operator_from_string(param), a, b);
        }
        case TaskFamily::TokenMapping:
            return digit_mapping(std::stoi(param))[static_cast<std::size_t>(
                detail::glyph_value(inst.image[0], s.glyph_len, s.glyph_styles) % 10)];
        case TaskFamily::CountInduction: {
            int target = std::stoi(param);
            return static_cast<int>(std::count(inst.image.begin(), inst.image.end(), t.object(target)));
        }
    }
    return -1;
}

// ---------------------------------------------------------------------------
// Episodic sampling for pretraining: each episode fixes one hidden task
// parameter and strings `shots + 1` instances of it together.

class TaskSuite {
   public:
    TaskSuite(TokenLayout layout, std::vector<SyntheticTaskSpec> specs) : layout_(layout) {
        for (const auto& s : specs)
            for (auto& inst : enumerate_instances(s, layout_)) {
                auto [it, inserted] = index_.try_emplace(inst.task, pools_.size());
                if (inserted) {
                    pools_.emplace_back();
                    pool_names_.push_back(inst.task);
                }
                pools_[it->second].push_back(std::move(inst));
            }
        if (pools_.empty()) throw ConfigError("task suite has no variants");
    }

    const TokenLayout& layout() const { return layout_; }
    std::size_t num_variants() const { return pools_.size(); }
    const std::vector<Instance>& pool(std::size_t v) const { return pools_[v]; }
    const std::string& variant_name(std::size_t v) const { return pool_names_[v]; }

    /// Demonstrations followed by one query; all from the same variant.
    std::vector<Instance> sample_episode(std::mt19937_64& gen, int shots) const {
        std::uniform_int_distribution<std::size_t> pick_variant(0, pools_.size() - 1);
        const auto& pool = pools_[pick_variant(gen)];
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        std::vector<Instance> ep;
        ep.reserve(static_cast<std::size_t>(shots + 1));
        for (int k = 0; k <= shots; ++k) ep.push_back(pool[pick(gen)]);
        return ep;
    }

   private:
    TokenLayout layout_;
    std::vector<std::vector<Instance>> pools_;
    std::vector<std::string> pool_names_;
    std::map<std::string, std::size_t> index_;
};

/// Whole-episode sequence with a prediction target at every answer token, so
/// one sequence trains every shot count from 0 to `shots`.
inline Prompt episode_prompt(std::span<const Instance> episode, TokenId separator) {
    Prompt p;
    for (std::size_t k = 0; k < episode.size(); ++k) {
        const auto& inst = episode[k];
        p.seq.append(inst.image, Role::Image);
        p.seq.append(inst.question, Role::Question);
        for (auto tok : inst.answer()) {
            p.predict_positions.push_back(static_cast<int>(p.seq.size()) - 1);
            p.targets.push_back(tok);
            p.seq.push(tok, Role::Answer);
        }
        if (k + 1 < episode.size()) p.seq.push(separator, Role::Separator);
    }
    return p;
}

}  // namespace m2iv
