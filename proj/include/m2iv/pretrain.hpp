#pragma once

// Episodic pretraining of the micro-model so that in-context learning
// emerges: every sequence strings together demonstrations of one hidden task
// and the loss covers every answer token, i.e. every shot count at once.

#include "m2iv/optim.hpp"
#include "m2iv/tasks.hpp"

#include <functional>
#include <random>
#include <vector>

namespace m2iv {

struct PretrainConfig {
    int epochs = 20;
    int steps_per_epoch = 100;
    int batch_size = 8;
    int shots = 16;
    double lr = 2e-3;
    double min_lr_ratio = 0.1;
    double weight_decay = 0.01;
    double warmup_fraction = 0.05;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    int eval_episodes = 128;
    double icl_threshold = 0.0;  // stop once held-out accuracy at `shots` reaches this (0 disables)
};

struct PretrainRecord {
    int epoch = 0;
    long step = 0;
    double loss = 0;
    double lr = 0;
    double icl_accuracy = 0;        // held-out, at `shots` demonstrations
    double zero_shot_accuracy = 0;  // held-out, no demonstrations
};

template <typename Real>
struct PretrainResult {
    MicroModel<Real> model;
    std::vector<PretrainRecord> log;  // one per epoch
    double initial_loss = 0;          // loss of the very first batch before any update
    double first_batch_after_epoch1 = 0;
    bool threshold_met = false;
};

struct DivergenceError : Error {
    DivergenceError(const std::string& what, std::vector<std::uint8_t> checkpoint)
        : Error(what), last_good(std::move(checkpoint)) {}
    std::vector<std::uint8_t> last_good;  // serialized model before the failing step
};

namespace detail {

/// Mean cross-entropy over prediction positions; writes dlogits if given.
template <typename Real>
double answer_cross_entropy(const Matrix<Real>& logits, const Prompt& p, double weight, Matrix<Real>* dlogits) {
    double loss = 0;
    for (std::size_t t = 0; t < p.targets.size(); ++t) {
        auto row = logits.row(p.predict_positions[t]);
        Real mx = row.maxCoeff();
        Eigen::Array<Real, 1, Eigen::Dynamic> e = (row.array() - mx).exp();
        Real z = e.sum();
        loss += -(static_cast<double>(row(p.targets[t]) - mx) - std::log(static_cast<double>(z)));
        if (dlogits) {
            dlogits->row(p.predict_positions[t]) += (e / z).matrix() * static_cast<Real>(weight);
            (*dlogits)(p.predict_positions[t], p.targets[t]) -= static_cast<Real>(weight);
        }
    }
    return loss;
}

}  // namespace detail

/// Accuracy of greedy answers (restricted to `allowed`) at each prediction
/// position of held-out episodes; index k is the k-shot accuracy.
template <typename Real>
std::vector<double> episode_accuracy_by_shot(const MicroModel<Real>& model, const TaskSuite& suite, int shots,
                                             int episodes, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::vector<double> correct(static_cast<std::size_t>(shots + 1), 0.0);
    auto allowed = suite.layout().digit_tokens();
    ForwardCache<Real> cache;
    for (int e = 0; e < episodes; ++e) {
        auto ep = suite.sample_episode(gen, shots);
        auto prompt = episode_prompt(ep, suite.layout().separator());
        forward_cached(model, prompt.seq, {}, cache);
        for (std::size_t k = 0; k < prompt.targets.size(); ++k) {
            Vector<Real> row = cache.logits.row(prompt.predict_positions[k]).transpose();
            if (argmax_token<Real>(row, allowed) == prompt.targets[k]) correct[k] += 1;
        }
    }
    for (auto& c : correct) c /= episodes;
    return correct;
}

template <typename Real>
PretrainResult<Real> pretrain_micro(const ModelConfig& config, const TaskSuite& suite, const PretrainConfig& tc,
                                    const std::function<void(const PretrainRecord&)>& on_epoch = {}) {
    if (tc.epochs < 0 || tc.steps_per_epoch < 1 || tc.batch_size < 1 || tc.shots < 0)
        throw ConfigError("invalid pretraining configuration");
    PretrainResult<Real> res{MicroModel<Real>::init(config), {}, 0, 0, false};
    if (tc.epochs == 0) return res;

    auto& model = res.model;
    auto grads = ModelParams<Real>::zeros(config);
    std::vector<Real*> pview;
    std::vector<Real*> gview;
    std::vector<std::size_t> sizes;
    std::vector<bool> decay;
    model.params().visit([&](const std::string& name, Real* d, Eigen::Index n) {
        pview.push_back(d);
        sizes.push_back(static_cast<std::size_t>(n));
        decay.push_back(name.find("gain") == std::string::npos && name.find(".b") == std::string::npos);
    });
    grads.visit([&](const std::string&, Real* d, Eigen::Index) { gview.push_back(d); });
    std::size_t total = 0;
    for (auto n : sizes) total += n;
    AdamW<Real> opt(total);

    const long total_steps = static_cast<long>(tc.epochs) * tc.steps_per_epoch;
    const long warm = std::max<long>(1, static_cast<long>(tc.warmup_fraction * static_cast<double>(total_steps)));
    auto lr_at = [&](long step) {
        if (step < warm) return tc.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
        double prog = static_cast<double>(step - warm) / static_cast<double>(std::max<long>(1, total_steps - warm));
        double cosine = 0.5 * (1.0 + std::cos(3.141592653589793 * prog));
        return tc.lr * (tc.min_lr_ratio + (1.0 - tc.min_lr_ratio) * cosine);
    };

    std::mt19937_64 gen(derive_seed(tc.seed, 0x9E7));
    const TokenId sep = suite.layout().separator();
    std::vector<ForwardCache<Real>> caches(static_cast<std::size_t>(tc.batch_size));
    std::vector<Prompt> first_batch;
    long step = 0;

    auto batch_loss = [&](std::span<const Prompt> batch) {
        double loss = 0;
        std::size_t count = 0;
        ForwardCache<Real> c;
        for (const auto& p : batch) {
            forward_cached(model, p.seq, {}, c);
            loss += detail::answer_cross_entropy<Real>(c.logits, p, 0.0, nullptr);
            count += p.targets.size();
        }
        return loss / static_cast<double>(count);
    };

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        double epoch_loss = 0;
        for (int s = 0; s < tc.steps_per_epoch; ++s, ++step) {
            std::vector<Prompt> batch;
            for (int b = 0; b < tc.batch_size; ++b)
                batch.push_back(episode_prompt(suite.sample_episode(gen, tc.shots), sep));
            if (step == 0) first_batch = batch;

            std::size_t count = 0;
            for (const auto& p : batch) count += p.targets.size();
            const double w = 1.0 / static_cast<double>(count);

            grads.visit([](const std::string&, Real* d, Eigen::Index n) { std::fill(d, d + n, Real(0)); });
            double loss = 0;
            for (std::size_t b = 0; b < batch.size(); ++b) {
                auto& c = caches[b];
                forward_cached(model, batch[b].seq, {}, c);
                Matrix<Real> dlogits = Matrix<Real>::Zero(c.logits.rows(), c.logits.cols());
                loss += detail::answer_cross_entropy<Real>(c.logits, batch[b], w, &dlogits);
                backward(model, batch[b].seq, c, dlogits, nullptr, &grads);
            }
            loss *= w;
            if (step == 0) res.initial_loss = loss;
            if (!std::isfinite(loss)) throw DivergenceError("non-finite pretraining loss", serialize_model(model));

            double norm2 = 0;
            for (std::size_t k = 0; k < gview.size(); ++k)
                for (std::size_t i = 0; i < sizes[k]; ++i) norm2 += static_cast<double>(gview[k][i]) * gview[k][i];
            double clip = tc.grad_clip > 0 && std::sqrt(norm2) > tc.grad_clip ? tc.grad_clip / std::sqrt(norm2) : 1.0;
            if (clip != 1.0)
                for (std::size_t k = 0; k < gview.size(); ++k)
                    for (std::size_t i = 0; i < sizes[k]; ++i) gview[k][i] *= static_cast<Real>(clip);

            const double lr = lr_at(step);
            opt.begin_step();
            std::size_t off = 0;
            for (std::size_t k = 0; k < pview.size(); ++k) {
                opt.update(off, pview[k], gview[k], sizes[k], lr, decay[k] ? tc.weight_decay : 0.0);
                off += sizes[k];
            }
            if (!model.all_finite()) throw DivergenceError("non-finite weights after update", serialize_model(model));
            epoch_loss += loss;
        }
        if (epoch == 0) res.first_batch_after_epoch1 = batch_loss(first_batch);

        auto acc = episode_accuracy_by_shot(model, suite, tc.shots, tc.eval_episodes, derive_seed(tc.seed, 0xE7A1));
        PretrainRecord rec{epoch, step, epoch_loss / tc.steps_per_epoch, lr_at(step - 1), acc.back(), acc.front()};
        res.log.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (tc.icl_threshold > 0 && rec.icl_accuracy >= tc.icl_threshold) {
            res.threshold_met = true;
            break;
        }
    }
    if (tc.icl_threshold <= 0) res.threshold_met = true;
    return res;
}

}  // namespace m2iv
