#pragma once

// Bundle persistence (binary bundle files + a line-delimited index),
// combination of stored bundles, and transfer to another model.

#include "m2iv/distill.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <iostream>

namespace m2iv {

// ---------------------------------------------------------------------------
// Bundle file: magic, version, fingerprint, L, d, per-layer records
// (alpha_a, v_a, alpha_m, v_m), metadata, checksum.

inline constexpr char kBundleMagic[8] = {'M', '2', 'I', 'V', 'B', 'N', 'D', 'L'};
inline constexpr std::uint32_t kBundleVersion = 1;

namespace detail {

inline void put_fingerprint(ByteWriter& w, const Fingerprint& f) {
    w.put<std::uint32_t>(f.num_layers);
    w.put<std::uint32_t>(f.hidden_dim);
    w.put_bytes(f.weights_hash);
}

inline Fingerprint get_fingerprint(ByteReader& r) {
    Fingerprint f;
    f.num_layers = r.get<std::uint32_t>();
    f.hidden_dim = r.get<std::uint32_t>();
    f.weights_hash = r.get_array<32>();
    return f;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_bundle(const MIVBundle& b) {
    b.validate();
    ByteWriter w;
    for (char c : kBundleMagic) w.put<char>(c);
    w.put<std::uint32_t>(kBundleVersion);
    detail::put_fingerprint(w, b.fingerprint);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.num_layers()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.dim()));
    for (std::size_t l = 0; l < b.alpha_a.size(); ++l) {
        w.put<float>(b.alpha_a[l]);
        w.put_floats(std::span<const float>(b.v_a[l].data(), static_cast<std::size_t>(b.v_a[l].size())));
        w.put<float>(b.alpha_m[l]);
        w.put_floats(std::span<const float>(b.v_m[l].data(), static_cast<std::size_t>(b.v_m[l].size())));
    }
    w.put_string(b.meta.task);
    w.put<std::int32_t>(b.meta.shots);
    w.put_string(b.meta.strategy);
    w.put_string(b.meta.config_hash);
    w.seal();
    return w.take();
}

inline MIVBundle deserialize_bundle(std::span<const std::uint8_t> bytes) {
    auto r = ByteReader::sealed(bytes);
    for (char c : kBundleMagic)
        if (r.get<char>() != c) throw CorruptionError("not a bundle file");
    if (r.get<std::uint32_t>() != kBundleVersion) throw CorruptionError("unsupported bundle version");
    MIVBundle b;
    b.fingerprint = detail::get_fingerprint(r);
    auto L = r.get<std::uint32_t>();
    auto d = r.get<std::uint32_t>();
    if (L != b.fingerprint.num_layers || d != b.fingerprint.hidden_dim)
        throw CorruptionError("bundle shape disagrees with its fingerprint");
    if (static_cast<std::uint64_t>(L) * (d + 1) * 8 > bytes.size()) throw CorruptionError("bundle shape exceeds file size");
    for (std::uint32_t l = 0; l < L; ++l) {
        b.alpha_a.push_back(r.get<float>());
        Eigen::VectorXf va(d);
        r.get_floats(std::span<float>(va.data(), d));
        b.v_a.push_back(std::move(va));
        b.alpha_m.push_back(r.get<float>());
        Eigen::VectorXf vm(d);
        r.get_floats(std::span<float>(vm.data(), d));
        b.v_m.push_back(std::move(vm));
    }
    b.meta.task = r.get_string();
    b.meta.shots = r.get<std::int32_t>();
    b.meta.strategy = r.get_string();
    b.meta.config_hash = r.get_string();
    if (!r.done()) throw CorruptionError("trailing bytes in bundle");
    try {
        b.validate();
    } catch (const ValidationError& e) {
        throw CorruptionError(std::string("invalid bundle: ") + e.what());
    }
    return b;
}

inline void save_bundle(const MIVBundle& b, const std::string& path) { write_file(path, serialize_bundle(b)); }
inline MIVBundle load_bundle(const std::string& path) { return deserialize_bundle(read_file(path)); }

/// SHA-256 hex of the alpha_a sequence (f32 bytes) followed by the fingerprint.
inline std::string bundle_key(const MIVBundle& b) {
    Sha256 h;
    for (float a : b.alpha_a) h.update(&a, sizeof(a));
    ByteWriter fp;
    detail::put_fingerprint(fp, b.fingerprint);
    h.update(fp.bytes().data(), fp.bytes().size());
    auto d = h.finish();
    return to_hex(d);
}

// ---------------------------------------------------------------------------
// Library

struct LibraryIndexEntry {
    std::string key;
    std::string task;
    int shots = 0;
    std::string strategy;
    std::string config_hash;
    std::string created;
    std::string file;
};

inline nlohmann::json to_json(const LibraryIndexEntry& e) {
    return {{"key", e.key},   {"task", e.task},       {"shots", e.shots}, {"strategy", e.strategy},
            {"config_hash", e.config_hash}, {"created", e.created}, {"file", e.file}};
}

inline LibraryIndexEntry index_entry_from_json(const nlohmann::json& j) {
    return {j.at("key").get<std::string>(),         j.at("task").get<std::string>(),
            j.at("shots").get<int>(),               j.at("strategy").get<std::string>(),
            j.at("config_hash").get<std::string>(), j.value("created", std::string()),
            j.at("file").get<std::string>()};
}

struct SaveResult {
    std::string key;
    std::string warning;  // non-empty when the natural key was taken
};

/// Directory of bundle files plus `index.jsonl`. Writers serialize on an
/// exclusive lock of `.lock`; the index is replaced atomically.
class VLibrary {
   public:
    explicit VLibrary(std::filesystem::path root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
    }

    const std::filesystem::path& root() const { return root_; }

    std::vector<LibraryIndexEntry> entries() const {
        std::vector<LibraryIndexEntry> out;
        std::ifstream in(root_ / "index.jsonl");
        std::string line;
        while (std::getline(in, line))
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                out.push_back(index_entry_from_json(nlohmann::json::parse(line)));
        return out;
    }

    SaveResult save(const MIVBundle& b) {
        b.validate();
        Lock lock(root_ / ".lock");
        auto idx = entries();
        SaveResult res;
        res.key = bundle_key(b);
        auto taken = [&](const std::string& k) {
            return std::any_of(idx.begin(), idx.end(), [&](const auto& e) { return e.key == k; });
        };
        if (taken(res.key)) {
            int v = 2;
            while (taken(res.key + "-v" + std::to_string(v))) ++v;
            res.warning = "duplicate key " + res.key + "; stored as version " + std::to_string(v);
            res.key += "-v" + std::to_string(v);
        }
        LibraryIndexEntry e{res.key, b.meta.task, b.meta.shots, b.meta.strategy, b.meta.config_hash, now_iso(),
                            res.key + ".m2iv"};
        write_atomic(root_ / e.file, serialize_bundle(b));
        idx.push_back(e);
        std::string text;
        for (const auto& x : idx) text += to_json(x).dump() + "\n";
        write_atomic(root_ / "index.jsonl",
                     std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
        return res;
    }

    MIVBundle load(const std::string& key) const {
        for (const auto& e : entries())
            if (e.key == key) return load_bundle((root_ / e.file).string());
        throw NotFoundError("no bundle with key " + key);
    }

    std::vector<LibraryIndexEntry> find_task(const std::string& task) const {
        std::vector<LibraryIndexEntry> out;
        for (auto& e : entries())
            if (e.task == task) out.push_back(e);
        return out;
    }

   private:
    struct Lock {
        explicit Lock(const std::filesystem::path& p) {
            fd = ::open(p.c_str(), O_CREAT | O_RDWR, 0644);
            if (fd < 0 || ::flock(fd, LOCK_EX) != 0) throw Error("cannot lock library at " + p.string());
        }
        ~Lock() {
            if (fd >= 0) {
                ::flock(fd, LOCK_UN);
                ::close(fd);
            }
        }
        Lock(const Lock&) = delete;
        Lock& operator=(const Lock&) = delete;
        int fd = -1;
    };

    static void write_atomic(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
        auto tmp = p;
        tmp += ".tmp";
        write_file(tmp.string(), bytes);
        std::filesystem::rename(tmp, p);
    }

    static std::string now_iso() {
        auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
        return buf;
    }

    std::filesystem::path root_;
};

// ---------------------------------------------------------------------------
// Combination

inline void check_weights(std::span<const MIVBundle> bundles, std::span<const double> w) {
    if (bundles.empty()) throw ValidationError("nothing to combine");
    if (bundles.size() != w.size()) throw ValidationError("one weight per bundle required");
    double s = 0;
    for (double x : w) s += x;
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError("combination weights must sum to 1");
    for (const auto& b : bundles) {
        b.validate();
        if (!(b.fingerprint == bundles.front().fingerprint))
            throw CompatibilityError("bundles to combine have different fingerprints");
    }
}

/// alpha_hat = sum w_i alpha_i and v_hat = sum w_i v_i, per layer and branch.
inline MIVBundle combine_training_free(std::span<const MIVBundle> bundles, std::span<const double> w) {
    check_weights(bundles, w);
    MIVBundle out = bundles.front();
    const auto L = out.alpha_a.size();
    auto blend = [&](auto get) {
        double acc = 0;
        for (std::size_t i = 0; i < bundles.size(); ++i) acc += w[i] * static_cast<double>(get(bundles[i]));
        return static_cast<float>(acc);
    };
    for (std::size_t l = 0; l < L; ++l) {
        out.alpha_a[l] = blend([&](const MIVBundle& b) { return b.alpha_a[l]; });
        out.alpha_m[l] = blend([&](const MIVBundle& b) { return b.alpha_m[l]; });
        for (Eigen::Index j = 0; j < out.v_a[l].size(); ++j) {
            out.v_a[l](j) = blend([&](const MIVBundle& b) { return b.v_a[l](j); });
            out.v_m[l](j) = blend([&](const MIVBundle& b) { return b.v_m[l](j); });
        }
    }
    std::string tasks;
    for (std::size_t i = 0; i < bundles.size(); ++i)
        tasks += (i ? "+" : "") + bundles[i].meta.task + "@" + std::to_string(w[i]);
    out.meta.task = "combo(" + tasks + ")";
    out.meta.strategy = "combine_training_free";
    return out;
}

/// Alpha reparameterized as alpha_hat[l] = base[l] + sum_k delta[l][k] * coef[l][k]
/// per branch, with v fixed; only delta trains.
struct AlphaCorrection {
    Eigen::VectorXd base_a, base_m;  // L
    Eigen::MatrixXd coef_a, coef_m;  // L x P
    Eigen::MatrixXd delta_a, delta_m;

    template <typename Real>
    void apply(Theta<Real>& t) const {
        t.alpha_a = (base_a + (delta_a.cwiseProduct(coef_a)).rowwise().sum()).cast<Real>();
        t.alpha_m = (base_m + (delta_m.cwiseProduct(coef_m)).rowwise().sum()).cast<Real>();
    }
};

struct CorrectionTrainResult {
    MIVBundle bundle;
    AlphaCorrection correction;
    std::vector<EpochMetrics> log;
};

/// Trains only the alpha corrections on L_syn + L_sup over `data`, in
/// batches of `batch_size` queries.
template <typename Real>
CorrectionTrainResult train_corrections(const MicroModel<Real>& model, MIVBundle bundle, AlphaCorrection corr,
                                        std::span<const Instance> data, const LossConfig& lc_in, const TrainConfig& tc,
                                        const InjectionPlan& plan_in = {}) {
    tc.validate();
    LossConfig lc = lc_in;
    lc.lambda_mim = 0;
    const int L = model.config().num_layers;
    InjectionPlan plan = plan_in.layers.empty() && !plan_in.null_plan ? InjectionPlan::all(L) : plan_in;
    auto theta = Theta<Real>::from_bundle(bundle);
    corr.apply(theta);
    CorrectionTrainResult res{bundle, corr, {}};
    if (data.empty() || tc.epochs == 0) {
        theta.store(res.bundle);
        return res;
    }
    std::vector<Prompt> students;
    for (const auto& q : data) students.push_back(student_prompt(q));
    const auto P = static_cast<std::size_t>(corr.coef_a.cols());
    AdamW<double> opt(2 * static_cast<std::size_t>(L) * P);
    const long per_epoch = static_cast<long>((data.size() + static_cast<std::size_t>(tc.batch_size) - 1) /
                                             static_cast<std::size_t>(tc.batch_size));
    const long total = per_epoch * tc.epochs;
    std::mt19937_64 gen(derive_seed(tc.seed, 0xC0B));
    long step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), gen);
        LossParts sum;
        long n = 0;
        double mult = 1;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(tc.batch_size), ++step, ++n) {
            std::vector<Prompt> bs;
            std::vector<DistillTarget<Real>> bt;
            for (std::size_t k = b0; k < std::min(order.size(), b0 + static_cast<std::size_t>(tc.batch_size)); ++k) {
                bt.push_back({bs.size(), Matrix<Real>()});
                bs.push_back(students[order[k]]);
            }
            Theta<Real> g;
            auto parts = distill_objective<Real>(model, theta, plan, bs, bt, lc, &g);
            if (!std::isfinite(parts.total)) throw Error("non-finite loss while training corrections");
            Eigen::MatrixXd ga = corr.coef_a.array().colwise() * g.alpha_a.template cast<double>().array();
            Eigen::MatrixXd gm = corr.coef_m.array().colwise() * g.alpha_m.template cast<double>().array();
            mult = warmup_multiplier(step, total, tc.warmup_factor);
            opt.begin_step();
            opt.update(0, corr.delta_a.data(), ga.data(), static_cast<std::size_t>(ga.size()), tc.lr_alpha * mult,
                       tc.weight_decay);
            opt.update(static_cast<std::size_t>(ga.size()), corr.delta_m.data(), gm.data(),
                       static_cast<std::size_t>(gm.size()), tc.lr_alpha * mult, tc.weight_decay);
            corr.apply(theta);
            sum.syn += parts.syn;
            sum.sup += parts.sup;
            sum.total += parts.total;
        }
        const double dn = static_cast<double>(std::max<long>(1, n));
        res.log.push_back({epoch, step, {0, sum.syn / dn, sum.sup / dn, sum.total / dn}, tc.lr_alpha * mult});
    }
    theta.store(res.bundle);
    res.correction = corr;
    return res;
}

/// Fine-tuned combination: v_hat and the base weights are fixed, per-layer
/// per-bundle corrections delta (init 1e-5) adjust alpha_hat =
/// sum_i (w_i + delta_i) alpha_i. `used_ids` lists instances that trained
/// any input bundle; `data` must avoid them.
template <typename Real>
CorrectionTrainResult combine_fine_tune(std::span<const MIVBundle> bundles, std::span<const double> w,
                                        const MicroModel<Real>& model, std::span<const Instance> data,
                                        std::span<const std::uint64_t> used_ids, const LossConfig& lc,
                                        const TrainConfig& tc) {
    check_weights(bundles, w);
    check_compatible(bundles.front(), model);
    for (const auto& inst : data)
        if (std::find(used_ids.begin(), used_ids.end(), inst.id) != used_ids.end())
            throw ValidationError("fine-tuning data overlaps bundle training data (id " + std::to_string(inst.id) + ")");
    MIVBundle base = combine_training_free(bundles, w);
    base.meta.strategy = "combine_fine_tune";
    const int L = base.num_layers();
    const auto P = static_cast<Eigen::Index>(bundles.size());
    AlphaCorrection c;
    c.base_a.resize(L);
    c.base_m.resize(L);
    c.coef_a.resize(L, P);
    c.coef_m.resize(L, P);
    for (int l = 0; l < L; ++l) {
        double sa = 0, sm = 0;
        for (Eigen::Index i = 0; i < P; ++i) {
            const auto& b = bundles[static_cast<std::size_t>(i)];
            c.coef_a(l, i) = b.alpha_a[static_cast<std::size_t>(l)];
            c.coef_m(l, i) = b.alpha_m[static_cast<std::size_t>(l)];
            sa += w[static_cast<std::size_t>(i)] * c.coef_a(l, i);
            sm += w[static_cast<std::size_t>(i)] * c.coef_m(l, i);
        }
        c.base_a(l) = sa;
        c.base_m(l) = sm;
    }
    c.delta_a = Eigen::MatrixXd::Constant(L, P, 1e-5);
    c.delta_m = Eigen::MatrixXd::Constant(L, P, 1e-5);
    return train_corrections(model, base, c, data, lc, tc);
}

enum class TransferMode { TrainingFree, FineTune };

/// Moves a bundle onto another model of the same shape. Fine-tuning trains
/// per-layer per-branch delta with alpha_hat = (1 + delta) alpha.
template <typename Real>
CorrectionTrainResult transfer(const MIVBundle& bundle, const MicroModel<Real>& target, TransferMode mode,
                               std::span<const Instance> data = {}, const LossConfig& lc = {},
                               const TrainConfig& tc = {}) {
    bundle.validate();
    if (static_cast<int>(bundle.fingerprint.num_layers) != target.config().num_layers ||
        static_cast<int>(bundle.fingerprint.hidden_dim) != target.config().hidden_dim)
        throw CompatibilityError("transfer target has a different shape");
    MIVBundle out = bundle;
    out.fingerprint = fingerprint_of(target);
    const int L = out.num_layers();
    AlphaCorrection c;
    c.base_a.resize(L);
    c.base_m.resize(L);
    for (int l = 0; l < L; ++l) {
        c.base_a(l) = out.alpha_a[static_cast<std::size_t>(l)];
        c.base_m(l) = out.alpha_m[static_cast<std::size_t>(l)];
    }
    c.coef_a = c.base_a;
    c.coef_m = c.base_m;
    c.delta_a = Eigen::MatrixXd::Zero(L, 1);
    c.delta_m = Eigen::MatrixXd::Zero(L, 1);
    if (mode == TransferMode::TrainingFree) return {out, c, {}};
    out.meta.strategy = "transfer_fine_tune";
    c.delta_a.setConstant(1e-5);
    c.delta_m.setConstant(1e-5);
    return train_corrections(target, out, c, data, lc, tc);
}

}  // namespace m2iv
