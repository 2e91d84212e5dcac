#pragma once

#include <openssl/sha.h>

#include <Eigen/Dense>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace m2iv {

template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

using TokenId = std::int32_t;

// ---------------------------------------------------------------------------
// Errors. Every failure mode named by an operation contract maps to one type
// so callers can catch precisely.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LengthError : Error {
    using Error::Error;
};
struct VocabError : Error {
    using Error::Error;
};
struct CompatibilityError : Error {
    using Error::Error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct SizeError : Error {
    using Error::Error;
};
struct CorruptionError : Error {
    using Error::Error;
};
struct NormalizationError : Error {
    using Error::Error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct NotFoundError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Digests.

using Digest = std::array<std::uint8_t, 32>;

class Sha256 {
   public:
    Sha256() { SHA256_Init(&ctx_); }
    Sha256& update(const void* data, std::size_t n) {
        SHA256_Update(&ctx_, data, n);
        return *this;
    }
    Sha256& update(std::string_view s) { return update(s.data(), s.size()); }
    Digest finish() {
        Digest d{};
        SHA256_Final(d.data(), &ctx_);
        return d;
    }

   private:
    SHA256_CTX ctx_{};
};

inline Digest sha256(std::span<const std::uint8_t> bytes) {
    return Sha256().update(bytes.data(), bytes.size()).finish();
}

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (auto b : bytes) {
        out.push_back(kHex[b >> 4]);
        out.push_back(kHex[b & 0xF]);
    }
    return out;
}

/// First eight digest bytes read little-endian; used as the trailing checksum
/// of every binary file this library writes.
inline std::uint64_t checksum64(std::span<const std::uint8_t> bytes) {
    Digest d = sha256(bytes);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | d[static_cast<std::size_t>(i)];
    return v;
}

// ---------------------------------------------------------------------------
// Little-endian byte buffers for the binary file formats.

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ByteWriter {
   public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void put_bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void put_string(std::string_view s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void put_floats(std::span<const float> f) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(f.data());
        buf_.insert(buf_.end(), p, p + f.size_bytes());
    }
    /// Appends the checksum of everything written so far.
    void seal() { put<std::uint64_t>(checksum64(buf_)); }

    const std::vector<std::uint8_t>& bytes() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

   private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
   public:
    explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}

    /// Verifies and strips the trailing checksum. Throws CorruptionError.
    static ByteReader sealed(std::span<const std::uint8_t> b) {
        if (b.size() < sizeof(std::uint64_t)) throw CorruptionError("file too short for checksum");
        auto body = b.first(b.size() - sizeof(std::uint64_t));
        std::uint64_t stored = 0;
        std::memcpy(&stored, b.data() + body.size(), sizeof(stored));
        if (stored != checksum64(body)) throw CorruptionError("checksum mismatch");
        return ByteReader(body);
    }

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string() {
        auto n = get<std::uint32_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void get_floats(std::span<float> out) {
        need(out.size_bytes());
        std::memcpy(out.data(), buf_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }
    template <std::size_t N>
    std::array<std::uint8_t, N> get_array() {
        std::array<std::uint8_t, N> a{};
        need(N);
        std::memcpy(a.data(), buf_.data() + pos_, N);
        pos_ += N;
        return a;
    }
    bool done() const { return pos_ == buf_.size(); }

   private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw CorruptionError("unexpected end of data");
    }
    std::span<const std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Seed derivation. splitmix64 gives well-mixed independent streams from a
// (seed, salt) pair without sharing generator state.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    return splitmix64(seed ^ splitmix64(salt + 0x632BE59BD9B4E019ull));
}

}  // namespace m2iv
