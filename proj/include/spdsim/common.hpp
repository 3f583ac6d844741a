#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spdsim {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Thrown for malformed inputs: bad dimensions, bad files, bad attack specs.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when a scenario admits no feasible solution (empty charging set,
// nonpositive pre-charging voltage, ...).
struct InfeasibleError : std::runtime_error {
    explicit InfeasibleError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when the message-round protocol is violated (missing report, ...).
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

// FNV-1a 64-bit over raw bytes; used for payload digests and the run manifest.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t digest(const Vec& v) {
    if (v.size() == 0) return fnv1a(nullptr, 0);
    return fnv1a(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
}

inline std::string digest_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Round-trippable decimal rendering, used everywhere a double is written to a
// file so reruns are byte-identical.
inline std::string fmt_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

// Deterministic scalar draws on top of the standard engine.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(eng_);
    }
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(eng_);
    }
    Vec uniform_vec(Eigen::Index n, double lo, double hi) {
        Vec v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform(lo, hi);
        return v;
    }
    std::mt19937_64& engine() { return eng_; }

  private:
    std::mt19937_64 eng_;
};

}  // namespace spdsim
