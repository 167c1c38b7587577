#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

namespace cde {

/// FNV-1a 64-bit hash, used to fingerprint config snapshots so a result
/// bundle is verifiably tied to the configuration that produced it.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

/// Append-only training-curve writer with fixed number formatting, so two
/// identical runs produce byte-identical files. One row per finished episode
/// and one row per evaluation; fields that do not apply to a row stay empty.
class MetricsWriter {
 public:
  MetricsWriter() = default;

  explicit MetricsWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("metrics: cannot open '" + path + "'");
    out_ << "step,agent,episode_return_env,episode_return_int,loss_critic,loss_recons,"
            "eval_success_rate\n";
  }

  void episode_row(std::int64_t step, const std::string& agent, double return_env,
                   double return_int, double loss_critic, double loss_recons) {
    out_ << step << ',' << agent << ',' << fmt(return_env) << ',' << fmt(return_int) << ','
         << fmt(loss_critic) << ',' << fmt(loss_recons) << ",\n";
  }

  void eval_row(std::int64_t step, const std::string& agent, double success_rate) {
    out_ << step << ',' << agent << ",,,,," << fmt(success_rate) << '\n';
  }

  void flush() { out_.flush(); }

 private:
  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  }

  std::ofstream out_;
};

}  // namespace cde
