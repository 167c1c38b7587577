#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

namespace cde {

inline constexpr int kHeatmapBins = 16;

/// Visit counts over a 16x16 grid of world coordinates.
struct HeatmapRecord {
  std::array<std::int64_t, kHeatmapBins * kHeatmapBins> counts{};
  std::int64_t total = 0;

  void add(double x, double y, double world_size) {
    auto bin = [world_size](double v) {
      const double f = v / world_size * kHeatmapBins;
      return std::clamp(static_cast<int>(std::floor(f)), 0, kHeatmapBins - 1);
    };
    ++counts[static_cast<std::size_t>(bin(y) * kHeatmapBins + bin(x))];
    ++total;
  }

  /// Shannon entropy (nats) of the normalized visit distribution. An empty
  /// record has entropy zero.
  double entropy() const {
    if (total == 0) return 0.0;
    double h = 0.0;
    for (std::int64_t c : counts) {
      if (c == 0) continue;
      const double p = static_cast<double>(c) / static_cast<double>(total);
      h -= p * std::log(p);
    }
    return h;
  }
};

enum class Stage { kEarly, kMiddle, kLate };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kEarly: return "early";
    case Stage::kMiddle: return "middle";
    case Stage::kLate: return "late";
  }
  return "?";
}

/// Accumulates effector positions into one heatmap per training stage, with
/// stage boundaries at 33% / 66% / 100% of the step budget.
class HeatmapRecorder {
 public:
  HeatmapRecorder(double world_size, std::int64_t total_steps)
      : world_(world_size), total_steps_(total_steps) {
    if (world_size <= 0) throw std::invalid_argument("heatmap: world size must be positive");
    if (total_steps < 0) throw std::invalid_argument("heatmap: negative step budget");
  }

  Stage stage_of(std::int64_t step) const {
    if (total_steps_ <= 0) return Stage::kLate;
    const std::int64_t s = std::clamp<std::int64_t>(step * 3 / total_steps_, 0, 2);
    return static_cast<Stage>(s);
  }

  void record(std::int64_t step, double x, double y) {
    records_[static_cast<std::size_t>(stage_of(step))].add(x, y, world_);
  }

  const HeatmapRecord& stage(Stage s) const {
    return records_[static_cast<std::size_t>(s)];
  }

  void write_csv(const std::string& path, Stage s) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("heatmap: cannot open '" + path + "'");
    const HeatmapRecord& r = stage(s);
    for (int y = 0; y < kHeatmapBins; ++y) {
      for (int x = 0; x < kHeatmapBins; ++x)
        out << (x ? "," : "") << r.counts[static_cast<std::size_t>(y * kHeatmapBins + x)];
      out << '\n';
    }
  }

 private:
  double world_;
  std::int64_t total_steps_;
  std::array<HeatmapRecord, 3> records_;
};

/// Read a heatmap CSV back (16 rows of 16 counts).
inline HeatmapRecord read_heatmap_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("heatmap: cannot open '" + path + "'");
  HeatmapRecord r;
  std::string line;
  for (int y = 0; y < kHeatmapBins; ++y) {
    if (!std::getline(in, line))
      throw std::runtime_error("heatmap: '" + path + "' has fewer than 16 rows");
    std::size_t pos = 0;
    for (int x = 0; x < kHeatmapBins; ++x) {
      const std::size_t next = line.find(',', pos);
      const std::string cell = line.substr(pos, next == std::string::npos ? next : next - pos);
      const std::int64_t c = std::stoll(cell);
      r.counts[static_cast<std::size_t>(y * kHeatmapBins + x)] = c;
      r.total += c;
      if (next == std::string::npos) {
        if (x != kHeatmapBins - 1)
          throw std::runtime_error("heatmap: '" + path + "' has a short row");
        break;
      }
      pos = next + 1;
    }
  }
  return r;
}

/// Render a heatmap as an 8-bit PGM, linearly scaled to the max count.
inline void write_heatmap_pgm(const std::string& path, const HeatmapRecord& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("heatmap: cannot open '" + path + "'");
  const std::int64_t top = *std::max_element(r.counts.begin(), r.counts.end());
  out << "P5\n" << kHeatmapBins << " " << kHeatmapBins << "\n255\n";
  for (std::int64_t c : r.counts) {
    const int v = top == 0 ? 0 : static_cast<int>(c * 255 / top);
    out.put(static_cast<char>(v));
  }
}

}  // namespace cde
