#pragma once

// Conversion of classification streams and temperatures into the controller
// state: window distributions, max-scaling, the label history, and the flat
// network input vector.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowrl/error.hpp"

namespace flowrl {

inline constexpr int kNumClasses = 3;

// Per-image flow classification.
enum class ExtrusionClass : std::uint8_t { insufficient = 0, optimal = 1, excessive = 2 };

inline int index(ExtrusionClass c) { return static_cast<int>(c); }

inline ExtrusionClass class_from_int(long long v) {
  if (v < 0 || v >= kNumClasses) throw DomainError("class label out of range: " + std::to_string(v));
  return static_cast<ExtrusionClass>(v);
}

enum class DistKind { raw, scaled };

struct ClassDistribution {
  std::array<double, 3> p{};
  DistKind kind = DistKind::raw;

  double max() const { return *std::max_element(p.begin(), p.end()); }
};

// Fraction of each class among the labels of one image window.
inline ClassDistribution window_distribution(std::span<const ExtrusionClass> labels) {
  if (labels.empty()) throw ContractError("window_distribution: empty window");
  std::array<std::size_t, 3> counts{};
  for (auto c : labels) ++counts[index(c)];
  const double w = static_cast<double>(labels.size());
  ClassDistribution d;
  for (int i = 0; i < kNumClasses; ++i) d.p[i] = static_cast<double>(counts[i]) / w;
  return d;
}

// p <- p / max(p). The maximal entry becomes exactly 1.
inline ClassDistribution scale_distribution(const ClassDistribution& d) {
  const double m = d.max();
  if (!(m > 0.0)) throw DomainError("scale_distribution: all-zero distribution");
  ClassDistribution out{d.p, DistKind::scaled};
  for (auto& v : out.p) v /= m;
  return out;
}

// Last eta labels encoded as label/3, oldest first.
class HistoryVector {
 public:
  explicit HistoryVector(std::size_t eta = 30) : values_(eta, 1.0 / kNumClasses) {
    if (eta == 0) throw ConfigError("HistoryVector: eta must be >= 1");
  }

  static HistoryVector from_values(std::vector<double> values) {
    HistoryVector h(values.empty() ? 1 : values.size());
    if (values.empty()) throw ContractError("HistoryVector: empty values");
    for (double v : values)
      if (!(v >= 0.0 && v <= 1.0)) throw DomainError("HistoryVector: entry outside [0, 1]");
    h.values_ = std::move(values);
    return h;
  }

  void push(ExtrusionClass c) {
    std::rotate(values_.begin(), values_.begin() + 1, values_.end());
    values_.back() = static_cast<double>(index(c)) / kNumClasses;
  }

  std::size_t eta() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  double newest() const { return values_.back(); }

  friend bool operator==(const HistoryVector&, const HistoryVector&) = default;

 private:
  std::vector<double> values_;
};

// Nozzle temperatures are fed to the network as (u - 210) / 40.
inline constexpr double kTempCenter = 210.0;
inline constexpr double kTempScale = 40.0;

inline double normalize_temp(double u) { return (u - kTempCenter) / kTempScale; }
inline double denormalize_temp(double x) { return kTempCenter + kTempScale * x; }

struct ProcessState {
  HistoryVector history;
  ClassDistribution dist;
  double u_hat = kTempCenter;
  double u_bar = kTempCenter;
  std::uint64_t step = 0;

  std::size_t dimension() const { return history.eta() + 5; }
};

inline ProcessState assemble_state(HistoryVector history, const ClassDistribution& dist, double u_hat,
                                   double u_bar, std::uint64_t step = 0) {
  if (dist.kind != DistKind::scaled) throw ContractError("assemble_state: distribution must be scaled");
  return {std::move(history), dist, u_hat, u_bar, step};
}

// [history oldest..newest, p0, p1, p2, norm(u_hat), norm(u_bar)]
inline void flatten_into(const ProcessState& s, std::span<double> out) {
  if (out.size() != s.dimension()) throw DimensionError("flatten: output size mismatch");
  const auto h = s.history.values();
  std::copy(h.begin(), h.end(), out.begin());
  std::size_t k = h.size();
  for (double v : s.dist.p) out[k++] = v;
  out[k++] = normalize_temp(s.u_hat);
  out[k] = normalize_temp(s.u_bar);
}

inline std::vector<double> flatten(const ProcessState& s) {
  std::vector<double> v(s.dimension());
  flatten_into(s, v);
  return v;
}

inline ProcessState unflatten(std::span<const double> v) {
  if (v.size() < 6) throw DimensionError("unflatten: vector shorter than eta + 5 with eta >= 1");
  const std::size_t eta = v.size() - 5;
  ClassDistribution d{{v[eta], v[eta + 1], v[eta + 2]}, DistKind::scaled};
  return {HistoryVector::from_values({v.begin(), v.begin() + static_cast<std::ptrdiff_t>(eta)}), d,
          denormalize_temp(v[eta + 3]), denormalize_temp(v[eta + 4]), 0};
}

inline nlohmann::json to_json(const ProcessState& s) {
  const auto h = s.history.values();
  return {{"history", std::vector<double>(h.begin(), h.end())},
          {"dist", s.dist.p},
          {"u_hat", s.u_hat},
          {"u_bar", s.u_bar},
          {"step", s.step}};
}

inline ProcessState process_state_from_json(const nlohmann::json& j) {
  try {
    auto hist = HistoryVector::from_values(j.at("history").get<std::vector<double>>());
    ClassDistribution d{j.at("dist").get<std::array<double, 3>>(), DistKind::scaled};
    if (d.max() != 1.0) throw DomainError("process state: dist is not max-scaled");
    return {std::move(hist), d, j.at("u_hat").get<double>(), j.at("u_bar").get<double>(),
            j.at("step").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("process state: ") + e.what());
  }
}

}  // namespace flowrl
