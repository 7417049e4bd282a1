// Mechanistic toolkit: per-layer normalized singular-value summaries of the
// cartridge planes, checkpoint-to-checkpoint rotation series, and
// cross-cartridge similarity maps, all emitted as CSV for external plotting.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clab/cartridge.hpp"
#include "clab/core.hpp"
#include "clab/io.hpp"
#include "clab/numerics.hpp"
#include "clab/stats.hpp"

namespace clab::analysis {

enum class Role { keys, values };

inline std::string to_string(Role r) { return r == Role::keys ? "keys" : "values"; }

enum class Aggregation { median_iqr, mean };

struct SpectralSummary {
  Role role = Role::keys;
  int k = 0;
  Aggregation aggregation = Aggregation::median_iqr;
  std::vector<double> center;  // median curve (or mean when aggregation==mean)
  std::vector<double> q25, q75;
  std::vector<std::vector<double>> per_layer;  // [L][k]
};

template <typename Real>
const std::vector<Real>& role_plane(const cartridge::Cartridge<Real>& c, Role role) {
  return role == Role::keys ? c.keys : c.values;
}

// Per layer: flatten [h, p, d_head] to an (h*p) x d_head matrix, take singular
// values, normalize by the largest, keep the top k; aggregate across layers.
template <typename Real>
SpectralSummary spectral_summary(const cartridge::Cartridge<Real>& cart, Role role, int k,
                                 Aggregation agg = Aggregation::median_iqr) {
  cart.validate();
  require(k >= 1, "spectral_summary: k must be >= 1");
  require(k <= cart.head_dim, "spectral_summary: k exceeds head_dim");

  const auto& plane = role_plane(cart, role);
  const auto rows = static_cast<std::size_t>(cart.num_heads) * cart.p;
  const auto cols = static_cast<std::size_t>(cart.head_dim);

  SpectralSummary out;
  out.role = role;
  out.k = k;
  out.aggregation = agg;
  out.per_layer.resize(static_cast<std::size_t>(cart.num_layers));
  for (int layer = 0; layer < cart.num_layers; ++layer) {
    numerics::Matrix<double> m(rows, cols);
    const Real* src = plane.data() + static_cast<std::size_t>(layer) * rows * cols;
    for (std::size_t i = 0; i < rows * cols; ++i) {
      m.data[i] = static_cast<double>(src[i]);
    }
    const auto sv = numerics::svd_values(m);
    if (sv.empty() || sv[0] <= 0.0) {
      throw DegenerateInputError("spectral_summary: zero spectrum in layer " + std::to_string(layer));
    }
    auto& norm = out.per_layer[static_cast<std::size_t>(layer)];
    norm.resize(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      norm[static_cast<std::size_t>(i)] = sv[static_cast<std::size_t>(i)] / sv[0];
    }
  }

  out.center.resize(static_cast<std::size_t>(k));
  out.q25.resize(static_cast<std::size_t>(k));
  out.q75.resize(static_cast<std::size_t>(k));
  std::vector<double> column(static_cast<std::size_t>(cart.num_layers));
  for (int i = 0; i < k; ++i) {
    for (int layer = 0; layer < cart.num_layers; ++layer) {
      column[static_cast<std::size_t>(layer)] =
          out.per_layer[static_cast<std::size_t>(layer)][static_cast<std::size_t>(i)];
    }
    const auto q = stats::median_iqr(column);
    out.q25[static_cast<std::size_t>(i)] = q.q25;
    out.q75[static_cast<std::size_t>(i)] = q.q75;
    if (agg == Aggregation::median_iqr) {
      out.center[static_cast<std::size_t>(i)] = q.median;
    } else {
      double acc = 0.0;
      for (double v : column) {
        acc += v;
      }
      out.center[static_cast<std::size_t>(i)] = acc / static_cast<double>(column.size());
    }
  }
  return out;
}

struct RotationEntry {
  std::int64_t step_from = 0, step_to = 0;
  int layer = 0;
  Role role = Role::keys;
  double mean_cosine = 0.0;
  double mean_rotation = 0.0;  // 1 - mean_cosine
};

struct RotationSeries {
  std::vector<RotationEntry> entries;
};

namespace detail {

// Applies fn(head, slot, cosine) over corresponding d_head vectors of one
// layer's role plane in two same-shaped cartridges.
template <typename Real, typename Fn>
void for_each_slot_cosine(const cartridge::Cartridge<Real>& a, const cartridge::Cartridge<Real>& b,
                          int layer, Role role, Fn&& fn) {
  const auto& pa = role_plane(a, role);
  const auto& pb = role_plane(b, role);
  for (int head = 0; head < a.num_heads; ++head) {
    for (int slot = 0; slot < a.p; ++slot) {
      const std::size_t off = a.index(layer, head, slot, 0);
      std::span<const Real> va(pa.data() + off, static_cast<std::size_t>(a.head_dim));
      std::span<const Real> vb(pb.data() + off, static_cast<std::size_t>(a.head_dim));
      fn(head, slot, numerics::cosine_similarity(va, vb));
    }
  }
}

template <typename Real>
double mean_cosine(const cartridge::Cartridge<Real>& a, const cartridge::Cartridge<Real>& b,
                   int layer, Role role) {
  double acc = 0.0;
  std::size_t count = 0;
  for_each_slot_cosine(a, b, layer, role, [&](int, int, double c) {
    acc += c;
    ++count;
  });
  return acc / static_cast<double>(count);
}

}  // namespace detail

// Mean per-vector cosine between consecutive checkpoints, per layer and role.
template <typename Real>
RotationSeries rotation_series(
    std::span<const std::pair<std::int64_t, cartridge::Cartridge<Real>>> checkpoints) {
  require(checkpoints.size() >= 2, "rotation_series: need at least 2 checkpoints");
  RotationSeries out;
  for (std::size_t i = 0; i + 1 < checkpoints.size(); ++i) {
    const auto& [step_a, a] = checkpoints[i];
    const auto& [step_b, b] = checkpoints[i + 1];
    require(a.same_shape(b), "rotation_series: checkpoint shape drift");
    for (int layer = 0; layer < a.num_layers; ++layer) {
      for (Role role : {Role::keys, Role::values}) {
        const double c = detail::mean_cosine(a, b, layer, role);
        out.entries.push_back(RotationEntry{step_a, step_b, layer, role, c, 1.0 - c});
      }
    }
  }
  return out;
}

struct SimilarityEntry {
  int layer = 0;
  Role role = Role::keys;
  double mean_cosine = 0.0;
};

struct SimilarityMap {
  std::vector<SimilarityEntry> entries;
};

template <typename Real>
SimilarityMap cross_cartridge_similarity(const cartridge::Cartridge<Real>& a,
                                         const cartridge::Cartridge<Real>& b) {
  require(a.same_shape(b), "cross_cartridge_similarity: shape mismatch");
  SimilarityMap out;
  for (int layer = 0; layer < a.num_layers; ++layer) {
    for (Role role : {Role::keys, Role::values}) {
      out.entries.push_back(SimilarityEntry{layer, role, detail::mean_cosine(a, b, layer, role)});
    }
  }
  return out;
}

// --- CSV emission ---------------------------------------------------------

namespace detail {

inline std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace detail

inline void write_spectra_csv(const std::vector<SpectralSummary>& summaries,
                              const std::filesystem::path& dir) {
  std::string per_layer = "layer,role,index,value\n";
  std::string summary = "role,index,median,q25,q75\n";
  for (const auto& s : summaries) {
    for (std::size_t layer = 0; layer < s.per_layer.size(); ++layer) {
      for (int i = 0; i < s.k; ++i) {
        per_layer += std::to_string(layer) + "," + to_string(s.role) + "," + std::to_string(i) + "," +
                     detail::csv_double(s.per_layer[layer][static_cast<std::size_t>(i)]) + "\n";
      }
    }
    for (int i = 0; i < s.k; ++i) {
      summary += to_string(s.role) + "," + std::to_string(i) + "," +
                 detail::csv_double(s.center[static_cast<std::size_t>(i)]) + "," +
                 detail::csv_double(s.q25[static_cast<std::size_t>(i)]) + "," +
                 detail::csv_double(s.q75[static_cast<std::size_t>(i)]) + "\n";
    }
  }
  io::write_text(dir / "spectra.csv", per_layer);
  io::write_text(dir / "spectra_summary.csv", summary);
}

inline void write_rotations_csv(const RotationSeries& series, const std::filesystem::path& path) {
  std::string csv = "step_from,step_to,layer,role,mean_cosine\n";
  for (const auto& e : series.entries) {
    csv += std::to_string(e.step_from) + "," + std::to_string(e.step_to) + "," +
           std::to_string(e.layer) + "," + to_string(e.role) + "," +
           detail::csv_double(e.mean_cosine) + "\n";
  }
  io::write_text(path, csv);
}

// Per-slot cosine distributions, for inspection beyond the per-layer means.
template <typename Real>
void write_rotation_detail_csv(
    std::span<const std::pair<std::int64_t, cartridge::Cartridge<Real>>> checkpoints,
    const std::filesystem::path& path) {
  require(checkpoints.size() >= 2, "rotation detail: need at least 2 checkpoints");
  std::string csv = "step_from,step_to,layer,role,head,slot,cosine\n";
  for (std::size_t i = 0; i + 1 < checkpoints.size(); ++i) {
    const auto& [step_a, a] = checkpoints[i];
    const auto& [step_b, b] = checkpoints[i + 1];
    for (int layer = 0; layer < a.num_layers; ++layer) {
      for (Role role : {Role::keys, Role::values}) {
        detail::for_each_slot_cosine(a, b, layer, role, [&](int head, int slot, double c) {
          csv += std::to_string(step_a) + "," + std::to_string(step_b) + "," +
                 std::to_string(layer) + "," + to_string(role) + "," + std::to_string(head) + "," +
                 std::to_string(slot) + "," + detail::csv_double(c) + "\n";
        });
      }
    }
  }
  io::write_text(path, csv);
}

inline void write_similarity_csv(const SimilarityMap& map, const std::filesystem::path& path) {
  std::string csv = "layer,role,mean_cosine\n";
  for (const auto& e : map.entries) {
    csv += std::to_string(e.layer) + "," + to_string(e.role) + "," +
           detail::csv_double(e.mean_cosine) + "\n";
  }
  io::write_text(path, csv);
}

}  // namespace clab::analysis
