// Context-distillation training: optimize only the cartridge against the
// full-context teacher's logits, with checkpointing, metrics, and run
// persistence.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clab/cartridge.hpp"
#include "clab/core.hpp"
#include "clab/dataset_io.hpp"
#include "clab/io.hpp"
#include "clab/model.hpp"
#include "clab/numerics.hpp"
#include "clab/optim.hpp"
#include "clab/selfstudy.hpp"
#include "clab/serialize.hpp"
#include "json.hpp"

namespace clab::distill {

enum class Precision { f32, f64 };

struct TrainConfig {
  int steps = 512;
  int batch_size = 8;
  int packed_seq_len = 1024;  // retained for batch-packing compatibility; unused at desk scale
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int checkpoint_every = 50;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  bool use_teacher_cache = true;

  void validate() const {
    require(steps >= 1, "TrainConfig: steps must be >= 1");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(checkpoint_every >= 1, "TrainConfig: checkpoint_every must be >= 1");
    // learning_rate 0 is allowed so the null-optimizer contract stays testable.
    require(learning_rate >= 0.0, "TrainConfig: learning_rate must be >= 0");
  }

  optim::AdamConfig adam() const { return optim::AdamConfig{learning_rate, beta1, beta2, adam_eps}; }
};

struct MetricsRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double eval_ppl = std::numeric_limits<double>::quiet_NaN();
};

template <typename Real>
struct CheckpointSeries {
  std::string run_id;
  std::vector<std::pair<std::int64_t, cartridge::Cartridge<Real>>> snapshots;
  std::vector<MetricsRow> metrics;
};

namespace detail {

// Teacher logits at the masked predictor positions of one trace, decoded
// incrementally over the shared corpus cache.
template <typename Real>
std::vector<Real> teacher_logits_for_trace(const model::FrozenModel<Real>& m,
                                           const std::vector<model::LayerKVCache<Real>>& corpus_caches,
                                           const selfstudy::TraceRecord& trace,
                                           const std::vector<int>& masked_positions) {
  const int vocab = m.cfg.vocab_size;
  TokenSeq stream(trace.query);
  stream.insert(stream.end(), trace.continuation.begin(), trace.continuation.end());
  int last_needed = -1;
  for (int pos : masked_positions) {
    last_needed = std::max(last_needed, pos);
  }
  model::DecodeSession<Real> session(m, &corpus_caches);
  std::vector<std::vector<Real>> captured(static_cast<std::size_t>(last_needed + 1));
  for (int i = 0; i <= last_needed; ++i) {
    captured[static_cast<std::size_t>(i)] = session.step(stream[static_cast<std::size_t>(i)]);
  }
  std::vector<Real> out;
  out.reserve(masked_positions.size() * static_cast<std::size_t>(vocab));
  for (int pos : masked_positions) {
    const auto& row = captured[static_cast<std::size_t>(pos)];
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

template <typename Real>
std::vector<int> masked_predictors(const selfstudy::TraceRecord& trace) {
  require(!trace.query.empty(), "distill: trace query is empty");
  require(!trace.continuation.empty(), "distill: trace continuation is empty");
  require(trace.loss_mask.size() == trace.continuation.size(), "distill: mask length mismatch");
  std::vector<int> out;
  for (std::size_t j = 0; j < trace.continuation.size(); ++j) {
    if (trace.loss_mask[j]) {
      out.push_back(static_cast<int>(trace.query.size() + j) - 1);
    }
  }
  require(!out.empty(), "distill: loss mask selects no positions");
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Student perplexity: exp of the mean masked next-token NLL under the
// reference continuations.
template <typename Real>
double perplexity(const model::FrozenModel<Real>& m, const cartridge::Cartridge<Real>& cart,
                  const selfstudy::TraceDataset& eval_traces) {
  require(!eval_traces.empty(), "perplexity: no eval traces");
  const int vocab = m.cfg.vocab_size;
  double nll = 0.0;
  std::size_t count = 0;
  std::vector<double> lp(static_cast<std::size_t>(vocab));
  const auto prefix = cart.view();
  for (const auto& trace : eval_traces) {
    const auto positions = detail::masked_predictors<Real>(trace);
    TokenSeq stream(trace.query);
    stream.insert(stream.end(), trace.continuation.begin(), trace.continuation.end());
    const auto logits = model::forward_with_prefix(m, prefix, stream);
    for (int pos : positions) {
      std::span<const Real> row(logits.data() + static_cast<std::size_t>(pos) * vocab,
                                static_cast<std::size_t>(vocab));
      numerics::log_softmax(row, std::span<double>(lp));
      const auto target = stream[static_cast<std::size_t>(pos) + 1];
      nll -= lp[static_cast<std::size_t>(target)];
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

// The teacher's own perplexity on the same traces (full corpus in context).
template <typename Real>
double perplexity_full_context(const model::FrozenModel<Real>& m, std::span<const TokenId> corpus,
                               const selfstudy::TraceDataset& eval_traces) {
  require(!eval_traces.empty(), "perplexity: no eval traces");
  const int vocab = m.cfg.vocab_size;
  const auto base = model::forward_full(m, corpus);
  double nll = 0.0;
  std::size_t count = 0;
  std::vector<double> lp(static_cast<std::size_t>(vocab));
  for (const auto& trace : eval_traces) {
    const auto positions = detail::masked_predictors<Real>(trace);
    const auto teacher =
        detail::teacher_logits_for_trace<Real>(m, base.caches, trace, positions);
    TokenSeq stream(trace.query);
    stream.insert(stream.end(), trace.continuation.begin(), trace.continuation.end());
    for (std::size_t mi = 0; mi < positions.size(); ++mi) {
      std::span<const Real> row(teacher.data() + mi * static_cast<std::size_t>(vocab),
                                static_cast<std::size_t>(vocab));
      numerics::log_softmax(row, std::span<double>(lp));
      const auto target = stream[static_cast<std::size_t>(positions[mi]) + 1];
      nll -= lp[static_cast<std::size_t>(target)];
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

namespace detail {

inline nlohmann::json train_config_json(const TrainConfig& cfg) {
  return nlohmann::json{{"steps", cfg.steps},
                        {"batch_size", cfg.batch_size},
                        {"packed_seq_len", cfg.packed_seq_len},
                        {"learning_rate", cfg.learning_rate},
                        {"beta1", cfg.beta1},
                        {"beta2", cfg.beta2},
                        {"adam_eps", cfg.adam_eps},
                        {"checkpoint_every", cfg.checkpoint_every},
                        {"seed", cfg.seed},
                        {"precision", cfg.precision == Precision::f32 ? "f32" : "f64"},
                        {"use_teacher_cache", cfg.use_teacher_cache}};
}

inline std::string traces_digest(const selfstudy::TraceDataset& traces) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_tokens = [&](std::span<const TokenId> toks) {
    for (TokenId t : toks) {
      h ^= static_cast<std::uint8_t>(t & 0xff);
      h *= 0x100000001b3ULL;
    }
    h ^= 0xfe;
    h *= 0x100000001b3ULL;
  };
  for (const auto& rec : traces) {
    mix_tokens(rec.query);
    mix_tokens(rec.continuation);
    for (auto b : rec.loss_mask) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return hex64(h);
}

template <typename Real>
void persist_snapshot(const cartridge::Cartridge<Real>& cart, const std::filesystem::path& dir,
                      std::int64_t step, bool final_too) {
  char name[64];
  std::snprintf(name, sizeof(name), "cartridge-step-%06lld.crtg", static_cast<long long>(step));
  const auto as_f32 = cartridge::convert<float>(cart);
  serialize::save_cartridge(as_f32, dir / "checkpoints" / name);
  if (final_too) {
    serialize::save_cartridge(as_f32, dir / "final.crtg");
  }
}

}  // namespace detail

// The distillation loop. Per step: sample a batch with replacement, fetch
// teacher logits (memoized per trace unless disabled), take the masked mean
// KL and its exact gradients, and apply Adam to the cartridge planes only.
// Snapshots land at step 0, every checkpoint interval, and the final step.
template <typename Real>
CheckpointSeries<Real> distill_train(const model::FrozenModel<Real>& m,
                                     const cartridge::Cartridge<Real>& initial,
                                     std::span<const TokenId> corpus,
                                     const selfstudy::TraceDataset& dataset, const TrainConfig& cfg,
                                     const selfstudy::TraceDataset& eval_traces = {},
                                     const std::optional<std::filesystem::path>& run_dir = {}) {
  cfg.validate();
  require(!dataset.empty(), "distill_train: dataset is empty");
  initial.validate();
  require(initial.num_layers == m.cfg.num_layers && initial.num_heads == m.cfg.num_heads &&
              initial.head_dim == m.cfg.head_dim,
          "distill_train: cartridge does not match the model");

  CheckpointSeries<Real> series;
  {
    const std::string tag = std::to_string(cfg.seed) + ":" + detail::traces_digest(dataset) + ":" +
                            digest_tokens(corpus) + ":" + std::to_string(cfg.steps);
    series.run_id =
        "run-" + hex64(fnv1a64(std::span<const std::uint8_t>(
                     reinterpret_cast<const std::uint8_t*>(tag.data()), tag.size())));
  }

  // Per-trace masked predictor positions and (optionally memoized) teacher logits.
  std::vector<std::vector<int>> positions(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    positions[i] = detail::masked_predictors<Real>(dataset[i]);
  }
  const auto base = model::forward_full(m, corpus);
  std::vector<std::vector<Real>> teacher_cache(dataset.size());
  auto teacher_for = [&](std::size_t idx) -> std::vector<Real> {
    if (cfg.use_teacher_cache) {
      if (teacher_cache[idx].empty()) {
        teacher_cache[idx] =
            detail::teacher_logits_for_trace<Real>(m, base.caches, dataset[idx], positions[idx]);
      }
      return teacher_cache[idx];
    }
    return detail::teacher_logits_for_trace<Real>(m, base.caches, dataset[idx], positions[idx]);
  };

  cartridge::Cartridge<Real> cart = initial;
  const std::size_t plane = cart.plane_size();
  optim::AdamState adam(2 * plane);
  Rng batch_rng(cfg.seed);

  const auto record = [&](std::int64_t step, double loss) {
    MetricsRow row;
    row.step = step;
    row.loss = loss;
    if (!eval_traces.empty()) {
      row.eval_ppl = perplexity(m, cart, eval_traces);
    }
    series.metrics.push_back(row);
    auto snapshot = cart;
    snapshot.meta.training_steps = step;
    series.snapshots.emplace_back(step, std::move(snapshot));
    if (run_dir.has_value()) {
      detail::persist_snapshot(series.snapshots.back().second, *run_dir, step, step == cfg.steps);
    }
  };

  std::optional<double> step0_loss;
  cartridge::Cartridge<Real> last_finite = cart;  // pre-update state for divergence diagnostics
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<model::DistillItem<Real>> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = batch_rng.below(dataset.size());
      model::DistillItem<Real> item;
      item.tokens = dataset[idx].query;
      item.tokens.insert(item.tokens.end(), dataset[idx].continuation.begin(),
                         dataset[idx].continuation.end());
      item.masked_positions = positions[idx];
      item.teacher_logits = teacher_for(idx);
      batch.push_back(std::move(item));
    }

    const auto prefix = cart.view();
    auto res = model::distill_backward<Real>(m, prefix, batch);
    if (!std::isfinite(res.loss)) {
      // Snapshot the last finite parameters; the diverged ones are not
      // representable in the file format.
      last_finite.meta.training_steps = step - 1;
      if (run_dir.has_value()) {
        try {
          serialize::save_cartridge(cartridge::convert<float>(last_finite),
                                    *run_dir / "diagnostic-nan.crtg");
        } catch (const Error&) {
          // Best effort; the abort below carries the step either way.
        }
      }
      series.snapshots.emplace_back(step - 1, last_finite);
      throw NumericError("distill_train: non-finite loss at step " + std::to_string(step));
    }
    last_finite = cart;

    if (!step0_loss.has_value()) {
      step0_loss = res.loss;
      record(0, res.loss);
    }

    adam.begin_step();
    adam.update(0, std::span<Real>(cart.keys), std::span<const Real>(res.grads.keys), cfg.adam());
    adam.update(plane, std::span<Real>(cart.values), std::span<const Real>(res.grads.values),
                cfg.adam());
    cart.meta.training_steps = step;

    if (step % cfg.checkpoint_every == 0 || step == cfg.steps) {
      record(step, res.loss);
    }
  }

  if (run_dir.has_value()) {
    const auto& dir = *run_dir;
    std::filesystem::create_directories(dir);
    io::write_text(dir / "config.json", detail::train_config_json(cfg).dump(2) + "\n");
    std::string csv = "step,loss,ppl\n";
    for (const auto& row : series.metrics) {
      csv += std::to_string(row.step) + "," + detail::format_double(row.loss) + "," +
             detail::format_double(row.eval_ppl) + "\n";
    }
    io::write_text(dir / "metrics.csv", csv);
    nlohmann::json manifest{{"run_id", series.run_id},
                            {"seed", cfg.seed},
                            {"corpus_digest", digest_tokens(corpus)},
                            {"dataset_digest", detail::traces_digest(dataset)},
                            {"model_digest", model::weights_digest(m)},
                            {"train_config", detail::train_config_json(cfg)},
                            {"versions",
                             {{"model_format", serialize::kModelVersion},
                              {"cartridge_format", serialize::kCartridgeVersion}}}};
    io::write_text(dir / "RUN_MANIFEST.json", manifest.dump(2) + "\n");
  }
  return series;
}

// First recorded step whose eval perplexity reaches the threshold.
template <typename Real>
std::optional<std::int64_t> steps_to_threshold(const CheckpointSeries<Real>& series,
                                               double threshold) {
  bool any_ppl = false;
  for (const auto& row : series.metrics) {
    if (std::isfinite(row.eval_ppl)) {
      any_ppl = true;
      if (row.eval_ppl <= threshold) {
        return row.step;
      }
    }
  }
  require(any_ppl, "steps_to_threshold: metrics carry no eval perplexity");
  return std::nullopt;
}

}  // namespace clab::distill
