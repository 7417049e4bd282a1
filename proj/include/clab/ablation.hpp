// The two-task transfer experiment: train cartridges from a shared
// initializer, swap keys, evaluate baseline/trained/ablated on one task's
// eval set, and test the correctness overlap exactly.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clab/cartridge.hpp"
#include "clab/core.hpp"
#include "clab/distill.hpp"
#include "clab/io.hpp"
#include "clab/model.hpp"
#include "clab/numerics.hpp"
#include "clab/selfstudy.hpp"
#include "clab/stats.hpp"
#include "json.hpp"

namespace clab::ablation {

struct McScoring {
  // Mean per-token log-likelihood avoids length bias across options; the raw
  // sum is kept behind this flag.
  bool length_normalized = true;
};

struct McResult {
  double accuracy = 0.0;
  std::vector<std::uint8_t> correct;
};

// Likelihood-ranking evaluation: score each option by the student
// log-likelihood of its tokens given the question, predict the argmax,
// ties to the lowest option index.
template <typename Real>
McResult evaluate_mc(const model::FrozenModel<Real>& m, const cartridge::Cartridge<Real>* cart,
                     std::span<const selfstudy::EvalItem> items, McScoring scoring = {}) {
  require(!items.empty(), "evaluate_mc: no eval items");
  const int vocab = m.cfg.vocab_size;
  McResult res;
  res.correct.reserve(items.size());
  std::vector<double> lp(static_cast<std::size_t>(vocab));
  std::optional<model::PrefixKV<Real>> prefix;
  if (cart != nullptr) {
    prefix = cart->view();
  }
  for (const auto& item : items) {
    require(!item.question.empty(), "evaluate_mc: empty question");
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int o = 0; o < 5; ++o) {
      const auto& option = item.options[static_cast<std::size_t>(o)];
      require(!option.empty(), "evaluate_mc: empty option");
      TokenSeq stream(item.question);
      stream.insert(stream.end(), option.begin(), option.end());
      std::vector<Real> logits;
      if (prefix.has_value()) {
        logits = model::forward_with_prefix(m, *prefix, stream);
      } else {
        logits = model::forward_tokens(m, std::span<const TokenId>(stream),
                                       static_cast<const model::PrefixKV<Real>*>(nullptr), false)
                     .logits;
      }
      double score = 0.0;
      for (std::size_t j = 0; j < option.size(); ++j) {
        const std::size_t pos = item.question.size() + j - 1;
        std::span<const Real> row(logits.data() + pos * static_cast<std::size_t>(vocab),
                                  static_cast<std::size_t>(vocab));
        numerics::log_softmax(row, std::span<double>(lp));
        score += lp[static_cast<std::size_t>(option[j])];
      }
      if (scoring.length_normalized) {
        score /= static_cast<double>(option.size());
      }
      if (score > best_score) {
        best_score = score;
        best = o;
      }
    }
    res.correct.push_back(best == item.answer_index ? 1 : 0);
  }
  std::size_t hits = 0;
  for (auto c : res.correct) {
    hits += c;
  }
  res.accuracy = static_cast<double>(hits) / static_cast<double>(items.size());
  return res;
}

struct AblationReport {
  double acc_baseline = 0.0;
  double acc_trained = 0.0;
  double acc_ablated = 0.0;
  int n_eval = 0;
  std::vector<std::uint8_t> correct_baseline;
  std::vector<std::uint8_t> correct_trained;
  std::vector<std::uint8_t> correct_ablated;
  int overlap_count = 0;
  double overlap_p_value = 1.0;
  bool transferable = false;
  std::string run_id_a, run_id_b;
};

// Transferability is a pure function of the report's own fields.
inline bool is_transferable(double acc_ablated, double acc_baseline, double overlap_p) {
  return acc_ablated > acc_baseline && overlap_p < 0.05;
}

inline void write_report(const AblationReport& rep, const std::filesystem::path& dir);

struct SharedInitSpec {
  TokenSeq document;  // the fixed neutral initializer text
  int p = 64;
};

struct AblationConfig {
  selfstudy::TaskSpec task_a;
  selfstudy::TaskSpec task_b;
  std::uint64_t corpus_seed_a = 1;
  std::uint64_t corpus_seed_b = 2;
  int trace_count = 48;
  std::uint64_t trace_seed_a = 11;
  std::uint64_t trace_seed_b = 12;
  double temperature = 0.7;
  int max_continuation = 32;
  SharedInitSpec init;
  distill::TrainConfig train;
  int n_eval = 200;
  McScoring scoring;
};

template <typename Real>
AblationReport run_ablation(const model::FrozenModel<Real>& m, const AblationConfig& cfg,
                            const std::optional<std::filesystem::path>& out_dir = {}) {
  require(!cfg.init.document.empty(), "run_ablation: shared initializer document is empty");
  require(static_cast<int>(cfg.init.document.size()) >= cfg.init.p,
          "run_ablation: initializer document shorter than p");

  const auto bundle_a = selfstudy::make_corpus(cfg.task_a, cfg.corpus_seed_a);
  const auto bundle_b = selfstudy::make_corpus(cfg.task_b, cfg.corpus_seed_b);
  const auto traces_a = selfstudy::generate_traces(m, bundle_a.corpus, cfg.trace_count,
                                                   cfg.trace_seed_a, cfg.temperature,
                                                   cfg.max_continuation);
  const auto traces_b = selfstudy::generate_traces(m, bundle_b.corpus, cfg.trace_count,
                                                   cfg.trace_seed_b, cfg.temperature,
                                                   cfg.max_continuation);

  // Both tasks start from the identical neutral-document cartridge.
  const auto z0 = cartridge::init_first_k(m, cfg.init.document, cfg.init.p);

  std::optional<std::filesystem::path> dir_a, dir_b;
  if (out_dir.has_value()) {
    dir_a = *out_dir / "train_a";
    dir_b = *out_dir / "train_b";
  }
  const auto series_a =
      distill::distill_train(m, z0, bundle_a.corpus.tokens, traces_a, cfg.train, {}, dir_a);
  const auto series_b =
      distill::distill_train(m, z0, bundle_b.corpus.tokens, traces_b, cfg.train, {}, dir_b);
  const auto& z_a = series_a.snapshots.back().second;
  const auto& z_b = series_b.snapshots.back().second;
  const auto z_ab = cartridge::swap_keys(z_a, z_b);

  std::span<const selfstudy::EvalItem> eval(bundle_a.eval_items);
  if (static_cast<int>(eval.size()) > cfg.n_eval) {
    eval = eval.subspan(0, static_cast<std::size_t>(cfg.n_eval));
  }

  const auto baseline = evaluate_mc<Real>(m, nullptr, eval, cfg.scoring);
  const auto trained = evaluate_mc<Real>(m, &z_a, eval, cfg.scoring);
  const auto ablated = evaluate_mc<Real>(m, &z_ab, eval, cfg.scoring);

  AblationReport rep;
  rep.n_eval = static_cast<int>(eval.size());
  rep.acc_baseline = baseline.accuracy;
  rep.acc_trained = trained.accuracy;
  rep.acc_ablated = ablated.accuracy;
  rep.correct_baseline = baseline.correct;
  rep.correct_trained = trained.correct;
  rep.correct_ablated = ablated.correct;
  std::int64_t n_train = 0, n_ablated = 0, overlap = 0;
  for (std::size_t i = 0; i < trained.correct.size(); ++i) {
    n_train += trained.correct[i];
    n_ablated += ablated.correct[i];
    overlap += trained.correct[i] & ablated.correct[i];
  }
  rep.overlap_count = static_cast<int>(overlap);
  rep.overlap_p_value = stats::hypergeom_sf(rep.n_eval, n_train, n_ablated, overlap);
  rep.transferable = is_transferable(rep.acc_ablated, rep.acc_baseline, rep.overlap_p_value);
  rep.run_id_a = series_a.run_id;
  rep.run_id_b = series_b.run_id;

  if (out_dir.has_value()) {
    write_report(rep, *out_dir);
  }
  return rep;
}

inline nlohmann::json report_json(const AblationReport& rep) {
  auto bools = [](const std::vector<std::uint8_t>& v) {
    std::vector<bool> out(v.begin(), v.end());
    return out;
  };
  return nlohmann::json{{"acc_baseline", rep.acc_baseline},
                        {"acc_trained", rep.acc_trained},
                        {"acc_ablated", rep.acc_ablated},
                        {"n_eval", rep.n_eval},
                        {"correct_baseline", bools(rep.correct_baseline)},
                        {"correct_trained", bools(rep.correct_trained)},
                        {"correct_ablated", bools(rep.correct_ablated)},
                        {"overlap_count", rep.overlap_count},
                        {"overlap_p_value", rep.overlap_p_value},
                        {"transferable", rep.transferable},
                        {"run_manifest_a", "train_a/RUN_MANIFEST.json"},
                        {"run_manifest_b", "train_b/RUN_MANIFEST.json"},
                        {"run_id_a", rep.run_id_a},
                        {"run_id_b", rep.run_id_b}};
}

inline void write_report(const AblationReport& rep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_text(dir / "ablation_report.json", report_json(rep).dump(2) + "\n");
  std::string csv = "question,baseline,trained,ablated\n";
  for (std::size_t i = 0; i < rep.correct_trained.size(); ++i) {
    csv += std::to_string(i) + "," + std::to_string(rep.correct_baseline[i]) + "," +
           std::to_string(rep.correct_trained[i]) + "," + std::to_string(rep.correct_ablated[i]) +
           "\n";
  }
  io::write_text(dir / "correctness.csv", csv);
}

}  // namespace clab::ablation
