#include <cmath>
#include <filesystem>

#include "clab/ablation.hpp"
#include "doctest.h"

using namespace clab;
using namespace clab::ablation;
using clab::selfstudy::EvalItem;
using clab::selfstudy::TaskSpec;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.head_dim = 8;
  cfg.model_dim = 16;
  cfg.vocab_size = 256;
  cfg.max_positions = 1024;
  cfg.mlp_hidden = 32;
  return cfg;
}

model::FrozenModel<float> uniform_model() {
  auto m = model::random_model<float>(small_config(), 9);
  for (auto& v : m.out_proj) {
    v = 0.0f;
  }
  return m;
}

TokenSeq neutral_document(std::size_t len) {
  // A fixed pseudo-text: printable bytes with mild periodic structure.
  TokenSeq doc(len);
  for (std::size_t i = 0; i < len; ++i) {
    doc[i] = static_cast<TokenId>(32 + (i * 7 + i / 13) % 90);
  }
  return doc;
}

AblationConfig quick_ablation() {
  AblationConfig cfg;
  cfg.task_a = TaskSpec{"records", 4, 2, 20, 100000};
  cfg.task_b = TaskSpec{"filings", 4, 2, 20, 100000};
  cfg.trace_count = 6;
  cfg.max_continuation = 8;
  cfg.init.document = neutral_document(64);
  cfg.init.p = 8;
  cfg.train.steps = 3;
  cfg.train.batch_size = 2;
  cfg.train.checkpoint_every = 3;
  cfg.train.seed = 5;
  cfg.n_eval = 8;
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("ablation");

TEST_CASE("evaluate_mc: uniform logits land near chance on 500 seeded items") {
  const auto m = uniform_model();
  TaskSpec spec{"records", 25, 20, 60, 100000};
  const auto bundle = selfstudy::make_corpus(spec, 77);
  REQUIRE(bundle.eval_items.size() == 500);
  const auto res = evaluate_mc<float>(m, nullptr, bundle.eval_items);
  CHECK(res.accuracy >= 0.15);
  CHECK(res.accuracy <= 0.25);
}

TEST_CASE("evaluate_mc: ranks by likelihood, validated by an independent scorer") {
  const auto m = model::random_model<float>(small_config(), 33);
  TaskSpec spec{"records", 5, 2, 30, 100000};
  auto bundle = selfstudy::make_corpus(spec, 3);
  auto item = bundle.eval_items[0];

  // Independent scoring route: full forward, manual log-prob accumulation.
  std::vector<double> scores(5);
  for (int o = 0; o < 5; ++o) {
    TokenSeq stream(item.question);
    const auto& opt = item.options[static_cast<std::size_t>(o)];
    stream.insert(stream.end(), opt.begin(), opt.end());
    const auto full = model::forward_full(m, stream);
    std::vector<double> lp(256);
    double s = 0.0;
    for (std::size_t j = 0; j < opt.size(); ++j) {
      std::span<const float> row(full.logits.data() + (item.question.size() + j - 1) * 256, 256);
      numerics::log_softmax(row, std::span<double>(lp));
      s += lp[static_cast<std::size_t>(opt[j])];
    }
    scores[static_cast<std::size_t>(o)] = s / static_cast<double>(opt.size());
  }
  const int oracle_best =
      static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());

  // With the answer at the oracle argmax the item must score correct.
  item.answer_index = oracle_best;
  const auto res = evaluate_mc<float>(m, nullptr, std::span<const EvalItem>(&item, 1));
  CHECK(res.accuracy == 1.0);
  // And with the answer anywhere else, incorrect.
  item.answer_index = (oracle_best + 1) % 5;
  const auto res2 = evaluate_mc<float>(m, nullptr, std::span<const EvalItem>(&item, 1));
  CHECK(res2.accuracy == 0.0);
}

TEST_CASE("evaluate_mc: deterministic, ties break to the lowest index") {
  const auto m = uniform_model();
  TaskSpec spec{"records", 4, 3, 20, 100000};
  const auto bundle = selfstudy::make_corpus(spec, 12);
  const auto a = evaluate_mc<float>(m, nullptr, bundle.eval_items);
  const auto b = evaluate_mc<float>(m, nullptr, bundle.eval_items);
  CHECK(a.correct == b.correct);
  // All options tie under uniform logits, so the prediction is always index 0.
  for (std::size_t i = 0; i < bundle.eval_items.size(); ++i) {
    CHECK(a.correct[i] == (bundle.eval_items[i].answer_index == 0 ? 1 : 0));
  }
}

TEST_CASE("run_ablation: degenerate same-task swap reproduces the trained condition") {
  const auto m = model::random_model<float>(small_config(), 41);
  auto cfg = quick_ablation();
  cfg.task_b = cfg.task_a;
  cfg.corpus_seed_b = cfg.corpus_seed_a;
  cfg.trace_seed_b = cfg.trace_seed_a;
  const auto rep = run_ablation(m, cfg);
  CHECK(rep.acc_ablated == rep.acc_trained);
  CHECK(rep.correct_ablated == rep.correct_trained);
  // Full overlap makes the tail probability minimal for these margins.
  std::int64_t n_train = 0;
  for (auto c : rep.correct_trained) {
    n_train += c;
  }
  CHECK(rep.overlap_count == static_cast<int>(n_train));
}

TEST_CASE("run_ablation: report fields are internally consistent") {
  const auto m = model::random_model<float>(small_config(), 42);
  const auto dir = std::filesystem::temp_directory_path() / "clab-tests" / "ablate";
  std::filesystem::remove_all(dir);
  const auto rep = run_ablation(m, quick_ablation(), dir);

  auto recompute = [](const std::vector<std::uint8_t>& v) {
    double acc = 0.0;
    for (auto c : v) {
      acc += c;
    }
    return acc / static_cast<double>(v.size());
  };
  CHECK(rep.acc_baseline == recompute(rep.correct_baseline));
  CHECK(rep.acc_trained == recompute(rep.correct_trained));
  CHECK(rep.acc_ablated == recompute(rep.correct_ablated));
  CHECK(rep.n_eval == static_cast<int>(rep.correct_trained.size()));

  std::int64_t overlap = 0, n_train = 0, n_abl = 0;
  for (std::size_t i = 0; i < rep.correct_trained.size(); ++i) {
    n_train += rep.correct_trained[i];
    n_abl += rep.correct_ablated[i];
    overlap += rep.correct_trained[i] & rep.correct_ablated[i];
  }
  CHECK(rep.overlap_count == static_cast<int>(overlap));
  CHECK(rep.overlap_count <= std::min(n_train, n_abl));
  CHECK(rep.overlap_p_value ==
        stats::hypergeom_sf(rep.n_eval, n_train, n_abl, overlap));
  CHECK(rep.transferable == is_transferable(rep.acc_ablated, rep.acc_baseline, rep.overlap_p_value));

  CHECK(std::filesystem::exists(dir / "ablation_report.json"));
  CHECK(std::filesystem::exists(dir / "correctness.csv"));
  CHECK(std::filesystem::exists(dir / "train_a" / "RUN_MANIFEST.json"));
  CHECK(std::filesystem::exists(dir / "train_b" / "RUN_MANIFEST.json"));
}

TEST_CASE("run_ablation: trained accuracy is independent of task B") {
  const auto m = model::random_model<float>(small_config(), 43);
  auto cfg = quick_ablation();
  const auto rep1 = run_ablation(m, cfg);
  cfg.corpus_seed_b = 99;
  cfg.trace_seed_b = 98;
  const auto rep2 = run_ablation(m, cfg);
  CHECK(rep1.acc_trained == rep2.acc_trained);
  CHECK(rep1.correct_trained == rep2.correct_trained);
}

TEST_SUITE_END();
