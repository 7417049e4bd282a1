// Acceptance suite: one pass/fail line per criterion, exit code = number of
// failed criteria.
//
// Shared artifacts (the pre-trained toy model, corpora, trace sets) are built
// once in a cache directory keyed by the fixture digest, so partial reruns
// with --only reuse prior work. --keep preserves the cache across runs.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "clab/ablation.hpp"
#include "clab/analysis.hpp"
#include "clab/cartridge.hpp"
#include "clab/cli.hpp"
#include "clab/dataset_io.hpp"
#include "clab/distill.hpp"
#include "clab/model.hpp"
#include "clab/selfstudy.hpp"
#include "clab/serialize.hpp"
#include "clab/stats.hpp"
#include "oracles.hpp"

using namespace clab;
namespace fs = std::filesystem;

namespace {

// ---- pinned fixtures --------------------------------------------------

struct Fixtures {
  // Toy model (desk-scale default) and its pre-training. The pre-training
  // documents are small record sets with verbatim line repeats, which teaches
  // the in-context lookup the cartridge experiments rely on.
  model::ModelConfig toy;  // defaults: L=4 h=4 dh=16 d=64 V=256 maxpos=2048 F=256
  std::uint64_t model_seed = 9000;
  int pretrain_steps = 600;
  int pretrain_batch = 8;
  int pretrain_docs = 256;
  double pretrain_lr = 3e-3;
  std::uint64_t pretrain_seed = 9001;

  // Records task shared by the training-dynamics and convergence criteria.
  selfstudy::TaskSpec records{"records", 8, 6, 40, 100000};
  std::uint64_t records_seed = 101;
  int trace_count = 48;
  std::uint64_t trace_seed = 201;
  double trace_temperature = 0.7;
  int trace_max_len = 24;
  int eval_trace_count = 12;
  std::uint64_t eval_trace_seed = 202;

  // Criterion 5: training-dynamics run.
  int c5_p = 64;
  int c5_steps = 500;
  int c5_batch = 8;
  double c5_lr = 1e-2;
  int c5_checkpoint = 50;
  std::uint64_t c5_seed = 301;

  // Criterion 6: ablation harness.
  selfstudy::TaskSpec abl_task_a{"records", 6, 4, 30, 100000};
  selfstudy::TaskSpec abl_task_b{"filings", 6, 4, 30, 100000};
  std::uint64_t abl_corpus_seed_a = 501, abl_corpus_seed_b = 502;
  int abl_trace_count = 32;
  std::uint64_t abl_trace_seed_a = 511, abl_trace_seed_b = 512;
  int abl_max_len = 16;
  int abl_p = 48;
  int abl_steps = 150;
  int abl_batch = 8;
  double abl_lr = 1e-2;
  std::uint64_t abl_train_seed = 601;

  // Criterion 7: convergence race. The chunk size is the diversity-tradeoff
  // midpoint of the toy-scale sweep (the paper's c=64 plays that role at its
  // scale); the threshold comes from the pilot trajectories of this exact
  // setup and is applied via the same configurable flag the CLI exposes.
  int c7_p = 32;
  int c7_chunk = 8;
  int c7_seeds = 10;
  std::uint64_t c7_seed_base = 401;
  int c7_steps = 160;
  int c7_batch = 8;
  double c7_lr = 1e-2;
  int c7_checkpoint = 5;
  double c7_threshold = 1.60;

  std::string digest() const {
    std::string s = std::to_string(model_seed) + ":" + std::to_string(pretrain_steps) + ":" +
                    std::to_string(pretrain_docs) + ":" + std::to_string(records_seed) + ":" +
                    std::to_string(trace_seed) + ":" + std::to_string(c5_steps) + ":" +
                    std::to_string(c5_p) + ":" + std::to_string(c7_threshold) + ":" +
                    std::to_string(c7_steps);
    return hex64(fnv1a64(std::span<const std::uint8_t>(
               reinterpret_cast<const std::uint8_t*>(s.data()), s.size())))
        .substr(0, 8);
  }
};

const Fixtures FX;

struct CriterionResult {
  bool pass = false;
  std::string detail;
};

double now_seconds() {
  using clock = std::chrono::steady_clock;
  static const auto t0 = clock::now();
  return std::chrono::duration<double>(clock::now() - t0).count();
}

// ---- shared artifacts ---------------------------------------------------

class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  const fs::path& root() const { return root_; }

  const model::FrozenModel<float>& toy_model() {
    if (!model_.has_value()) {
      const auto path = root_ / "toy-model.clab";
      if (fs::exists(path)) {
        model_ = serialize::load_model(path);
      } else {
        std::fprintf(stderr, "[setup] pre-training the toy model (%d steps)\n", FX.pretrain_steps);
        auto m = model::random_model<float>(FX.toy, FX.model_seed);
        const auto docs = selfstudy::make_pretrain_docs(FX.pretrain_docs, FX.pretrain_seed);
        optim::AdamConfig adam;
        adam.learning_rate = FX.pretrain_lr;
        model::Pretrainer<float> trainer(m, adam);
        Rng rng(derive_seed(FX.pretrain_seed, 1));
        for (int step = 1; step <= FX.pretrain_steps; ++step) {
          std::vector<TokenSeq> batch;
          for (int b = 0; b < FX.pretrain_batch; ++b) {
            batch.push_back(docs[rng.below(docs.size())]);
          }
          const double loss = trainer.step(batch);
          if (step % 100 == 0 || step == 1 || step == FX.pretrain_steps) {
            std::fprintf(stderr, "[setup] pretrain step %d loss %.4f (t=%.0fs)\n", step, loss,
                         now_seconds());
          }
        }
        serialize::save_model(m, path);
        model_ = std::move(m);
      }
    }
    return *model_;
  }

  const selfstudy::CorpusBundle& records() {
    if (!records_.has_value()) {
      records_ = selfstudy::make_corpus(FX.records, FX.records_seed);
    }
    return *records_;
  }

  const selfstudy::TraceDataset& traces() {
    if (!traces_.has_value()) {
      const auto path = root_ / "records-traces.jsonl";
      if (fs::exists(path)) {
        traces_ = dataset_io::load_traces(path);
      } else {
        std::fprintf(stderr, "[setup] sampling %d teacher traces\n", FX.trace_count);
        traces_ = selfstudy::generate_traces(toy_model(), records().corpus, FX.trace_count,
                                             FX.trace_seed, FX.trace_temperature, FX.trace_max_len);
        dataset_io::save_traces(*traces_, path);
      }
    }
    return *traces_;
  }

  const selfstudy::TraceDataset& eval_traces() {
    if (!eval_traces_.has_value()) {
      const auto path = root_ / "records-eval-traces.jsonl";
      if (fs::exists(path)) {
        eval_traces_ = dataset_io::load_traces(path);
      } else {
        eval_traces_ = selfstudy::generate_traces(toy_model(), records().corpus,
                                                  FX.eval_trace_count, FX.eval_trace_seed, 0.0,
                                                  FX.trace_max_len);
        dataset_io::save_traces(*eval_traces_, path);
      }
    }
    return *eval_traces_;
  }

  // The criterion-5 run is reused for its rotation/spectra assertions.
  const distill::CheckpointSeries<float>& dynamics_run() {
    if (!dynamics_.has_value()) {
      const auto& m = toy_model();
      const auto init = cartridge::init_first_k(m, records().corpus.tokens, FX.c5_p);
      distill::TrainConfig cfg;
      cfg.steps = FX.c5_steps;
      cfg.batch_size = FX.c5_batch;
      cfg.learning_rate = FX.c5_lr;
      cfg.checkpoint_every = FX.c5_checkpoint;
      cfg.seed = FX.c5_seed;
      std::fprintf(stderr, "[setup] training-dynamics run (%d steps, t=%.0fs)\n", FX.c5_steps,
                   now_seconds());
      dynamics_ = distill::distill_train(m, init, records().corpus.tokens, traces(), cfg,
                                         eval_traces(), root_ / "dynamics-run");
      std::fprintf(stderr, "[setup] training-dynamics run done (t=%.0fs)\n", now_seconds());
    }
    return *dynamics_;
  }

 private:
  fs::path root_;
  std::optional<model::FrozenModel<float>> model_;
  std::optional<selfstudy::CorpusBundle> records_;
  std::optional<selfstudy::TraceDataset> traces_;
  std::optional<selfstudy::TraceDataset> eval_traces_;
  std::optional<distill::CheckpointSeries<float>> dynamics_;
};

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// ---- criteria ------------------------------------------------------------

// 1. Table 1 statistics replication, as specified.
CriterionResult criterion_1(Workspace&) {
  CriterionResult res;
  const double p1 = stats::hypergeom_sf(200, 76, 68, 34);
  const double p2 = stats::hypergeom_sf(200, 60, 57, 28);
  const double p3 = stats::hypergeom_sf(200, 71, 57, 40);
  const bool r1 = p1 >= 0.0151 && p1 <= 0.0161;
  const bool r2 = p2 >= 0.0001 && p2 <= 0.0005;
  const bool r3 = p3 < 1e-4;
  res.pass = r1 && r2 && r3;
  res.detail = "p(200,76,68,34)=" + fmt(p1) + (r1 ? " in" : " NOT in") + " [0.0151,0.0161]";
  if (!r1) {
    res.detail +=
        " (exact upper tail of the printed counts; the source table prints 0.0156, which no exact "
        "tail of these margins reproduces - the two-sided Fisher value is 0.014184)";
  }
  res.detail += "; p(200,60,57,28)=" + fmt(p2) + (r2 ? " in" : " NOT in") + " [0.0001,0.0005]" +
                "; p(200,71,57,40)=" + fmt(p3) + (r3 ? " <" : " NOT <") + " 1e-4";
  return res;
}

// 2. Teacher-equivalence oracle on five seeded triples.
CriterionResult criterion_2(Workspace&) {
  CriterionResult res;
  const int corpus_lens[5] = {48, 96, 192, 384, 512};
  double worst_logit = 0.0, worst_kl = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = model::random_model<float>(FX.toy, 1000 + static_cast<std::uint64_t>(trial));
    Rng rng(2000 + static_cast<std::uint64_t>(trial));
    TokenSeq corpus(static_cast<std::size_t>(corpus_lens[trial]));
    for (auto& t : corpus) {
      t = static_cast<TokenId>(rng.below(256));
    }
    TokenSeq query(8 + trial * 2);
    for (auto& t : query) {
      t = static_cast<TokenId>(rng.below(256));
    }
    const auto cart = cartridge::init_first_k(m, corpus, static_cast<int>(corpus.size()));
    TokenSeq joined(corpus);
    joined.insert(joined.end(), query.begin(), query.end());
    const auto full = model::forward_full(m, joined);
    const auto view = cart.view();
    const auto student = model::forward_with_prefix(m, view, query);
    for (std::size_t i = 0; i < query.size(); ++i) {
      std::span<const float> a(full.logits.data() + (corpus.size() + i) * 256, 256);
      std::span<const float> b(student.data() + i * 256, 256);
      for (int v = 0; v < 256; ++v) {
        worst_logit = std::max(worst_logit, static_cast<double>(std::abs(a[static_cast<std::size_t>(v)] -
                                                                         b[static_cast<std::size_t>(v)])));
      }
      worst_kl = std::max(worst_kl, numerics::kl_divergence(a, b));
    }
  }
  res.pass = worst_logit < 1e-4 && worst_kl < 1e-8;
  res.detail = "max |logit diff| = " + fmt(worst_logit) + " (< 1e-4), max KL = " + fmt(worst_kl) +
               " (< 1e-8) over 5 triples";
  return res;
}

// 3. Gradient correctness: >= 20 key and 20 value entries per layer, 64-bit
// central differences, step 1e-5.
CriterionResult criterion_3(Workspace&) {
  CriterionResult res;
  const auto m = model::random_model<double>(FX.toy, 3001);
  Rng rng(3002);
  TokenSeq corpus(24);
  for (auto& t : corpus) {
    t = static_cast<TokenId>(rng.below(256));
  }
  auto cart = cartridge::init_first_k(m, corpus, 6);

  model::DistillItem<double> item;
  item.tokens.resize(10);
  for (auto& t : item.tokens) {
    t = static_cast<TokenId>(rng.below(256));
  }
  for (int i = 3; i < 10; ++i) {
    item.masked_positions.push_back(i);
  }
  Rng trng(3003);
  for (std::size_t k = 0; k < item.masked_positions.size() * 256; ++k) {
    item.teacher_logits.push_back(trng.gaussian());
  }

  auto loss_of = [&]() {
    const int vocab = 256;
    const auto view = cart.view();
    const auto logits = model::forward_with_prefix(m, view, item.tokens);
    double loss = 0.0;
    for (std::size_t mi = 0; mi < item.masked_positions.size(); ++mi) {
      std::span<const double> t(item.teacher_logits.data() + mi * vocab, 256);
      std::span<const double> s(logits.data() + static_cast<std::size_t>(item.masked_positions[mi]) * vocab,
                                256);
      loss += numerics::kl_divergence(t, s);
    }
    return loss / static_cast<double>(item.masked_positions.size());
  };

  const auto view = cart.view();
  const auto grad = model::distill_backward<double>(m, view, std::span<const model::DistillItem<double>>(&item, 1));

  const double step = 1e-5;
  double worst_rel = 0.0;
  int checked = 0;
  for (int layer = 0; layer < FX.toy.num_layers; ++layer) {
    for (int role = 0; role < 2; ++role) {
      auto& plane = role == 0 ? cart.keys : cart.values;
      const auto& gplane = role == 0 ? grad.grads.keys : grad.grads.values;
      const std::size_t layer_size = static_cast<std::size_t>(FX.toy.num_heads) * 6 * FX.toy.head_dim;
      for (int probe = 0; probe < 20; ++probe) {
        const std::size_t idx = static_cast<std::size_t>(layer) * layer_size + rng.below(layer_size);
        const double saved = plane[idx];
        plane[idx] = saved + step;
        const double up = loss_of();
        plane[idx] = saved - step;
        const double down = loss_of();
        plane[idx] = saved;
        const double fd = (up - down) / (2.0 * step);
        const double an = gplane[idx];
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        worst_rel = std::max(worst_rel, rel);
        ++checked;
      }
    }
  }
  res.pass = worst_rel < 1e-4 && checked == FX.toy.num_layers * 2 * 20;
  res.detail = "worst relative error " + fmt(worst_rel) + " (< 1e-4) over " +
               std::to_string(checked) + " key+value entries (20 per role per layer)";
  return res;
}

// 4. SVD oracle on 50 seeded matrices plus normalized-spectrum shape.
CriterionResult criterion_4(Workspace&) {
  CriterionResult res;
  Rng rng(4001);
  double worst_rel = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 2 + rng.below(60);
    const std::size_t cols = 1 + rng.below(16);
    numerics::Matrix<double> m(rows, cols);
    for (auto& v : m.data) {
      v = rng.gaussian();
    }
    const auto got = numerics::svd_values(m);
    const auto want = oracles::gram_singular_values(m.data, rows, cols);
    for (std::size_t i = 0; i < got.size(); ++i) {
      const double denom = std::max(want[i], 1e-9);
      worst_rel = std::max(worst_rel, std::abs(got[i] - want[i]) / denom);
    }
  }
  const auto cart = cartridge::init_rvi<float>(FX.toy, 32, 4002);
  bool shape_ok = true;
  for (auto role : {analysis::Role::keys, analysis::Role::values}) {
    const auto s = analysis::spectral_summary(cart, role, FX.toy.head_dim);
    shape_ok = shape_ok && std::abs(s.center[0] - 1.0) < 1e-9;
    for (std::size_t i = 1; i < s.center.size(); ++i) {
      shape_ok = shape_ok && s.center[i] <= s.center[i - 1] + 1e-12;
    }
  }
  res.pass = worst_rel < 1e-6 && shape_ok;
  res.detail = "worst rel error vs Gram oracle " + fmt(worst_rel) + " (< 1e-6) over 50 matrices; " +
               std::string(shape_ok ? "normalized spectra non-increasing with leading 1"
                                    : "SPECTRUM SHAPE VIOLATION");
  return res;
}

// 5. Training-dynamics trend after >= 500 distillation steps.
CriterionResult criterion_5(Workspace& ws) {
  CriterionResult res;
  const auto& series = ws.dynamics_run();

  const std::span<const std::pair<std::int64_t, cartridge::Cartridge<float>>> cps(series.snapshots);
  const auto rotations = analysis::rotation_series(cps);
  double key_rot = 0.0, value_rot = 0.0;
  std::size_t nk = 0, nv = 0;
  for (const auto& e : rotations.entries) {
    if (e.role == analysis::Role::keys) {
      key_rot += e.mean_rotation;
      ++nk;
    } else {
      value_rot += e.mean_rotation;
      ++nv;
    }
  }
  key_rot /= static_cast<double>(nk);
  value_rot /= static_cast<double>(nv);
  const bool rot_ok = value_rot > key_rot;

  const auto& initial = series.snapshots.front().second;
  const auto& final_cart = series.snapshots.back().second;
  auto spectral_shift = [&](analysis::Role role) {
    const auto a = analysis::spectral_summary(initial, role, FX.toy.head_dim);
    const auto b = analysis::spectral_summary(final_cart, role, FX.toy.head_dim);
    double l2 = 0.0;
    for (std::size_t i = 0; i < a.center.size(); ++i) {
      l2 += (a.center[i] - b.center[i]) * (a.center[i] - b.center[i]);
    }
    return std::sqrt(l2);
  };
  const double key_shift = spectral_shift(analysis::Role::keys);
  const double value_shift = spectral_shift(analysis::Role::values);
  const bool spec_ok = value_shift > key_shift;

  // The distillation example pinned alongside the run: smoothed loss at step
  // 200 under half the step-0 loss.
  double loss200 = 0.0;
  int n200 = 0;
  for (const auto& row : series.metrics) {
    if (row.step > 100 && row.step <= 200) {
      loss200 += row.loss;
      ++n200;
    }
  }
  loss200 /= std::max(n200, 1);
  const double loss0 = series.metrics.front().loss;
  const bool loss_ok = loss200 < 0.5 * loss0;

  res.pass = rot_ok && spec_ok && loss_ok;
  res.detail = "value rotation " + fmt(value_rot) + " vs key rotation " + fmt(key_rot) +
               (rot_ok ? " (value > key, ratio " + fmt(value_rot / std::max(key_rot, 1e-300)) + ")"
                       : " (DIRECTION VIOLATED)") +
               "; value spectral shift " + fmt(value_shift) + " vs key " + fmt(key_shift) +
               (spec_ok ? " (value > key)" : " (DIRECTION VIOLATED)") + "; smoothed loss@200 " +
               fmt(loss200) + " vs 0.5*step0 " + fmt(0.5 * loss0) + (loss_ok ? "" : " (NOT HALVED)");
  return res;
}

// 6. Ablation harness consistency.
CriterionResult criterion_6(Workspace& ws) {
  CriterionResult res;
  const auto& m = ws.toy_model();

  ablation::AblationConfig cfg;
  cfg.task_a = FX.abl_task_a;
  cfg.task_b = FX.abl_task_b;
  cfg.corpus_seed_a = FX.abl_corpus_seed_a;
  cfg.corpus_seed_b = FX.abl_corpus_seed_b;
  cfg.trace_count = FX.abl_trace_count;
  cfg.trace_seed_a = FX.abl_trace_seed_a;
  cfg.trace_seed_b = FX.abl_trace_seed_b;
  cfg.max_continuation = FX.abl_max_len;
  cfg.init.p = FX.abl_p;
  cfg.init.document = cli::detail::load_corpus_tokens_file(fs::path(CLAB_ASSETS_DIR) /
                                                           "shared_initializer.txt");
  cfg.train.steps = FX.abl_steps;
  cfg.train.batch_size = FX.abl_batch;
  cfg.train.learning_rate = FX.abl_lr;
  cfg.train.checkpoint_every = FX.abl_steps;
  cfg.train.seed = FX.abl_train_seed;
  cfg.n_eval = 200;
  std::fprintf(stderr, "[setup] two-task ablation (%d steps each, t=%.0fs)\n", FX.abl_steps,
               now_seconds());
  const auto rep = ablation::run_ablation(m, cfg, ws.root() / "ablation");

  auto recompute = [](const std::vector<std::uint8_t>& v) {
    double acc = 0.0;
    for (auto c : v) {
      acc += c;
    }
    return acc / static_cast<double>(v.size());
  };
  const bool consistent = rep.acc_trained == recompute(rep.correct_trained) &&
                          rep.acc_ablated == recompute(rep.correct_ablated) &&
                          rep.acc_baseline == recompute(rep.correct_baseline) &&
                          rep.n_eval == static_cast<int>(rep.correct_trained.size());

  // Degenerate same-task swap: keys of A into values of A.
  const auto bundle_a = selfstudy::make_corpus(cfg.task_a, cfg.corpus_seed_a);
  const auto traces_a = selfstudy::generate_traces(m, bundle_a.corpus, cfg.trace_count,
                                                   cfg.trace_seed_a, cfg.temperature,
                                                   cfg.max_continuation);
  const auto z0 = cartridge::init_first_k(m, cfg.init.document, cfg.init.p);
  const auto series_a =
      distill::distill_train(m, z0, bundle_a.corpus.tokens, traces_a, cfg.train);
  const auto& z_a = series_a.snapshots.back().second;
  const auto z_aa = cartridge::swap_keys(z_a, z_a);
  std::span<const selfstudy::EvalItem> eval_a(bundle_a.eval_items);
  const auto trained_eval = ablation::evaluate_mc<float>(m, &z_a, eval_a);
  const auto swapped_eval = ablation::evaluate_mc<float>(m, &z_aa, eval_a);
  const bool degenerate_ok = trained_eval.accuracy == swapped_eval.accuracy &&
                             trained_eval.correct == swapped_eval.correct;

  // Uniform-logit baseline over 500 seeded items.
  auto uniform = model::random_model<float>(FX.toy, 6001);
  for (auto& v : uniform.out_proj) {
    v = 0.0f;
  }
  const auto big = selfstudy::make_corpus(selfstudy::TaskSpec{"records", 25, 20, 60, 100000}, 503);
  const auto base_eval = ablation::evaluate_mc<float>(uniform, nullptr, big.eval_items);
  const bool chance_ok = base_eval.accuracy >= 0.15 && base_eval.accuracy <= 0.25 &&
                         big.eval_items.size() == 500;

  res.pass = consistent && degenerate_ok && chance_ok;
  res.detail = std::string(consistent ? "report recomputable" : "REPORT INCONSISTENT") +
               "; same-task swap acc " + fmt(swapped_eval.accuracy) +
               (degenerate_ok ? " == trained exactly" : " != TRAINED") + "; uniform baseline " +
               fmt(base_eval.accuracy) + (chance_ok ? " in [0.15,0.25]" : " OUT OF [0.15,0.25]") +
               " | reported: baseline " + fmt(rep.acc_baseline) + ", trained " +
               fmt(rep.acc_trained) + ", ablated " + fmt(rep.acc_ablated) + ", overlap p " +
               fmt(rep.overlap_p_value) + ", transferable " + (rep.transferable ? "yes" : "no");
  return res;
}

// 7. Convergence experiment machinery over 10 seeds.
CriterionResult criterion_7(Workspace& ws) {
  CriterionResult res;
  const auto& m = ws.toy_model();
  const auto dir = ws.root() / "convergence";
  fs::create_directories(dir);

  distill::TrainConfig cfg;
  cfg.steps = FX.c7_steps;
  cfg.batch_size = FX.c7_batch;
  cfg.learning_rate = FX.c7_lr;
  cfg.checkpoint_every = FX.c7_checkpoint;
  std::fprintf(stderr, "[setup] convergence race: %d seeds x 2 schemes x %d steps (t=%.0fs)\n",
               FX.c7_seeds, FX.c7_steps, now_seconds());
  selfstudy::CorpusBundle bundle;
  bundle.corpus = ws.records().corpus;
  const auto outcome = cli::detail::run_convergence(m, bundle, ws.traces(), ws.eval_traces(),
                                                    FX.c7_seeds, FX.c7_seed_base, FX.c7_threshold,
                                                    FX.c7_p, FX.c7_chunk, cfg, false, dir);

  std::vector<double> sci, fk;
  for (std::size_t i = 0; i < outcome.sci_steps.size(); ++i) {
    if (outcome.sci_steps[i].has_value() && outcome.first_k_steps[i].has_value()) {
      sci.push_back(static_cast<double>(*outcome.sci_steps[i]));
      fk.push_back(static_cast<double>(*outcome.first_k_steps[i]));
    }
  }
  if (sci.size() < 2 || outcome.ttest.value("abstained", true)) {
    res.pass = false;
    res.detail = "pipeline abstained: only " + std::to_string(sci.size()) +
                 " usable pairs at threshold " + fmt(FX.c7_threshold);
    return res;
  }
  const double p_pipeline = outcome.ttest.at("p_one_sided").get<double>();
  const double p_perm = oracles::paired_permutation_p(sci, fk, true);
  const bool agree = std::abs(p_pipeline - p_perm) < 0.01;
  res.pass = agree;
  res.detail = "t-test p " + fmt(p_pipeline) + " vs permutation oracle " + fmt(p_perm) +
               (agree ? " (|diff| < 0.01)" : " (ORACLE DISAGREES)") + " on " +
               std::to_string(sci.size()) + "/" + std::to_string(FX.c7_seeds) + " pairs" +
               " | reported outcome: mean steps sci " +
               fmt(outcome.ttest.at("sci_mean_steps").get<double>()) + " vs first-k " +
               fmt(outcome.ttest.at("first_k_mean_steps").get<double>()) + ", sci faster: " +
               (outcome.ttest.at("sci_faster").get<bool>() ? "yes" : "no") + " (reported, not asserted)";
  return res;
}

// 8. Determinism suite: rerun every stochastic command, compare file digests.
CriterionResult criterion_8(Workspace& ws) {
  CriterionResult res;
  const auto dir = ws.root() / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);

  auto run = [&](std::vector<std::string> args) {
    const int code = cli::dispatch(args);
    if (code != 0) {
      throw Error("determinism pipeline command failed with exit " + std::to_string(code));
    }
  };
  std::vector<std::string> mismatches;
  auto compare = [&](const fs::path& a, const fs::path& b, const std::string& label) {
    if (io::file_digest(a) != io::file_digest(b)) {
      mismatches.push_back(label);
    }
  };

  for (const std::string round : {"a", "b"}) {
    const auto d = dir / round;
    run({"gen-corpus", "--task", "records", "--entities", "4", "--attributes", "2", "--range",
         "20", "--seed", "7", "--out", (d / "corpus").string()});
    run({"pretrain", "--layers", "2", "--heads", "2", "--head-dim", "8", "--corpus",
         (d / "corpus").string(), "--steps", "3", "--batch", "2", "--seq-len", "32", "--seed", "3",
         "--out", (d / "m.clab").string()});
    run({"gen-traces", "--model", (d / "m.clab").string(), "--corpus", (d / "corpus").string(),
         "--count", "5", "--seed", "11", "--max-len", "6", "--out", (d / "traces.jsonl").string()});
    run({"init", "rvi", "--model", (d / "m.clab").string(), "--p", "8", "--seed", "2", "--out",
         (d / "rvi.crtg").string()});
    run({"init", "sci", "--model", (d / "m.clab").string(), "--corpus", (d / "corpus").string(),
         "--p", "8", "--chunk", "4", "--seed", "5", "--out", (d / "sci.crtg").string()});
    run({"train", "--model", (d / "m.clab").string(), "--cartridge", (d / "sci.crtg").string(),
         "--corpus", (d / "corpus").string(), "--traces", (d / "traces.jsonl").string(),
         "--eval-traces", (d / "traces.jsonl").string(), "--steps", "4", "--batch", "2",
         "--checkpoint-every", "2", "--seed", "13", "--out", (d / "run").string()});
    run({"ngram-sweep", "--corpus", (d / "corpus").string(), "--p", "16", "--chunks", "2,4",
         "--seeds", "3", "--seed", "1", "--out", (d / "sweep.csv").string()});
    run({"convergence", "--model", (d / "m.clab").string(), "--corpus", (d / "corpus").string(),
         "--traces", (d / "traces.jsonl").string(), "--eval-traces", (d / "traces.jsonl").string(),
         "--seeds", "2", "--seed", "21", "--threshold", "500", "--p", "8", "--chunk", "4",
         "--steps", "4", "--batch", "2", "--checkpoint-every", "2", "--out",
         (d / "conv").string()});
  }
  for (const auto& rel :
       {"corpus/corpus.bytes", "corpus/eval.json", "m.clab", "traces.jsonl", "rvi.crtg", "sci.crtg",
        "run/final.crtg", "run/metrics.csv", "sweep.csv", "conv/convergence.csv", "conv/ttest.json"}) {
    compare(dir / "a" / rel, dir / "b" / rel, rel);
  }
  res.pass = mismatches.empty();
  if (res.pass) {
    res.detail = "gen-corpus, pretrain, gen-traces, init rvi/sci, train, ngram-sweep, convergence "
                 "reruns are digest-identical";
  } else {
    res.detail = "digest mismatches: ";
    for (const auto& m : mismatches) {
      res.detail += m + " ";
    }
  }
  return res;
}

// 9. N-gram analysis: oracle equality and the periodic-corpus direction.
CriterionResult criterion_9(Workspace&) {
  CriterionResult res;
  Rng rng(9001);
  bool oracle_ok = true;
  for (int trial = 0; trial < 5; ++trial) {
    TokenSeq seq(512 + rng.below(512));
    for (auto& t : seq) {
      t = static_cast<TokenId>(rng.below(23));
    }
    const int n = 2 + static_cast<int>(rng.below(3));
    std::set<std::vector<TokenId>> grams;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
      grams.insert(TokenSeq(seq.begin() + static_cast<std::ptrdiff_t>(i),
                            seq.begin() + static_cast<std::ptrdiff_t>(i + static_cast<std::size_t>(n))));
    }
    const double want =
        static_cast<double>(grams.size()) / static_cast<double>(seq.size() - static_cast<std::size_t>(n) + 1);
    if (selfstudy::ngram_diversity(seq, n) != want) {
      oracle_ok = false;
    }
  }

  TokenSeq periodic(1024);
  for (std::size_t i = 0; i < periodic.size(); ++i) {
    periodic[i] = static_cast<TokenId>(i % 32);
  }
  const int p = 64;
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 20; ++s) {
    seeds.push_back(9100 + s);
  }
  const std::vector<int> chunks{2, p};
  const auto rows = selfstudy::diversity_sweep(periodic, p, chunks, seeds, 2);
  const bool direction_ok = rows[0].mean_diversity >= rows[1].mean_diversity;
  res.pass = oracle_ok && direction_ok;
  res.detail = std::string(oracle_ok ? "set-count oracle equality holds" : "ORACLE MISMATCH") +
               "; period-32 corpus: mean diversity c=2 " + fmt(rows[0].mean_diversity) +
               " >= c=p " + fmt(rows[1].mean_diversity) + (direction_ok ? "" : " (VIOLATED)");
  return res;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  bool keep = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      only.insert(std::atoi(argv[++i]));
    } else if (std::strcmp(argv[i], "--keep") == 0) {
      keep = true;
    }
  }

  const fs::path root = fs::path("acceptance-work-" + FX.digest());
  if (!keep && only.empty()) {
    fs::remove_all(root);
  }
  Workspace ws(root);

  struct Entry {
    int id;
    const char* name;
    CriterionResult (*fn)(Workspace&);
  };
  const Entry entries[] = {
      {1, "Table 1 statistics replication", criterion_1},
      {2, "teacher-equivalence oracle", criterion_2},
      {3, "gradient correctness vs finite differences", criterion_3},
      {4, "SVD oracle and spectrum shape", criterion_4},
      {5, "training-dynamics trend", criterion_5},
      {6, "ablation harness consistency", criterion_6},
      {7, "convergence experiment machinery", criterion_7},
      {8, "determinism suite", criterion_8},
      {9, "n-gram analysis", criterion_9},
  };

  int failures = 0;
  for (const auto& e : entries) {
    if (!only.empty() && only.count(e.id) == 0) {
      continue;
    }
    CriterionResult res;
    try {
      res = e.fn(ws);
    } catch (const std::exception& ex) {
      res.pass = false;
      res.detail = std::string("exception: ") + ex.what();
    }
    std::printf("[%s] %d. %s: %s\n", res.pass ? "PASS" : "FAIL", e.id, e.name, res.detail.c_str());
    std::fflush(stdout);
    if (!res.pass) {
      ++failures;
    }
  }
  return failures;
}
