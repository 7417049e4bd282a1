// Command-line surface: experiment pipelines over the library modules.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error. Relative output
// paths resolve under $CARTRIDGE_LAB_DIR when it is set. Every artifact
// directory gets a manifest with the exact parameters needed to re-execute
// the command bit-identically.
#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clab/ablation.hpp"
#include "clab/analysis.hpp"
#include "clab/cartridge.hpp"
#include "clab/core.hpp"
#include "clab/dataset_io.hpp"
#include "clab/distill.hpp"
#include "clab/io.hpp"
#include "clab/model.hpp"
#include "clab/selfstudy.hpp"
#include "clab/serialize.hpp"
#include "clab/stats.hpp"
#include "json.hpp"

namespace clab::cli {

namespace detail {

inline std::filesystem::path resolve_out(const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("CARTRIDGE_LAB_DIR")) {
      path = std::filesystem::path(root) / path;
    }
  }
  return path;
}

inline void write_manifest(const std::filesystem::path& target, const std::string& command,
                           const nlohmann::json& params) {
  nlohmann::json manifest{{"command", command}, {"params", params}};
  if (std::filesystem::is_directory(target)) {
    io::write_text(target / "manifest.json", manifest.dump(2) + "\n");
  } else {
    io::write_text(target.string() + ".manifest.json", manifest.dump(2) + "\n");
  }
}

inline TokenSeq load_corpus_tokens_file(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  TokenSeq toks;
  toks.reserve(bytes.size());
  for (std::uint8_t b : bytes) {
    toks.push_back(static_cast<TokenId>(b));
  }
  return toks;
}

// Accepts either a corpus directory (corpus.bytes + sidecars) or a raw byte file.
inline selfstudy::CorpusBundle load_corpus_any(const std::filesystem::path& path) {
  if (std::filesystem::is_directory(path)) {
    return dataset_io::load_corpus(path);
  }
  selfstudy::CorpusBundle bundle;
  bundle.corpus.tokens = load_corpus_tokens_file(path);
  bundle.corpus.digest = digest_tokens(bundle.corpus.tokens);
  bundle.corpus.task_name = "raw";
  return bundle;
}

inline std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::string cur;
  for (char ch : csv + ",") {
    if (ch == ',') {
      if (!cur.empty()) {
        out.push_back(std::stod(cur));
        cur.clear();
      }
    } else {
      cur.push_back(ch);
    }
  }
  return out;
}

inline std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  for (double v : parse_double_list(csv)) {
    out.push_back(static_cast<int>(v));
  }
  return out;
}

inline distill::TrainConfig train_config_from_json(const nlohmann::json& j) {
  distill::TrainConfig cfg;
  cfg.steps = j.value("steps", cfg.steps);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.packed_seq_len = j.value("packed_seq_len", cfg.packed_seq_len);
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
  cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.use_teacher_cache = j.value("use_teacher_cache", cfg.use_teacher_cache);
  if (j.value("precision", "f32") == std::string("f64")) {
    cfg.precision = distill::Precision::f64;
  }
  return cfg;
}

inline selfstudy::TaskSpec task_spec_from_json(const nlohmann::json& j) {
  selfstudy::TaskSpec spec;
  spec.name = j.value("name", spec.name);
  spec.num_entities = j.value("entities", spec.num_entities);
  spec.num_attributes = j.value("attributes", spec.num_attributes);
  spec.value_range = j.value("range", spec.value_range);
  return spec;
}

// Sorted (step, cartridge) snapshots from a run directory's checkpoints.
inline std::vector<std::pair<std::int64_t, cartridge::Cartridge<float>>> load_checkpoints(
    const std::filesystem::path& run_dir) {
  const auto dir = run_dir / "checkpoints";
  require(std::filesystem::is_directory(dir), "no checkpoints directory under " + run_dir.string());
  std::vector<std::pair<std::int64_t, cartridge::Cartridge<float>>> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.starts_with("cartridge-step-") && name.ends_with(".crtg")) {
      const auto step = std::stoll(name.substr(15, name.size() - 15 - 5));
      out.emplace_back(step, serialize::load_cartridge(entry.path()));
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  require(out.size() >= 2, "need at least 2 checkpoints in " + run_dir.string());
  return out;
}

struct ConvergenceOutcome {
  std::vector<std::optional<std::int64_t>> sci_steps, first_k_steps;
  nlohmann::json ttest;
};

// The multi-seed SCI vs first-k race. First-k's initializer is deterministic;
// pairing comes from the shared per-seed training stream.
inline ConvergenceOutcome run_convergence(const model::FrozenModel<float>& m,
                                          const selfstudy::CorpusBundle& bundle,
                                          const selfstudy::TraceDataset& traces,
                                          const selfstudy::TraceDataset& eval_traces, int num_seeds,
                                          std::uint64_t seed_base, double threshold, int p, int chunk,
                                          const distill::TrainConfig& base_cfg, bool sorted_offsets,
                                          const std::filesystem::path& out_dir) {
  require(num_seeds >= 2, "convergence: need at least 2 seeds");
  ConvergenceOutcome outcome;
  const auto z_fk = cartridge::init_first_k(m, bundle.corpus.tokens, p);
  std::string csv = "seed,scheme,steps_to_threshold\n";
  for (int i = 0; i < num_seeds; ++i) {
    const std::uint64_t seed = seed_base + static_cast<std::uint64_t>(i);
    auto cfg = base_cfg;
    cfg.seed = seed;
    const auto z_sci = cartridge::init_sci(m, bundle.corpus.tokens, p, chunk, seed, sorted_offsets);
    const auto series_sci =
        distill::distill_train(m, z_sci, bundle.corpus.tokens, traces, cfg, eval_traces);
    const auto series_fk =
        distill::distill_train(m, z_fk, bundle.corpus.tokens, traces, cfg, eval_traces);
    const auto s_sci = distill::steps_to_threshold(series_sci, threshold);
    const auto s_fk = distill::steps_to_threshold(series_fk, threshold);
    outcome.sci_steps.push_back(s_sci);
    outcome.first_k_steps.push_back(s_fk);
    csv += std::to_string(seed) + ",sci," + std::to_string(s_sci.value_or(-1)) + "\n";
    csv += std::to_string(seed) + ",first_k," + std::to_string(s_fk.value_or(-1)) + "\n";
    std::cerr << "[convergence] seed " << seed << ": sci=" << s_sci.value_or(-1)
              << " first_k=" << s_fk.value_or(-1) << "\n";
  }
  io::write_text(out_dir / "convergence.csv", csv);

  // Paired one-sided test on the seeds where both schemes converged.
  std::vector<double> x, y;
  for (std::size_t i = 0; i < outcome.sci_steps.size(); ++i) {
    if (outcome.sci_steps[i].has_value() && outcome.first_k_steps[i].has_value()) {
      x.push_back(static_cast<double>(*outcome.sci_steps[i]));
      y.push_back(static_cast<double>(*outcome.first_k_steps[i]));
    }
  }
  nlohmann::json t{{"alternative", "less"},
                   {"threshold", threshold},
                   {"n_pairs_total", num_seeds},
                   {"n_pairs_used", x.size()}};
  if (x.size() < 2) {
    t["abstained"] = true;
    t["reason"] = "fewer than 2 seeds reached the threshold under both schemes";
  } else {
    try {
      const auto res = stats::paired_t(x, y, stats::Alternative::less);
      double mx = 0.0, my = 0.0;
      for (double v : x) mx += v;
      for (double v : y) my += v;
      t["abstained"] = false;
      t["t_stat"] = res.t_stat;
      t["p_one_sided"] = res.p_one_sided;
      t["mean_diff"] = res.mean_diff;
      t["sci_mean_steps"] = mx / static_cast<double>(x.size());
      t["first_k_mean_steps"] = my / static_cast<double>(y.size());
      t["sci_faster"] = res.mean_diff < 0.0 && res.p_one_sided < 0.05;
    } catch (const DegenerateStatisticError& e) {
      t["abstained"] = true;
      t["reason"] = e.what();
    }
  }
  outcome.ttest = t;
  io::write_text(out_dir / "ttest.json", t.dump(2) + "\n");
  return outcome;
}

}  // namespace detail

inline int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"cartridge-lab: a desk-scale laboratory for trained KV-cache prefixes"};
  app.require_subcommand(1);
  int exit_code = 0;

  // ---- gen-corpus ----------------------------------------------------
  auto* gen_corpus = app.add_subcommand("gen-corpus", "generate a synthetic task corpus + eval set");
  struct {
    std::string task = "records";
    int entities = 10, attributes = 8, range = 100;
    std::uint64_t seed = 0;
    std::string out;
  } gc;
  gen_corpus->add_option("--task", gc.task, "records|filings")->check(CLI::IsMember({"records", "filings"}));
  gen_corpus->add_option("--entities", gc.entities);
  gen_corpus->add_option("--attributes", gc.attributes);
  gen_corpus->add_option("--range", gc.range, "distinct value slots per attribute");
  gen_corpus->add_option("--seed", gc.seed)->required();
  gen_corpus->add_option("-o,--out", gc.out, "output directory")->required();
  gen_corpus->callback([&] {
    selfstudy::TaskSpec spec{gc.task, gc.entities, gc.attributes, gc.range, 100000};
    const auto bundle = selfstudy::make_corpus(spec, gc.seed);
    const auto dir = detail::resolve_out(gc.out);
    dataset_io::save_corpus(bundle, dir);
    detail::write_manifest(dir, "gen-corpus",
                           {{"task", gc.task},
                            {"entities", gc.entities},
                            {"attributes", gc.attributes},
                            {"range", gc.range},
                            {"seed", gc.seed}});
    std::cout << "corpus tokens " << bundle.corpus.tokens.size() << " eval items "
              << bundle.eval_items.size() << " digest " << bundle.corpus.digest << "\n";
  });

  // ---- gen-traces ----------------------------------------------------
  auto* gen_traces = app.add_subcommand("gen-traces", "sample self-study traces from the teacher");
  struct {
    std::string model, corpus, out;
    int count = 48;
    std::uint64_t seed = 0;
    double temperature = 0.7;
    int max_len = 64;
  } gt;
  gen_traces->add_option("--model", gt.model)->required();
  gen_traces->add_option("--corpus", gt.corpus, "corpus directory")->required();
  gen_traces->add_option("--count", gt.count);
  gen_traces->add_option("--seed", gt.seed)->required();
  gen_traces->add_option("--temperature", gt.temperature);
  gen_traces->add_option("--max-len", gt.max_len);
  gen_traces->add_option("-o,--out", gt.out, "output .jsonl")->required();
  gen_traces->callback([&] {
    const auto m = serialize::load_model(gt.model);
    const auto bundle = detail::load_corpus_any(gt.corpus);
    const auto traces =
        selfstudy::generate_traces(m, bundle.corpus, gt.count, gt.seed, gt.temperature, gt.max_len);
    const auto out = detail::resolve_out(gt.out);
    dataset_io::save_traces(traces, out);
    detail::write_manifest(out, "gen-traces",
                           {{"model_digest", model::weights_digest(m)},
                            {"corpus_digest", bundle.corpus.digest},
                            {"count", gt.count},
                            {"seed", gt.seed},
                            {"temperature", gt.temperature},
                            {"max_len", gt.max_len}});
    std::cout << "traces " << traces.size() << "\n";
  });

  // ---- pretrain --------------------------------------------------------
  auto* pretrain = app.add_subcommand("pretrain", "initialize and pre-train the frozen model");
  struct {
    int layers = 4, heads = 4, head_dim = 16, vocab = 256, max_positions = 2048, mlp_hidden = 0;
    double rope_base = 10000.0;
    std::vector<std::string> corpora;
    int induction_docs = 0;
    int steps = 300, batch = 8, seq_len = 128;
    double lr = 3e-3;
    std::uint64_t seed = 0;
    std::string out;
  } pt;
  pretrain->add_option("--layers", pt.layers);
  pretrain->add_option("--heads", pt.heads);
  pretrain->add_option("--head-dim", pt.head_dim);
  pretrain->add_option("--vocab", pt.vocab);
  pretrain->add_option("--max-positions", pt.max_positions);
  pretrain->add_option("--mlp-hidden", pt.mlp_hidden, "defaults to 4*model_dim");
  pretrain->add_option("--rope-base", pt.rope_base);
  pretrain->add_option("--corpus", pt.corpora, "corpus dir or raw byte file (repeatable)");
  pretrain->add_option("--induction-docs", pt.induction_docs,
                       "also generate N seeded repeat-to-retrieve documents");
  pretrain->add_option("--steps", pt.steps);
  pretrain->add_option("--batch", pt.batch);
  pretrain->add_option("--seq-len", pt.seq_len);
  pretrain->add_option("--lr", pt.lr);
  pretrain->add_option("--seed", pt.seed)->required();
  pretrain->add_option("-o,--out", pt.out, "output .clab file")->required();
  pretrain->callback([&] {
    model::ModelConfig cfg;
    cfg.num_layers = pt.layers;
    cfg.num_heads = pt.heads;
    cfg.head_dim = pt.head_dim;
    cfg.model_dim = pt.heads * pt.head_dim;
    cfg.vocab_size = pt.vocab;
    cfg.max_positions = pt.max_positions;
    cfg.mlp_hidden = pt.mlp_hidden > 0 ? pt.mlp_hidden : 4 * cfg.model_dim;
    cfg.rope_base = pt.rope_base;
    auto m = model::random_model<float>(cfg, pt.seed);

    require(!pt.corpora.empty() || pt.induction_docs > 0,
            "pretrain: need --corpus and/or --induction-docs");
    // Training sequences: fixed windows over supplied corpora plus whole
    // synthetic repeat-to-retrieve documents.
    std::vector<TokenSeq> docs;
    TokenSeq text;
    nlohmann::json corpus_digests = nlohmann::json::array();
    for (const auto& c : pt.corpora) {
      const auto bundle = detail::load_corpus_any(c);
      text.insert(text.end(), bundle.corpus.tokens.begin(), bundle.corpus.tokens.end());
      if (std::filesystem::is_directory(c)) {
        const auto qa = selfstudy::render_qa_text(bundle.corpus);
        text.insert(text.end(), qa.begin(), qa.end());
      }
      corpus_digests.push_back(bundle.corpus.digest);
    }
    if (pt.induction_docs > 0) {
      docs = selfstudy::make_pretrain_docs(pt.induction_docs, derive_seed(pt.seed, 0xd0c5));
    }
    if (!text.empty()) {
      require(static_cast<int>(text.size()) > pt.seq_len, "pretrain: corpus shorter than seq-len");
    }

    optim::AdamConfig adam;
    adam.learning_rate = pt.lr;
    model::Pretrainer<float> trainer(m, adam);
    Rng rng(derive_seed(pt.seed, 0xbeef));
    for (int step = 1; step <= pt.steps; ++step) {
      std::vector<TokenSeq> batch;
      for (int b = 0; b < pt.batch; ++b) {
        const bool from_docs =
            !docs.empty() && (text.empty() || rng.next_double() < 0.5 || text.size() <= static_cast<std::size_t>(pt.seq_len));
        if (from_docs) {
          batch.push_back(docs[rng.below(docs.size())]);
        } else {
          const auto start = rng.below(text.size() - static_cast<std::size_t>(pt.seq_len));
          batch.emplace_back(text.begin() + static_cast<std::ptrdiff_t>(start),
                             text.begin() + static_cast<std::ptrdiff_t>(start + static_cast<std::size_t>(pt.seq_len)));
        }
      }
      const double loss = trainer.step(batch);
      if (step % 50 == 0 || step == 1 || step == pt.steps) {
        std::cerr << "[pretrain] step " << step << " loss " << loss << "\n";
      }
    }
    const auto out = detail::resolve_out(pt.out);
    serialize::save_model(m, out);
    detail::write_manifest(out, "pretrain",
                           {{"seed", pt.seed},
                            {"steps", pt.steps},
                            {"batch", pt.batch},
                            {"seq_len", pt.seq_len},
                            {"lr", pt.lr},
                            {"corpora", corpus_digests},
                            {"induction_docs", pt.induction_docs},
                            {"config", serialize::config_json(cfg)}});
    std::cout << "model " << out.string() << " digest " << model::weights_digest(m) << "\n";
  });

  // ---- init ------------------------------------------------------------
  auto* init = app.add_subcommand("init", "initialize a cartridge");
  init->require_subcommand(1);
  struct {
    std::string model, corpus, out;
    int p = 64, chunk = 0;
    std::uint64_t seed = 0;
    bool sorted = false;
  } in;
  auto add_common = [&](CLI::App* sub, bool needs_corpus, bool needs_seed) {
    sub->add_option("--model", in.model)->required();
    if (needs_corpus) {
      sub->add_option("--corpus", in.corpus)->required();
    }
    sub->add_option("--p", in.p)->required();
    auto* seed_opt = sub->add_option("--seed", in.seed);
    if (needs_seed) {
      seed_opt->required();
    }
    sub->add_option("-o,--out", in.out)->required();
  };
  auto* init_rvi = init->add_subcommand("rvi", "random vector initialization");
  add_common(init_rvi, false, true);
  auto* init_fk = init->add_subcommand("first-k", "first p corpus tokens");
  add_common(init_fk, true, false);
  auto* init_sci = init->add_subcommand("sci", "sampled chunk initialization");
  add_common(init_sci, true, true);
  init_sci->add_option("--chunk", in.chunk, "chunk size c")->required();
  init_sci->add_flag("--sorted", in.sorted, "sort chunk offsets into corpus order");
  init->callback([&] {
    const auto m = serialize::load_model(in.model);
    cartridge::Cartridge<float> cart;
    nlohmann::json params{{"p", in.p}};
    if (init_rvi->parsed()) {
      cart = cartridge::init_rvi<float>(m.cfg, in.p, in.seed);
      params["scheme"] = "rvi";
      params["seed"] = in.seed;
    } else {
      const auto bundle = detail::load_corpus_any(in.corpus);
      params["corpus_digest"] = bundle.corpus.digest;
      if (init_fk->parsed()) {
        cart = cartridge::init_first_k(m, bundle.corpus.tokens, in.p);
        params["scheme"] = "first-k";
      } else {
        cart = cartridge::init_sci(m, bundle.corpus.tokens, in.p, in.chunk, in.seed, in.sorted);
        params["scheme"] = "sci";
        params["chunk"] = in.chunk;
        params["seed"] = in.seed;
        params["sorted"] = in.sorted;
      }
    }
    const auto out = detail::resolve_out(in.out);
    serialize::save_cartridge(cart, out);
    detail::write_manifest(out, "init", params);
    std::cout << "cartridge " << out.string() << " digest " << io::file_digest(out) << "\n";
  });

  // ---- train -------------------------------------------------------------
  auto* train = app.add_subcommand("train", "context-distillation training of a cartridge");
  struct {
    std::string model, cartridge_path, corpus, traces, eval_traces, out, precision = "f32";
    distill::TrainConfig cfg;
    bool no_teacher_cache = false;
  } tr;
  train->add_option("--model", tr.model)->required();
  train->add_option("--cartridge", tr.cartridge_path)->required();
  train->add_option("--corpus", tr.corpus)->required();
  train->add_option("--traces", tr.traces)->required();
  train->add_option("--eval-traces", tr.eval_traces);
  train->add_option("--steps", tr.cfg.steps);
  train->add_option("--batch", tr.cfg.batch_size);
  train->add_option("--lr", tr.cfg.learning_rate);
  train->add_option("--checkpoint-every", tr.cfg.checkpoint_every);
  train->add_option("--seed", tr.cfg.seed)->required();
  train->add_option("--precision", tr.precision)->check(CLI::IsMember({"f32", "f64"}));
  train->add_flag("--no-teacher-cache", tr.no_teacher_cache);
  train->add_option("-o,--out", tr.out, "run directory")->required();
  train->callback([&] {
    const auto m = serialize::load_model(tr.model);
    const auto cart = serialize::load_cartridge(tr.cartridge_path);
    const auto bundle = detail::load_corpus_any(tr.corpus);
    const auto traces = dataset_io::load_traces(tr.traces);
    selfstudy::TraceDataset eval_traces;
    if (!tr.eval_traces.empty()) {
      eval_traces = dataset_io::load_traces(tr.eval_traces);
    }
    tr.cfg.use_teacher_cache = !tr.no_teacher_cache;
    tr.cfg.precision = tr.precision == "f64" ? distill::Precision::f64 : distill::Precision::f32;
    const auto out = detail::resolve_out(tr.out);
    if (tr.cfg.precision == distill::Precision::f64) {
      const auto m64 = [&] {
        model::FrozenModel<double> d;
        d.cfg = m.cfg;
        d.init_seed = m.init_seed;
        d.tok_embed.assign(m.tok_embed.begin(), m.tok_embed.end());
        d.layers.resize(m.layers.size());
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
          d.layers[l].attn_norm_gain.assign(m.layers[l].attn_norm_gain.begin(), m.layers[l].attn_norm_gain.end());
          d.layers[l].wq.assign(m.layers[l].wq.begin(), m.layers[l].wq.end());
          d.layers[l].wk.assign(m.layers[l].wk.begin(), m.layers[l].wk.end());
          d.layers[l].wv.assign(m.layers[l].wv.begin(), m.layers[l].wv.end());
          d.layers[l].wo.assign(m.layers[l].wo.begin(), m.layers[l].wo.end());
          d.layers[l].mlp_norm_gain.assign(m.layers[l].mlp_norm_gain.begin(), m.layers[l].mlp_norm_gain.end());
          d.layers[l].w_up.assign(m.layers[l].w_up.begin(), m.layers[l].w_up.end());
          d.layers[l].w_down.assign(m.layers[l].w_down.begin(), m.layers[l].w_down.end());
        }
        d.final_norm_gain.assign(m.final_norm_gain.begin(), m.final_norm_gain.end());
        d.out_proj.assign(m.out_proj.begin(), m.out_proj.end());
        return d;
      }();
      const auto cart64 = cartridge::convert<double>(cart);
      (void)distill::distill_train(m64, cart64, bundle.corpus.tokens, traces, tr.cfg, eval_traces, out);
    } else {
      (void)distill::distill_train(m, cart, bundle.corpus.tokens, traces, tr.cfg, eval_traces, out);
    }
    std::cout << "run " << out.string() << "\n";
  });

  // ---- spectra -------------------------------------------------------------
  auto* spectra = app.add_subcommand("spectra", "singular-value summary of a cartridge");
  struct {
    std::string cartridge_path, out, agg = "median";
    int k = 0;
  } sp;
  spectra->add_option("--cartridge", sp.cartridge_path)->required();
  spectra->add_option("--k", sp.k, "top-k values (default head_dim)");
  spectra->add_option("--agg", sp.agg)->check(CLI::IsMember({"median", "mean"}));
  spectra->add_option("-o,--out", sp.out, "output directory")->required();
  spectra->callback([&] {
    const auto cart = serialize::load_cartridge(sp.cartridge_path);
    const int k = sp.k > 0 ? sp.k : cart.head_dim;
    const auto agg = sp.agg == "mean" ? analysis::Aggregation::mean : analysis::Aggregation::median_iqr;
    const auto dir = detail::resolve_out(sp.out);
    std::filesystem::create_directories(dir);
    analysis::write_spectra_csv({analysis::spectral_summary(cart, analysis::Role::keys, k, agg),
                                 analysis::spectral_summary(cart, analysis::Role::values, k, agg)},
                                dir);
    detail::write_manifest(dir, "spectra",
                           {{"cartridge_digest", io::file_digest(sp.cartridge_path)},
                            {"k", k},
                            {"agg", sp.agg}});
    std::cout << "spectra " << (dir / "spectra_summary.csv").string() << "\n";
  });

  // ---- rotations ------------------------------------------------------------
  auto* rotations = app.add_subcommand("rotations", "checkpoint-to-checkpoint rotation series");
  struct {
    std::string run, out;
  } ro;
  rotations->add_option("--run", ro.run, "training run directory")->required();
  rotations->add_option("-o,--out", ro.out, "output directory")->required();
  rotations->callback([&] {
    const auto cps = detail::load_checkpoints(ro.run);
    const auto dir = detail::resolve_out(ro.out);
    std::filesystem::create_directories(dir);
    const std::span<const std::pair<std::int64_t, cartridge::Cartridge<float>>> span(cps);
    analysis::write_rotations_csv(analysis::rotation_series(span), dir / "rotations.csv");
    analysis::write_rotation_detail_csv(span, dir / "rotations_detail.csv");
    detail::write_manifest(dir, "rotations", {{"run", ro.run}, {"checkpoints", cps.size()}});
    std::cout << "rotations " << (dir / "rotations.csv").string() << "\n";
  });

  // ---- similarity -------------------------------------------------------------
  auto* similarity = app.add_subcommand("similarity", "layer-wise cosine map between two cartridges");
  struct {
    std::string a, b, out;
  } si;
  similarity->add_option("--a", si.a)->required();
  similarity->add_option("--b", si.b)->required();
  similarity->add_option("-o,--out", si.out, "output .csv")->required();
  similarity->callback([&] {
    const auto za = serialize::load_cartridge(si.a);
    const auto zb = serialize::load_cartridge(si.b);
    const auto out = detail::resolve_out(si.out);
    analysis::write_similarity_csv(analysis::cross_cartridge_similarity(za, zb), out);
    detail::write_manifest(out, "similarity",
                           {{"a_digest", io::file_digest(si.a)}, {"b_digest", io::file_digest(si.b)}});
    std::cout << "similarity " << out.string() << "\n";
  });

  // ---- eval ------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "multiple-choice likelihood-ranking evaluation");
  struct {
    std::string model, corpus, cartridge_path, out;
    int items = 0;
    bool raw_sum = false;
  } ev;
  eval_cmd->add_option("--model", ev.model)->required();
  eval_cmd->add_option("--corpus", ev.corpus, "corpus directory with eval.json")->required();
  eval_cmd->add_option("--cartridge", ev.cartridge_path, "omit for the no-cartridge baseline");
  eval_cmd->add_option("--items", ev.items, "cap the eval set size");
  eval_cmd->add_flag("--raw-sum", ev.raw_sum, "score by total rather than mean log-likelihood");
  eval_cmd->add_option("-o,--out", ev.out, "output .json")->required();
  eval_cmd->callback([&] {
    const auto m = serialize::load_model(ev.model);
    const auto bundle = dataset_io::load_corpus(ev.corpus);
    require(!bundle.eval_items.empty(), "eval: corpus directory has no eval items");
    std::span<const selfstudy::EvalItem> items(bundle.eval_items);
    if (ev.items > 0 && ev.items < static_cast<int>(items.size())) {
      items = items.subspan(0, static_cast<std::size_t>(ev.items));
    }
    std::optional<cartridge::Cartridge<float>> cart;
    if (!ev.cartridge_path.empty()) {
      cart = serialize::load_cartridge(ev.cartridge_path);
    }
    ablation::McScoring scoring{!ev.raw_sum};
    const auto res = ablation::evaluate_mc<float>(m, cart.has_value() ? &*cart : nullptr, items, scoring);
    const auto out = detail::resolve_out(ev.out);
    std::vector<bool> correct(res.correct.begin(), res.correct.end());
    io::write_text(out, nlohmann::json{{"accuracy", res.accuracy},
                                       {"n_eval", items.size()},
                                       {"length_normalized", !ev.raw_sum},
                                       {"correct", correct}}
                            .dump(2) +
                            "\n");
    detail::write_manifest(out, "eval",
                           {{"model_digest", model::weights_digest(m)},
                            {"corpus_digest", bundle.corpus.digest},
                            {"cartridge", ev.cartridge_path},
                            {"items", items.size()},
                            {"raw_sum", ev.raw_sum}});
    std::cout << "accuracy " << res.accuracy << "\n";
  });

  // ---- ablate -------------------------------------------------------------------
  auto* ablate = app.add_subcommand("ablate", "two-task key-swap transfer experiment");
  struct {
    std::string model, config, out;
  } ab;
  ablate->add_option("--model", ab.model)->required();
  ablate->add_option("--config", ab.config, "experiment config (JSON)")->required();
  ablate->add_option("-o,--out", ab.out, "output directory")->required();
  ablate->callback([&] {
    const auto m = serialize::load_model(ab.model);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(io::read_text(ab.config));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInputError(std::string("ablate config is not valid JSON: ") + e.what());
    }
    ablation::AblationConfig cfg;
    cfg.task_a = detail::task_spec_from_json(j.at("task_a"));
    cfg.task_b = detail::task_spec_from_json(j.at("task_b"));
    cfg.corpus_seed_a = j.value("corpus_seed_a", 1);
    cfg.corpus_seed_b = j.value("corpus_seed_b", 2);
    cfg.trace_count = j.value("trace_count", 48);
    cfg.trace_seed_a = j.value("trace_seed_a", 11);
    cfg.trace_seed_b = j.value("trace_seed_b", 12);
    cfg.temperature = j.value("temperature", 0.7);
    cfg.max_continuation = j.value("max_continuation", 32);
    cfg.init.p = j.value("p", 64);
    cfg.init.document = detail::load_corpus_tokens_file(j.at("initializer_document").get<std::string>());
    cfg.train = detail::train_config_from_json(j.value("train", nlohmann::json::object()));
    cfg.n_eval = j.value("n_eval", 200);
    cfg.scoring.length_normalized = j.value("length_normalized", true);
    const auto dir = detail::resolve_out(ab.out);
    const auto rep = ablation::run_ablation(m, cfg, dir);
    detail::write_manifest(dir, "ablate",
                           {{"model_digest", model::weights_digest(m)}, {"config", j}});
    std::cout << "baseline " << rep.acc_baseline << " trained " << rep.acc_trained << " ablated "
              << rep.acc_ablated << " overlap_p " << rep.overlap_p_value << " transferable "
              << (rep.transferable ? "yes" : "no") << "\n";
  });

  // ---- convergence -----------------------------------------------------------------
  auto* convergence = app.add_subcommand("convergence", "multi-seed SCI vs first-k race + paired t-test");
  struct {
    std::string model, corpus, traces, eval_traces, out;
    int seeds = 10;
    std::uint64_t seed_base = 0;
    double threshold = 1.10;
    int p = 32, chunk = 8;
    distill::TrainConfig cfg;
    bool sorted = false;
  } cv;
  convergence->add_option("--model", cv.model)->required();
  convergence->add_option("--corpus", cv.corpus)->required();
  convergence->add_option("--traces", cv.traces)->required();
  convergence->add_option("--eval-traces", cv.eval_traces)->required();
  convergence->add_option("--seeds", cv.seeds);
  convergence->add_option("--seed", cv.seed_base, "base seed; run i uses seed+i")->required();
  convergence->add_option("--threshold", cv.threshold, "perplexity threshold defining convergence");
  convergence->add_option("--p", cv.p);
  convergence->add_option("--chunk", cv.chunk);
  convergence->add_option("--steps", cv.cfg.steps);
  convergence->add_option("--batch", cv.cfg.batch_size);
  convergence->add_option("--lr", cv.cfg.learning_rate);
  convergence->add_option("--checkpoint-every", cv.cfg.checkpoint_every);
  convergence->add_flag("--sorted", cv.sorted);
  convergence->add_option("-o,--out", cv.out, "output directory")->required();
  convergence->callback([&] {
    const auto m = serialize::load_model(cv.model);
    const auto bundle = detail::load_corpus_any(cv.corpus);
    const auto traces = dataset_io::load_traces(cv.traces);
    const auto eval_traces = dataset_io::load_traces(cv.eval_traces);
    const auto dir = detail::resolve_out(cv.out);
    std::filesystem::create_directories(dir);
    (void)detail::run_convergence(m, bundle, traces, eval_traces, cv.seeds, cv.seed_base,
                                  cv.threshold, cv.p, cv.chunk, cv.cfg, cv.sorted, dir);
    detail::write_manifest(dir, "convergence",
                           {{"model_digest", model::weights_digest(m)},
                            {"corpus_digest", bundle.corpus.digest},
                            {"seeds", cv.seeds},
                            {"seed_base", cv.seed_base},
                            {"threshold", cv.threshold},
                            {"p", cv.p},
                            {"chunk", cv.chunk},
                            {"steps", cv.cfg.steps},
                            {"batch", cv.cfg.batch_size},
                            {"lr", cv.cfg.learning_rate},
                            {"checkpoint_every", cv.cfg.checkpoint_every}});
    std::cout << "convergence " << (dir / "ttest.json").string() << "\n";
  });

  // ---- ngram-sweep -------------------------------------------------------------------
  auto* sweep = app.add_subcommand("ngram-sweep", "SCI initializer diversity vs chunk size");
  struct {
    std::string corpus, chunks = "2,4,8,16,32,64", out;
    int p = 64, seeds = 20, n = 2;
    std::uint64_t seed_base = 0;
  } ns;
  sweep->add_option("--corpus", ns.corpus)->required();
  sweep->add_option("--p", ns.p);
  sweep->add_option("--chunks", ns.chunks, "comma-separated chunk sizes");
  sweep->add_option("--seeds", ns.seeds);
  sweep->add_option("--seed", ns.seed_base)->required();
  sweep->add_option("--n", ns.n, "n-gram order");
  sweep->add_option("-o,--out", ns.out, "output .csv")->required();
  sweep->callback([&] {
    const auto bundle = detail::load_corpus_any(ns.corpus);
    const auto chunks = detail::parse_int_list(ns.chunks);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < ns.seeds; ++i) {
      seeds.push_back(ns.seed_base + static_cast<std::uint64_t>(i));
    }
    const auto rows = selfstudy::diversity_sweep(bundle.corpus.tokens, ns.p, chunks, seeds, ns.n);
    std::string csv = "chunk_size,mean_diversity\n";
    for (const auto& row : rows) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.12g", row.mean_diversity);
      csv += std::to_string(row.chunk_size) + "," + buf + "\n";
    }
    const auto out = detail::resolve_out(ns.out);
    io::write_text(out, csv);
    detail::write_manifest(out, "ngram-sweep",
                           {{"corpus_digest", bundle.corpus.digest},
                            {"p", ns.p},
                            {"chunks", chunks},
                            {"seeds", ns.seeds},
                            {"seed_base", ns.seed_base},
                            {"n", ns.n}});
    std::cout << "sweep " << out.string() << "\n";
  });

  // ---- stats ---------------------------------------------------------------------------
  auto* stats_cmd = app.add_subcommand("stats", "standalone statistics");
  stats_cmd->require_subcommand(1);
  auto* hyper = stats_cmd->add_subcommand("hypergeom", "exact upper-tail overlap test");
  struct {
    std::int64_t N = 0, K = 0, n = 0, k = 0;
  } hg;
  hyper->add_option("--N", hg.N, "population size")->required();
  hyper->add_option("--K", hg.K, "successes in population")->required();
  hyper->add_option("--n", hg.n, "draws")->required();
  hyper->add_option("--k", hg.k, "observed successes")->required();
  hyper->callback([&] {
    const double p = stats::hypergeom_sf(hg.N, hg.K, hg.n, hg.k);
    std::printf("p_value %.6g\n", p);
  });
  auto* ttest = stats_cmd->add_subcommand("ttest", "one-sided paired t-test");
  struct {
    std::string x, y, alternative = "less";
  } tt;
  ttest->add_option("--x", tt.x, "comma-separated sample")->required();
  ttest->add_option("--y", tt.y, "comma-separated sample")->required();
  ttest->add_option("--alternative", tt.alternative)->check(CLI::IsMember({"less", "greater"}));
  ttest->callback([&] {
    const auto x = detail::parse_double_list(tt.x);
    const auto y = detail::parse_double_list(tt.y);
    const auto alt = tt.alternative == "less" ? stats::Alternative::less : stats::Alternative::greater;
    const auto res = stats::paired_t(x, y, alt);
    std::printf("t_stat %.6g\np_one_sided %.6g\nmean_diff %.6g\n", res.t_stat, res.p_one_sided,
                res.mean_diff);
  });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return exit_code;
}

}  // namespace clab::cli
