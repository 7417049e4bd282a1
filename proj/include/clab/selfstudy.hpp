// Desk-scale self-study: synthetic fact corpora with ground-truth QA, the
// six-type seed-prompt taxonomy rendered as fixed byte templates, and
// teacher-rollout trace generation.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clab/cartridge.hpp"
#include "clab/core.hpp"
#include "clab/model.hpp"
#include "clab/rng.hpp"

namespace clab::selfstudy {

struct Fact {
  std::string entity;
  std::string attribute;
  TokenSeq value_tokens;
};

struct SyntheticCorpus {
  TokenSeq tokens;
  std::vector<Fact> facts;
  std::string digest;
  std::string task_name;
};

enum class SeedType { structuring, summarization, question, use_case, creative, generic };

constexpr std::array<SeedType, 6> kSeedTypes{SeedType::structuring, SeedType::summarization,
                                             SeedType::question,    SeedType::use_case,
                                             SeedType::creative,    SeedType::generic};

inline std::string to_string(SeedType t) {
  switch (t) {
    case SeedType::structuring: return "structuring";
    case SeedType::summarization: return "summarization";
    case SeedType::question: return "question";
    case SeedType::use_case: return "use_case";
    case SeedType::creative: return "creative";
    case SeedType::generic: return "generic";
  }
  return "?";
}

inline SeedType seed_type_from_string(const std::string& s) {
  for (SeedType t : kSeedTypes) {
    if (to_string(t) == s) {
      return t;
    }
  }
  throw InvalidInputError("unknown seed type: " + s);
}

struct TraceRecord {
  SeedType seed_type = SeedType::generic;
  TokenSeq query;
  TokenSeq continuation;
  std::vector<std::uint8_t> loss_mask;  // per continuation position
};

using TraceDataset = std::vector<TraceRecord>;

struct EvalItem {
  TokenSeq question;
  std::array<TokenSeq, 5> options;
  int answer_index = 0;
};

struct TaskSpec {
  std::string name = "records";  // "records" or "filings"
  int num_entities = 10;
  int num_attributes = 8;
  int value_range = 100;
  int max_corpus_tokens = 100000;
};

struct CorpusBundle {
  SyntheticCorpus corpus;
  std::vector<EvalItem> eval_items;
};

inline TokenSeq str_tokens(const std::string& s) {
  TokenSeq t;
  t.reserve(s.size());
  for (unsigned char ch : s) {
    t.push_back(static_cast<TokenId>(ch));
  }
  return t;
}

inline std::string tokens_str(std::span<const TokenId> t) {
  std::string s;
  s.reserve(t.size());
  for (TokenId v : t) {
    s.push_back(static_cast<char>(v & 0xff));
  }
  return s;
}

namespace detail {

// Single-byte names keep the lookup key short (entity byte + attribute byte),
// which is what makes in-context retrieval learnable for a byte-level model.
inline std::string entity_name(const TaskSpec&, int i) { return std::string(1, static_cast<char>('A' + i)); }

inline std::string attribute_name(const TaskSpec&, int i) { return std::string(1, static_cast<char>('a' + i)); }

inline std::string value_string(const TaskSpec& spec, int value_id) {
  if (spec.name == "filings") {
    return std::to_string(100 + value_id);
  }
  std::size_t width = 1;
  for (int upper = spec.value_range - 1; upper >= 10; upper /= 10) {
    ++width;
  }
  std::string digits = std::to_string(value_id);
  while (digits.size() < width) {
    digits.insert(digits.begin(), '0');
  }
  return "v" + digits;
}

inline std::string task_separator(const std::string& task_name) {
  return task_name == "filings" ? " =" : ":";
}

// One corpus line: "Ba: v17" / "Ba = 117". Questions repeat the line prefix
// verbatim, so answering is a lookup of the completion.
inline std::string fact_line(const std::string& task_name, const std::string& entity,
                             const std::string& attribute, const std::string& value) {
  return entity + attribute + task_separator(task_name) + " " + value + "\n";
}

inline std::string question_prefix(const std::string& task_name, const std::string& entity,
                                   const std::string& attribute) {
  return "\n" + entity + attribute + task_separator(task_name);
}

}  // namespace detail

// Deterministic corpus + eval set. Per attribute, entity values are drawn
// without replacement so distractors are genuine near-misses of other
// entities; options are shuffled so the answer position is uniform.
inline CorpusBundle make_corpus(const TaskSpec& spec, std::uint64_t seed) {
  require(spec.num_entities >= 2, "make_corpus: need >= 2 entities for distractors");
  require(spec.num_entities <= 26 && spec.num_attributes <= 26,
          "make_corpus: single-byte names cap entities and attributes at 26");
  require(spec.num_attributes >= 1, "make_corpus: need >= 1 attribute");
  if (spec.value_range < 5 || spec.value_range < spec.num_entities) {
    throw GenerationError("make_corpus: value range too small to produce 5 distinct options");
  }
  require(spec.name == "records" || spec.name == "filings", "make_corpus: unknown task name");

  Rng rng(seed);
  // values[a][e] = value id of entity e for attribute a, distinct within a.
  std::vector<std::vector<int>> values(static_cast<std::size_t>(spec.num_attributes));
  for (auto& row : values) {
    std::vector<int> pool(static_cast<std::size_t>(spec.value_range));
    for (int i = 0; i < spec.value_range; ++i) {
      pool[static_cast<std::size_t>(i)] = i;
    }
    for (int e = 0; e < spec.num_entities; ++e) {
      const auto pick = rng.below(pool.size());
      row.push_back(pool[pick]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }
  }

  std::string text = "## " + spec.name + "\n";
  CorpusBundle out;
  out.corpus.task_name = spec.name;
  for (int e = 0; e < spec.num_entities; ++e) {
    for (int a = 0; a < spec.num_attributes; ++a) {
      const std::string vs =
          detail::value_string(spec, values[static_cast<std::size_t>(a)][static_cast<std::size_t>(e)]);
      text += detail::fact_line(spec.name, detail::entity_name(spec, e),
                                detail::attribute_name(spec, a), vs);
      out.corpus.facts.push_back(Fact{detail::entity_name(spec, e), detail::attribute_name(spec, a),
                                      str_tokens(vs)});
    }
  }
  out.corpus.tokens = str_tokens(text);
  if (static_cast<int>(out.corpus.tokens.size()) > spec.max_corpus_tokens) {
    throw GenerationError("make_corpus: corpus exceeds max_corpus_tokens");
  }
  out.corpus.digest = digest_tokens(out.corpus.tokens);

  // One eval item per (entity, attribute), near-miss distractors drawn from
  // other entities' values for the same attribute.
  for (int e = 0; e < spec.num_entities; ++e) {
    for (int a = 0; a < spec.num_attributes; ++a) {
      const int correct = values[static_cast<std::size_t>(a)][static_cast<std::size_t>(e)];
      std::vector<int> pool;
      for (int o = 0; o < spec.num_entities; ++o) {
        if (o != e) {
          pool.push_back(values[static_cast<std::size_t>(a)][static_cast<std::size_t>(o)]);
        }
      }
      std::vector<int> distractors;
      while (distractors.size() < 4 && !pool.empty()) {
        const auto pick = rng.below(pool.size());
        distractors.push_back(pool[pick]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
      }
      // Fewer than five entities: pad with synthetic near-miss values.
      int delta = 1;
      while (distractors.size() < 4) {
        for (const int cand : {correct + delta, correct - delta}) {
          if (distractors.size() == 4) {
            break;
          }
          if (cand < 0 || cand >= spec.value_range || cand == correct) {
            continue;
          }
          if (std::find(distractors.begin(), distractors.end(), cand) == distractors.end()) {
            distractors.push_back(cand);
          }
        }
        ++delta;
        if (delta > spec.value_range) {
          throw GenerationError("make_corpus: cannot assemble 5 distinct options");
        }
      }

      EvalItem item;
      item.question = str_tokens(
          detail::question_prefix(spec.name, detail::entity_name(spec, e), detail::attribute_name(spec, a)));
      const auto answer_pos = static_cast<int>(rng.below(5));
      int di = 0;
      for (int o = 0; o < 5; ++o) {
        const int vid = o == answer_pos ? correct : distractors[static_cast<std::size_t>(di++)];
        item.options[static_cast<std::size_t>(o)] = str_tokens(" " + detail::value_string(spec, vid));
      }
      item.answer_index = answer_pos;
      out.eval_items.push_back(std::move(item));
    }
  }
  return out;
}

// Verbatim repeats of fact lines; predicting a repeated completion requires
// looking the line up earlier in the context.
inline TokenSeq render_qa_text(const SyntheticCorpus& corpus) {
  std::string text;
  for (const auto& f : corpus.facts) {
    text += detail::fact_line(corpus.task_name, f.entity, f.attribute, tokens_str(f.value_tokens));
  }
  return str_tokens(text);
}

namespace detail {

inline TokenSeq render_query(SeedType type, const std::string& task_name, const Fact& fact) {
  switch (type) {
    case SeedType::structuring: return str_tokens("\nT struct " + fact.entity + "\n");
    case SeedType::summarization: return str_tokens("\nT sum " + fact.entity + "\n");
    case SeedType::question:
      return str_tokens(question_prefix(task_name, fact.entity, fact.attribute));
    case SeedType::use_case:
      return str_tokens("\nT use " + fact.entity + "." + fact.attribute + "\n");
    case SeedType::creative: return str_tokens("\nT riff " + fact.entity + "\n");
    case SeedType::generic: return str_tokens("\nT about " + fact.entity + "\n");
  }
  throw InvalidInputError("render_query: bad seed type");
}

}  // namespace detail

struct PretrainDocSpec {
  int min_entities = 2, max_entities = 6;
  int min_attributes = 2, max_attributes = 4;
  std::array<int, 2> value_ranges{9, 90};  // mixed per document: 1- and 2-digit values
  int repeat_passes = 2;
  // Fraction of documents that are a random printable-byte span repeated
  // twice. Every position of the second copy rewards match-and-copy, which
  // is what drives the lookup circuit to form; the fact documents then bind
  // that circuit to the record format.
  double repeated_span_fraction = 0.5;
  int min_span = 48, max_span = 160;
};

// Pre-training documents: a small record set followed by its lines again,
// one pass in original order and further passes shuffled. Values are fresh
// per document, so weight memorization cannot predict a repeated completion.
// Exact repeats are the easiest diet for match-and-copy circuits to form on;
// shuffled repeats (and per-document block lengths) force the copying to be
// content-based rather than offset-based. This is what gives the frozen
// model its retrieval prior.
inline std::vector<TokenSeq> make_pretrain_docs(int num_docs, std::uint64_t seed,
                                                const PretrainDocSpec& spec = {}) {
  require(num_docs >= 1, "make_pretrain_docs: need at least 1 document");
  require(spec.repeat_passes >= 1, "make_pretrain_docs: need at least 1 repeat pass");
  std::vector<TokenSeq> docs;
  docs.reserve(static_cast<std::size_t>(num_docs));
  for (int i = 0; i < num_docs; ++i) {
    Rng rng(derive_seed(seed, 0x10000u + static_cast<std::uint64_t>(i)));
    if (rng.next_double() < spec.repeated_span_fraction) {
      const auto span_len = static_cast<std::size_t>(spec.min_span) +
                            rng.below(static_cast<std::uint64_t>(spec.max_span - spec.min_span + 1));
      TokenSeq span(span_len);
      for (auto& t : span) {
        t = static_cast<TokenId>(33 + rng.below(94));  // printable bytes
      }
      TokenSeq doc;
      doc.reserve(2 * span_len + 1);
      doc.insert(doc.end(), span.begin(), span.end());
      doc.insert(doc.end(), span.begin(), span.end());
      doc.push_back('\n');
      docs.push_back(std::move(doc));
      continue;
    }
    const int entities =
        spec.min_entities + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_entities - spec.min_entities + 1)));
    const int attributes =
        spec.min_attributes + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_attributes - spec.min_attributes + 1)));
    const int range = spec.value_ranges[static_cast<std::size_t>(rng.below(spec.value_ranges.size()))];
    TaskSpec task{(i % 2 == 0) ? "records" : "filings", entities,
                  std::min(attributes, 26), std::max(range, std::max(entities, 5)), 100000};
    const auto bundle = make_corpus(task, derive_seed(seed, static_cast<std::uint64_t>(i)));
    TokenSeq doc = bundle.corpus.tokens;
    std::vector<std::size_t> order(bundle.corpus.facts.size());
    for (std::size_t f = 0; f < order.size(); ++f) {
      order[f] = f;
    }
    for (int pass = 0; pass < spec.repeat_passes; ++pass) {
      if (pass > 0) {
        for (std::size_t f = order.size() - 1; f > 0; --f) {
          std::swap(order[f], order[rng.below(f + 1)]);
        }
      }
      for (std::size_t f : order) {
        const auto& fact = bundle.corpus.facts[f];
        const auto line = str_tokens(
            detail::fact_line(task.name, fact.entity, fact.attribute, tokens_str(fact.value_tokens)));
        doc.insert(doc.end(), line.begin(), line.end());
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

// Temperature sampling from a logit vector; T = 0 is argmax with lowest-index
// tie breaking. Deterministic in the generator state.
template <typename Real>
TokenId sample_token(std::span<const Real> logits, double temperature, Rng& rng) {
  require(!logits.empty(), "sample_token: empty logits");
  if (temperature <= 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
      if (static_cast<double>(logits[i]) > static_cast<double>(logits[best])) {
        best = i;
      }
    }
    return static_cast<TokenId>(best);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) {
    mx = std::max(mx, static_cast<double>(v) / temperature);
  }
  std::vector<double> probs(logits.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    denom += probs[i];
  }
  const double u = rng.next_double() * denom;
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) {
      return static_cast<TokenId>(i);
    }
  }
  return static_cast<TokenId>(probs.size() - 1);
}

struct TraceGenOptions {
  TokenId end_token = '\n';
  std::array<double, 6> type_weights{1, 1, 1, 1, 1, 1};  // uniform mixture
};

// One trace, fully determined by (master seed, trace index). Workers seeded
// this way produce identical datasets regardless of scheduling.
template <typename Real>
TraceRecord generate_single_trace(const model::FrozenModel<Real>& m, const SyntheticCorpus& corpus,
                                  const std::vector<model::LayerKVCache<Real>>& corpus_caches,
                                  std::uint64_t master_seed, std::uint64_t trace_index,
                                  double temperature, int max_len,
                                  const TraceGenOptions& opts = {}) {
  require(!corpus.facts.empty(), "generate_traces: corpus has no facts");
  require(max_len >= 1, "generate_traces: max_len must be >= 1");
  Rng rng(derive_seed(master_seed, trace_index));

  double total_w = 0.0;
  for (double w : opts.type_weights) {
    total_w += w;
  }
  require(total_w > 0.0, "generate_traces: type weights sum to zero");
  const double pick = rng.next_double() * total_w;
  double cum = 0.0;
  SeedType type = SeedType::generic;
  for (std::size_t i = 0; i < kSeedTypes.size(); ++i) {
    cum += opts.type_weights[i];
    if (pick < cum) {
      type = kSeedTypes[i];
      break;
    }
  }
  const auto& fact = corpus.facts[rng.below(corpus.facts.size())];

  TraceRecord rec;
  rec.seed_type = type;
  rec.query = detail::render_query(type, corpus.task_name, fact);
  if (static_cast<int>(corpus.tokens.size() + rec.query.size()) + max_len > m.cfg.max_positions) {
    throw CapacityError("generate_traces: corpus + query + continuation exceed the context");
  }

  model::DecodeSession<Real> session(m, &corpus_caches);
  std::vector<Real> logits;
  for (TokenId t : rec.query) {
    logits = session.step(t);
  }
  for (int step = 0; step < max_len; ++step) {
    const TokenId tok = sample_token(std::span<const Real>(logits), temperature, rng);
    rec.continuation.push_back(tok);
    rec.loss_mask.push_back(1);
    if (tok == opts.end_token) {
      break;
    }
    if (step + 1 < max_len) {
      logits = session.step(tok);
    }
  }
  return rec;
}

template <typename Real>
TraceDataset generate_traces(const model::FrozenModel<Real>& m, const SyntheticCorpus& corpus,
                             int count, std::uint64_t seed, double temperature, int max_len,
                             const TraceGenOptions& opts = {}) {
  require(count >= 1, "generate_traces: count must be >= 1");
  const auto base = model::forward_full(m, corpus.tokens);
  TraceDataset out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(generate_single_trace(m, corpus, base.caches, seed,
                                        static_cast<std::uint64_t>(i), temperature, max_len, opts));
  }
  return out;
}

// Distinct n-gram count over sliding windows, normalized by window count.
inline double ngram_diversity(std::span<const TokenId> tokens, int n) {
  require(n >= 1, "ngram_diversity: n must be >= 1");
  require(static_cast<int>(tokens.size()) >= n, "ngram_diversity: sequence shorter than n");
  const std::size_t windows = tokens.size() - static_cast<std::size_t>(n) + 1;
  std::vector<std::size_t> order(windows);
  for (std::size_t i = 0; i < windows; ++i) {
    order[i] = i;
  }
  auto cmp = [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(tokens.begin() + static_cast<std::ptrdiff_t>(a),
                                        tokens.begin() + static_cast<std::ptrdiff_t>(a + static_cast<std::size_t>(n)),
                                        tokens.begin() + static_cast<std::ptrdiff_t>(b),
                                        tokens.begin() + static_cast<std::ptrdiff_t>(b + static_cast<std::size_t>(n)));
  };
  std::sort(order.begin(), order.end(), cmp);
  std::size_t distinct = windows == 0 ? 0 : 1;
  for (std::size_t i = 1; i < windows; ++i) {
    if (cmp(order[i - 1], order[i])) {
      ++distinct;
    }
  }
  return static_cast<double>(distinct) / static_cast<double>(windows);
}

struct DiversityRow {
  int chunk_size = 0;
  double mean_diversity = 0.0;
};

// Mean n-gram diversity of SCI initializer sequences per chunk size.
inline std::vector<DiversityRow> diversity_sweep(std::span<const TokenId> corpus, int p,
                                                 std::span<const int> chunk_sizes,
                                                 std::span<const std::uint64_t> seeds, int n) {
  require(!chunk_sizes.empty(), "diversity_sweep: no chunk sizes");
  require(!seeds.empty(), "diversity_sweep: no seeds");
  std::vector<DiversityRow> rows;
  rows.reserve(chunk_sizes.size());
  for (int c : chunk_sizes) {
    require(c <= static_cast<int>(corpus.size()), "diversity_sweep: chunk size exceeds corpus");
    double acc = 0.0;
    for (std::uint64_t s : seeds) {
      const auto init = cartridge::sci_initializer_tokens(corpus, p, c, s);
      acc += ngram_diversity(init, n);
    }
    rows.push_back(DiversityRow{c, acc / static_cast<double>(seeds.size())});
  }
  return rows;
}

}  // namespace clab::selfstudy
