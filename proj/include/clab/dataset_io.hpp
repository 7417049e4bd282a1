// File formats for corpora, eval sets, and trace datasets: raw corpus bytes
// with a JSON facts sidecar, eval items as JSON, traces as line-delimited JSON.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "clab/core.hpp"
#include "clab/io.hpp"
#include "clab/selfstudy.hpp"
#include "json.hpp"

namespace clab::dataset_io {

inline void save_corpus(const selfstudy::CorpusBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::uint8_t> bytes;
  bytes.reserve(bundle.corpus.tokens.size());
  for (TokenId t : bundle.corpus.tokens) {
    bytes.push_back(static_cast<std::uint8_t>(t & 0xff));
  }
  io::write_file(dir / "corpus.bytes", bytes);

  nlohmann::json facts = nlohmann::json::array();
  for (const auto& f : bundle.corpus.facts) {
    facts.push_back({{"entity", f.entity}, {"attribute", f.attribute}, {"value_tokens", f.value_tokens}});
  }
  nlohmann::json sidecar{{"task_name", bundle.corpus.task_name},
                         {"digest", bundle.corpus.digest},
                         {"facts", facts}};
  io::write_text(dir / "corpus.json", sidecar.dump(2) + "\n");

  nlohmann::json eval = nlohmann::json::array();
  for (const auto& item : bundle.eval_items) {
    eval.push_back({{"question", item.question},
                    {"options",
                     nlohmann::json{item.options[0], item.options[1], item.options[2],
                                    item.options[3], item.options[4]}},
                    {"answer_index", item.answer_index}});
  }
  io::write_text(dir / "eval.json", nlohmann::json{{"items", eval}}.dump(2) + "\n");
}

inline selfstudy::CorpusBundle load_corpus(const std::filesystem::path& dir) {
  selfstudy::CorpusBundle bundle;
  const auto bytes = io::read_file(dir / "corpus.bytes");
  bundle.corpus.tokens.reserve(bytes.size());
  for (std::uint8_t b : bytes) {
    bundle.corpus.tokens.push_back(static_cast<TokenId>(b));
  }
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(io::read_text(dir / "corpus.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus.json is not valid JSON: ") + e.what());
  }
  bundle.corpus.task_name = sidecar.at("task_name").get<std::string>();
  bundle.corpus.digest = sidecar.at("digest").get<std::string>();
  for (const auto& f : sidecar.at("facts")) {
    bundle.corpus.facts.push_back(selfstudy::Fact{f.at("entity").get<std::string>(),
                                                  f.at("attribute").get<std::string>(),
                                                  f.at("value_tokens").get<TokenSeq>()});
  }
  if (bundle.corpus.digest != digest_tokens(bundle.corpus.tokens)) {
    throw FormatError("corpus digest mismatch (corrupt corpus.bytes?)");
  }

  const auto eval_path = dir / "eval.json";
  if (std::filesystem::exists(eval_path)) {
    nlohmann::json eval;
    try {
      eval = nlohmann::json::parse(io::read_text(eval_path));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("eval.json is not valid JSON: ") + e.what());
    }
    for (const auto& j : eval.at("items")) {
      selfstudy::EvalItem item;
      item.question = j.at("question").get<TokenSeq>();
      const auto& opts = j.at("options");
      require(opts.size() == 5, "eval.json: items need exactly 5 options");
      for (std::size_t o = 0; o < 5; ++o) {
        item.options[o] = opts[o].get<TokenSeq>();
      }
      item.answer_index = j.at("answer_index").get<int>();
      require(item.answer_index >= 0 && item.answer_index < 5, "eval.json: bad answer index");
      bundle.eval_items.push_back(std::move(item));
    }
  }
  return bundle;
}

inline void save_traces(const selfstudy::TraceDataset& traces, const std::filesystem::path& path) {
  std::string out;
  for (const auto& rec : traces) {
    std::vector<bool> mask(rec.loss_mask.begin(), rec.loss_mask.end());
    nlohmann::json j{{"seed_type", selfstudy::to_string(rec.seed_type)},
                     {"query", rec.query},
                     {"continuation", rec.continuation},
                     {"mask", mask}};
    out += j.dump() + "\n";
  }
  io::write_text(path, out);
}

inline selfstudy::TraceDataset load_traces(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open: " + path.string());
  }
  selfstudy::TraceDataset out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("trace line is not valid JSON: ") + e.what());
    }
    selfstudy::TraceRecord rec;
    rec.seed_type = selfstudy::seed_type_from_string(j.at("seed_type").get<std::string>());
    rec.query = j.at("query").get<TokenSeq>();
    rec.continuation = j.at("continuation").get<TokenSeq>();
    for (bool b : j.at("mask").get<std::vector<bool>>()) {
      rec.loss_mask.push_back(b ? 1 : 0);
    }
    require(!rec.continuation.empty(), "trace record: empty continuation");
    require(rec.loss_mask.size() == rec.continuation.size(), "trace record: mask length mismatch");
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace clab::dataset_io
