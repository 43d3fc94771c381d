#include "stm/dataset.hpp"

#include "stm/common.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

namespace stm {

namespace {

using nlohmann::json;

bool all_digits(const std::string& word) {
  if (word.empty()) return false;
  for (char c : word) {
    if (c < '0' || c > '9') return false;
  }
  return true;
}

}  // namespace

const std::vector<std::string> kSplitNames = {"med_synth", "med_real", "search",
                                              "nlu"};

std::string split_group(const std::string& split) {
  if (split == "med_synth" || split == "med_real") return "medical";
  if (split == "search" || split == "nlu") return "general";
  throw std::invalid_argument("unknown split '" + split + "'");
}

void RetrievalSet::validate() const {
  for (const auto& [qid, text] : queries) {
    if (qid.empty() || text.empty()) {
      throw std::runtime_error("query with empty id or text");
    }
  }
  for (const TripletRef& t : triplets) {
    if (!queries.count(t.query_id)) {
      throw std::runtime_error("triplet query '" + t.query_id + "' unresolved");
    }
    if (!corpus.count(t.positive_id)) {
      throw std::runtime_error("triplet positive '" + t.positive_id +
                               "' unresolved");
    }
    if (!corpus.count(t.negative_id)) {
      throw std::runtime_error("triplet negative '" + t.negative_id +
                               "' unresolved");
    }
    if (qrels.relevance(t.query_id, t.positive_id) <= 0) {
      throw std::runtime_error("triplet positive '" + t.positive_id +
                               "' lacks positive relevance");
    }
    if (qrels.relevance(t.query_id, t.negative_id) != 0) {
      throw std::runtime_error("triplet negative '" + t.negative_id +
                               "' carries positive relevance");
    }
  }
  for (const auto& [qid, prompt] : prompts) {
    if (!queries.count(qid)) {
      throw std::runtime_error("prompt assigned to unknown query '" + qid + "'");
    }
    if (prompt.empty()) {
      throw std::runtime_error("empty prompt assigned to '" + qid + "'");
    }
  }
}

void save_retrieval_set(const RetrievalSet& set,
                        const std::filesystem::path& path) {
  set.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write dataset '" + path.string() + "'");
  }
  for (const auto& [id, text] : set.corpus) {
    json rec{{"kind", "doc"}, {"id", id}, {"text", text}};
    auto it = set.doc_split.find(id);
    if (it != set.doc_split.end()) rec["split"] = it->second;
    out << rec.dump() << "\n";
  }
  for (const auto& [id, text] : set.queries) {
    json rec{{"kind", "query"}, {"id", id}, {"text", text}};
    auto it = set.query_split.find(id);
    rec["split"] = it != set.query_split.end() ? it->second : set.split;
    out << rec.dump() << "\n";
  }
  for (const RetrievalSet::TripletRef& t : set.triplets) {
    out << json{{"kind", "triplet"},
                {"query_id", t.query_id},
                {"positive_id", t.positive_id},
                {"negative_id", t.negative_id}}
               .dump()
        << "\n";
  }
  for (const auto& [qid, docs] : set.qrels.judgments) {
    for (const auto& [did, rel] : docs) {
      out << json{{"kind", "qrel"},
                  {"query_id", qid},
                  {"doc_id", did},
                  {"rel", rel}}
                 .dump()
          << "\n";
    }
  }
  for (const auto& [qid, prompt] : set.prompts) {
    out << json{{"kind", "prompt_assignment"},
                {"query_id", qid},
                {"prompt", prompt}}
               .dump()
        << "\n";
  }
}

RetrievalSet load_retrieval_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open dataset '" + path.string() + "'");
  }
  RetrievalSet set;
  std::set<std::string> splits_seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": bad JSON record: " + e.what());
    }
    const std::string kind = rec.at("kind").get<std::string>();
    if (kind == "doc") {
      const std::string id = rec.at("id").get<std::string>();
      set.corpus[id] = rec.at("text").get<std::string>();
      if (rec.contains("split")) {
        set.doc_split[id] = rec["split"].get<std::string>();
      }
    } else if (kind == "query") {
      const std::string id = rec.at("id").get<std::string>();
      set.queries[id] = rec.at("text").get<std::string>();
      if (rec.contains("split")) {
        const std::string split = rec["split"].get<std::string>();
        set.query_split[id] = split;
        splits_seen.insert(split);
      }
    } else if (kind == "triplet") {
      set.triplets.push_back({rec.at("query_id").get<std::string>(),
                              rec.at("positive_id").get<std::string>(),
                              rec.at("negative_id").get<std::string>()});
    } else if (kind == "qrel") {
      set.qrels.judgments[rec.at("query_id").get<std::string>()]
                         [rec.at("doc_id").get<std::string>()] =
          rec.at("rel").get<int>();
    } else if (kind == "prompt_assignment") {
      set.prompts[rec.at("query_id").get<std::string>()] =
          rec.at("prompt").get<std::string>();
    } else {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": unknown record kind '" + kind + "'");
    }
  }
  set.split = splits_seen.size() == 1 ? *splits_seen.begin() : "mixed";
  set.validate();
  return set;
}

TokenSeq tokenize(const std::string& text, const EncoderConfig& cfg) {
  TokenSeq tokens;
  const int hash_base = 2;
  const int hash_span = cfg.vocab_size - hash_base;
  if (hash_span <= 0) throw std::invalid_argument("vocab too small to tokenize");
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    int id = -1;
    if (all_digits(word) && word.size() <= 9) {
      long value = std::stol(word);
      if (value < cfg.vocab_size) id = static_cast<int>(value);
    }
    if (id < 0) {
      id = hash_base + static_cast<int>(fnv1a64(word) %
                                        static_cast<std::uint64_t>(hash_span));
    }
    tokens.push_back(id);
    word.clear();
  };
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      flush();
    } else {
      word.push_back(c);
    }
  }
  flush();
  if (static_cast<int>(tokens.size()) > cfg.max_len - 1) {
    tokens.resize(static_cast<std::size_t>(cfg.max_len - 1));
  }
  tokens.push_back(cfg.eos_id);
  return tokens;
}

std::string query_text_with_prompt(const RetrievalSet& set,
                                   const std::string& query_id) {
  const std::string& text = set.queries.at(query_id);
  auto it = set.prompts.find(query_id);
  if (it == set.prompts.end()) return text;
  return it->second + "\n" + text;
}

std::vector<Triplet> to_token_triplets(const RetrievalSet& set,
                                       const EncoderConfig& cfg) {
  set.validate();
  std::vector<Triplet> out;
  out.reserve(set.triplets.size());
  for (const RetrievalSet::TripletRef& ref : set.triplets) {
    Triplet t;
    t.query = tokenize(query_text_with_prompt(set, ref.query_id), cfg);
    t.positive = tokenize(set.corpus.at(ref.positive_id), cfg);
    t.negative = tokenize(set.corpus.at(ref.negative_id), cfg);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace stm
