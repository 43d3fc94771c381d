#pragma once

#include "stm/encoder.hpp"
#include "stm/eval.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace stm {

// A retrieval corpus with queries, training triplets and judgments. `split`
// is the set-level label (one of the four training splits, or "mixed" for
// held-out sets whose queries carry their own origin labels).
struct RetrievalSet {
  struct TripletRef {
    std::string query_id;
    std::string positive_id;
    std::string negative_id;
  };

  std::map<std::string, std::string> corpus;   // doc id -> text
  std::map<std::string, std::string> queries;  // query id -> text
  std::vector<TripletRef> triplets;
  Qrels qrels;
  std::string split;
  std::map<std::string, std::string> query_split;  // per-query origin
  std::map<std::string, std::string> doc_split;    // per-doc origin
  std::map<std::string, std::string> prompts;      // persisted assignment

  void validate() const;
};

extern const std::vector<std::string> kSplitNames;  // med_synth med_real search nlu

// medical / general grouping of the four splits.
std::string split_group(const std::string& split);

// Line-delimited JSON records with kind doc | query | triplet | qrel |
// prompt_assignment.
void save_retrieval_set(const RetrievalSet& set,
                        const std::filesystem::path& path);
RetrievalSet load_retrieval_set(const std::filesystem::path& path);

// Whitespace tokenizer for the toy corpus: decimal words map to their literal
// token id, anything else hashes into [2, vocab). Truncates to max_len - 1
// and appends EOS.
TokenSeq tokenize(const std::string& text, const EncoderConfig& cfg);

// Query text with its persisted prompt prepended as "<prompt>\n<query>".
std::string query_text_with_prompt(const RetrievalSet& set,
                                   const std::string& query_id);

// Token triplets for training, prompts applied to queries.
std::vector<Triplet> to_token_triplets(const RetrievalSet& set,
                                       const EncoderConfig& cfg);

}  // namespace stm
