#include "stm/dataset.hpp"

#include "helpers.hpp"

#include <doctest.h>

#include <fstream>

using namespace stm;
using stm::test::TempDir;

namespace {

RetrievalSet tiny_set() {
  RetrievalSet set;
  set.split = "search";
  set.corpus = {{"d1", "20 21 3"}, {"d2", "20 21 4"}};
  set.queries = {{"q1", "20 21 1"}};
  set.query_split["q1"] = "search";
  set.triplets = {{"q1", "d1", "d2"}};
  set.qrels.judgments["q1"] = {{"d1", 1}, {"d2", 0}};
  return set;
}

}  // namespace

TEST_SUITE_BEGIN("dataset");

TEST_CASE("validation catches dangling ids and bad relevance") {
  RetrievalSet set = tiny_set();
  CHECK_NOTHROW(set.validate());

  RetrievalSet missing_doc = tiny_set();
  missing_doc.triplets[0].positive_id = "ghost";
  CHECK_THROWS(missing_doc.validate());

  RetrievalSet neg_is_positive = tiny_set();
  neg_is_positive.qrels.judgments["q1"]["d2"] = 1;
  CHECK_THROWS(neg_is_positive.validate());

  RetrievalSet pos_unjudged = tiny_set();
  pos_unjudged.qrels.judgments["q1"].erase("d1");
  CHECK_THROWS(pos_unjudged.validate());
}

TEST_CASE("jsonl round trip preserves everything") {
  TempDir dir("ds_rt");
  RetrievalSet set = tiny_set();
  set.prompts["q1"] = "Given a web search query, retrieve relevant passages.";
  save_retrieval_set(set, dir.file("set.jsonl"));
  RetrievalSet back = load_retrieval_set(dir.file("set.jsonl"));
  CHECK(back.corpus == set.corpus);
  CHECK(back.queries == set.queries);
  CHECK(back.qrels.judgments == set.qrels.judgments);
  CHECK(back.prompts == set.prompts);
  CHECK(back.split == "search");
  REQUIRE(back.triplets.size() == 1);
  CHECK(back.triplets[0].query_id == "q1");
  CHECK(back.triplets[0].positive_id == "d1");
  CHECK(back.triplets[0].negative_id == "d2");
}

TEST_CASE("mixed-split sets load with the mixed label") {
  TempDir dir("ds_mixed");
  RetrievalSet set = tiny_set();
  set.queries["q2"] = "30 31 1";
  set.query_split["q2"] = "nlu";
  set.corpus["d3"] = "30 31 5";
  set.corpus["d4"] = "30 31 6";
  set.triplets.push_back({"q2", "d3", "d4"});
  set.qrels.judgments["q2"] = {{"d3", 1}, {"d4", 0}};
  set.split = "mixed";
  save_retrieval_set(set, dir.file("mixed.jsonl"));
  RetrievalSet back = load_retrieval_set(dir.file("mixed.jsonl"));
  CHECK(back.split == "mixed");
  CHECK(back.query_split.at("q1") == "search");
  CHECK(back.query_split.at("q2") == "nlu");
}

TEST_CASE("unknown record kinds are rejected") {
  TempDir dir("ds_kind");
  std::ofstream out(dir.file("bad.jsonl"));
  out << R"({"kind":"mystery","id":"x"})" << "\n";
  out.close();
  CHECK_THROWS(load_retrieval_set(dir.file("bad.jsonl")));
}

TEST_CASE("tokenizer maps digit words to literal ids and hashes the rest") {
  EncoderConfig cfg;
  cfg.vocab_size = 64;
  cfg.max_len = 8;
  TokenSeq t = tokenize("20 21 3", cfg);
  CHECK(t == TokenSeq{20, 21, 3, 0});

  TokenSeq hashed = tokenize("retrieve relevant passages", cfg);
  REQUIRE(hashed.size() == 4);
  for (std::size_t i = 0; i + 1 < hashed.size(); ++i) {
    CHECK(hashed[i] >= 2);
    CHECK(hashed[i] < 64);
  }
  CHECK(hashed.back() == 0);
  // Deterministic.
  CHECK(tokenize("retrieve relevant passages", cfg) == hashed);

  // Out-of-range digit words fall back to hashing instead of erroring.
  TokenSeq big = tokenize("99999", cfg);
  CHECK(big[0] >= 2);
  CHECK(big[0] < 64);
}

TEST_CASE("tokenizer truncates to max_len and keeps the terminal EOS") {
  EncoderConfig cfg;
  cfg.vocab_size = 64;
  cfg.max_len = 4;
  TokenSeq t = tokenize("10 11 12 13 14 15", cfg);
  CHECK(t == TokenSeq{10, 11, 12, 0});
}

TEST_CASE("prompts prepend as prompt newline query") {
  RetrievalSet set = tiny_set();
  set.prompts["q1"] = "find the answer";
  CHECK(query_text_with_prompt(set, "q1") == "find the answer\n20 21 1");
  set.prompts.clear();
  CHECK(query_text_with_prompt(set, "q1") == "20 21 1");
}

TEST_CASE("token triplets carry prompt conditioning and EOS") {
  EncoderConfig cfg;
  cfg.vocab_size = 64;
  cfg.max_len = 12;
  RetrievalSet set = tiny_set();
  auto plain = to_token_triplets(set, cfg);
  REQUIRE(plain.size() == 1);
  CHECK(plain[0].query == TokenSeq{20, 21, 1, 0});
  CHECK(plain[0].positive == TokenSeq{20, 21, 3, 0});
  CHECK(plain[0].negative == TokenSeq{20, 21, 4, 0});

  set.prompts["q1"] = "focus";
  auto prompted = to_token_triplets(set, cfg);
  CHECK(prompted[0].query.size() == 5);  // hash(focus), 20, 21, 1, eos
  CHECK(prompted[0].query[1] == 20);
}

TEST_CASE("split groups") {
  CHECK(split_group("med_synth") == "medical");
  CHECK(split_group("med_real") == "medical");
  CHECK(split_group("search") == "general");
  CHECK(split_group("nlu") == "general");
  CHECK_THROWS(split_group("other"));
}

TEST_SUITE_END();
