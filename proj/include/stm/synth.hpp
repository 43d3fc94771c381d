#pragma once

#include "stm/dataset.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace stm {

// Raised by the text-generation client for failures worth retrying
// (connect errors, 5xx, timeouts). Auth and protocol errors are terminal.
struct TransientError : std::runtime_error {
  explicit TransientError(const std::string& what) : std::runtime_error(what) {}
};

struct GenerationParams {
  std::optional<double> temperature;
  std::optional<int> max_tokens;
};

// Narrow interface to an external text-generation endpoint.
class TextGenClient {
 public:
  virtual ~TextGenClient() = default;
  virtual std::string generate(const std::string& prompt,
                               const GenerationParams& params) = 0;
};

// Fixed-response client for tests and dry runs.
class StubClient : public TextGenClient {
 public:
  explicit StubClient(std::string response) : response_(std::move(response)) {}
  std::string generate(const std::string& prompt,
                       const GenerationParams&) override;
  const std::vector<std::string>& prompts_seen() const { return prompts_; }

 private:
  std::string response_;
  std::vector<std::string> prompts_;
};

// Replays responses recorded in an audit log, matched by prompt hash in
// recording order; every test involving generation can run offline.
class ReplayClient : public TextGenClient {
 public:
  explicit ReplayClient(const std::filesystem::path& audit_log);
  std::string generate(const std::string& prompt,
                       const GenerationParams&) override;

 private:
  std::map<std::string, std::vector<std::string>> responses_;
  std::map<std::string, std::size_t> cursor_;
};

// POSTs {"prompt", "temperature"?, "max_tokens"?} to the endpoint named by
// $STM_LLM_ENDPOINT (bearer token from $STM_LLM_TOKEN when set) and expects
// {"text": ...} back.
class HttpTextGenClient : public TextGenClient {
 public:
  HttpTextGenClient();  // from environment
  HttpTextGenClient(std::string endpoint, std::string token,
                    double timeout_seconds = 30.0);
  std::string generate(const std::string& prompt,
                       const GenerationParams& params) override;

 private:
  std::string endpoint_;
  std::string token_;
  double timeout_seconds_;
};

struct RequestOptions {
  GenerationParams params;
  int max_attempts = 3;             // transient-failure retries
  double backoff_initial_s = 0.25;  // doubles per retry
  std::filesystem::path audit_log;  // empty disables logging
};

// Renders the hard-negative generation instruction byte-exactly; all four
// slots must be non-empty.
std::string render_hard_negative_prompt(const std::string& query,
                                        const std::string& original_prompt,
                                        const std::string& positive_doc,
                                        const std::string& original_negative);

const std::string& hard_negative_template();

// Requests one synthetic hard negative. Transient failures retry with
// exponential backoff up to max_attempts; an empty generation is rejected and
// retried once. The successful response is appended to the audit log as
// {"timestamp", "prompt_hash", "response"}.
std::string request_negative(TextGenClient& client,
                             const std::string& rendered_prompt,
                             const RequestOptions& options = {});

struct PromptPool {
  std::vector<std::string> prompts;
  void validate() const;  // non-empty, unique
};

// One prompt per non-empty line.
PromptPool load_prompt_pool(const std::filesystem::path& path);

// Seeded uniform assignment over sorted query ids. The same map must be
// persisted with the dataset and reused at evaluation time.
std::map<std::string, std::string> assign_prompts(
    const std::map<std::string, std::string>& queries, const PromptPool& pool,
    std::uint64_t seed);

// Deterministic four-split toy corpus. Each split owns disjoint topics; a
// topic is a keyword set plus one answer token. Queries sample topic
// keywords; the positive carries the topic's answer token, the hard negative
// the same keywords with a wrong-topic answer.
struct ToyGenConfig {
  int topics_per_split = 4;
  int pairs_per_split = 500;
  int vocab_size = 512;
  std::uint64_t seed = 0;
  int keywords_per_topic = 5;
  int query_keywords = 3;
  int dev_queries_per_topic = 4;
  int test_queries_per_topic = 4;
  int max_filler = 2;

  void validate() const;
};

struct ToySets {
  std::vector<RetrievalSet> splits;  // med_synth, med_real, search, nlu
  RetrievalSet dev;
  RetrievalSet test;
};

ToySets generate_toy_sets(const ToyGenConfig& cfg);
ToySets generate_toy_sets(int topics_per_split, int pairs_per_split,
                          int vocab_size, std::uint64_t seed);

}  // namespace stm
