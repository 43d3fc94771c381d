#include "stm/synth.hpp"

#include "stm/common.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <set>
#include <thread>

namespace stm {

namespace {

using nlohmann::json;

const char* const kHardNegativeTemplate =
    "Given this query: \"{query}\"\n"
    "\n"
    "Original prompt: \"{original_prompt}\"\n"
    "\n"
    "Original positive document: \"{positive_doc}\"\n"
    "\n"
    "Original negative document: \"{original_negative}\"\n"
    "\n"
    "Generate a HARD negative document that is:\n"
    "\n"
    "1. Related to the same domain (extract domain from the query)\n"
    "\n"
    "2. Contains similar terminology and concepts as the positive document\n"
    "\n"
    "3. But is NOT relevant to answering the specific query\n"
    "\n"
    "4. Should be moderately challenging to distinguish from the positive "
    "document\n"
    "\n"
    "5. Should be a realistic document in the domain\n"
    "\n"
    "6. Should be harder than the original negative document but not as hard "
    "as a super hard negative\n"
    "\n"
    "IMPORTANT: Return ONLY the document text. Do not include any "
    "introductory text, explanations, summaries, or meta-commentary. Just "
    "return the raw document content.\n";

void replace_slot(std::string& text, const std::string& slot,
                  const std::string& value) {
  const std::string needle = "{" + slot + "}";
  auto pos = text.find(needle);
  if (pos == std::string::npos) {
    throw std::logic_error("template slot '" + slot + "' missing");
  }
  text.replace(pos, needle.size(), value);
}

std::string iso8601_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

void append_audit(const std::filesystem::path& path, const std::string& prompt,
                  const std::string& response) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::app);
  if (!out) {
    throw std::runtime_error("cannot append audit log '" + path.string() + "'");
  }
  out << json{{"timestamp", iso8601_now()},
              {"prompt_hash", hex64(fnv1a64(prompt))},
              {"response", response}}
             .dump()
      << "\n";
}

// Split "http://host:port/path" into client base and path.
std::pair<std::string, std::string> split_endpoint(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("endpoint URL '" + url + "' has no scheme");
  }
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

std::string StubClient::generate(const std::string& prompt,
                                 const GenerationParams&) {
  prompts_.push_back(prompt);
  return response_;
}

ReplayClient::ReplayClient(const std::filesystem::path& audit_log) {
  std::ifstream in(audit_log);
  if (!in) {
    throw std::runtime_error("cannot open replay log '" + audit_log.string() +
                             "'");
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    responses_[rec.at("prompt_hash").get<std::string>()].push_back(
        rec.at("response").get<std::string>());
  }
}

std::string ReplayClient::generate(const std::string& prompt,
                                   const GenerationParams&) {
  const std::string key = hex64(fnv1a64(prompt));
  auto it = responses_.find(key);
  if (it == responses_.end()) {
    throw std::runtime_error("replay log has no response for prompt hash " + key);
  }
  std::size_t& pos = cursor_[key];
  if (pos >= it->second.size()) pos = it->second.size() - 1;  // repeat last
  return it->second[pos++];
}

HttpTextGenClient::HttpTextGenClient() : timeout_seconds_(30.0) {
  const char* endpoint = std::getenv("STM_LLM_ENDPOINT");
  if (endpoint == nullptr || *endpoint == '\0') {
    throw ConfigError("STM_LLM_ENDPOINT is not set");
  }
  endpoint_ = endpoint;
  const char* token = std::getenv("STM_LLM_TOKEN");
  token_ = token == nullptr ? "" : token;
}

HttpTextGenClient::HttpTextGenClient(std::string endpoint, std::string token,
                                     double timeout_seconds)
    : endpoint_(std::move(endpoint)),
      token_(std::move(token)),
      timeout_seconds_(timeout_seconds) {}

std::string HttpTextGenClient::generate(const std::string& prompt,
                                        const GenerationParams& params) {
  auto [base, path] = split_endpoint(endpoint_);
  httplib::Client cli(base);
  cli.set_connection_timeout(std::chrono::duration<double>(timeout_seconds_));
  cli.set_read_timeout(std::chrono::duration<double>(timeout_seconds_));

  json body{{"prompt", prompt}};
  if (params.temperature) body["temperature"] = *params.temperature;
  if (params.max_tokens) body["max_tokens"] = *params.max_tokens;

  httplib::Headers headers;
  if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

  auto res = cli.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw TransientError("request to " + endpoint_ + " failed: " +
                         httplib::to_string(res.error()));
  }
  if (res->status == 401 || res->status == 403) {
    throw std::runtime_error("authentication failed against " + endpoint_ +
                             " (status " + std::to_string(res->status) + ")");
  }
  if (res->status >= 500 || res->status == 429) {
    throw TransientError("endpoint returned status " +
                         std::to_string(res->status));
  }
  if (res->status != 200) {
    throw std::runtime_error("endpoint returned status " +
                             std::to_string(res->status));
  }
  try {
    json reply = json::parse(res->body);
    return reply.at("text").get<std::string>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed endpoint response: ") +
                             e.what());
  }
}

const std::string& hard_negative_template() {
  static const std::string tmpl = kHardNegativeTemplate;
  return tmpl;
}

std::string render_hard_negative_prompt(const std::string& query,
                                        const std::string& original_prompt,
                                        const std::string& positive_doc,
                                        const std::string& original_negative) {
  if (query.empty() || original_prompt.empty() || positive_doc.empty() ||
      original_negative.empty()) {
    throw std::invalid_argument(
        "hard-negative prompt requires all four fields to be non-empty");
  }
  std::string text = hard_negative_template();
  replace_slot(text, "query", query);
  replace_slot(text, "original_prompt", original_prompt);
  replace_slot(text, "positive_doc", positive_doc);
  replace_slot(text, "original_negative", original_negative);
  return text;
}

std::string request_negative(TextGenClient& client,
                             const std::string& rendered_prompt,
                             const RequestOptions& options) {
  if (options.max_attempts < 1) {
    throw std::invalid_argument("max_attempts must be >= 1");
  }
  int transient_attempts = 0;
  int empty_retries = 0;
  double backoff = options.backoff_initial_s;
  for (;;) {
    std::string response;
    try {
      response = client.generate(rendered_prompt, options.params);
    } catch (const TransientError& e) {
      ++transient_attempts;
      if (transient_attempts >= options.max_attempts) {
        throw std::runtime_error("generation failed after " +
                                 std::to_string(transient_attempts) +
                                 " attempts: " + e.what());
      }
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= 2.0;
      continue;
    }
    if (response.empty()) {
      ++empty_retries;
      if (empty_retries > 1) {
        throw std::runtime_error(
            "empty generation after " + std::to_string(empty_retries) +
            " attempts");
      }
      continue;
    }
    append_audit(options.audit_log, rendered_prompt, response);
    return response;
  }
}

void PromptPool::validate() const {
  if (prompts.empty()) throw std::invalid_argument("prompt pool is empty");
  std::set<std::string> seen;
  for (const std::string& p : prompts) {
    if (p.empty()) throw std::invalid_argument("prompt pool contains an empty prompt");
    if (!seen.insert(p).second) {
      throw std::invalid_argument("prompt pool contains duplicates");
    }
  }
}

PromptPool load_prompt_pool(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open prompt pool '" + path.string() + "'");
  }
  PromptPool pool;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) pool.prompts.push_back(line);
  }
  pool.validate();
  return pool;
}

std::map<std::string, std::string> assign_prompts(
    const std::map<std::string, std::string>& queries, const PromptPool& pool,
    std::uint64_t seed) {
  pool.validate();
  Rng rng(seed);
  std::map<std::string, std::string> assignment;
  for (const auto& [qid, text] : queries) {
    (void)text;
    assignment[qid] = pool.prompts[rng.below(pool.prompts.size())];
  }
  return assignment;
}

void ToyGenConfig::validate() const {
  if (topics_per_split < 1 || pairs_per_split < 1) {
    throw std::invalid_argument("topics_per_split and pairs_per_split must be >= 1");
  }
  const int total_topics = 4 * topics_per_split;
  if (vocab_size < 8 * total_topics) {
    throw std::invalid_argument("vocab " + std::to_string(vocab_size) +
                                " too small: need at least 8 tokens per topic (" +
                                std::to_string(8 * total_topics) + ")");
  }
  if (query_keywords > keywords_per_topic) {
    throw std::invalid_argument("query_keywords exceeds keywords_per_topic");
  }
  if (keywords_per_topic < 2 || query_keywords < 1) {
    throw std::invalid_argument("need at least 2 keywords per topic");
  }
  if (dev_queries_per_topic < 1 || test_queries_per_topic < 1) {
    throw std::invalid_argument("held-out queries per topic must be >= 1");
  }
}

namespace {

// Token layout: 0 = EOS, 1 = query marker, then answer tokens, then per-topic
// keyword blocks, then filler.
struct TokenLayout {
  int total_topics;
  int answers_begin;
  int keywords_begin;
  int keywords_per_topic;
  int filler_begin;
  int vocab;

  int answer(int topic) const { return answers_begin + topic; }
  int keyword(int topic, int k) const {
    return keywords_begin + topic * keywords_per_topic + k;
  }
};

TokenLayout make_layout(const ToyGenConfig& cfg) {
  TokenLayout lay{};
  lay.total_topics = 4 * cfg.topics_per_split;
  lay.answers_begin = 2;
  lay.keywords_begin = 2 + lay.total_topics;
  lay.keywords_per_topic = cfg.keywords_per_topic;
  lay.filler_begin =
      lay.keywords_begin + lay.total_topics * cfg.keywords_per_topic;
  lay.vocab = cfg.vocab_size;
  if (lay.filler_begin >= lay.vocab) {
    throw std::invalid_argument("vocab too small for keyword layout");
  }
  return lay;
}

std::string join_tokens(const std::vector<int>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

std::vector<int> sample_keywords(Rng& rng, const TokenLayout& lay, int topic,
                                 int count) {
  std::vector<int> pool(static_cast<std::size_t>(lay.keywords_per_topic));
  for (int k = 0; k < lay.keywords_per_topic; ++k) {
    pool[static_cast<std::size_t>(k)] = lay.keyword(topic, k);
  }
  rng.shuffle(pool);
  pool.resize(static_cast<std::size_t>(count));
  return pool;
}

void append_filler(Rng& rng, const TokenLayout& lay, int max_filler,
                   std::vector<int>& tokens) {
  const int span = lay.vocab - lay.filler_begin;
  if (span <= 0 || max_filler <= 0) return;
  const int n = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_filler) + 1));
  for (int i = 0; i < n; ++i) {
    tokens.push_back(lay.filler_begin + static_cast<int>(rng.below(span)));
  }
}

// One query with its positive and hard-negative documents.
void emit_example(Rng& rng, const ToyGenConfig& cfg, const TokenLayout& lay,
                  int topic, int wrong_topic, const std::string& qid,
                  const std::string& pos_id, const std::string& neg_id,
                  RetrievalSet& set) {
  std::vector<int> kws = sample_keywords(rng, lay, topic, cfg.query_keywords);

  std::vector<int> q_tokens = kws;
  q_tokens.push_back(1);
  set.queries[qid] = join_tokens(q_tokens);

  std::vector<int> pos_tokens = kws;
  pos_tokens.push_back(lay.answer(topic));
  append_filler(rng, lay, cfg.max_filler, pos_tokens);
  set.corpus[pos_id] = join_tokens(pos_tokens);

  std::vector<int> neg_tokens = kws;
  neg_tokens.push_back(lay.answer(wrong_topic));
  append_filler(rng, lay, cfg.max_filler, neg_tokens);
  set.corpus[neg_id] = join_tokens(neg_tokens);

  set.triplets.push_back({qid, pos_id, neg_id});
  set.qrels.judgments[qid][pos_id] = 1;
  set.qrels.judgments[qid][neg_id] = 0;
}

int pick_wrong_topic(Rng& rng, int topic, int split, int topics_per_split) {
  if (topics_per_split > 1) {
    // Wrong answer from the same split keeps experts honest within their
    // own domain.
    int offset = 1 + static_cast<int>(rng.below(
                         static_cast<std::uint64_t>(topics_per_split - 1)));
    int local = (topic - split * topics_per_split + offset) % topics_per_split;
    return split * topics_per_split + local;
  }
  return (topic + 1 + static_cast<int>(rng.below(3))) % 4;
}

RetrievalSet make_heldout(Rng& rng, const ToyGenConfig& cfg,
                          const TokenLayout& lay, const std::string& tag,
                          int queries_per_topic) {
  RetrievalSet set;
  set.split = "mixed";
  for (int split = 0; split < 4; ++split) {
    for (int local = 0; local < cfg.topics_per_split; ++local) {
      const int topic = split * cfg.topics_per_split + local;
      for (int i = 0; i < queries_per_topic; ++i) {
        const std::string stem = tag + "_t" + std::to_string(topic) + "_" +
                                 std::to_string(i);
        const int wrong =
            pick_wrong_topic(rng, topic, split, cfg.topics_per_split);
        emit_example(rng, cfg, lay, topic, wrong, "q_" + stem, "dp_" + stem,
                     "dn_" + stem, set);
        set.query_split["q_" + stem] = kSplitNames[static_cast<std::size_t>(split)];
      }
    }
  }
  set.validate();
  return set;
}

}  // namespace

ToySets generate_toy_sets(const ToyGenConfig& cfg) {
  cfg.validate();
  const TokenLayout lay = make_layout(cfg);
  Rng rng(cfg.seed);

  ToySets out;
  for (int split = 0; split < 4; ++split) {
    RetrievalSet set;
    set.split = kSplitNames[static_cast<std::size_t>(split)];
    Rng split_rng = rng.fork(static_cast<std::uint64_t>(split) + 1);
    for (int i = 0; i < cfg.pairs_per_split; ++i) {
      const int local = static_cast<int>(
          split_rng.below(static_cast<std::uint64_t>(cfg.topics_per_split)));
      const int topic = split * cfg.topics_per_split + local;
      const int wrong =
          pick_wrong_topic(split_rng, topic, split, cfg.topics_per_split);
      const std::string stem = set.split + "_" + std::to_string(i);
      emit_example(split_rng, cfg, lay, topic, wrong, "q_" + stem, "p_" + stem,
                   "n_" + stem, set);
      set.query_split["q_" + stem] = set.split;
    }
    set.validate();
    out.splits.push_back(std::move(set));
  }

  Rng dev_rng = rng.fork(101);
  out.dev = make_heldout(dev_rng, cfg, lay, "dev", cfg.dev_queries_per_topic);
  Rng test_rng = rng.fork(102);
  out.test =
      make_heldout(test_rng, cfg, lay, "test", cfg.test_queries_per_topic);
  return out;
}

ToySets generate_toy_sets(int topics_per_split, int pairs_per_split,
                          int vocab_size, std::uint64_t seed) {
  ToyGenConfig cfg;
  cfg.topics_per_split = topics_per_split;
  cfg.pairs_per_split = pairs_per_split;
  cfg.vocab_size = vocab_size;
  cfg.seed = seed;
  return generate_toy_sets(cfg);
}

}  // namespace stm
