#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace stm {

// Graded relevance judgments: query id -> (doc id -> relevance >= 0).
struct Qrels {
  std::map<std::string, std::map<std::string, int>> judgments;

  int relevance(const std::string& qid, const std::string& did) const;
  bool has_query(const std::string& qid) const {
    return judgments.count(qid) != 0;
  }
};

struct ScoredDoc {
  std::string doc_id;
  double score;
};

// Per query, documents in descending score order; ties break by ascending
// doc id. No duplicate doc ids within a query.
struct RankedRun {
  std::map<std::string, std::vector<ScoredDoc>> rankings;

  void validate() const;
};

enum class GainScheme { kLinear, kExponential };

struct DatasetScores {
  double ndcg_at_10 = 0.0;
  double recall_at_10 = 0.0;
};

struct MetricReport {
  std::map<std::string, DatasetScores> per_dataset;
  DatasetScores avg_medical;
  DatasetScores avg_general;
  DatasetScores avg_all;
};

// Brute-force dense retrieval: top-k by cosine similarity over the corpus,
// deterministic doc-id tie-break.
std::vector<ScoredDoc> retrieve_topk(
    const Eigen::VectorXd& query_emb,
    const std::vector<std::pair<std::string, Eigen::VectorXd>>& corpus_embs,
    int k);

// Mean over queries of DCG@k / IDCG@k with rel / log2(rank+1) gains (the
// trec-style linear cut metric); queries with IDCG = 0 are excluded from the
// mean. The exponential (2^rel - 1) variant sits behind the gain flag.
double ndcg_at_k(const RankedRun& run, const Qrels& qrels, int k = 10,
                 GainScheme gain = GainScheme::kLinear);

double recall_at_k(const RankedRun& run, const Qrels& qrels, int k = 10);

// Unweighted means over member datasets per split plus overall. Labels must
// cover every dataset and each split must be non-empty.
MetricReport aggregate(const std::map<std::string, DatasetScores>& per_dataset,
                       const std::map<std::string, std::string>& split_labels);

// Whitespace-separated trec-style files: "qid 0 docid rel" / "qid docid rank score".
Qrels load_qrels(const std::filesystem::path& path);
void save_qrels(const Qrels& qrels, const std::filesystem::path& path);
RankedRun load_run(const std::filesystem::path& path);
void save_run(const RankedRun& run, const std::filesystem::path& path);

std::string report_to_json(const MetricReport& report);
std::string report_to_table(const MetricReport& report);

}  // namespace stm
