#include "stm/eval.hpp"

#include "stm/common.hpp"
#include "stm/encoder.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace stm {

namespace {

double gain_of(int rel, GainScheme gain) {
  if (gain == GainScheme::kLinear) return static_cast<double>(rel);
  return std::pow(2.0, static_cast<double>(rel)) - 1.0;
}

double discounted_sum(const std::vector<int>& rels, int k, GainScheme gain) {
  double dcg = 0.0;
  const int limit = std::min<int>(k, static_cast<int>(rels.size()));
  for (int i = 0; i < limit; ++i) {
    dcg += gain_of(rels[static_cast<std::size_t>(i)], gain) /
           std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg;
}

}  // namespace

int Qrels::relevance(const std::string& qid, const std::string& did) const {
  auto it = judgments.find(qid);
  if (it == judgments.end()) return 0;
  auto jt = it->second.find(did);
  return jt == it->second.end() ? 0 : jt->second;
}

void RankedRun::validate() const {
  for (const auto& [qid, docs] : rankings) {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (!seen.insert(docs[i].doc_id).second) {
        throw std::runtime_error("run for query '" + qid +
                                 "' repeats doc '" + docs[i].doc_id + "'");
      }
      if (i > 0) {
        const ScoredDoc& prev = docs[i - 1];
        const ScoredDoc& cur = docs[i];
        const bool ordered =
            prev.score > cur.score ||
            (prev.score == cur.score && prev.doc_id < cur.doc_id);
        if (!ordered) {
          throw std::runtime_error("run for query '" + qid +
                                   "' is not in ranked order");
        }
      }
    }
  }
}

std::vector<ScoredDoc> retrieve_topk(
    const Eigen::VectorXd& query_emb,
    const std::vector<std::pair<std::string, Eigen::VectorXd>>& corpus_embs,
    int k) {
  if (k < 1) throw std::invalid_argument("retrieve_topk: k must be >= 1");
  if (corpus_embs.empty()) {
    throw std::invalid_argument("retrieve_topk: empty corpus");
  }
  std::vector<ScoredDoc> scored;
  scored.reserve(corpus_embs.size());
  for (const auto& [doc_id, emb] : corpus_embs) {
    scored.push_back({doc_id, cosine_sim(query_emb, emb)});
  }
  auto better = [](const ScoredDoc& a, const ScoredDoc& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
  };
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k),
                                                 scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(keep),
                    scored.end(), better);
  scored.resize(keep);
  return scored;
}

double ndcg_at_k(const RankedRun& run, const Qrels& qrels, int k,
                 GainScheme gain) {
  run.validate();
  double total = 0.0;
  int counted = 0;
  bool any_known = false;
  for (const auto& [qid, docs] : run.rankings) {
    if (!qrels.has_query(qid)) {
      throw std::runtime_error("run query '" + qid + "' missing from qrels");
    }
    any_known = true;

    std::vector<int> ranked_rels;
    ranked_rels.reserve(docs.size());
    for (const ScoredDoc& d : docs) {
      ranked_rels.push_back(qrels.relevance(qid, d.doc_id));
    }
    std::vector<int> ideal;
    for (const auto& [did, rel] : qrels.judgments.at(qid)) {
      (void)did;
      if (rel > 0) ideal.push_back(rel);
    }
    std::sort(ideal.rbegin(), ideal.rend());

    // IDCG over the full ideal ranking (not cut at k); this keeps NDCG@k
    // monotone non-decreasing in k.
    const double idcg =
        discounted_sum(ideal, static_cast<int>(ideal.size()), gain);
    if (idcg <= 0.0) continue;  // unjudgeable query, excluded from the mean
    total += discounted_sum(ranked_rels, k, gain) / idcg;
    ++counted;
  }
  if (!any_known || run.rankings.empty()) {
    throw std::runtime_error("ndcg_at_k: no scored queries");
  }
  return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

double recall_at_k(const RankedRun& run, const Qrels& qrels, int k) {
  run.validate();
  if (run.rankings.empty()) {
    throw std::runtime_error("recall_at_k: no scored queries");
  }
  double total = 0.0;
  int counted = 0;
  for (const auto& [qid, docs] : run.rankings) {
    if (!qrels.has_query(qid)) {
      throw std::runtime_error("run query '" + qid + "' missing from qrels");
    }
    std::size_t relevant = 0;
    for (const auto& [did, rel] : qrels.judgments.at(qid)) {
      (void)did;
      if (rel > 0) ++relevant;
    }
    if (relevant == 0) continue;
    std::size_t hit = 0;
    const std::size_t limit = std::min<std::size_t>(static_cast<std::size_t>(k),
                                                    docs.size());
    for (std::size_t i = 0; i < limit; ++i) {
      if (qrels.relevance(qid, docs[i].doc_id) > 0) ++hit;
    }
    total += static_cast<double>(hit) / static_cast<double>(relevant);
    ++counted;
  }
  return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

MetricReport aggregate(const std::map<std::string, DatasetScores>& per_dataset,
                       const std::map<std::string, std::string>& split_labels) {
  if (per_dataset.empty()) throw std::invalid_argument("aggregate: no datasets");
  MetricReport report;
  report.per_dataset = per_dataset;
  DatasetScores med{}, gen{}, all{};
  int n_med = 0, n_gen = 0, n_all = 0;
  for (const auto& [name, scores] : per_dataset) {
    auto it = split_labels.find(name);
    if (it == split_labels.end()) {
      throw std::invalid_argument("dataset '" + name + "' has no split label");
    }
    DatasetScores* bucket = nullptr;
    if (it->second == "medical") {
      bucket = &med;
      ++n_med;
    } else if (it->second == "general") {
      bucket = &gen;
      ++n_gen;
    } else {
      throw std::invalid_argument("split label for '" + name +
                                  "' must be medical or general");
    }
    bucket->ndcg_at_10 += scores.ndcg_at_10;
    bucket->recall_at_10 += scores.recall_at_10;
    all.ndcg_at_10 += scores.ndcg_at_10;
    all.recall_at_10 += scores.recall_at_10;
    ++n_all;
  }
  if (n_med == 0 || n_gen == 0) {
    throw std::invalid_argument("aggregate: empty split");
  }
  report.avg_medical = {med.ndcg_at_10 / n_med, med.recall_at_10 / n_med};
  report.avg_general = {gen.ndcg_at_10 / n_gen, gen.recall_at_10 / n_gen};
  report.avg_all = {all.ndcg_at_10 / n_all, all.recall_at_10 / n_all};
  return report;
}

Qrels load_qrels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open qrels '" + path.string() + "'");
  Qrels qrels;
  std::string qid, iter, did;
  int rel = 0;
  while (in >> qid >> iter >> did >> rel) {
    if (rel < 0) {
      throw std::runtime_error("negative relevance for (" + qid + ", " + did + ")");
    }
    qrels.judgments[qid][did] = rel;
  }
  return qrels;
}

void save_qrels(const Qrels& qrels, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write qrels '" + path.string() + "'");
  for (const auto& [qid, docs] : qrels.judgments) {
    for (const auto& [did, rel] : docs) {
      out << qid << " 0 " << did << " " << rel << "\n";
    }
  }
}

RankedRun load_run(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open run '" + path.string() + "'");
  RankedRun run;
  std::string qid, did;
  long rank = 0;
  double score = 0.0;
  while (in >> qid >> did >> rank >> score) {
    run.rankings[qid].push_back({did, score});
  }
  run.validate();
  return run;
}

void save_run(const RankedRun& run, const std::filesystem::path& path) {
  run.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write run '" + path.string() + "'");
  char buf[64];
  for (const auto& [qid, docs] : run.rankings) {
    for (std::size_t i = 0; i < docs.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", docs[i].score);
      out << qid << " " << docs[i].doc_id << " " << (i + 1) << " " << buf << "\n";
    }
  }
}

std::string report_to_json(const MetricReport& report) {
  nlohmann::json j;
  for (const auto& [name, s] : report.per_dataset) {
    j["per_dataset"][name] = {{"ndcg@10", s.ndcg_at_10},
                              {"recall@10", s.recall_at_10}};
  }
  auto agg = [](const DatasetScores& s) {
    return nlohmann::json{{"ndcg@10", s.ndcg_at_10},
                          {"recall@10", s.recall_at_10}};
  };
  j["avg_medical"] = agg(report.avg_medical);
  j["avg_general"] = agg(report.avg_general);
  j["avg_all"] = agg(report.avg_all);
  return j.dump(2);
}

std::string report_to_table(const MetricReport& report) {
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-24s %10s %10s\n", "dataset", "ndcg@10",
                "recall@10");
  out << buf;
  auto row = [&](const std::string& name, const DatasetScores& s) {
    std::snprintf(buf, sizeof(buf), "%-24s %10.4f %10.4f\n", name.c_str(),
                  s.ndcg_at_10, s.recall_at_10);
    out << buf;
  };
  for (const auto& [name, s] : report.per_dataset) row(name, s);
  row("avg_medical", report.avg_medical);
  row("avg_general", report.avg_general);
  row("avg_all", report.avg_all);
  return out.str();
}

}  // namespace stm
