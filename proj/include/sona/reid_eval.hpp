#pragma once

// Single-query re-identification evaluation: CMC and mAP with the junk
// (person_id == -1) and same-identity-same-camera exclusion rules.

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sona/tensor.hpp"
#include "sona/text.hpp"

namespace sona {

struct EmbeddingRecord {
  int person_id = 0;  // -1 marks a junk image
  int camera_id = 0;
  std::vector<double> feature;

  bool operator==(const EmbeddingRecord&) const = default;
};

struct RankingResult {
  std::vector<double> cmc;  // cmc[k-1] = rate of first true match within top k
  double map = 0.0;
  std::vector<double> per_query_ap;  // evaluated queries only, in query order
  std::size_t evaluated = 0;
  std::size_t skipped = 0;
};

enum class DistanceMetric { euclidean, cosine };

struct DistanceMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

inline DistanceMatrix pairwise_distances(const std::vector<std::vector<double>>& queries,
                                         const std::vector<std::vector<double>>& gallery,
                                         DistanceMetric metric = DistanceMetric::euclidean) {
  DistanceMatrix d{queries.size(), gallery.size(), std::vector<double>(queries.size() * gallery.size())};
  const std::size_t len = queries.empty() ? (gallery.empty() ? 0 : gallery[0].size()) : queries[0].size();
  auto check = [len](const std::vector<double>& v) {
    if (v.size() != len)
      throw dimension_error("pairwise_distances: feature length " + std::to_string(v.size()) + " vs " +
                            std::to_string(len));
  };
  std::for_each(queries.begin(), queries.end(), check);
  std::for_each(gallery.begin(), gallery.end(), check);
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double e : v) s += e * e;
    return std::sqrt(s);
  };
  for (std::size_t i = 0; i < queries.size(); ++i)
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      const auto& q = queries[i];
      const auto& g = gallery[j];
      double out = 0.0;
      if (metric == DistanceMetric::euclidean) {
        for (std::size_t k = 0; k < len; ++k) out += (q[k] - g[k]) * (q[k] - g[k]);
        out = std::sqrt(out);
      } else {
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += q[k] * g[k];
        const double denom = norm(q) * norm(g);
        out = 1.0 - (denom > 0.0 ? dot / denom : 0.0);
      }
      d.values[i * d.cols + j] = out;
    }
  return d;
}

// AP over a ranked list of match flags; nullopt when nothing is relevant.
inline std::optional<double> average_precision(const std::vector<bool>& ranked_good) {
  std::size_t hits = 0;
  double acc = 0.0;
  for (std::size_t k = 0; k < ranked_good.size(); ++k) {
    if (!ranked_good[k]) continue;
    ++hits;
    acc += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  if (hits == 0) return std::nullopt;
  return acc / static_cast<double>(hits);
}

// Gallery order for one query: ascending distance, ties by gallery index.
inline std::vector<std::size_t> rank_gallery(const DistanceMatrix& d, std::size_t query) {
  std::vector<std::size_t> order(d.cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return d.at(query, a) < d.at(query, b); });
  return order;
}

inline RankingResult evaluate(const std::vector<EmbeddingRecord>& queries,
                              const std::vector<EmbeddingRecord>& gallery, std::size_t max_rank = 10,
                              DistanceMetric metric = DistanceMetric::euclidean) {
  if (max_rank == 0) throw contract_error("evaluate: max_rank must be positive");
  std::vector<std::vector<double>> qf, gf;
  for (const auto& r : queries) qf.push_back(r.feature);
  for (const auto& r : gallery) gf.push_back(r.feature);
  for (const auto* set : {&qf, &gf})
    for (const auto& v : *set)
      for (double e : v)
        if (!std::isfinite(e)) throw numeric_error("evaluate: non-finite feature value");
  const auto dist = pairwise_distances(qf, gf, metric);

  RankingResult result;
  std::vector<std::size_t> first_hit_counts(max_rank, 0);
  double ap_sum = 0.0;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    std::vector<bool> good;
    for (std::size_t gi : rank_gallery(dist, qi)) {
      const auto& g = gallery[gi];
      if (g.person_id == -1) continue;
      if (g.person_id == q.person_id && g.camera_id == q.camera_id) continue;
      good.push_back(g.person_id == q.person_id);
    }
    const auto ap = average_precision(good);
    if (!ap) {
      ++result.skipped;
      continue;
    }
    ++result.evaluated;
    result.per_query_ap.push_back(*ap);
    ap_sum += *ap;
    const auto first = static_cast<std::size_t>(std::find(good.begin(), good.end(), true) - good.begin());
    for (std::size_t k = first; k < max_rank; ++k) ++first_hit_counts[k];
  }
  result.cmc.assign(max_rank, 0.0);
  if (result.evaluated > 0) {
    for (std::size_t k = 0; k < max_rank; ++k)
      result.cmc[k] = static_cast<double>(first_hit_counts[k]) / static_cast<double>(result.evaluated);
    result.map = ap_sum / static_cast<double>(result.evaluated);
  }
  return result;
}

// person_id <TAB> camera_id <TAB> f1,f2,...,fd
inline void write_embeddings(std::ostream& os, const std::vector<EmbeddingRecord>& records) {
  for (const auto& r : records) {
    os << r.person_id << '\t' << r.camera_id << '\t';
    for (std::size_t i = 0; i < r.feature.size(); ++i) os << (i ? "," : "") << format_real(r.feature[i]);
    os << '\n';
  }
}

inline std::vector<EmbeddingRecord> read_embeddings(std::istream& is) {
  std::vector<EmbeddingRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw format_error("embeddings line " + std::to_string(line_no) + ": expected 3 fields");
    EmbeddingRecord r;
    try {
      r.person_id = parse_int(std::string_view(line).substr(0, t1));
      r.camera_id = parse_int(std::string_view(line).substr(t1 + 1, t2 - t1 - 1));
      for (auto field : split(std::string_view(line).substr(t2 + 1), ',')) r.feature.push_back(parse_real(field));
    } catch (const format_error& e) {
      throw format_error("embeddings line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!records.empty() && records.front().feature.size() != r.feature.size())
      throw format_error("embeddings line " + std::to_string(line_no) + ": feature length differs from first record");
    records.push_back(std::move(r));
  }
  return records;
}

inline std::string format_report(const RankingResult& r) {
  std::ostringstream os;
  os << "rank  cmc\n";
  for (std::size_t k = 0; k < r.cmc.size(); ++k) os << (k + 1 < 10 ? " " : "") << k + 1 << "    " << r.cmc[k] << '\n';
  os << "mAP   " << r.map << "  (" << r.evaluated << " queries, " << r.skipped << " skipped)\n";
  os << "map=" << format_real(r.map) << '\n';
  for (std::size_t k : {1, 5, 10})
    if (k <= r.cmc.size()) os << "rank" << k << '=' << format_real(r.cmc[k - 1]) << '\n';
  os << "skipped=" << r.skipped << '\n';
  return os.str();
}

}  // namespace sona
