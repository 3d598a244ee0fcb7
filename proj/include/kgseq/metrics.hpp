#pragma once

#include <optional>
#include <string>
#include <vector>

namespace kgseq::metrics {

// Filtered-rank accumulator. Unranked queries contribute 0 to MRR and miss
// every Hits@k.
struct RankTally {
  double rr_sum = 0.0;
  long h1 = 0, h3 = 0, h10 = 0;
  long n = 0;

  void add(std::optional<int> filtered_rank) {
    ++n;
    if (!filtered_rank) return;
    const int r = *filtered_rank;
    rr_sum += 1.0 / r;
    if (r <= 1) ++h1;
    if (r <= 3) ++h3;
    if (r <= 10) ++h10;
  }
  double mrr() const { return n ? rr_sum / static_cast<double>(n) : 0.0; }
  double hits1() const { return n ? h1 / static_cast<double>(n) : 0.0; }
  double hits3() const { return n ? h3 / static_cast<double>(n) : 0.0; }
  double hits10() const { return n ? h10 / static_cast<double>(n) : 0.0; }

  void merge(const RankTally& o) {
    rr_sum += o.rr_sum;
    h1 += o.h1;
    h3 += o.h3;
    h10 += o.h10;
    n += o.n;
  }
};

// Per-query bucket key: the number of known train answers other than the
// gold one ("entities to filter"). Bins 0, 1-10, >10.
enum class FilterBucket { zero, one_to_ten, over_ten };
FilterBucket bucket_of(int train_filter_count);
const char* bucket_name(FilterBucket b);

struct LpMetrics {
  RankTally all;
  RankTally buckets[3];

  void add(std::optional<int> filtered_rank, int train_filter_count);
  void merge(const LpMetrics& o);

  std::string summary() const;       // one-line human summary
  std::string bucket_table() const;  // markdown: MRR/Hits@1 per filtering bin
};

// Per-query report rows; written as TSV with a fixed header.
struct QueryRow {
  std::string direction;  // "tail" | "head"
  int known = 0, p = 0, gold = 0;
  std::optional<int> rank;
  int num_filtered = 0;      // full-scope known positives minus gold
  int train_filtered = 0;    // train-only count (bucket key)
  std::optional<int> top1;   // best surviving candidate, if any
  double top1_score = 0.0;
};

void write_query_rows(const std::vector<QueryRow>& rows, const std::string& path);

}  // namespace kgseq::metrics
