#include "kgseq/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "kgseq/strutil.hpp"

namespace kgseq::metrics {

FilterBucket bucket_of(int train_filter_count) {
  if (train_filter_count <= 0) return FilterBucket::zero;
  if (train_filter_count <= 10) return FilterBucket::one_to_ten;
  return FilterBucket::over_ten;
}

const char* bucket_name(FilterBucket b) {
  switch (b) {
    case FilterBucket::zero:
      return "0";
    case FilterBucket::one_to_ten:
      return "1 to 10";
    default:
      return ">10";
  }
}

void LpMetrics::add(std::optional<int> filtered_rank, int train_filter_count) {
  all.add(filtered_rank);
  buckets[static_cast<int>(bucket_of(train_filter_count))].add(filtered_rank);
}

void LpMetrics::merge(const LpMetrics& o) {
  all.merge(o.all);
  for (int i = 0; i < 3; ++i) buckets[i].merge(o.buckets[i]);
}

std::string LpMetrics::summary() const {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "MRR %.4f  Hits@1 %.4f  Hits@3 %.4f  Hits@10 %.4f  (n=%ld)",
                all.mrr(), all.hits1(), all.hits3(), all.hits10(), all.n);
  return buf;
}

std::string LpMetrics::bucket_table() const {
  std::ostringstream ss;
  ss << "| No. of entities to filter | MRR | Hits@1 | queries |\n";
  ss << "|---|---|---|---|\n";
  for (int i = 0; i < 3; ++i) {
    const RankTally& t = buckets[i];
    char buf[120];
    std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f | %ld |\n",
                  bucket_name(static_cast<FilterBucket>(i)), t.mrr(), t.hits1(), t.n);
    ss << buf;
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf), "| All queries | %.4f | %.4f | %ld |\n", all.mrr(), all.hits1(),
                all.n);
  ss << buf;
  return ss.str();
}

void write_query_rows(const std::vector<QueryRow>& rows, const std::string& path) {
  std::ostringstream ss;
  ss << "direction\tknown\trelation\tgold\trank\tnum_filtered\ttrain_filtered\ttop1\ttop1_score\n";
  for (const auto& r : rows) {
    ss << r.direction << '\t' << r.known << '\t' << r.p << '\t' << r.gold << '\t';
    if (r.rank)
      ss << *r.rank;
    else
      ss << "-";
    ss << '\t' << r.num_filtered << '\t' << r.train_filtered << '\t';
    if (r.top1)
      ss << *r.top1;
    else
      ss << "-";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", r.top1_score);
    ss << '\t' << buf << '\n';
  }
  write_file(path, ss.str());
}

}  // namespace kgseq::metrics
