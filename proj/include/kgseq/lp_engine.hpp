#pragma once

#include <atomic>
#include <cstdio>
#include <functional>
#include <optional>
#include <thread>

#include "kgseq/bpe.hpp"
#include "kgseq/checkpoint.hpp"
#include "kgseq/decoding.hpp"
#include "kgseq/kg_store.hpp"
#include "kgseq/metrics.hpp"
#include "kgseq/textmap.hpp"
#include "kgseq/transformer.hpp"

namespace kgseq::lp {

struct VerbalizedExample {
  std::string input;
  std::string target;
  enum class Kind { predict_tail, predict_head, predict_answer } kind = Kind::predict_tail;
};

// (entity, sequence log-probability) pair produced by decoding; the unit of
// ranking. The score is the sum of stepwise token log-probabilities of the
// mention plus its stop token.
struct ScoredCandidate {
  int entity = 0;
  double logprob = 0.0;
  friend bool operator==(const ScoredCandidate&, const ScoredCandidate&) = default;
};

struct RankingResult {
  int gold = 0;
  std::optional<int> filtered_rank;          // 1-based; empty when gold unsampled
  int num_filtered = 0;                      // |known \ {gold}|
  std::vector<ScoredCandidate> candidates;   // post-filter, rank order
};

// Drops candidates in known \ {gold}, sorts by logprob descending with ties
// on ascending entity id; rank is the gold's 1-based position. A missing
// gold is "unranked" (the -inf convention: contributes 0 to MRR).
RankingResult rank_query(std::vector<ScoredCandidate> candidates, int gold,
                         const std::vector<int>& known_sorted);

// Per-epoch reshuffled stream of the 2|K| link-prediction examples (one
// tail and one head query per triple).
class LpExampleStream {
 public:
  LpExampleStream(const kg::KnowledgeGraph& graph, const text::TextRegistry& registry,
                  std::uint64_t seed)
      : graph_(graph), registry_(registry), seed_(seed) {
    if (registry.mode() != text::RegistryMode::one_to_one)
      throw DomainError("link-prediction examples need a one-to-one registry");
    order_.reserve(graph.size() * 2);
    reshuffle();
  }

  size_t epoch_size() const { return graph_.size() * 2; }
  std::uint64_t epoch() const { return epoch_; }

  VerbalizedExample next() {
    if (pos_ >= order_.size()) {
      ++epoch_;
      reshuffle();
    }
    const auto [ti, head] = order_[pos_++];
    const kg::Triple& t = graph_.triples()[static_cast<size_t>(ti)];
    VerbalizedExample ex;
    if (head) {
      ex.kind = VerbalizedExample::Kind::predict_head;
      ex.input = text::verbalize_lp({t.o, t.p, kg::Direction::head}, registry_);
      ex.target = registry_.entity_mention(t.s);
    } else {
      ex.kind = VerbalizedExample::Kind::predict_tail;
      ex.input = text::verbalize_lp({t.s, t.p, kg::Direction::tail}, registry_);
      ex.target = registry_.entity_mention(t.o);
    }
    return ex;
  }

 private:
  void reshuffle() {
    order_.clear();
    for (size_t i = 0; i < graph_.size(); ++i) {
      order_.push_back({static_cast<int>(i), false});
      order_.push_back({static_cast<int>(i), true});
    }
    Rng rng(mix_seed(seed_, epoch_));
    rng.shuffle(order_);
    pos_ = 0;
  }

  const kg::KnowledgeGraph& graph_;
  const text::TextRegistry& registry_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::pair<int, bool>> order_;
  size_t pos_ = 0;
};

struct TrainOptions {
  int batch_size = 320;  // link-prediction default
  long steps = 1000;
  double lr_peak = 3e-3;
  long warmup = 100;
  // fixed_lr overrides the warmup schedule when set (QA finetuning).
  std::optional<double> fixed_lr;
  double dropout_override = -1.0;  // <0 keeps the model config's rate
  std::uint64_t seed = 0;
  long log_every = 50;
  long ckpt_every = 0;             // 0 = no periodic checkpoints
  std::string ckpt_path;           // written on schedule and at the end
  // Early-stop hook, polled every log_every steps with the mean recent
  // loss; return true to stop. Wired to a validation metric by callers.
  std::function<bool(long step, double recent_loss)> should_stop;
};

// Batch = list of (input tokens, target tokens ending in stop).
template <typename T>
double train_step(model::ModelState<T>& state,
                  const std::vector<std::pair<std::vector<int>, std::vector<int>>>& batch,
                  const TrainOptions& opts, Rng& dropout_rng) {
  const int stop = bpe::BpeVocab::kStop;
  model::ModelConfig cfg = state.params.cfg;
  if (opts.dropout_override >= 0.0) cfg.dropout_rate = opts.dropout_override;
  const bool train_mode = cfg.dropout_rate > 0.0;

  nn::Tape<T> tape;
  auto pv = model::register_params(tape, state.params);
  typename nn::Tape<T>::Var loss{};
  for (const auto& [input, target] : batch) {
    auto l = model::teacher_forced_loss_on_tape(tape, pv, cfg, input, target, stop, train_mode,
                                                &dropout_rng);
    loss = loss.valid() ? tape.add(loss, l) : l;
  }
  loss = tape.scale(loss, static_cast<T>(1.0 / batch.size()));
  const double loss_value = static_cast<double>(tape.value(loss).data[0]);
  if (!std::isfinite(loss_value))
    throw NumericError("non-finite loss at step " + std::to_string(state.step + 1) +
                       (opts.ckpt_path.empty() ? "" : "; last good checkpoint: " + opts.ckpt_path));
  tape.backward(loss);
  auto grads = model::leaf_grads(tape, pv);
  auto params = state.params.param_ptrs();
  const double lr = opts.fixed_lr ? *opts.fixed_lr
                                  : nn::warmup_lr(opts.lr_peak, state.step + 1, opts.warmup);
  nn::adam_step(params, grads, state.moments, lr);
  state.step += 1;
  return loss_value;
}

// Teacher-forced training over the example stream. Checkpoints are written
// atomically so an aborted run keeps the last good file.
template <typename T>
void train_lp(model::ModelState<T>& state, LpExampleStream& stream, const bpe::BpeVocab& vocab,
              const TrainOptions& opts) {
  if (vocab.size() != state.params.cfg.vocab_size)
    throw ConfigError("tokenizer vocab " + std::to_string(vocab.size()) +
                      " does not match model vocab " +
                      std::to_string(state.params.cfg.vocab_size));
  Rng dropout_rng(mix_seed(opts.seed, 0xd0));
  double recent = 0.0;
  long recent_n = 0;
  for (long s = 0; s < opts.steps; ++s) {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> batch;
    batch.reserve(static_cast<size_t>(opts.batch_size));
    for (int b = 0; b < opts.batch_size; ++b) {
      auto ex = stream.next();
      auto input = vocab.encode(ex.input).ids;
      auto target = vocab.encode(ex.target).ids;
      target.push_back(vocab.stop_id());
      batch.push_back({std::move(input), std::move(target)});
    }
    const double loss = train_step(state, batch, opts, dropout_rng);
    recent += loss;
    ++recent_n;
    if (opts.log_every > 0 && (s + 1) % opts.log_every == 0) {
      std::fprintf(stderr, "[train] step %llu epoch %llu loss %.4f\n",
                   static_cast<unsigned long long>(state.step),
                   static_cast<unsigned long long>(stream.epoch()), recent / recent_n);
      if (opts.should_stop && opts.should_stop(static_cast<long>(state.step), recent / recent_n)) {
        std::fprintf(stderr, "[train] early stop at step %llu\n",
                     static_cast<unsigned long long>(state.step));
        break;
      }
      recent = 0.0;
      recent_n = 0;
    }
    if (!opts.ckpt_path.empty() && opts.ckpt_every > 0 && (s + 1) % opts.ckpt_every == 0) {
      model::save_checkpoint(state, opts.ckpt_path + ".tmp");
      std::filesystem::rename(opts.ckpt_path + ".tmp", opts.ckpt_path);
      std::filesystem::rename(opts.ckpt_path + ".tmp.manifest.txt",
                              opts.ckpt_path + ".manifest.txt");
    }
  }
  if (!opts.ckpt_path.empty()) model::save_checkpoint(state, opts.ckpt_path);
}

// Frozen model bundle for inference.
template <typename T>
struct LpModel {
  const model::TransformerParams<T>* params = nullptr;
  const bpe::BpeVocab* vocab = nullptr;
  const text::TextRegistry* registry = nullptr;
  int max_target_len = 48;
};

namespace detail {

template <typename T>
std::vector<ScoredCandidate> collapse_to_entities(
    const LpModel<T>& m, const std::vector<decode::SampledSequence>& seqs) {
  // one entry per entity; distinct sequences for one entity keep the best
  std::unordered_map<int, double> best;
  for (const auto& s : seqs) {
    bpe::TokenSequence ts;
    ts.ids = s.tokens;
    const std::string text = m.vocab->decode(ts);
    auto id = m.registry->find_entity(text);
    if (!id) continue;  // not an entity mention: discarded
    auto [it, inserted] = best.try_emplace(*id, s.logprob);
    if (!inserted && s.logprob > it->second) it->second = s.logprob;
  }
  std::vector<ScoredCandidate> out;
  out.reserve(best.size());
  for (const auto& [e, lp] : best) out.push_back({e, lp});
  std::sort(out.begin(), out.end(),
            [](const ScoredCandidate& a, const ScoredCandidate& b) { return a.entity < b.entity; });
  return out;
}

}  // namespace detail

// Ancestral sampling (temperature 1, no truncation), decoded strings mapped
// back to entity ids; non-mention strings are discarded.
template <typename T>
std::vector<ScoredCandidate> sample_candidates(const LpModel<T>& m, const kg::LpQuery& query,
                                               int sample_size, std::uint64_t seed) {
  const std::string input = text::verbalize_lp(query, *m.registry);
  auto ids = m.vocab->encode(input).ids;
  auto enc = model::encode(*m.params, ids);
  model::DecodeBatch<T> batch(*m.params, enc, sample_size);
  Rng rng(mix_seed(seed, 0x5a));
  auto seqs = decode::sample_sequences(batch, m.vocab->stop_id(), m.max_target_len, rng);
  return detail::collapse_to_entities(m, seqs);
}

// Length-unnormalized beam search; up to `beam` entity-mapped candidates.
template <typename T>
std::vector<ScoredCandidate> beam_candidates(const LpModel<T>& m, const kg::LpQuery& query,
                                             int beam) {
  const std::string input = text::verbalize_lp(query, *m.registry);
  auto ids = m.vocab->encode(input).ids;
  auto enc = model::encode(*m.params, ids);
  model::DecodeBatch<T> batch(*m.params, enc, 1);
  auto seqs = decode::beam_search(batch, beam, m.vocab->stop_id(), m.max_target_len);
  return detail::collapse_to_entities(m, seqs);
}

// Scores every registered mention by forced decoding (Fig. 2(A)-style full
// scoring). Only viable on tiny graphs; serves as the sampling oracle.
template <typename T>
std::vector<ScoredCandidate> exhaustive_candidates(const LpModel<T>& m, const kg::LpQuery& query,
                                                   int chunk = 128) {
  const std::string input = text::verbalize_lp(query, *m.registry);
  auto ids = m.vocab->encode(input).ids;
  auto enc = model::encode(*m.params, ids);

  std::vector<ScoredCandidate> out;
  const int n = m.registry->num_entities();
  for (int base = 0; base < n; base += chunk) {
    const int count = std::min(chunk, n - base);
    std::vector<std::vector<int>> seqs;
    seqs.reserve(static_cast<size_t>(count));
    for (int e = base; e < base + count; ++e)
      seqs.push_back(m.vocab->encode(m.registry->entity_mention(e)).ids);
    model::DecodeBatch<T> batch(*m.params, enc, count);
    auto scores = decode::score_sequences(batch, seqs, m.vocab->stop_id());
    for (int i = 0; i < count; ++i) out.push_back({base + i, scores[static_cast<size_t>(i)]});
  }
  return out;
}

struct EvalOptions {
  int sample_size = 500;  // sampling size for link prediction
  bool exhaustive = false;
  unsigned filter_scope = kg::kScopeAll;
  std::uint64_t seed = 0;
  int workers = 1;
  int max_queries = 0;  // 0 = every (triple, direction) pair in the probe
  std::string per_query_tsv;
};

// Simple deterministic work splitter; results land in caller-indexed slots.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

template <typename T>
metrics::LpMetrics evaluate_lp(const LpModel<T>& m, const kg::KnowledgeGraph& probe,
                               const kg::KgSplit& split, const EvalOptions& opts) {
  struct Query {
    kg::LpQuery q;
    int gold;
  };
  std::vector<Query> queries;
  queries.reserve(probe.size() * 2);
  for (const auto& t : probe.triples()) {
    queries.push_back({{t.s, t.p, kg::Direction::tail}, t.o});
    queries.push_back({{t.o, t.p, kg::Direction::head}, t.s});
  }
  if (opts.max_queries > 0 && static_cast<int>(queries.size()) > opts.max_queries) {
    Rng rng(mix_seed(opts.seed, 0xeba1));
    rng.shuffle(queries);
    queries.resize(static_cast<size_t>(opts.max_queries));
  }

  std::vector<metrics::QueryRow> rows(queries.size());
  std::vector<std::pair<std::optional<int>, int>> outcomes(queries.size());
  parallel_for(static_cast<int>(queries.size()), opts.workers, [&](int qi) {
    const Query& query = queries[static_cast<size_t>(qi)];
    auto candidates = opts.exhaustive
                          ? exhaustive_candidates(m, query.q)
                          : sample_candidates(m, query.q, opts.sample_size,
                                              mix_seed(opts.seed, static_cast<std::uint64_t>(qi)));
    auto known_full = kg::known_positives(split, query.q, opts.filter_scope);
    auto known_train = kg::known_positives(split, query.q, kg::kScopeTrain);
    auto result = rank_query(std::move(candidates), query.gold, known_full);
    int train_count = static_cast<int>(known_train.size());
    if (std::binary_search(known_train.begin(), known_train.end(), query.gold)) --train_count;

    outcomes[static_cast<size_t>(qi)] = {result.filtered_rank, train_count};
    metrics::QueryRow row;
    row.direction = query.q.dir == kg::Direction::tail ? "tail" : "head";
    row.known = query.q.known;
    row.p = query.q.p;
    row.gold = query.gold;
    row.rank = result.filtered_rank;
    row.num_filtered = result.num_filtered;
    row.train_filtered = train_count;
    if (!result.candidates.empty()) {
      row.top1 = result.candidates.front().entity;
      row.top1_score = result.candidates.front().logprob;
    }
    rows[static_cast<size_t>(qi)] = std::move(row);
  });

  metrics::LpMetrics out;
  for (const auto& [rank, train_count] : outcomes) out.add(rank, train_count);
  if (!opts.per_query_tsv.empty()) metrics::write_query_rows(rows, opts.per_query_tsv);
  return out;
}

}  // namespace kgseq::lp
