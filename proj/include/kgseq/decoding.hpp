#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "kgseq/errors.hpp"
#include "kgseq/rng.hpp"

namespace kgseq::decode {

// Decoders are generic over a Session with:
//   int rows() const;
//   std::span<const T> logprob_row(int r) const;   // log-softmax over vocab
//   void advance(std::span<const std::pair<int,int>> next);  // (src_row, token)
// model::DecodeBatch satisfies it; tests drive the same algorithms with
// enumerable fakes.

struct SampledSequence {
  std::vector<int> tokens;  // stop not included
  double logprob = 0.0;     // includes the stop token's log-probability
};

template <typename Session>
int session_vocab(const Session& s) {
  return static_cast<int>(s.logprob_row(0).size());
}

// Ancestral sampling at temperature 1 with no truncation; one sequence per
// initial row. Sequences that fail to emit stop within max_len are dropped.
template <typename Session>
std::vector<SampledSequence> sample_sequences(Session& session, int stop_id, int max_len,
                                              Rng& rng) {
  const int n = session.rows();
  std::vector<SampledSequence> done;
  struct Live {
    std::vector<int> tokens;
    double lp = 0.0;
  };
  std::vector<Live> live(static_cast<size_t>(n));

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<std::pair<int, int>> cont;
    std::vector<Live> next_live;
    cont.reserve(live.size());
    next_live.reserve(live.size());
    for (int r = 0; r < static_cast<int>(live.size()); ++r) {
      const auto row = session.logprob_row(r);
      const double u = rng.uniform();
      double cdf = 0.0;
      int tok = static_cast<int>(row.size()) - 1;
      for (size_t v = 0; v < row.size(); ++v) {
        cdf += std::exp(static_cast<double>(row[v]));
        if (u < cdf) {
          tok = static_cast<int>(v);
          break;
        }
      }
      Live& cur = live[static_cast<size_t>(r)];
      cur.lp += static_cast<double>(row[static_cast<size_t>(tok)]);
      if (tok == stop_id) {
        done.push_back({std::move(cur.tokens), cur.lp});
      } else {
        cur.tokens.push_back(tok);
        cont.push_back({r, tok});
        next_live.push_back(std::move(cur));
      }
    }
    live = std::move(next_live);
    if (!cont.empty() && step + 1 < max_len) session.advance(cont);
    if (cont.empty()) break;
  }
  return done;
}

// Standard length-unnormalized beam search until stop; returns up to `beam`
// finished hypotheses ordered by log-probability descending. The session
// must start with a single row.
template <typename Session>
std::vector<SampledSequence> beam_search(Session& session, int beam, int stop_id, int max_len) {
  if (beam < 1) throw DomainError("beam must be >= 1");
  if (session.rows() != 1) throw DomainError("beam search expects a fresh single-row session");

  struct Hyp {
    std::vector<int> tokens;
    double lp = 0.0;
  };
  std::vector<Hyp> live{{}};  // live[i] corresponds to session row i
  std::vector<SampledSequence> done;

  auto kth_done_lp = [&]() {
    // log-prob of the weakest hypothesis that would still make the cut
    if (static_cast<int>(done.size()) < beam) return -std::numeric_limits<double>::infinity();
    std::vector<double> lps;
    lps.reserve(done.size());
    for (const auto& d : done) lps.push_back(d.logprob);
    std::nth_element(lps.begin(), lps.begin() + (beam - 1), lps.end(), std::greater<double>());
    return lps[static_cast<size_t>(beam - 1)];
  };

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Cand {
      double lp;
      int row, tok;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * 8);
    for (int r = 0; r < static_cast<int>(live.size()); ++r) {
      const auto row = session.logprob_row(r);
      for (size_t v = 0; v < row.size(); ++v) {
        const double lp = live[static_cast<size_t>(r)].lp + static_cast<double>(row[v]);
        if (std::isinf(lp)) continue;  // impossible continuation
        cands.push_back({lp, r, static_cast<int>(v)});
      }
    }
    auto better = [](const Cand& a, const Cand& b) {
      if (a.lp != b.lp) return a.lp > b.lp;
      if (a.row != b.row) return a.row < b.row;
      return a.tok < b.tok;
    };
    std::sort(cands.begin(), cands.end(), better);

    // Fill up to `beam` live slots from the best continuations; finished
    // candidates seen on the way join the done set.
    std::vector<Hyp> next_live;
    std::vector<std::pair<int, int>> cont;
    for (const Cand& c : cands) {
      if (c.tok == stop_id) {
        done.push_back({live[static_cast<size_t>(c.row)].tokens, c.lp});
      } else if (static_cast<int>(next_live.size()) < beam) {
        Hyp h;
        h.tokens = live[static_cast<size_t>(c.row)].tokens;
        h.tokens.push_back(c.tok);
        h.lp = c.lp;
        cont.push_back({c.row, c.tok});
        next_live.push_back(std::move(h));
      }
      if (static_cast<int>(next_live.size()) >= beam && c.lp < kth_done_lp()) break;
    }
    // Extensions only lower a length-unnormalized score, so live hypotheses
    // at or below the k-th finished score can be pruned.
    const double cutoff = kth_done_lp();
    std::vector<Hyp> kept;
    std::vector<std::pair<int, int>> kept_cont;
    for (size_t i = 0; i < next_live.size(); ++i) {
      if (next_live[i].lp > cutoff) {
        kept.push_back(std::move(next_live[i]));
        kept_cont.push_back(cont[i]);
      }
    }
    live = std::move(kept);
    if (!kept_cont.empty() && step + 1 < max_len) {
      session.advance(kept_cont);
    } else {
      break;
    }
  }
  std::stable_sort(done.begin(), done.end(),
                   [](const SampledSequence& a, const SampledSequence& b) {
                     return a.logprob > b.logprob;
                   });
  if (static_cast<int>(done.size()) > beam) done.resize(static_cast<size_t>(beam));
  return done;
}

// Forced decoding: log-probability of each token sequence plus its stop
// token. Session rows must equal seqs.size().
template <typename Session>
std::vector<double> score_sequences(Session& session, const std::vector<std::vector<int>>& seqs,
                                    int stop_id) {
  if (session.rows() != static_cast<int>(seqs.size()))
    throw DomainError("score_sequences: row/sequence count mismatch");
  std::vector<double> scores(seqs.size(), 0.0);
  std::vector<int> slot(seqs.size());  // session row -> sequence index
  for (size_t i = 0; i < seqs.size(); ++i) slot[i] = static_cast<int>(i);

  size_t pos = 0;
  std::vector<int> active = slot;
  while (!active.empty()) {
    std::vector<std::pair<int, int>> cont;
    std::vector<int> next_active;
    for (int r = 0; r < static_cast<int>(active.size()); ++r) {
      const int si = active[static_cast<size_t>(r)];
      const auto& seq = seqs[static_cast<size_t>(si)];
      const auto row = session.logprob_row(r);
      const int tok = pos < seq.size() ? seq[pos] : stop_id;
      if (tok < 0 || tok >= static_cast<int>(row.size()))
        throw DomainError("score_sequences: token out of vocabulary");
      scores[static_cast<size_t>(si)] += static_cast<double>(row[static_cast<size_t>(tok)]);
      if (pos < seq.size()) {  // still need to feed this token
        cont.push_back({r, tok});
        next_active.push_back(si);
      }
    }
    if (cont.empty()) break;
    session.advance(cont);
    active = std::move(next_active);
    ++pos;
  }
  return scores;
}

}  // namespace kgseq::decode
