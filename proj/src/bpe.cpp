#include "kgseq/bpe.hpp"

#include <algorithm>
#include <queue>
#include <sstream>
#include <unordered_map>

#include "kgseq/errors.hpp"
#include "kgseq/strutil.hpp"

namespace kgseq::bpe {

namespace {

std::uint64_t pack(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

// Merge all non-overlapping (l, r) occurrences left to right.
void merge_in_place(std::vector<int>& syms, int l, int r, int merged) {
  size_t w = 0;
  for (size_t i = 0; i < syms.size();) {
    if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
      syms[w++] = merged;
      i += 2;
    } else {
      syms[w++] = syms[i++];
    }
  }
  syms.resize(w);
}

}  // namespace

BpeVocab BpeVocab::train(const std::vector<std::string>& corpus, int target_size) {
  if (corpus.empty()) throw DomainError("BPE training corpus is empty");

  BpeVocab v;
  v.target_size_ = target_size;
  std::fill(std::begin(v.byte_to_symbol_), std::end(v.byte_to_symbol_), -1);

  // Distinct words with counts.
  std::unordered_map<std::string, long long> word_counts;
  bool observed[256] = {};
  for (const auto& line : corpus) {
    for (const auto& w : split(line, ' ')) {
      if (w.empty()) continue;
      ++word_counts[w];
      for (unsigned char c : w) observed[c] = true;
    }
  }

  // Base symbols: specials, marker, then observed bytes ascending.
  v.token_left_ = {-1, -1, -1, -1};
  v.token_right_ = {-2, -2, -2, -2};
  v.token_bytes_ = {"", "", "", " "};
  for (int b = 0; b < 256; ++b) {
    if (!observed[b]) continue;
    v.byte_to_symbol_[b] = static_cast<int>(v.token_left_.size());
    v.token_left_.push_back(-1);
    v.token_right_.push_back(b);
    v.token_bytes_.push_back(std::string(1, static_cast<char>(b)));
  }
  const int base = v.size();
  if (target_size <= base)
    throw ConfigError("tokenizer target size " + std::to_string(target_size) +
                      " does not exceed base alphabet size " + std::to_string(base));

  struct Word {
    std::vector<int> syms;
    long long count;
  };
  std::vector<Word> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) {
    Word word;
    word.count = c;
    word.syms.reserve(w.size() + 1);
    word.syms.push_back(kMarker);
    for (unsigned char ch : w) word.syms.push_back(v.byte_to_symbol_[ch]);
    words.push_back(std::move(word));
  }
  // Iteration order of the hash map must not leak into tie-breaking; sort by
  // symbol sequence so pair_where lists are deterministic.
  std::sort(words.begin(), words.end(),
            [](const Word& a, const Word& b) { return a.syms < b.syms; });

  std::unordered_map<std::uint64_t, long long> pair_counts;
  std::unordered_map<std::uint64_t, std::vector<int>> pair_where;
  auto add_pairs = [&](int wi, long long sign) {
    const Word& w = words[static_cast<size_t>(wi)];
    for (size_t i = 0; i + 1 < w.syms.size(); ++i) {
      const std::uint64_t key = pack(w.syms[i], w.syms[i + 1]);
      pair_counts[key] += sign * w.count;
      if (sign > 0) {
        auto& list = pair_where[key];
        if (list.empty() || list.back() != wi) list.push_back(wi);
      }
    }
  };
  for (int wi = 0; wi < static_cast<int>(words.size()); ++wi) add_pairs(wi, +1);

  struct HeapEntry {
    long long count;
    std::string lbytes, rbytes;
    int l, r;
  };
  auto heap_less = [](const HeapEntry& a, const HeapEntry& b) {
    if (a.count != b.count) return a.count < b.count;
    if (a.lbytes != b.lbytes) return a.lbytes > b.lbytes;
    return a.rbytes > b.rbytes;
  };
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, decltype(heap_less)> heap(heap_less);
  auto push_pair = [&](std::uint64_t key) {
    const long long c = pair_counts[key];
    if (c < 2) return;
    const int l = static_cast<int>(key >> 32), r = static_cast<int>(key & 0xffffffffu);
    heap.push({c, v.token_bytes_[static_cast<size_t>(l)], v.token_bytes_[static_cast<size_t>(r)],
               l, r});
  };
  for (const auto& [key, c] : pair_counts) push_pair(key);

  while (v.size() < target_size && !heap.empty()) {
    HeapEntry top = heap.top();
    heap.pop();
    const std::uint64_t key = pack(top.l, top.r);
    auto it = pair_counts.find(key);
    if (it == pair_counts.end() || it->second != top.count) continue;  // stale entry
    if (top.count < 2) break;

    const int merged = v.size();
    v.token_left_.push_back(top.l);
    v.token_right_.push_back(top.r);
    v.token_bytes_.push_back(top.lbytes + top.rbytes);

    auto affected = std::move(pair_where[key]);
    pair_where.erase(key);
    std::vector<std::uint64_t> touched;
    for (int wi : affected) {
      Word& w = words[static_cast<size_t>(wi)];
      bool has = false;
      for (size_t i = 0; i + 1 < w.syms.size(); ++i) {
        if (w.syms[i] == top.l && w.syms[i + 1] == top.r) {
          has = true;
          break;
        }
      }
      if (!has) continue;  // stale occurrence record
      add_pairs(wi, -1);
      merge_in_place(w.syms, top.l, top.r, merged);
      add_pairs(wi, +1);
      for (size_t i = 0; i + 1 < w.syms.size(); ++i) touched.push_back(pack(w.syms[i], w.syms[i + 1]));
    }
    pair_counts.erase(key);
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    for (std::uint64_t k : touched) push_pair(k);
  }

  v.index_merges();
  return v;
}

void BpeVocab::index_merges() {
  merge_index_.clear();
  int rank = 0;
  for (int id = 0; id < size(); ++id) {
    if (token_left_[static_cast<size_t>(id)] >= 0) {
      merge_index_.push_back({pack(token_left_[static_cast<size_t>(id)],
                                   token_right_[static_cast<size_t>(id)]),
                              {rank++, id}});
    }
  }
  std::sort(merge_index_.begin(), merge_index_.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
}

std::vector<int> BpeVocab::word_to_symbols(std::string_view word) const {
  std::vector<int> syms;
  syms.reserve(word.size() + 1);
  syms.push_back(kMarker);
  for (unsigned char c : word) {
    const int s = byte_to_symbol_[c];
    syms.push_back(s >= 0 ? s : kUnk);
  }
  return syms;
}

void BpeVocab::apply_merges(std::vector<int>& syms) const {
  auto find_rule = [&](int l, int r) -> const std::pair<int, int>* {
    const std::uint64_t key = pack(l, r);
    auto it = std::lower_bound(merge_index_.begin(), merge_index_.end(), key,
                               [](const auto& e, std::uint64_t k) { return e.first < k; });
    if (it == merge_index_.end() || it->first != key) return nullptr;
    return &it->second;
  };
  while (syms.size() >= 2) {
    int best_rank = INT32_MAX, best_id = -1, best_l = -1, best_r = -1;
    for (size_t i = 0; i + 1 < syms.size(); ++i) {
      if (const auto* rule = find_rule(syms[i], syms[i + 1]); rule && rule->first < best_rank) {
        best_rank = rule->first;
        best_id = rule->second;
        best_l = syms[i];
        best_r = syms[i + 1];
      }
    }
    if (best_id < 0) break;
    merge_in_place(syms, best_l, best_r, best_id);
  }
}

TokenSequence BpeVocab::encode(const std::string& text) const {
  TokenSequence seq;
  for (const auto& w : split(text, ' ')) {
    if (w.empty()) continue;
    std::vector<int> syms = word_to_symbols(w);
    apply_merges(syms);
    seq.ids.insert(seq.ids.end(), syms.begin(), syms.end());
  }
  return seq;
}

std::string BpeVocab::decode(const TokenSequence& seq) const {
  std::string out;
  for (int id : seq.ids) {
    if (id < 0 || id >= size())
      throw DomainError("token id " + std::to_string(id) + " out of vocabulary range " +
                        std::to_string(size()));
    if (id == kPad || id == kStop) continue;
    out += token_bytes_[static_cast<size_t>(id)];
  }
  if (!out.empty() && out.front() == ' ') out.erase(out.begin());
  return out;
}

std::string BpeVocab::token_text(int id) const {
  if (id < 0 || id >= size()) throw DomainError("token id out of range");
  return token_bytes_[static_cast<size_t>(id)];
}

void BpeVocab::save(const std::string& path) const {
  std::ostringstream ss;
  ss << "kgseq-bpe v1\n";
  ss << "target " << target_size_ << "\n";
  int n_bytes = 0;
  for (int b = 0; b < 256; ++b)
    if (byte_to_symbol_[b] >= 0) ++n_bytes;
  ss << "bytes " << n_bytes << "\n";
  for (int b = 0; b < 256; ++b)
    if (byte_to_symbol_[b] >= 0) ss << b << "\n";
  const int base = 4 + n_bytes;
  ss << "merges " << (size() - base) << "\n";
  for (int id = base; id < size(); ++id)
    ss << token_left_[static_cast<size_t>(id)] << " " << token_right_[static_cast<size_t>(id)]
       << "\n";
  write_file(path, ss.str());
}

BpeVocab BpeVocab::load(const std::string& path) {
  auto lines = read_lines(path);
  size_t at = 0;
  auto next_line = [&]() -> const std::string& {
    if (at >= lines.size()) throw DataError(path + ": truncated vocab file");
    return lines[at++];
  };
  if (next_line() != "kgseq-bpe v1") throw DataError(path + ": not a kgseq-bpe v1 file");

  BpeVocab v;
  std::fill(std::begin(v.byte_to_symbol_), std::end(v.byte_to_symbol_), -1);
  {
    auto f = split(next_line(), ' ');
    if (f.size() != 2 || f[0] != "target") throw DataError(path + ": bad target line");
    v.target_size_ = std::stoi(f[1]);
  }
  v.token_left_ = {-1, -1, -1, -1};
  v.token_right_ = {-2, -2, -2, -2};
  v.token_bytes_ = {"", "", "", " "};
  {
    auto f = split(next_line(), ' ');
    if (f.size() != 2 || f[0] != "bytes") throw DataError(path + ": bad bytes line");
    const int n = std::stoi(f[1]);
    for (int i = 0; i < n; ++i) {
      const int b = std::stoi(next_line());
      if (b < 0 || b > 255) throw DataError(path + ": invalid byte value");
      v.byte_to_symbol_[b] = v.size();
      v.token_left_.push_back(-1);
      v.token_right_.push_back(b);
      v.token_bytes_.push_back(std::string(1, static_cast<char>(b)));
    }
  }
  {
    auto f = split(next_line(), ' ');
    if (f.size() != 2 || f[0] != "merges") throw DataError(path + ": bad merges line");
    const int n = std::stoi(f[1]);
    for (int i = 0; i < n; ++i) {
      auto mf = split(next_line(), ' ');
      if (mf.size() != 2) throw DataError(path + ": bad merge line");
      const int l = std::stoi(mf[0]), r = std::stoi(mf[1]);
      if (l < 0 || l >= v.size() || r < 0 || r >= v.size())
        throw DataError(path + ": merge references unknown token");
      v.token_left_.push_back(l);
      v.token_right_.push_back(r);
      v.token_bytes_.push_back(v.token_bytes_[static_cast<size_t>(l)] +
                               v.token_bytes_[static_cast<size_t>(r)]);
    }
  }
  v.index_merges();
  return v;
}

}  // namespace kgseq::bpe
