#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kgseq::bpe {

struct TokenSequence {
  std::vector<int> ids;
  bool terminated = false;  // true iff ids ends with the stop id
};

// Byte-level BPE vocabulary with a visible word-boundary marker. Symbol ids
// are dense: pad, stop, unk, marker, observed corpus bytes (ascending), then
// merged tokens in creation order.
class BpeVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStop = 1;
  static constexpr int kUnk = 2;
  static constexpr int kMarker = 3;

  // Greedy highest-frequency pair merging until the vocabulary reaches
  // target_size or no pair occurs at least twice. Ties break on the
  // lexicographically smallest (left bytes, right bytes) pair. Deterministic.
  static BpeVocab train(const std::vector<std::string>& corpus, int target_size);

  int size() const { return static_cast<int>(token_left_.size()); }
  int target_size() const { return target_size_; }
  int pad_id() const { return kPad; }
  int stop_id() const { return kStop; }
  int unk_id() const { return kUnk; }

  // Applies merges in training order; bytes never seen in training map to
  // the unknown id. No stop token is appended (callers append for targets).
  TokenSequence encode(const std::string& text) const;

  // Concatenation of token strings with markers as spaces; pad/stop dropped.
  // Out-of-range ids raise DomainError.
  std::string decode(const TokenSequence& seq) const;

  // Raw byte string of one token (marker rendered as a space, unk as empty).
  std::string token_text(int id) const;

  // Versioned text format, bit-exact across runs.
  void save(const std::string& path) const;
  static BpeVocab load(const std::string& path);

  friend bool operator==(const BpeVocab&, const BpeVocab&) = default;

 private:
  BpeVocab() = default;
  void index_merges();
  std::vector<int> word_to_symbols(std::string_view word) const;
  void apply_merges(std::vector<int>& syms) const;

  int target_size_ = 0;
  // For base symbols left == -1 and right is the byte value (or -2 for
  // specials/marker). For merged tokens, the two constituent token ids.
  std::vector<int> token_left_, token_right_;
  std::vector<std::string> token_bytes_;  // expanded byte string per token
  int byte_to_symbol_[256];               // -1 when the byte was never observed
  // (left, right) -> (merge rank, merged id)
  std::vector<std::pair<std::uint64_t, std::pair<int, int>>> merge_index_;
};

}  // namespace kgseq::bpe
