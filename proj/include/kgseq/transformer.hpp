#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kgseq/adam.hpp"
#include "kgseq/autograd.hpp"
#include "kgseq/rng.hpp"
#include "kgseq/tensor.hpp"

namespace kgseq::model {

using nn::Tensor;

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int n_enc_layers = 3;
  int n_dec_layers = 3;
  int vocab_size = 0;
  int max_len = 128;
  double dropout_rate = 0.1;
  int rel_buckets = 32;
  int rel_max_dist = 128;

  void validate() const;
  int d_head() const { return d_model / n_heads; }

  // Desk-scale default: runs the full test suite in minutes.
  static ModelConfig desk_default(int vocab);
  // The published T5-small shape (~60M parameters with a 32128 vocab).
  static ModelConfig t5_small(int vocab = 32128);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// All learned tensors. Embeddings are tied between input and output;
// projections are bias-free; layer norms carry gain and bias. One relative
// position bias table is shared by every layer of a stack (encoder
// bidirectional, decoder causal); cross-attention has no position bias.
template <typename T>
struct TransformerParams {
  struct EncLayer {
    Tensor<T> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1, ff2;
  };
  struct DecLayer {
    Tensor<T> ln1_g, ln1_b, swq, swk, swv, swo;
    Tensor<T> ln2_g, ln2_b, cwq, cwk, cwv, cwo;
    Tensor<T> ln3_g, ln3_b, ff1, ff2;
  };

  ModelConfig cfg;
  Tensor<T> embedding;                    // [V, d]
  Tensor<T> enc_rel_bias, dec_rel_bias;   // [H, rel_buckets]
  Tensor<T> enc_final_g, enc_final_b, dec_final_g, dec_final_b;
  std::vector<EncLayer> enc;
  std::vector<DecLayer> dec;

  static TransformerParams init(const ModelConfig& cfg, std::uint64_t seed);

  // Fixed iteration order; checkpoints and optimizer moments rely on it.
  std::vector<std::pair<std::string, Tensor<T>*>> named_params();
  std::vector<std::pair<std::string, const Tensor<T>*>> named_params() const;
  std::vector<Tensor<T>*> param_ptrs();

  size_t param_count() const;
  static size_t param_count_formula(const ModelConfig& cfg);
};

// Trainable model state: parameters, optimizer moments, step counter.
template <typename T>
struct ModelState {
  TransformerParams<T> params;
  nn::AdamMoments<T> moments;
  std::uint64_t step = 0;

  static ModelState init(const ModelConfig& cfg, std::uint64_t seed) {
    ModelState s;
    s.params = TransformerParams<T>::init(cfg, seed);
    s.moments.init_like(s.params.param_ptrs());
    return s;
  }
};

// Parameter leaves registered on one tape (one registration per batch).
template <typename T>
struct ParamVars {
  using Var = typename nn::Tape<T>::Var;
  std::vector<Var> vars;  // aligned with named_params() order
};

template <typename T>
ParamVars<T> register_params(nn::Tape<T>& tape, const TransformerParams<T>& p);

// Pointers into the tape's leaf gradients, aligned with named_params()
// order; empty tensors mean no gradient flowed.
template <typename T>
std::vector<const Tensor<T>*> leaf_grads(const nn::Tape<T>& tape, const ParamVars<T>& vars);

// Decoder logits for teacher forcing and scoring. Returns a
// (len(prefix) + 1) x V tensor: row t is the next-token distribution given
// input_ids and prefix[0..t-1]; the final row conditions on the whole
// prefix. The decoder is causal; dropout runs only in train mode.
// Sequences longer than max_len raise DomainError (explicit, not silent).
template <typename T>
typename nn::Tape<T>::Var forward_logits_on_tape(nn::Tape<T>& tape, const ParamVars<T>& pv,
                                                 const ModelConfig& cfg,
                                                 std::span<const int> input_ids,
                                                 std::span<const int> prefix, bool train_mode,
                                                 Rng* dropout_rng);

// Convenience wrapper: runs a fresh tape and returns the logits tensor.
template <typename T>
Tensor<T> forward_logits(const TransformerParams<T>& p, std::span<const int> input_ids,
                         std::span<const int> prefix, bool train_mode = false,
                         Rng* dropout_rng = nullptr);

// Mean over target positions of cross-entropy against the gold next token,
// with the gold prefix fed at each step. target must end with the stop id
// (the stop position counts toward the mean).
template <typename T>
typename nn::Tape<T>::Var teacher_forced_loss_on_tape(nn::Tape<T>& tape, const ParamVars<T>& pv,
                                                      const ModelConfig& cfg,
                                                      std::span<const int> input_ids,
                                                      std::span<const int> target_ids,
                                                      int stop_id, bool train_mode,
                                                      Rng* dropout_rng);

template <typename T>
double teacher_forced_loss(const TransformerParams<T>& p, std::span<const int> input_ids,
                           std::span<const int> target_ids, int stop_id);

// ---- Inference path (no tape, no dropout) ----

template <typename T>
struct Encoded {
  std::vector<int> input_ids;
  Tensor<T> out;  // [len, d], final-normed encoder states
};

template <typename T>
Encoded<T> encode(const TransformerParams<T>& p, std::span<const int> input_ids);

// Incremental decoder over one encoded input with per-row KV caches.
// Rows evolve via advance(): each continuation names a source row and the
// token fed to it, so sampling keeps rows and beam search may fork them.
template <typename T>
class DecodeBatch {
 public:
  DecodeBatch(const TransformerParams<T>& p, const Encoded<T>& enc, int rows);

  int rows() const { return rows_; }
  int steps_taken() const { return t_; }
  // Log-softmax over the vocabulary for the next token of row r.
  std::span<const T> logprob_row(int r) const {
    return {logprobs_.row_ptr(r), static_cast<size_t>(logprobs_.cols())};
  }
  void advance(std::span<const std::pair<int, int>> next);

 private:
  void step_with_tokens(const std::vector<int>& tokens);

  const TransformerParams<T>& p_;
  const Encoded<T>& enc_;
  std::vector<Tensor<T>> cross_k_, cross_v_;           // per layer [L_in, d]
  std::vector<std::vector<std::vector<T>>> kcache_, vcache_;  // [layer][row][t*d]
  Tensor<T> logprobs_;  // [rows, V]
  int rows_ = 0;
  int t_ = 0;  // decoder positions consumed (including the start token)
};

// Probability vector over the vocabulary for the next token after `prefix`
// (softmax of final-position logits). Eval mode.
template <typename T>
std::vector<T> decode_step(const TransformerParams<T>& p, std::span<const int> input_ids,
                           std::span<const int> prefix);

inline constexpr int kDecoderStart = 0;  // pad id doubles as decoder start

}  // namespace kgseq::model

#include "kgseq/detail/transformer_impl.hpp"
