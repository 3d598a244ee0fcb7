#pragma once

#include <algorithm>
#include <cmath>

#include "kgseq/transformer.hpp"

namespace kgseq::model {

inline void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_ff <= 0 || n_enc_layers <= 0 || n_dec_layers <= 0)
    throw ConfigError("model dimensions must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  if (vocab_size <= 0) throw ConfigError("vocab_size must be set from the tokenizer");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout must be in [0,1)");
  if (rel_buckets < 4 || rel_buckets % 2 != 0) throw ConfigError("rel_buckets must be even, >= 4");
}

inline ModelConfig ModelConfig::desk_default(int vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  return c;
}

inline ModelConfig ModelConfig::t5_small(int vocab) {
  ModelConfig c;
  c.d_model = 512;
  c.n_heads = 8;
  c.d_ff = 2048;
  c.n_enc_layers = 6;
  c.n_dec_layers = 6;
  c.vocab_size = vocab;
  c.max_len = 512;
  return c;
}

template <typename T>
TransformerParams<T> TransformerParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TransformerParams p;
  p.cfg = cfg;
  Rng rng(mix_seed(seed, 0x1417));
  auto normal = [&](std::vector<int> shape) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(0.02 * rng.normal());
    return t;
  };
  auto ones = [&](int n) { return Tensor<T>({n}, T(1)); };
  auto zeros = [&](int n) { return Tensor<T>({n}, T(0)); };

  const int d = cfg.d_model, ff = cfg.d_ff;
  p.embedding = normal({cfg.vocab_size, d});
  p.enc_rel_bias = normal({cfg.n_heads, cfg.rel_buckets});
  p.dec_rel_bias = normal({cfg.n_heads, cfg.rel_buckets});
  p.enc_final_g = ones(d);
  p.enc_final_b = zeros(d);
  p.dec_final_g = ones(d);
  p.dec_final_b = zeros(d);
  for (int l = 0; l < cfg.n_enc_layers; ++l) {
    typename TransformerParams<T>::EncLayer e;
    e.ln1_g = ones(d);
    e.ln1_b = zeros(d);
    e.wq = normal({d, d});
    e.wk = normal({d, d});
    e.wv = normal({d, d});
    e.wo = normal({d, d});
    e.ln2_g = ones(d);
    e.ln2_b = zeros(d);
    e.ff1 = normal({d, ff});
    e.ff2 = normal({ff, d});
    p.enc.push_back(std::move(e));
  }
  for (int l = 0; l < cfg.n_dec_layers; ++l) {
    typename TransformerParams<T>::DecLayer x;
    x.ln1_g = ones(d);
    x.ln1_b = zeros(d);
    x.swq = normal({d, d});
    x.swk = normal({d, d});
    x.swv = normal({d, d});
    x.swo = normal({d, d});
    x.ln2_g = ones(d);
    x.ln2_b = zeros(d);
    x.cwq = normal({d, d});
    x.cwk = normal({d, d});
    x.cwv = normal({d, d});
    x.cwo = normal({d, d});
    x.ln3_g = ones(d);
    x.ln3_b = zeros(d);
    x.ff1 = normal({d, ff});
    x.ff2 = normal({ff, d});
    p.dec.push_back(std::move(x));
  }
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> TransformerParams<T>::named_params() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.push_back({"embedding", &embedding});
  out.push_back({"enc.rel_bias", &enc_rel_bias});
  out.push_back({"dec.rel_bias", &dec_rel_bias});
  for (size_t l = 0; l < enc.size(); ++l) {
    const std::string pre = "enc." + std::to_string(l) + ".";
    auto& e = enc[l];
    out.push_back({pre + "ln1.g", &e.ln1_g});
    out.push_back({pre + "ln1.b", &e.ln1_b});
    out.push_back({pre + "attn.wq", &e.wq});
    out.push_back({pre + "attn.wk", &e.wk});
    out.push_back({pre + "attn.wv", &e.wv});
    out.push_back({pre + "attn.wo", &e.wo});
    out.push_back({pre + "ln2.g", &e.ln2_g});
    out.push_back({pre + "ln2.b", &e.ln2_b});
    out.push_back({pre + "ff.w1", &e.ff1});
    out.push_back({pre + "ff.w2", &e.ff2});
  }
  out.push_back({"enc.final.g", &enc_final_g});
  out.push_back({"enc.final.b", &enc_final_b});
  for (size_t l = 0; l < dec.size(); ++l) {
    const std::string pre = "dec." + std::to_string(l) + ".";
    auto& x = dec[l];
    out.push_back({pre + "ln1.g", &x.ln1_g});
    out.push_back({pre + "ln1.b", &x.ln1_b});
    out.push_back({pre + "self.wq", &x.swq});
    out.push_back({pre + "self.wk", &x.swk});
    out.push_back({pre + "self.wv", &x.swv});
    out.push_back({pre + "self.wo", &x.swo});
    out.push_back({pre + "ln2.g", &x.ln2_g});
    out.push_back({pre + "ln2.b", &x.ln2_b});
    out.push_back({pre + "cross.wq", &x.cwq});
    out.push_back({pre + "cross.wk", &x.cwk});
    out.push_back({pre + "cross.wv", &x.cwv});
    out.push_back({pre + "cross.wo", &x.cwo});
    out.push_back({pre + "ln3.g", &x.ln3_g});
    out.push_back({pre + "ln3.b", &x.ln3_b});
    out.push_back({pre + "ff.w1", &x.ff1});
    out.push_back({pre + "ff.w2", &x.ff2});
  }
  out.push_back({"dec.final.g", &dec_final_g});
  out.push_back({"dec.final.b", &dec_final_b});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> TransformerParams<T>::named_params() const {
  auto mut = const_cast<TransformerParams<T>*>(this)->named_params();
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.push_back({std::move(n), t});
  return out;
}

template <typename T>
std::vector<Tensor<T>*> TransformerParams<T>::param_ptrs() {
  std::vector<Tensor<T>*> out;
  for (auto& [n, t] : named_params()) out.push_back(t);
  return out;
}

template <typename T>
size_t TransformerParams<T>::param_count() const {
  size_t n = 0;
  for (const auto& [name, t] : named_params()) n += t->numel();
  return n;
}

template <typename T>
size_t TransformerParams<T>::param_count_formula(const ModelConfig& cfg) {
  const size_t d = static_cast<size_t>(cfg.d_model);
  const size_t ff = static_cast<size_t>(cfg.d_ff);
  const size_t enc_layer = 4 * d * d + 2 * d * ff + 4 * d;
  const size_t dec_layer = 8 * d * d + 2 * d * ff + 6 * d;
  return static_cast<size_t>(cfg.vocab_size) * d +
         2 * static_cast<size_t>(cfg.n_heads) * static_cast<size_t>(cfg.rel_buckets) +
         static_cast<size_t>(cfg.n_enc_layers) * enc_layer +
         static_cast<size_t>(cfg.n_dec_layers) * dec_layer + 4 * d;
}

template <typename T>
ParamVars<T> register_params(nn::Tape<T>& tape, const TransformerParams<T>& p) {
  ParamVars<T> pv;
  for (const auto& [name, t] : p.named_params()) pv.vars.push_back(tape.leaf(*t, true));
  return pv;
}

template <typename T>
std::vector<const Tensor<T>*> leaf_grads(const nn::Tape<T>& tape, const ParamVars<T>& vars) {
  std::vector<const Tensor<T>*> out;
  out.reserve(vars.vars.size());
  for (auto v : vars.vars) out.push_back(&tape.grad(v));
  return out;
}

namespace detail {

// Indices of the parameter leaves inside ParamVars, mirroring named_params()
// order. Computed structurally so tape code never hardcodes offsets.
struct ParamLayout {
  int embedding, enc_rel, dec_rel;
  struct Enc {
    int ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1, ff2;
  };
  struct Dec {
    int ln1_g, ln1_b, swq, swk, swv, swo, ln2_g, ln2_b;
    int cwq, cwk, cwv, cwo, ln3_g, ln3_b, ff1, ff2;
  };
  std::vector<Enc> enc;
  std::vector<Dec> dec;
  int enc_final_g, enc_final_b, dec_final_g, dec_final_b;

  explicit ParamLayout(const ModelConfig& cfg) {
    int at = 0;
    embedding = at++;
    enc_rel = at++;
    dec_rel = at++;
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
      Enc e;
      e.ln1_g = at++; e.ln1_b = at++;
      e.wq = at++; e.wk = at++; e.wv = at++; e.wo = at++;
      e.ln2_g = at++; e.ln2_b = at++;
      e.ff1 = at++; e.ff2 = at++;
      enc.push_back(e);
    }
    enc_final_g = at++;
    enc_final_b = at++;
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
      Dec x;
      x.ln1_g = at++; x.ln1_b = at++;
      x.swq = at++; x.swk = at++; x.swv = at++; x.swo = at++;
      x.ln2_g = at++; x.ln2_b = at++;
      x.cwq = at++; x.cwk = at++; x.cwv = at++; x.cwo = at++;
      x.ln3_g = at++; x.ln3_b = at++;
      x.ff1 = at++; x.ff2 = at++;
      dec.push_back(x);
    }
    dec_final_g = at++;
    dec_final_b = at++;
  }
};

template <typename T>
struct TapeCtx {
  nn::Tape<T>& tape;
  const ParamVars<T>& pv;
  const ModelConfig& cfg;
  ParamLayout layout;
  bool train;
  Rng* rng;

  using Var = typename nn::Tape<T>::Var;

  TapeCtx(nn::Tape<T>& t, const ParamVars<T>& p, const ModelConfig& c, bool tr, Rng* r)
      : tape(t), pv(p), cfg(c), layout(c), train(tr), rng(r) {
    if (train && c.dropout_rate > 0.0 && r == nullptr)
      throw DomainError("train mode with dropout requires an RNG");
  }

  Var v(int idx) const { return pv.vars[static_cast<size_t>(idx)]; }

  Var drop(Var x) {
    if (!train || cfg.dropout_rate <= 0.0) return x;
    return tape.dropout(x, cfg.dropout_rate, *rng);
  }

  // Multi-head attention; kv_len keys/values, q_len queries. rel_table < 0
  // disables the position bias (cross attention).
  Var attention(Var q_in, Var kv_in, int wq, int wk, int wv, int wo, int rel_table, bool causal,
                std::optional<Var> causal_mask) {
    const int H = cfg.n_heads, dk = cfg.d_head();
    const int q_len = tape.value(q_in).rows();
    const int kv_len = tape.value(kv_in).rows();
    Var q = tape.matmul(q_in, v(wq));
    Var k = tape.matmul(kv_in, v(wk));
    Var val = tape.matmul(kv_in, v(wv));
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(H));
    for (int h = 0; h < H; ++h) {
      Var qh = tape.slice_cols(q, h * dk, (h + 1) * dk);
      Var kh = tape.slice_cols(k, h * dk, (h + 1) * dk);
      Var vh = tape.slice_cols(val, h * dk, (h + 1) * dk);
      Var scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt);
      if (rel_table >= 0)
        scores = tape.add(scores, tape.rel_bias(v(rel_table), h, q_len, kv_len, causal,
                                                cfg.rel_max_dist));
      if (causal_mask) scores = tape.add(scores, *causal_mask);
      Var probs = tape.softmax_rows(scores);
      probs = drop(probs);
      heads.push_back(tape.matmul(probs, vh));
    }
    return tape.matmul(tape.concat_cols(heads), v(wo));
  }

  Var feed_forward(Var x, int w1, int w2) {
    Var h = tape.relu(tape.matmul(x, v(w1)));
    h = drop(h);
    return tape.matmul(h, v(w2));
  }

  Var encode(std::span<const int> input_ids) {
    if (input_ids.empty()) throw DomainError("empty encoder input");
    if (static_cast<int>(input_ids.size()) > cfg.max_len)
      throw DomainError("encoder input length " + std::to_string(input_ids.size()) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
    Var x = tape.embedding_rows(v(layout.embedding),
                                std::vector<int>(input_ids.begin(), input_ids.end()));
    x = drop(x);
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
      const auto& L = layout.enc[static_cast<size_t>(l)];
      Var h = tape.layer_norm(x, v(L.ln1_g), v(L.ln1_b));
      x = tape.add(x, drop(attention(h, h, L.wq, L.wk, L.wv, L.wo, layout.enc_rel, false,
                                     std::nullopt)));
      Var h2 = tape.layer_norm(x, v(L.ln2_g), v(L.ln2_b));
      x = tape.add(x, drop(feed_forward(h2, L.ff1, L.ff2)));
    }
    return tape.layer_norm(x, v(layout.enc_final_g), v(layout.enc_final_b));
  }

  // Decoder over [start] ++ prefix; output rows = len(prefix) + 1.
  Var decode_logits(Var enc_out, std::span<const int> prefix) {
    const int L = static_cast<int>(prefix.size()) + 1;
    if (L > cfg.max_len)
      throw DomainError("decoder prefix length " + std::to_string(prefix.size()) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
    std::vector<int> dec_in(static_cast<size_t>(L));
    dec_in[0] = kDecoderStart;
    std::copy(prefix.begin(), prefix.end(), dec_in.begin() + 1);

    Tensor<T> mask({L, L});
    for (int i = 0; i < L; ++i)
      for (int j = i + 1; j < L; ++j) mask.at(i, j) = static_cast<T>(-1e9);
    Var mask_var = tape.leaf(std::move(mask), false);

    Var x = tape.embedding_rows(v(layout.embedding), dec_in);
    x = drop(x);
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
      const auto& D = layout.dec[static_cast<size_t>(l)];
      Var h = tape.layer_norm(x, v(D.ln1_g), v(D.ln1_b));
      x = tape.add(x, drop(attention(h, h, D.swq, D.swk, D.swv, D.swo, layout.dec_rel, true,
                                     mask_var)));
      Var h2 = tape.layer_norm(x, v(D.ln2_g), v(D.ln2_b));
      x = tape.add(x, drop(attention(h2, enc_out, D.cwq, D.cwk, D.cwv, D.cwo, -1, false,
                                     std::nullopt)));
      Var h3 = tape.layer_norm(x, v(D.ln3_g), v(D.ln3_b));
      x = tape.add(x, drop(feed_forward(h3, D.ff1, D.ff2)));
    }
    x = tape.layer_norm(x, v(layout.dec_final_g), v(layout.dec_final_b));
    return tape.matmul_nt(x, v(layout.embedding));  // tied output projection
  }
};

}  // namespace detail

template <typename T>
typename nn::Tape<T>::Var forward_logits_on_tape(nn::Tape<T>& tape, const ParamVars<T>& pv,
                                                 const ModelConfig& cfg,
                                                 std::span<const int> input_ids,
                                                 std::span<const int> prefix, bool train_mode,
                                                 Rng* dropout_rng) {
  detail::TapeCtx<T> ctx(tape, pv, cfg, train_mode, dropout_rng);
  auto enc_out = ctx.encode(input_ids);
  return ctx.decode_logits(enc_out, prefix);
}

template <typename T>
Tensor<T> forward_logits(const TransformerParams<T>& p, std::span<const int> input_ids,
                         std::span<const int> prefix, bool train_mode, Rng* dropout_rng) {
  nn::Tape<T> tape;
  auto pv = register_params(tape, p);
  auto logits = forward_logits_on_tape(tape, pv, p.cfg, input_ids, prefix, train_mode, dropout_rng);
  return tape.value(logits);
}

template <typename T>
typename nn::Tape<T>::Var teacher_forced_loss_on_tape(nn::Tape<T>& tape, const ParamVars<T>& pv,
                                                      const ModelConfig& cfg,
                                                      std::span<const int> input_ids,
                                                      std::span<const int> target_ids,
                                                      int stop_id, bool train_mode,
                                                      Rng* dropout_rng) {
  if (target_ids.empty()) throw DomainError("empty target sequence");
  if (target_ids.back() != stop_id) throw DomainError("target must end with the stop token");
  detail::TapeCtx<T> ctx(tape, pv, cfg, train_mode, dropout_rng);
  auto enc_out = ctx.encode(input_ids);
  // Feed target[0..T-2]; logits rows 0..T-1 predict target[0..T-1].
  auto logits = ctx.decode_logits(enc_out, target_ids.subspan(0, target_ids.size() - 1));
  auto losses = tape.cross_entropy(logits, std::vector<int>(target_ids.begin(), target_ids.end()));
  return tape.mean_all(losses);
}

template <typename T>
double teacher_forced_loss(const TransformerParams<T>& p, std::span<const int> input_ids,
                           std::span<const int> target_ids, int stop_id) {
  nn::Tape<T> tape;
  auto pv = register_params(tape, p);
  auto loss = teacher_forced_loss_on_tape(tape, pv, p.cfg, input_ids, target_ids, stop_id,
                                          /*train_mode=*/false, nullptr);
  return static_cast<double>(tape.value(loss).data[0]);
}

// ---- inference path ----

namespace detail {

template <typename T>
Tensor<T> ln_rows(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b,
                  T eps = static_cast<T>(1e-5)) {
  Tensor<T> y(x.shape);
  const int m = x.rows(), w = x.cols();
  for (int i = 0; i < m; ++i) {
    const T* xr = x.row_ptr(i);
    T* yr = y.row_ptr(i);
    T mu = T(0);
    for (int j = 0; j < w; ++j) mu += xr[j];
    mu /= static_cast<T>(w);
    T var = T(0);
    for (int j = 0; j < w; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(w);
    const T is = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < w; ++j) yr[j] = g.data[static_cast<size_t>(j)] * (xr[j] - mu) * is + b.data[static_cast<size_t>(j)];
  }
  return y;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  Tensor<T> y({x.rows(), w.cols()});
  nn::gemm_nn(x.data.data(), w.data.data(), y.data.data(), x.rows(), x.cols(), w.cols(), false);
  return y;
}

}  // namespace detail

template <typename T>
Encoded<T> encode(const TransformerParams<T>& p, std::span<const int> input_ids) {
  const ModelConfig& cfg = p.cfg;
  if (input_ids.empty()) throw DomainError("empty encoder input");
  if (static_cast<int>(input_ids.size()) > cfg.max_len)
    throw DomainError("encoder input length " + std::to_string(input_ids.size()) +
                      " exceeds max_len " + std::to_string(cfg.max_len));
  const int L = static_cast<int>(input_ids.size());
  const int d = cfg.d_model, H = cfg.n_heads, dk = cfg.d_head();
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));

  Tensor<T> x({L, d});
  for (int i = 0; i < L; ++i) {
    const int id = input_ids[static_cast<size_t>(i)];
    if (id < 0 || id >= cfg.vocab_size) throw DomainError("input token id out of range");
    std::copy_n(p.embedding.row_ptr(id), d, x.row_ptr(i));
  }

  std::vector<T> scores(static_cast<size_t>(L));
  for (const auto& layer : p.enc) {
    Tensor<T> h = detail::ln_rows(x, layer.ln1_g, layer.ln1_b);
    Tensor<T> q = detail::linear(h, layer.wq);
    Tensor<T> k = detail::linear(h, layer.wk);
    Tensor<T> v = detail::linear(h, layer.wv);
    Tensor<T> ctx({L, d});
    for (int hd = 0; hd < H; ++hd) {
      const int off = hd * dk;
      for (int i = 0; i < L; ++i) {
        const T* qi = q.row_ptr(i) + off;
        for (int j = 0; j < L; ++j) {
          const T* kj = k.row_ptr(j) + off;
          T acc = T(0);
          for (int c = 0; c < dk; ++c) acc += qi[c] * kj[c];
          scores[static_cast<size_t>(j)] =
              acc * inv_sqrt + p.enc_rel_bias.at(hd, nn::rel_pos_bucket(j - i, true, cfg.rel_buckets,
                                                                        cfg.rel_max_dist));
        }
        nn::softmax_row(scores.data(), scores.data(), L);
        T* out = ctx.row_ptr(i) + off;
        for (int j = 0; j < L; ++j) {
          const T pj = scores[static_cast<size_t>(j)];
          const T* vj = v.row_ptr(j) + off;
          for (int c = 0; c < dk; ++c) out[c] += pj * vj[c];
        }
      }
    }
    Tensor<T> attn_out = detail::linear(ctx, layer.wo);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += attn_out.data[i];

    Tensor<T> h2 = detail::ln_rows(x, layer.ln2_g, layer.ln2_b);
    Tensor<T> f = detail::linear(h2, layer.ff1);
    for (auto& vv : f.data) vv = vv > T(0) ? vv : T(0);
    Tensor<T> f2 = detail::linear(f, layer.ff2);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += f2.data[i];
  }
  Encoded<T> out;
  out.input_ids.assign(input_ids.begin(), input_ids.end());
  out.out = detail::ln_rows(x, p.enc_final_g, p.enc_final_b);
  return out;
}

template <typename T>
DecodeBatch<T>::DecodeBatch(const TransformerParams<T>& p, const Encoded<T>& enc, int rows)
    : p_(p), enc_(enc), rows_(rows) {
  if (rows <= 0) throw DomainError("DecodeBatch needs at least one row");
  const size_t nl = p_.dec.size();
  cross_k_.reserve(nl);
  cross_v_.reserve(nl);
  for (const auto& layer : p_.dec) {
    cross_k_.push_back(detail::linear(enc_.out, layer.cwk));
    cross_v_.push_back(detail::linear(enc_.out, layer.cwv));
  }
  kcache_.assign(nl, std::vector<std::vector<T>>(static_cast<size_t>(rows)));
  vcache_.assign(nl, std::vector<std::vector<T>>(static_cast<size_t>(rows)));
  step_with_tokens(std::vector<int>(static_cast<size_t>(rows), kDecoderStart));
}

template <typename T>
void DecodeBatch<T>::advance(std::span<const std::pair<int, int>> next) {
  if (next.empty()) throw DomainError("advance with no continuations");
  const int new_rows = static_cast<int>(next.size());
  std::vector<int> tokens(static_cast<size_t>(new_rows));
  bool identity = new_rows == rows_;
  for (int i = 0; i < new_rows; ++i) {
    const auto& [src, tok] = next[static_cast<size_t>(i)];
    if (src < 0 || src >= rows_) throw DomainError("advance: bad source row");
    if (tok < 0 || tok >= p_.cfg.vocab_size) throw DomainError("advance: bad token");
    tokens[static_cast<size_t>(i)] = tok;
    if (next[static_cast<size_t>(i)].first != i) identity = false;
  }
  if (!identity) {
    for (size_t l = 0; l < kcache_.size(); ++l) {
      std::vector<std::vector<T>> nk(static_cast<size_t>(new_rows)), nv(static_cast<size_t>(new_rows));
      for (int i = 0; i < new_rows; ++i) {
        nk[static_cast<size_t>(i)] = kcache_[l][static_cast<size_t>(next[static_cast<size_t>(i)].first)];
        nv[static_cast<size_t>(i)] = vcache_[l][static_cast<size_t>(next[static_cast<size_t>(i)].first)];
      }
      kcache_[l] = std::move(nk);
      vcache_[l] = std::move(nv);
    }
  }
  rows_ = new_rows;
  if (t_ + 1 > p_.cfg.max_len)
    throw DomainError("decode length exceeds max_len " + std::to_string(p_.cfg.max_len));
  step_with_tokens(tokens);
}

template <typename T>
void DecodeBatch<T>::step_with_tokens(const std::vector<int>& tokens) {
  const ModelConfig& cfg = p_.cfg;
  const int R = rows_, d = cfg.d_model, H = cfg.n_heads, dk = cfg.d_head();
  const int Lin = enc_.out.rows();
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));

  Tensor<T> x({R, d});
  for (int r = 0; r < R; ++r) std::copy_n(p_.embedding.row_ptr(tokens[static_cast<size_t>(r)]), d, x.row_ptr(r));

  std::vector<T> scores(static_cast<size_t>(std::max(t_ + 1, Lin)));
  for (size_t l = 0; l < p_.dec.size(); ++l) {
    const auto& layer = p_.dec[l];
    // self attention over the cache (including the position being added)
    Tensor<T> h = detail::ln_rows(x, layer.ln1_g, layer.ln1_b);
    Tensor<T> q = detail::linear(h, layer.swq);
    Tensor<T> k = detail::linear(h, layer.swk);
    Tensor<T> v = detail::linear(h, layer.swv);
    for (int r = 0; r < R; ++r) {
      auto& kc = kcache_[l][static_cast<size_t>(r)];
      auto& vc = vcache_[l][static_cast<size_t>(r)];
      kc.insert(kc.end(), k.row_ptr(r), k.row_ptr(r) + d);
      vc.insert(vc.end(), v.row_ptr(r), v.row_ptr(r) + d);
    }
    const int keys = t_ + 1;
    Tensor<T> ctx({R, d});
    for (int r = 0; r < R; ++r) {
      const T* kc = kcache_[l][static_cast<size_t>(r)].data();
      const T* vc = vcache_[l][static_cast<size_t>(r)].data();
      for (int hd = 0; hd < H; ++hd) {
        const int off = hd * dk;
        const T* qr = q.row_ptr(r) + off;
        for (int j = 0; j < keys; ++j) {
          const T* kj = kc + static_cast<size_t>(j) * d + off;
          T acc = T(0);
          for (int c = 0; c < dk; ++c) acc += qr[c] * kj[c];
          scores[static_cast<size_t>(j)] =
              acc * inv_sqrt + p_.dec_rel_bias.at(hd, nn::rel_pos_bucket(j - t_, false,
                                                                         cfg.rel_buckets,
                                                                         cfg.rel_max_dist));
        }
        nn::softmax_row(scores.data(), scores.data(), keys);
        T* out = ctx.row_ptr(r) + off;
        for (int j = 0; j < keys; ++j) {
          const T pj = scores[static_cast<size_t>(j)];
          const T* vj = vc + static_cast<size_t>(j) * d + off;
          for (int c = 0; c < dk; ++c) out[c] += pj * vj[c];
        }
      }
    }
    Tensor<T> self_out = detail::linear(ctx, layer.swo);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += self_out.data[i];

    // cross attention against the shared encoder projections
    Tensor<T> h2 = detail::ln_rows(x, layer.ln2_g, layer.ln2_b);
    Tensor<T> qc = detail::linear(h2, layer.cwq);
    Tensor<T> cctx({R, d});
    const Tensor<T>& ck = cross_k_[l];
    const Tensor<T>& cv = cross_v_[l];
    for (int r = 0; r < R; ++r) {
      for (int hd = 0; hd < H; ++hd) {
        const int off = hd * dk;
        const T* qr = qc.row_ptr(r) + off;
        for (int j = 0; j < Lin; ++j) {
          const T* kj = ck.row_ptr(j) + off;
          T acc = T(0);
          for (int c = 0; c < dk; ++c) acc += qr[c] * kj[c];
          scores[static_cast<size_t>(j)] = acc * inv_sqrt;
        }
        nn::softmax_row(scores.data(), scores.data(), Lin);
        T* out = cctx.row_ptr(r) + off;
        for (int j = 0; j < Lin; ++j) {
          const T pj = scores[static_cast<size_t>(j)];
          const T* vj = cv.row_ptr(j) + off;
          for (int c = 0; c < dk; ++c) out[c] += pj * vj[c];
        }
      }
    }
    Tensor<T> cross_out = detail::linear(cctx, layer.cwo);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += cross_out.data[i];

    Tensor<T> h3 = detail::ln_rows(x, layer.ln3_g, layer.ln3_b);
    Tensor<T> f = detail::linear(h3, layer.ff1);
    for (auto& vv : f.data) vv = vv > T(0) ? vv : T(0);
    Tensor<T> f2 = detail::linear(f, layer.ff2);
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += f2.data[i];
  }

  Tensor<T> y = detail::ln_rows(x, p_.dec_final_g, p_.dec_final_b);
  logprobs_ = Tensor<T>({R, cfg.vocab_size});
  nn::gemm_nt(y.data.data(), p_.embedding.data.data(), logprobs_.data.data(), R, d,
              cfg.vocab_size, false);
  for (int r = 0; r < R; ++r)
    nn::log_softmax_row(logprobs_.row_ptr(r), logprobs_.row_ptr(r), cfg.vocab_size);
  t_ += 1;
}

template <typename T>
std::vector<T> decode_step(const TransformerParams<T>& p, std::span<const int> input_ids,
                           std::span<const int> prefix) {
  Encoded<T> enc = encode(p, input_ids);
  DecodeBatch<T> batch(p, enc, 1);
  for (int tok : prefix) {
    const std::pair<int, int> cont[] = {{0, tok}};
    batch.advance(cont);
  }
  auto lp = batch.logprob_row(0);
  std::vector<T> probs(lp.size());
  for (size_t i = 0; i < lp.size(); ++i) probs[i] = std::exp(lp[i]);
  return probs;
}

}  // namespace kgseq::model
