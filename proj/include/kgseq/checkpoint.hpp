#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "kgseq/strutil.hpp"
#include "kgseq/transformer.hpp"

namespace kgseq::model {

// Versioned binary checkpoint: header (config, step, precision), then named
// parameter blobs in named_params() order, then optimizer moments. A sidecar
// <path>.manifest.txt lists shapes and the content hash. Round-trips are
// bit-exact. Data is stored in native little-endian layout.

namespace detail {

inline constexpr char kCkptMagic[8] = {'K', 'G', 'S', 'Q', 'C', 'K', 'P', '1'};

template <typename V>
void put(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw DataError("truncated checkpoint");
  return v;
}

template <typename T>
void put_tensor(std::ostream& os, const Tensor<T>& t) {
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
  for (int d : t.shape) put<std::int32_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(T)));
}

template <typename T>
Tensor<T> get_tensor(std::istream& is) {
  const int nd = get<std::uint8_t>(is);
  std::vector<int> shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) shape[static_cast<size_t>(i)] = get<std::int32_t>(is);
  Tensor<T> t(shape);
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (!is) throw DataError("truncated checkpoint tensor");
  return t;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ModelState<T>& state, const std::string& path) {
  std::ostringstream os(std::ios::binary);
  os.write(detail::kCkptMagic, 8);
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(T)));
  const ModelConfig& c = state.params.cfg;
  for (int v : {c.d_model, c.n_heads, c.d_ff, c.n_enc_layers, c.n_dec_layers, c.vocab_size,
                c.max_len, c.rel_buckets, c.rel_max_dist})
    detail::put<std::int32_t>(os, v);
  detail::put<double>(os, c.dropout_rate);
  detail::put<std::uint64_t>(os, state.step);

  auto named = state.params.named_params();
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, tensor] : named) {
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_tensor(os, *tensor);
  }
  const bool has_moments = !state.moments.m.empty();
  detail::put<std::uint8_t>(os, has_moments ? 1 : 0);
  if (has_moments) {
    detail::put<std::uint64_t>(os, state.moments.t);
    for (size_t i = 0; i < named.size(); ++i) {
      detail::put_tensor(os, state.moments.m[i]);
      detail::put_tensor(os, state.moments.v[i]);
    }
  }
  const std::string bytes = os.str();
  write_file(path, bytes);

  std::ostringstream man;
  man << "kgseq-checkpoint v1\n";
  man << "precision " << sizeof(T) * 8 << "\n";
  man << "step " << state.step << "\n";
  man << "config " << c.d_model << " " << c.n_heads << " " << c.d_ff << " " << c.n_enc_layers
      << " " << c.n_dec_layers << " " << c.vocab_size << " " << c.max_len << "\n";
  for (const auto& [name, tensor] : named) man << "param " << name << " " << tensor->shape_str() << "\n";
  man << "hash " << hex64(fnv1a(bytes)) << "\n";
  write_file(path + ".manifest.txt", man.str());
}

inline int checkpoint_precision_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw DataError(path + ": not a kgseq checkpoint");
  return detail::get<std::uint8_t>(is);
}

template <typename T>
ModelState<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw DataError(path + ": not a kgseq checkpoint");
  const int prec = detail::get<std::uint8_t>(is);
  if (prec != static_cast<int>(sizeof(T)))
    throw DataError(path + ": precision is " + std::to_string(prec * 8) + "-bit, expected " +
                    std::to_string(sizeof(T) * 8) + "-bit");
  ModelConfig c;
  c.d_model = detail::get<std::int32_t>(is);
  c.n_heads = detail::get<std::int32_t>(is);
  c.d_ff = detail::get<std::int32_t>(is);
  c.n_enc_layers = detail::get<std::int32_t>(is);
  c.n_dec_layers = detail::get<std::int32_t>(is);
  c.vocab_size = detail::get<std::int32_t>(is);
  c.max_len = detail::get<std::int32_t>(is);
  c.rel_buckets = detail::get<std::int32_t>(is);
  c.rel_max_dist = detail::get<std::int32_t>(is);
  c.dropout_rate = detail::get<double>(is);

  ModelState<T> state;
  state.params = TransformerParams<T>::init(c, /*seed=*/0);
  state.step = detail::get<std::uint64_t>(is);

  auto named = state.params.named_params();
  const auto n = detail::get<std::uint32_t>(is);
  if (n != named.size()) throw DataError(path + ": parameter count mismatch");
  for (auto& [name, tensor] : named) {
    const auto len = detail::get<std::uint16_t>(is);
    std::string got(len, '\0');
    is.read(got.data(), len);
    if (got != name) throw DataError(path + ": expected parameter '" + name + "', found '" + got + "'");
    Tensor<T> loaded = detail::get_tensor<T>(is);
    if (loaded.shape != tensor->shape)
      throw DataError(path + ": shape mismatch for '" + name + "'");
    *tensor = std::move(loaded);
  }
  const bool has_moments = detail::get<std::uint8_t>(is) != 0;
  if (has_moments) {
    state.moments.t = detail::get<std::uint64_t>(is);
    state.moments.m.clear();
    state.moments.v.clear();
    for (size_t i = 0; i < named.size(); ++i) {
      state.moments.m.push_back(detail::get_tensor<T>(is));
      state.moments.v.push_back(detail::get_tensor<T>(is));
    }
  } else {
    state.moments.init_like(state.params.param_ptrs());
  }
  return state;
}

}  // namespace kgseq::model
