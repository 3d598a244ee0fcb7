#include "kgseq/kg_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "kgseq/errors.hpp"
#include "kgseq/rng.hpp"
#include "kgseq/strutil.hpp"

namespace kgseq::kg {

namespace {

std::uint64_t pack(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

}  // namespace

KnowledgeGraph::KnowledgeGraph(std::vector<Triple> triples, int num_entities, int num_relations)
    : triples_(std::move(triples)), num_entities_(num_entities), num_relations_(num_relations) {
  by_entity_.resize(static_cast<size_t>(num_entities_));
  for (size_t i = 0; i < triples_.size(); ++i) {
    const Triple& t = triples_[i];
    if (t.s < 0 || t.s >= num_entities_ || t.o < 0 || t.o >= num_entities_)
      throw DomainError("triple entity id out of range");
    if (t.p < 0 || t.p >= num_relations_) throw DomainError("triple relation id out of range");
    by_sp_[pack(t.s, t.p)].push_back(t.o);
    by_po_[pack(t.p, t.o)].push_back(t.s);
    by_entity_[static_cast<size_t>(t.s)].push_back(static_cast<int>(i));
    if (t.o != t.s) by_entity_[static_cast<size_t>(t.o)].push_back(static_cast<int>(i));
  }
  for (auto& [k, v] : by_sp_) std::sort(v.begin(), v.end());
  for (auto& [k, v] : by_po_) std::sort(v.begin(), v.end());
}

std::span<const int> KnowledgeGraph::objects_of(int s, int p) const {
  auto it = by_sp_.find(pack(s, p));
  if (it == by_sp_.end()) return {};
  return it->second;
}

std::span<const int> KnowledgeGraph::subjects_of(int p, int o) const {
  auto it = by_po_.find(pack(p, o));
  if (it == by_po_.end()) return {};
  return it->second;
}

std::span<const int> KnowledgeGraph::incident(int e) const {
  if (e < 0 || e >= num_entities_) throw DomainError("unknown entity id " + std::to_string(e));
  return by_entity_[static_cast<size_t>(e)];
}

bool KnowledgeGraph::contains(const Triple& t) const {
  auto objs = objects_of(t.s, t.p);
  return std::binary_search(objs.begin(), objs.end(), t.o);
}

LoadResult load_triples(const std::string& path, const NameResolver* resolver, IdMode mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open triple file: " + path);

  LoadResult out;
  std::unordered_map<std::string, int> ent_ids, rel_ids;
  std::set<Triple> seen;
  std::vector<Triple> triples;
  int max_eid = -1, max_rid = -1;

  auto entity_of = [&](const std::string& tok, size_t lineno) -> int {
    if (resolver) {
      auto id = resolver->entity_id(tok);
      if (!id)
        throw DataError(path + ":" + std::to_string(lineno) + ": unknown entity name '" + tok +
                        "'");
      return *id;
    }
    if (mode == IdMode::raw_integer) {
      long long v = 0;
      if (!parse_int(tok, v) || v < 0)
        throw DataError(path + ":" + std::to_string(lineno) + ": invalid entity id '" + tok + "'");
      max_eid = std::max(max_eid, static_cast<int>(v));
      return static_cast<int>(v);
    }
    auto [it, inserted] = ent_ids.try_emplace(tok, static_cast<int>(out.entity_names.size()));
    if (inserted) out.entity_names.push_back(tok);
    return it->second;
  };
  auto relation_of = [&](const std::string& tok, size_t lineno) -> int {
    if (resolver) {
      auto id = resolver->relation_id(tok);
      if (!id)
        throw DataError(path + ":" + std::to_string(lineno) + ": unknown relation name '" + tok +
                        "'");
      return *id;
    }
    if (mode == IdMode::raw_integer) {
      long long v = 0;
      if (!parse_int(tok, v) || v < 0)
        throw DataError(path + ":" + std::to_string(lineno) + ": invalid relation id '" + tok +
                        "'");
      max_rid = std::max(max_rid, static_cast<int>(v));
      return static_cast<int>(v);
    }
    auto [it, inserted] = rel_ids.try_emplace(tok, static_cast<int>(out.relation_names.size()));
    if (inserted) out.relation_names.push_back(tok);
    return it->second;
  };

  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = split(line, '\t');
    if (fields.size() != 3)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields, got " +
                      std::to_string(fields.size()));
    Triple t;
    t.s = entity_of(fields[0], lineno);
    t.p = relation_of(fields[1], lineno);
    t.o = entity_of(fields[2], lineno);
    if (seen.insert(t).second) {
      triples.push_back(t);
    } else {
      ++out.duplicates;
    }
  }

  int ne, nr;
  if (resolver) {
    ne = resolver->entity_count();
    nr = resolver->relation_count();
  } else if (mode == IdMode::raw_integer) {
    ne = max_eid + 1;
    nr = max_rid + 1;
  } else {
    ne = static_cast<int>(out.entity_names.size());
    nr = static_cast<int>(out.relation_names.size());
  }
  if (out.duplicates > 0)
    std::fprintf(stderr, "[kg] %s: dropped %zu duplicate triples\n", path.c_str(), out.duplicates);
  out.graph = KnowledgeGraph(std::move(triples), ne, nr);
  return out;
}

KgSplit drop_edges(const KnowledgeGraph& graph, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0) throw DomainError("drop fraction must be in [0,1]");
  const size_t n = graph.size();
  const size_t n_train = static_cast<size_t>(std::ceil((1.0 - fraction) * static_cast<double>(n)));

  std::vector<int> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
  Rng rng(mix_seed(seed, 0x5117));
  rng.shuffle(idx);

  std::vector<Triple> train, valid, test;
  train.reserve(n_train);
  for (size_t i = 0; i < n; ++i) {
    const Triple& t = graph.triples()[static_cast<size_t>(idx[i])];
    if (i < n_train) {
      train.push_back(t);
    } else if ((i - n_train) % 2 == 0) {
      valid.push_back(t);
    } else {
      test.push_back(t);
    }
  }
  KgSplit split;
  split.seed = seed;
  split.fraction = fraction;
  split.train = KnowledgeGraph(std::move(train), graph.num_entities(), graph.num_relations());
  split.valid = KnowledgeGraph(std::move(valid), graph.num_entities(), graph.num_relations());
  split.test = KnowledgeGraph(std::move(test), graph.num_entities(), graph.num_relations());
  return split;
}

std::vector<int> known_positives(const KgSplit& split, const LpQuery& query, unsigned scope) {
  std::vector<int> out;
  auto collect = [&](const KnowledgeGraph& g) {
    std::span<const int> ans = (query.dir == Direction::tail)
                                   ? g.objects_of(query.known, query.p)
                                   : g.subjects_of(query.p, query.known);
    out.insert(out.end(), ans.begin(), ans.end());
  };
  if (scope & kScopeTrain) collect(split.train);
  if (scope & kScopeValid) collect(split.valid);
  if (scope & kScopeTest) collect(split.test);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::unordered_set<int> neighborhood(const KnowledgeGraph& graph, int e, int hops) {
  if (e < 0 || e >= graph.num_entities())
    throw DomainError("unknown entity id " + std::to_string(e));
  if (hops < 1) throw DomainError("hops must be >= 1");

  std::unordered_set<int> visited{e};
  std::vector<int> frontier{e};
  for (int h = 0; h < hops && !frontier.empty(); ++h) {
    std::vector<int> next;
    for (int cur : frontier) {
      for (int ti : graph.incident(cur)) {
        const Triple& t = graph.triples()[static_cast<size_t>(ti)];
        for (int nb : {t.s, t.o}) {
          if (visited.insert(nb).second) next.push_back(nb);
        }
      }
    }
    frontier = std::move(next);
  }
  return visited;
}

namespace {

void write_triples_file(const KnowledgeGraph& g, const std::string& path) {
  std::ostringstream ss;
  for (const Triple& t : g.triples()) ss << t.s << '\t' << t.p << '\t' << t.o << '\n';
  write_file(path, ss.str());
}

}  // namespace

void write_split(const KgSplit& split, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_triples_file(split.train, dir + "/train.tsv");
  write_triples_file(split.valid, dir + "/valid.tsv");
  write_triples_file(split.test, dir + "/test.tsv");

  std::ostringstream m;
  m << "kgseq-split v1\n";
  m << "seed " << split.seed << "\n";
  m << "fraction " << split.fraction << "\n";
  m << "entities " << split.train.num_entities() << "\n";
  m << "relations " << split.train.num_relations() << "\n";
  m << "train " << split.train.size() << " " << hex64(fnv1a(read_file(dir + "/train.tsv"))) << "\n";
  m << "valid " << split.valid.size() << " " << hex64(fnv1a(read_file(dir + "/valid.tsv"))) << "\n";
  m << "test " << split.test.size() << " " << hex64(fnv1a(read_file(dir + "/test.tsv"))) << "\n";
  write_file(dir + "/manifest.txt", m.str());
}

KgSplit read_split(const std::string& dir) {
  const std::string manifest = dir + "/manifest.txt";
  if (!file_exists(manifest))
    throw DataError("missing split manifest " + manifest + " (produce it with `kgseq split`)");
  std::uint64_t seed = 0;
  double fraction = 0.0;
  int ne = 0, nr = 0;
  for (const auto& line : read_lines(manifest)) {
    auto f = split(line, ' ');
    if (f.size() >= 2 && f[0] == "seed") seed = std::stoull(f[1]);
    if (f.size() >= 2 && f[0] == "fraction") fraction = std::stod(f[1]);
    if (f.size() >= 2 && f[0] == "entities") ne = std::stoi(f[1]);
    if (f.size() >= 2 && f[0] == "relations") nr = std::stoi(f[1]);
  }
  auto load_part = [&](const std::string& name) {
    auto res = load_triples(dir + "/" + name, nullptr, IdMode::raw_integer);
    return KnowledgeGraph(res.graph.triples(), ne, nr);
  };
  KgSplit s;
  s.seed = seed;
  s.fraction = fraction;
  s.train = load_part("train.tsv");
  s.valid = load_part("valid.tsv");
  s.test = load_part("test.tsv");
  return s;
}

}  // namespace kgseq::kg
