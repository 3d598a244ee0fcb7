#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace kgseq::kg {

struct Triple {
  int s = 0;
  int p = 0;
  int o = 0;
  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

enum class Direction { tail, head };

// A ranking query: (known, p, ?) when dir == tail, (?, p, known) when dir == head.
struct LpQuery {
  int known = 0;
  int p = 0;
  Direction dir = Direction::tail;
  friend bool operator==(const LpQuery&, const LpQuery&) = default;
};

// Immutable indexed triple store. Indices are built once at construction and
// the graph is safe for concurrent reads afterwards.
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;
  KnowledgeGraph(std::vector<Triple> triples, int num_entities, int num_relations);

  const std::vector<Triple>& triples() const { return triples_; }
  int num_entities() const { return num_entities_; }
  int num_relations() const { return num_relations_; }
  size_t size() const { return triples_.size(); }

  // Sorted object ids for (s, p); empty span if none.
  std::span<const int> objects_of(int s, int p) const;
  // Sorted subject ids for (p, o); empty span if none.
  std::span<const int> subjects_of(int p, int o) const;
  // Indices into triples() incident to entity e (as subject or object).
  std::span<const int> incident(int e) const;

  bool contains(const Triple& t) const;

 private:
  std::vector<Triple> triples_;
  int num_entities_ = 0;
  int num_relations_ = 0;
  std::unordered_map<std::uint64_t, std::vector<int>> by_sp_;
  std::unordered_map<std::uint64_t, std::vector<int>> by_po_;
  std::vector<std::vector<int>> by_entity_;
};

struct LoadResult {
  KnowledgeGraph graph;
  // Populated when the triple file used name tokens: dense ids in
  // first-seen order. Empty when the file carried raw integer ids.
  std::vector<std::string> entity_names;
  std::vector<std::string> relation_names;
  size_t duplicates = 0;  // duplicate lines dropped
};

enum class IdMode {
  names,        // tokens are names; ids assigned densely in first-seen order
  raw_integer,  // tokens are non-negative integer ids
};

// Optional strict resolver for name tokens (see textmap::TextRegistry).
struct NameResolver {
  virtual ~NameResolver() = default;
  virtual std::optional<int> entity_id(const std::string& name) const = 0;
  virtual std::optional<int> relation_id(const std::string& name) const = 0;
  virtual int entity_count() const = 0;
  virtual int relation_count() const = 0;
};

// Parses a tab-separated triple file (s \t p \t o per line, '#' comments).
// Malformed lines raise DataError naming the line number. With a resolver,
// unknown names raise DataError; without one, ids are assigned per IdMode.
LoadResult load_triples(const std::string& path, const NameResolver* resolver = nullptr,
                        IdMode mode = IdMode::names);

struct KgSplit {
  KnowledgeGraph train;
  KnowledgeGraph valid;
  KnowledgeGraph test;
  std::uint64_t seed = 0;
  double fraction = 0.0;
};

// Uniformly drops `fraction` of edges: train keeps ceil((1-fraction)*|K|)
// triples; the held-out remainder is split evenly into valid/test (valid
// gets the extra one when odd). Deterministic for a fixed seed.
KgSplit drop_edges(const KnowledgeGraph& graph, double fraction, std::uint64_t seed);

enum Scope : unsigned {
  kScopeTrain = 1u,
  kScopeValid = 2u,
  kScopeTest = 4u,
  kScopeAll = 7u,
};

// All answers to the query found in the selected splits, sorted ascending.
std::vector<int> known_positives(const KgSplit& split, const LpQuery& query, unsigned scope);

// Entities reachable from e within `hops` edges, ignoring edge direction;
// includes e itself. Unknown entity id raises DomainError.
std::unordered_set<int> neighborhood(const KnowledgeGraph& graph, int e, int hops);

// Split manifest + triple files (integer ids) under dir. The manifest records
// seed, fraction, counts and per-file content hashes.
void write_split(const KgSplit& split, const std::string& dir);
KgSplit read_split(const std::string& dir);

}  // namespace kgseq::kg
