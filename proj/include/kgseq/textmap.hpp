#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgseq/kg_store.hpp"

namespace kgseq::text {

enum class RegistryMode {
  one_to_one,    // injective mentions, exact reverse lookup (link prediction)
  surface_form,  // collisions allowed, reverse lookup returns lowest id (QA)
};

struct MentionTable {
  std::vector<std::string> names;         // indexed by id, required
  std::vector<std::string> descriptions;  // indexed by id, may be empty or shorter
};

// Immutable id <-> mention mapping for entities and relations. Built once,
// then safe for concurrent reads.
class TextRegistry : public kg::NameResolver {
 public:
  // Disambiguation in one_to_one mode, per colliding name group in ascending
  // id order: append " | " + description when available, then " | <k>" with
  // the smallest positive integer k that makes the mention unique. Names are
  // whitespace-normalized; empty names become "entity <id>" / "relation <id>"
  // with a warning; names containing the reserved separator " | " are
  // rejected.
  static TextRegistry build(const MentionTable& entities, const MentionTable& relations,
                            RegistryMode mode);

  const std::string& entity_mention(int id) const;
  const std::string& relation_mention(int id) const;
  int num_entities() const { return static_cast<int>(entity_mentions_.size()); }
  int num_relations() const { return static_cast<int>(relation_mentions_.size()); }
  RegistryMode mode() const { return mode_; }

  // mention -> entity id; exact in one_to_one mode, lowest matching id in
  // surface_form mode. Absence is a value, not an error.
  std::optional<int> find_entity(const std::string& mention) const;
  std::optional<int> find_relation(const std::string& mention) const;

  // NameResolver (strict resolution of name tokens in triple files).
  std::optional<int> entity_id(const std::string& name) const override { return find_entity(name); }
  std::optional<int> relation_id(const std::string& name) const override {
    return find_relation(name);
  }
  int entity_count() const override { return num_entities(); }
  int relation_count() const override { return num_relations(); }

 private:
  RegistryMode mode_ = RegistryMode::one_to_one;
  std::vector<std::string> entity_mentions_;
  std::vector<std::string> relation_mentions_;
  std::unordered_map<std::string, int> entity_reverse_;  // lowest id per mention
  std::unordered_map<std::string, int> relation_reverse_;
};

// UTF-8 TSV with columns id, name, optional description.
MentionTable load_mentions(const std::string& path);
void write_mentions(const MentionTable& table, const std::string& path);
// Resolved mentions as an id -> mention TSV (descriptions already folded in).
void write_resolved_mentions(const TextRegistry& reg, const std::string& entities_path,
                             const std::string& relations_path);

// "predict tail: <mention(s)> | <mention(p)>" or
// "predict head: <mention(o)> | <mention(p)>"; the known entity fills the slot.
std::string verbalize_lp(const kg::LpQuery& query, const TextRegistry& reg);

// "predict answer: <question>", whitespace-normalized. Empty question raises
// DomainError.
std::string verbalize_qa(const std::string& question);

inline constexpr const char* kTailPrefix = "predict tail: ";
inline constexpr const char* kHeadPrefix = "predict head: ";
inline constexpr const char* kAnswerPrefix = "predict answer: ";
inline constexpr const char* kSeparator = " | ";

}  // namespace kgseq::text
