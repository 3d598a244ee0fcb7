#include "kgseq/textmap.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "kgseq/errors.hpp"
#include "kgseq/strutil.hpp"

namespace kgseq::text {

namespace {

// Comparison is byte-exact; inputs are expected to be NFC-normalized upstream.
std::vector<std::string> resolve_mentions(const MentionTable& table, RegistryMode mode,
                                          const char* kind) {
  const size_t n = table.names.size();
  std::vector<std::string> mentions(n);
  for (size_t i = 0; i < n; ++i) {
    std::string name = normalize_ws(table.names[i]);
    if (name.empty()) {
      name = std::string(kind) + " " + std::to_string(i);
      std::fprintf(stderr, "[textmap] empty %s name for id %zu, using \"%s\"\n", kind, i,
                   name.c_str());
    }
    if (name.find(kSeparator) != std::string::npos)
      throw DataError(std::string(kind) + " name for id " + std::to_string(i) +
                      " contains the reserved separator \" | \"");
    mentions[i] = std::move(name);
  }
  if (mode == RegistryMode::surface_form) return mentions;

  // One-to-one mode: disambiguate collision groups in ascending id order.
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < n; ++i) groups[mentions[i]].push_back(i);

  std::unordered_map<std::string, size_t> taken;
  for (size_t i = 0; i < n; ++i) {
    const bool collides = groups[mentions[i]].size() > 1;
    std::string candidate = mentions[i];
    if (collides && i < table.descriptions.size()) {
      std::string desc = normalize_ws(table.descriptions[i]);
      if (!desc.empty()) candidate += std::string(kSeparator) + desc;
    }
    if (taken.count(candidate)) {
      for (int k = 1;; ++k) {
        std::string with_suffix = candidate + kSeparator + std::to_string(k);
        if (!taken.count(with_suffix)) {
          candidate = std::move(with_suffix);
          break;
        }
      }
    }
    taken.emplace(candidate, i);
    mentions[i] = std::move(candidate);
  }
  return mentions;
}

std::unordered_map<std::string, int> build_reverse(const std::vector<std::string>& mentions) {
  std::unordered_map<std::string, int> rev;
  for (size_t i = 0; i < mentions.size(); ++i) rev.try_emplace(mentions[i], static_cast<int>(i));
  return rev;
}

}  // namespace

TextRegistry TextRegistry::build(const MentionTable& entities, const MentionTable& relations,
                                 RegistryMode mode) {
  TextRegistry reg;
  reg.mode_ = mode;
  reg.entity_mentions_ = resolve_mentions(entities, mode, "entity");
  reg.relation_mentions_ = resolve_mentions(relations, mode, "relation");
  reg.entity_reverse_ = build_reverse(reg.entity_mentions_);
  reg.relation_reverse_ = build_reverse(reg.relation_mentions_);
  return reg;
}

const std::string& TextRegistry::entity_mention(int id) const {
  if (id < 0 || id >= num_entities())
    throw DomainError("unregistered entity id " + std::to_string(id));
  return entity_mentions_[static_cast<size_t>(id)];
}

const std::string& TextRegistry::relation_mention(int id) const {
  if (id < 0 || id >= num_relations())
    throw DomainError("unregistered relation id " + std::to_string(id));
  return relation_mentions_[static_cast<size_t>(id)];
}

std::optional<int> TextRegistry::find_entity(const std::string& mention) const {
  auto it = entity_reverse_.find(mention);
  if (it == entity_reverse_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> TextRegistry::find_relation(const std::string& mention) const {
  auto it = relation_reverse_.find(mention);
  if (it == relation_reverse_.end()) return std::nullopt;
  return it->second;
}

MentionTable load_mentions(const std::string& path) {
  MentionTable table;
  const auto lines = read_lines(path);
  long long max_id = -1;
  std::vector<std::pair<long long, std::pair<std::string, std::string>>> rows;
  size_t lineno = 0;
  for (const auto& line : lines) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto f = split(line, '\t');
    if (f.size() < 2)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected id<TAB>name");
    long long id = 0;
    if (!parse_int(f[0], id) || id < 0)
      throw DataError(path + ":" + std::to_string(lineno) + ": invalid id '" + f[0] + "'");
    rows.push_back({id, {f[1], f.size() > 2 ? f[2] : std::string()}});
    max_id = std::max(max_id, id);
  }
  table.names.resize(static_cast<size_t>(max_id + 1));
  table.descriptions.resize(static_cast<size_t>(max_id + 1));
  for (auto& [id, nd] : rows) {
    table.names[static_cast<size_t>(id)] = std::move(nd.first);
    table.descriptions[static_cast<size_t>(id)] = std::move(nd.second);
  }
  return table;
}

void write_mentions(const MentionTable& table, const std::string& path) {
  std::ostringstream ss;
  for (size_t i = 0; i < table.names.size(); ++i) {
    ss << i << '\t' << table.names[i];
    if (i < table.descriptions.size() && !table.descriptions[i].empty())
      ss << '\t' << table.descriptions[i];
    ss << '\n';
  }
  write_file(path, ss.str());
}

void write_resolved_mentions(const TextRegistry& reg, const std::string& entities_path,
                             const std::string& relations_path) {
  std::ostringstream es;
  for (int i = 0; i < reg.num_entities(); ++i) es << i << '\t' << reg.entity_mention(i) << '\n';
  write_file(entities_path, es.str());
  std::ostringstream rs;
  for (int i = 0; i < reg.num_relations(); ++i) rs << i << '\t' << reg.relation_mention(i) << '\n';
  write_file(relations_path, rs.str());
}

std::string verbalize_lp(const kg::LpQuery& query, const TextRegistry& reg) {
  const char* prefix = (query.dir == kg::Direction::tail) ? kTailPrefix : kHeadPrefix;
  return std::string(prefix) + reg.entity_mention(query.known) + kSeparator +
         reg.relation_mention(query.p);
}

std::string verbalize_qa(const std::string& question) {
  std::string q = normalize_ws(question);
  if (q.empty()) throw DomainError("empty question");
  return std::string(kAnswerPrefix) + q;
}

}  // namespace kgseq::text
