#pragma once

// Text–image samples, the marker-delimited token layout, and the JSON Lines
// dataset format.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "remote/errors.hpp"

namespace remote {

/// Reserved token ids. Ordinary vocabulary starts at kFirstWordId.
namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kEntityOpen = 3;
inline constexpr int kEntityClose = 4;
inline constexpr int kObjectOpen = 5;
inline constexpr int kObjectClose = 6;
inline constexpr int kFirstWordId = 7;
}  // namespace tokens

inline constexpr std::size_t kDefaultMaxTokens = 128;
inline constexpr std::size_t kDefaultMaxObjects = 12;

/// Half-open token range [begin, end) of a span interior; markers excluded.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct Ref {
  enum class Kind { kEntity, kObject };
  Kind kind = Kind::kEntity;
  std::size_t index = 0;

  static Ref entity(std::size_t i) { return {Kind::kEntity, i}; }
  static Ref object(std::size_t i) { return {Kind::kObject, i}; }
  bool is_entity() const { return kind == Kind::kEntity; }

  std::string str() const { return (is_entity() ? "e" : "o") + std::to_string(index); }
  static Ref parse(const std::string& s);

  friend bool operator==(const Ref&, const Ref&) = default;
  friend auto operator<=>(const Ref&, const Ref&) = default;
};

inline Ref Ref::parse(const std::string& s) {
  if (s.size() < 2 || (s[0] != 'e' && s[0] != 'o')) throw DataError("bad reference '" + s + "'");
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(s.substr(1), &pos);
  } catch (const std::exception&) {
    throw DataError("bad reference '" + s + "'");
  }
  if (pos != s.size() - 1) throw DataError("bad reference '" + s + "'");
  return s[0] == 'e' ? entity(v) : object(v);
}

struct Triplet {
  Ref head;
  Ref tail;
  int relation = 0;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

/// Box given as normalized centre and size.
struct BoxPosition {
  float cx = 0.5f, cy = 0.5f, w = 1.0f, h = 1.0f;
  std::array<float, 4> as_array() const { return {cx, cy, w, h}; }
  friend bool operator==(const BoxPosition&, const BoxPosition&) = default;
};

/// One visual object resized to H×W: RGB (row-major, channel fastest) and
/// depth grids in [0, 1].
struct ObjectDescriptor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> rgb;
  std::vector<float> depth;
  BoxPosition position;
  friend bool operator==(const ObjectDescriptor&, const ObjectDescriptor&) = default;
};

struct SampleRecord {
  std::string sample_id;
  std::vector<int> tokens;
  std::vector<Span> entity_spans;
  std::vector<Span> caption_spans;  // index-aligned with objects
  std::vector<ObjectDescriptor> objects;
  std::vector<Triplet> gold_triplets;
  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct AssembledText {
  std::vector<int> tokens;
  std::vector<Span> entity_spans;
  std::vector<Span> caption_spans;
};

/// Lays out [CLS] text-with-⟨s⟩-wrapped-entities [SEP] ⟨o⟩caption⟨/o⟩…
///
/// `entities` are ranges into `raw_tokens`; they must be non-empty and
/// disjoint. Returned spans index the assembled sequence and keep the input
/// order of `entities` and `captions`.
inline AssembledText assemble_text(const std::vector<int>& raw_tokens, const std::vector<Span>& entities,
                                   const std::vector<std::vector<int>>& captions,
                                   std::size_t max_tokens = kDefaultMaxTokens, const std::string& sample_id = "") {
  std::vector<std::size_t> order(entities.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return entities[x].begin < entities[y].begin; });
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Span& s = entities[order[k]];
    if (s.begin >= s.end || s.end > raw_tokens.size()) {
      throw DataError("sample '" + sample_id + "': entity span out of range");
    }
    if (k > 0 && entities[order[k - 1]].end > s.begin) {
      throw DataError("sample '" + sample_id + "': entity spans overlap");
    }
  }

  AssembledText out;
  out.entity_spans.resize(entities.size());
  out.tokens.push_back(tokens::kCls);
  std::size_t next = 0;
  for (std::size_t k : order) {
    const Span& s = entities[k];
    out.tokens.insert(out.tokens.end(), raw_tokens.begin() + static_cast<std::ptrdiff_t>(next),
                      raw_tokens.begin() + static_cast<std::ptrdiff_t>(s.begin));
    out.tokens.push_back(tokens::kEntityOpen);
    const std::size_t start = out.tokens.size();
    out.tokens.insert(out.tokens.end(), raw_tokens.begin() + static_cast<std::ptrdiff_t>(s.begin),
                      raw_tokens.begin() + static_cast<std::ptrdiff_t>(s.end));
    out.entity_spans[k] = {start, out.tokens.size()};
    out.tokens.push_back(tokens::kEntityClose);
    next = s.end;
  }
  out.tokens.insert(out.tokens.end(), raw_tokens.begin() + static_cast<std::ptrdiff_t>(next), raw_tokens.end());
  out.tokens.push_back(tokens::kSep);
  for (const auto& caption : captions) {
    if (caption.empty()) throw DataError("sample '" + sample_id + "': empty caption");
    out.tokens.push_back(tokens::kObjectOpen);
    const std::size_t start = out.tokens.size();
    out.tokens.insert(out.tokens.end(), caption.begin(), caption.end());
    out.caption_spans.push_back({start, out.tokens.size()});
    out.tokens.push_back(tokens::kObjectClose);
  }
  if (out.tokens.size() > max_tokens) {
    throw DataError("sample '" + sample_id + "': " + std::to_string(out.tokens.size()) +
                    " tokens exceed the limit of " + std::to_string(max_tokens));
  }
  return out;
}

/// Recovers entity and caption interiors from marker tokens, in order of
/// appearance. Throws DataError on unbalanced or nested markers.
inline AssembledText parse_markers(const std::vector<int>& seq) {
  AssembledText out;
  out.tokens = seq;
  constexpr std::size_t kClosed = static_cast<std::size_t>(-1);
  std::size_t open = kClosed;
  int open_kind = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const int t = seq[i];
    if (t == tokens::kEntityOpen || t == tokens::kObjectOpen) {
      if (open != kClosed) throw DataError("nested span marker at position " + std::to_string(i));
      open = i + 1;
      open_kind = t;
    } else if (t == tokens::kEntityClose || t == tokens::kObjectClose) {
      const int expected = t == tokens::kEntityClose ? tokens::kEntityOpen : tokens::kObjectOpen;
      if (open == kClosed || open_kind != expected) throw DataError("unbalanced span marker at position " + std::to_string(i));
      (t == tokens::kEntityClose ? out.entity_spans : out.caption_spans).push_back({open, i});
      open = kClosed;
    }
  }
  if (open != kClosed) throw DataError("unterminated span marker");
  return out;
}

struct DatasetLimits {
  std::size_t max_tokens = kDefaultMaxTokens;
  std::size_t max_objects = kDefaultMaxObjects;
  std::size_t vocab_size = 0;      // 0 skips the id check
  std::size_t relation_count = 0;  // 0 skips the relation check
};

/// Checks the record invariants; throws DataError naming the sample.
inline void validate_sample(const SampleRecord& s, const DatasetLimits& limits = {}) {
  auto fail = [&](const std::string& why) { throw DataError("sample '" + s.sample_id + "': " + why); };
  if (s.tokens.size() > limits.max_tokens) fail("too many tokens");
  if (s.objects.size() > limits.max_objects) fail("too many objects");
  if (s.caption_spans.size() != s.objects.size()) fail("caption count differs from object count");
  for (int t : s.tokens) {
    if (t < 0 || (limits.vocab_size && static_cast<std::size_t>(t) >= limits.vocab_size)) fail("token id out of range");
  }
  const AssembledText parsed = parse_markers(s.tokens);
  if (parsed.entity_spans != s.entity_spans) {
    // Entity spans may be listed in any order, but must cover the markers.
    auto a = parsed.entity_spans, b = s.entity_spans;
    auto by_begin = [](const Span& x, const Span& y) { return x.begin < y.begin; };
    std::sort(a.begin(), a.end(), by_begin);
    std::sort(b.begin(), b.end(), by_begin);
    if (a != b) fail("entity spans disagree with markers");
  }
  if (parsed.caption_spans != s.caption_spans) fail("caption spans disagree with markers");
  for (const auto& sp : s.entity_spans)
    if (sp.begin >= sp.end) fail("empty entity span");
  for (const auto& o : s.objects) {
    if (o.rgb.size() != o.height * o.width * 3 || o.depth.size() != o.height * o.width) fail("object grid size");
    auto in_unit = [](float v) { return v >= 0.0f && v <= 1.0f; };
    if (!std::all_of(o.rgb.begin(), o.rgb.end(), in_unit) || !std::all_of(o.depth.begin(), o.depth.end(), in_unit)) {
      fail("object values outside [0, 1]");
    }
    const auto p = o.position.as_array();
    if (!std::all_of(p.begin(), p.end(), in_unit)) fail("object position outside [0, 1]");
  }
  for (const auto& t : s.gold_triplets) {
    for (const Ref& r : {t.head, t.tail}) {
      const std::size_t n = r.is_entity() ? s.entity_spans.size() : s.objects.size();
      if (r.index >= n) fail("triplet references missing " + r.str());
    }
    if (t.relation < 0 || (limits.relation_count && static_cast<std::size_t>(t.relation) >= limits.relation_count)) {
      fail("relation id " + std::to_string(t.relation) + " out of range");
    }
  }
}

// --- JSON Lines -------------------------------------------------------------

inline nlohmann::ordered_json to_json(const SampleRecord& s) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["sample_id"] = s.sample_id;
  j["tokens"] = s.tokens;
  auto spans = [](const std::vector<Span>& v) {
    ordered_json a = ordered_json::array();
    for (const auto& sp : v) a.push_back({sp.begin, sp.end});
    return a;
  };
  j["entity_spans"] = spans(s.entity_spans);
  j["captions"] = spans(s.caption_spans);
  ordered_json objects = ordered_json::array();
  for (const auto& o : s.objects) {
    ordered_json oj;
    oj["H"] = o.height;
    oj["W"] = o.width;
    oj["rgb"] = o.rgb;
    oj["depth"] = o.depth;
    oj["position"] = o.position.as_array();
    objects.push_back(std::move(oj));
  }
  j["objects"] = std::move(objects);
  ordered_json triplets = ordered_json::array();
  for (const auto& t : s.gold_triplets) {
    triplets.push_back({{"head", t.head.str()}, {"tail", t.tail.str()}, {"relation", t.relation}});
  }
  j["gold_triplets"] = std::move(triplets);
  return j;
}

inline SampleRecord sample_from_json(const nlohmann::json& j) {
  SampleRecord s;
  try {
    s.sample_id = j.at("sample_id").get<std::string>();
    s.tokens = j.at("tokens").get<std::vector<int>>();
    auto spans = [](const nlohmann::json& a) {
      std::vector<Span> v;
      for (const auto& p : a) v.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
      return v;
    };
    s.entity_spans = spans(j.at("entity_spans"));
    s.caption_spans = spans(j.at("captions"));
    for (const auto& oj : j.at("objects")) {
      ObjectDescriptor o;
      o.height = oj.at("H").get<std::size_t>();
      o.width = oj.at("W").get<std::size_t>();
      o.rgb = oj.at("rgb").get<std::vector<float>>();
      o.depth = oj.at("depth").get<std::vector<float>>();
      const auto p = oj.at("position").get<std::vector<float>>();
      if (p.size() != 4) throw DataError("position must have 4 entries");
      o.position = {p[0], p[1], p[2], p[3]};
      s.objects.push_back(std::move(o));
    }
    for (const auto& tj : j.at("gold_triplets")) {
      s.gold_triplets.push_back(
          {Ref::parse(tj.at("head").get<std::string>()), Ref::parse(tj.at("tail").get<std::string>()),
           tj.at("relation").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("sample '" + s.sample_id + "': " + e.what());
  }
  return s;
}

inline void write_jsonl(std::ostream& out, const std::vector<SampleRecord>& samples) {
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

inline void write_jsonl(const std::string& path, const std::vector<SampleRecord>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  write_jsonl(out, samples);
}

inline std::vector<SampleRecord> read_jsonl(std::istream& in, const DatasetLimits& limits = {}) {
  std::vector<SampleRecord> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
    samples.push_back(sample_from_json(j));
    validate_sample(samples.back(), limits);
  }
  return samples;
}

inline std::vector<SampleRecord> read_jsonl(const std::string& path, const DatasetLimits& limits = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  return read_jsonl(in, limits);
}

/// FNV-1a; the dataset split is a pure function of the sample id.
inline std::uint64_t sample_hash(const std::string& id) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline bool is_eval_sample(const std::string& id) { return sample_hash(id) % 5 == 0; }

}  // namespace remote
