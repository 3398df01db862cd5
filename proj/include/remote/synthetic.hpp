#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "remote/config.hpp"
#include "remote/sample.hpp"

namespace remote::synthetic {

// Relation ids of the planted task.
inline constexpr int kNone = 0;
inline constexpr int kRelatedTo = 1;
inline constexpr int kDepicts = 2;
inline constexpr int kInFrontOf = 3;

inline const std::vector<std::string>& relation_names() {
  static const std::vector<std::string> names{"none", "related_to", "depicts", "in_front_of"};
  return names;
}

/// Token layout above the reserved ids: 8 nouns (first half class A, second
/// half class B), 4 colour words, then filler words.
struct Vocabulary {
  static constexpr int kNouns = 8;
  static constexpr int kColours = 4;
  int first_noun = tokens::kFirstWordId;
  int first_colour = tokens::kFirstWordId + kNouns;
  int first_filler = tokens::kFirstWordId + kNouns + kColours;
  int end = 0;

  explicit Vocabulary(std::size_t vocab_size) : end(static_cast<int>(vocab_size)) {
    if (end < first_filler + 4) {
      throw ConfigError("synthetic data needs vocab_size >= " + std::to_string(first_filler + 4));
    }
  }

  bool is_noun(int t) const { return t >= first_noun && t < first_noun + kNouns; }
  bool is_class_a(int t) const { return t >= first_noun && t < first_noun + kNouns / 2; }
  bool is_class_b(int t) const { return t >= first_noun + kNouns / 2 && t < first_noun + kNouns; }
};

inline constexpr std::array<std::array<float, 3>, 4> kPalette{{
    {0.9f, 0.1f, 0.1f},
    {0.1f, 0.8f, 0.2f},
    {0.15f, 0.2f, 0.9f},
    {0.85f, 0.8f, 0.1f},
}};
inline constexpr std::array<float, 3> kDepthLevels{0.2f, 0.5f, 0.8f};
// Minimum mean-depth gap for "in front of".
inline constexpr double kDepthMargin = 0.1;

inline bool boxes_overlap(const BoxPosition& a, const BoxPosition& b) {
  return std::abs(a.cx - b.cx) < 0.5f * (a.w + b.w) && std::abs(a.cy - b.cy) < 0.5f * (a.h + b.h);
}

inline double mean_of(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Re-derives gold triplets from a record's emitted fields alone.
inline std::vector<Triplet> planted_triplets(const SampleRecord& s, const Vocabulary& vocab) {
  std::vector<Triplet> out;
  auto entity_token = [&](std::size_t i) { return s.tokens[s.entity_spans[i].begin]; };
  for (std::size_t i = 0; i < s.entity_spans.size(); ++i)
    for (std::size_t j = 0; j < s.entity_spans.size(); ++j)
      if (i != j && vocab.is_class_a(entity_token(i)) && vocab.is_class_b(entity_token(j)))
        out.push_back({Ref::entity(i), Ref::entity(j), kRelatedTo});
  for (std::size_t i = 0; i < s.entity_spans.size(); ++i) {
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      const Span c = s.caption_spans[k];
      const bool named = std::find(s.tokens.begin() + static_cast<std::ptrdiff_t>(c.begin),
                                   s.tokens.begin() + static_cast<std::ptrdiff_t>(c.end),
                                   entity_token(i)) != s.tokens.begin() + static_cast<std::ptrdiff_t>(c.end);
      if (named) out.push_back({Ref::entity(i), Ref::object(k), kDepicts});
    }
  }
  for (std::size_t a = 0; a < s.objects.size(); ++a) {
    for (std::size_t b = 0; b < s.objects.size(); ++b) {
      if (a == b) continue;
      const auto& oa = s.objects[a];
      const auto& ob = s.objects[b];
      if (boxes_overlap(oa.position, ob.position) && mean_of(oa.depth) + kDepthMargin < mean_of(ob.depth))
        out.push_back({Ref::object(a), Ref::object(b), kInFrontOf});
    }
  }
  return out;
}

namespace detail {

inline std::size_t draw(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline ObjectDescriptor make_object(std::mt19937_64& rng, std::size_t size, std::size_t colour, float depth,
                                    bool right) {
  std::uniform_real_distribution<float> jitter(-0.05f, 0.05f), tiny(-0.02f, 0.02f);
  ObjectDescriptor o;
  o.height = o.width = size;
  o.rgb.resize(size * size * 3);
  o.depth.resize(size * size);
  for (std::size_t p = 0; p < size * size; ++p) {
    for (std::size_t c = 0; c < 3; ++c) o.rgb[p * 3 + c] = std::clamp(kPalette[colour][c] + jitter(rng), 0.0f, 1.0f);
    o.depth[p] = std::clamp(depth + tiny(rng), 0.0f, 1.0f);
  }
  o.position = {(right ? 0.7f : 0.3f) + jitter(rng), 0.5f + jitter(rng), 0.3f, 0.3f};
  return o;
}

}  // namespace detail

/// One planted sample. Entities are single nouns; related_to holds from a
/// class-A noun to a class-B noun; an object's caption is "<colour> <noun>" and
/// depicts links an entity to objects captioned with its noun; in_front_of
/// holds between overlapping boxes at distinct depth levels.
///
/// The low-level variant draws every filler from the noun pool, so context
/// mixing blends both classes into each entity row.
inline SampleRecord make_sample(const RunConfig& cfg, const std::string& id, std::mt19937_64& rng) {
  const Vocabulary vocab(cfg.vocab_size);
  const auto& sc = cfg.synthetic;
  const bool low_level = sc.variant == SyntheticVariant::kLowLevel;

  std::vector<int> nouns(Vocabulary::kNouns);
  for (int k = 0; k < Vocabulary::kNouns; ++k) nouns[static_cast<std::size_t>(k)] = vocab.first_noun + k;
  std::shuffle(nouns.begin(), nouns.end(), rng);
  const std::size_t n_ent = detail::draw(rng, sc.min_entities, sc.max_entities);
  const std::vector<int> entity_nouns(nouns.begin(), nouns.begin() + static_cast<std::ptrdiff_t>(n_ent));

  const std::size_t n_fill = detail::draw(rng, sc.min_filler, sc.max_filler);
  std::vector<int> raw;
  for (std::size_t k = 0; k < n_fill; ++k) {
    raw.push_back(low_level ? vocab.first_noun + static_cast<int>(detail::draw(rng, 0, Vocabulary::kNouns - 1))
                            : vocab.first_filler + static_cast<int>(detail::draw(rng, 0, static_cast<std::size_t>(
                                                                                             vocab.end - vocab.first_filler - 1))));
  }
  std::vector<std::size_t> slots(n_fill + n_ent);
  for (std::size_t k = 0; k < slots.size(); ++k) slots[k] = k;
  std::shuffle(slots.begin(), slots.end(), rng);
  std::vector<std::size_t> entity_slots(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(n_ent));
  std::sort(entity_slots.begin(), entity_slots.end());
  std::vector<int> text;
  std::vector<Span> entities;
  std::size_t next_fill = 0, next_entity = 0;
  for (std::size_t pos = 0; pos < slots.size(); ++pos) {
    if (next_entity < n_ent && entity_slots[next_entity] == pos) {
      entities.push_back({text.size(), text.size() + 1});
      text.push_back(entity_nouns[next_entity++]);
    } else {
      text.push_back(raw[next_fill++]);
    }
  }

  const std::size_t n_obj = detail::draw(rng, sc.min_objects, sc.max_objects);
  std::vector<ObjectDescriptor> objects;
  std::vector<std::vector<int>> captions;
  for (std::size_t k = 0; k < n_obj; ++k) {
    const bool named = std::bernoulli_distribution(0.5)(rng);
    const int noun = named ? entity_nouns[detail::draw(rng, 0, n_ent - 1)]
                           : nouns[n_ent + detail::draw(rng, 0, nouns.size() - n_ent - 1)];
    const std::size_t colour = detail::draw(rng, 0, Vocabulary::kColours - 1);
    const float depth = kDepthLevels[detail::draw(rng, 0, kDepthLevels.size() - 1)];
    const bool right = std::bernoulli_distribution(0.5)(rng);
    objects.push_back(detail::make_object(rng, sc.image_size, colour, depth, right));
    captions.push_back({vocab.first_colour + static_cast<int>(colour), noun});
  }

  const AssembledText assembled = assemble_text(text, entities, captions, cfg.max_tokens, id);
  SampleRecord s{id, assembled.tokens, assembled.entity_spans, assembled.caption_spans, std::move(objects), {}};
  s.gold_triplets = planted_triplets(s, vocab);
  return s;
}

struct GeneratedSplits {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> eval;
};

/// Samples with ids "<prefix>-<k>" routed to train or eval by id hash until
/// both quotas are met.
inline GeneratedSplits generate(const RunConfig& cfg, std::size_t n_train, std::size_t n_eval, std::uint64_t seed,
                                const std::string& prefix = "syn") {
  cfg.validate();
  const Vocabulary vocab(cfg.vocab_size);
  if (cfg.relations != relation_names())
    throw ConfigError("synthetic data needs exactly the relations none, related_to, depicts, in_front_of");
  if (cfg.synthetic.max_entities >= static_cast<std::size_t>(Vocabulary::kNouns))
    throw ConfigError("synthetic.max_entities must stay below " + std::to_string(Vocabulary::kNouns));
  std::mt19937_64 rng(seed);
  GeneratedSplits out;
  for (std::size_t k = 0; out.train.size() < n_train || out.eval.size() < n_eval; ++k) {
    char id[64];
    std::snprintf(id, sizeof id, "%s-%06zu", prefix.c_str(), k);
    const bool to_eval = is_eval_sample(id);
    auto& bucket = to_eval ? out.eval : out.train;
    const std::size_t quota = to_eval ? n_eval : n_train;
    if (bucket.size() >= quota) continue;
    bucket.push_back(make_sample(cfg, id, rng));
  }
  return out;
}

}  // namespace remote::synthetic
