#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "remote/attention.hpp"
#include "remote/config.hpp"
#include "remote/encoder.hpp"
#include "remote/mmoe.hpp"
#include "remote/mot.hpp"
#include "remote/params.hpp"
#include "remote/relation.hpp"
#include "remote/sample.hpp"

namespace remote {

/// Everything one forward pass produces for a sample.
template <std::floating_point T>
struct SampleForward {
  MultilevelFeatures<T> text_raw, vision_raw;
  MultilevelFeatures<T> text, vision;  // enhanced
  InteractionFeatures<T> interaction;
  ExpertSet<T> experts;
  Var<T> weights;  // 1×(2L+2)
  MixedRepresentation<T> mixed;
};

template <std::floating_point T>
ParameterStore<T> init_parameters(const RunConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterStore<T> store;
  add_encoder_params(store, cfg, rng);
  add_mot_params(store, cfg, rng);
  add_attention_params(store, "xattn.v2t", "attention", cfg.d, rng, cfg.init_scale);
  add_attention_params(store, "xattn.t2v", "attention", cfg.d, rng, cfg.init_scale);
  add_router_params(store, cfg, rng);
  add_head_params(store, cfg, rng);
  return store;
}

template <std::floating_point T>
SampleForward<T> forward_sample(Leaves<T>& leaves, const SampleRecord& sample, const RunConfig& cfg,
                                PlanLog* plans = nullptr) {
  SampleForward<T> f;
  f.text_raw = encode_multilevel(leaves, embed_text(leaves, sample, cfg), cfg.layers, Modality::kText);
  f.vision_raw = encode_objects(leaves, sample, cfg);
  f.text = enhance_multilevel(leaves, f.text_raw, cfg, plans);
  f.vision = enhance_multilevel(leaves, f.vision_raw, cfg, plans);
  f.interaction = interact(f.text, f.vision, AttentionParams<T>::from(leaves, "xattn.v2t"),
                           AttentionParams<T>::from(leaves, "xattn.t2v"));
  f.experts = make_experts(f.interaction, f.text.top(), f.vision.top());
  const auto mask = expert_mask(cfg.experts, cfg.layers);
  f.weights = cfg.disable_mmoe ? uniform_route(leaves.tape(), f.experts.size(), mask)
                               : route(f.experts, leaves("router.p"), mask);
  f.mixed = mix(f.experts, f.weights);
  return f;
}

/// Head/tail vector for one reference.
template <std::floating_point T>
Var<T> ref_repr(const SampleForward<T>& f, const SampleRecord& sample, const Ref& ref, const RunConfig& cfg) {
  if (ref.is_entity()) {
    if (ref.index >= sample.entity_spans.size()) throw DataError("sample '" + sample.sample_id + "': no " + ref.str());
    return entity_repr(f.mixed.text_side, sample.entity_spans[ref.index], cfg.span_repr);
  }
  if (ref.index >= sample.objects.size()) throw DataError("sample '" + sample.sample_id + "': no " + ref.str());
  return object_repr(f.mixed, sample.caption_spans[ref.index], ref.index, f.vision_raw.rows_per_object,
                     cfg.span_repr);
}

template <std::floating_point T>
Var<T> pair_logits(Leaves<T>& leaves, const SampleForward<T>& f, const SampleRecord& sample, const Ref& head,
                   const Ref& tail, const RunConfig& cfg) {
  const double rate = leaves.tape().train() ? cfg.dropout : 0.0;
  return classify_logits(ref_repr(f, sample, head, cfg), ref_repr(f, sample, tail, cfg), HeadParams<T>::from(leaves),
                         rate);
}

/// All ordered (head, tail) pairs over entities then objects; identical refs
/// only when self-relations are allowed.
inline std::vector<std::pair<Ref, Ref>> candidate_pairs(const SampleRecord& s, bool allow_self = false) {
  std::vector<Ref> refs;
  for (std::size_t i = 0; i < s.entity_spans.size(); ++i) refs.push_back({Ref::Kind::kEntity, i});
  for (std::size_t i = 0; i < s.objects.size(); ++i) refs.push_back({Ref::Kind::kObject, i});
  std::vector<std::pair<Ref, Ref>> out;
  for (const Ref& h : refs)
    for (const Ref& t : refs)
      if (allow_self || !(h == t)) out.emplace_back(h, t);
  return out;
}

/// Gold relation id of a pair, 0 when no triplet names it.
inline int gold_relation(const SampleRecord& s, const Ref& head, const Ref& tail) {
  for (const auto& t : s.gold_triplets)
    if (t.head == head && t.tail == tail) return t.relation;
  return 0;
}

}  // namespace remote
