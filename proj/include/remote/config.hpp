#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "remote/errors.hpp"
#include "remote/sample.hpp"

namespace remote {

enum class MotVariant { kOptimalTransport, kCrossAttention };
enum class SpanRepr { kMean, kMarker };
enum class SyntheticVariant { kDefault, kLowLevel };

/// Channels of the visual/text input; a disabled channel is zeroed before
/// encoding.
struct FeatureFlags {
  bool position = true;
  bool caption = true;
  bool depth = true;
};

/// Which experts may receive routing weight.
struct ExpertFlags {
  bool t2v = true;  // text-guided visual features F^{T→V}
  bool v2t = true;  // vision-guided textual features F^{V→T}
  bool t = true;    // top-level textual features
  bool v = true;    // top-level visual features
};

struct SyntheticConfig {
  SyntheticVariant variant = SyntheticVariant::kDefault;
  std::size_t image_size = 8;  // H = W
  std::size_t min_entities = 2;
  std::size_t max_entities = 3;
  std::size_t min_objects = 2;
  std::size_t max_objects = 2;
  std::size_t min_filler = 2;
  std::size_t max_filler = 5;
};

struct RunConfig {
  // Model shape.
  std::size_t d = 64;
  std::size_t layers = 4;  // L
  std::size_t vocab_size = 48;
  std::size_t ffn_hidden = 0;  // 0 means 2d
  std::size_t mlp_hidden = 0;  // 0 means 2d
  std::size_t patch_size = 4;
  std::size_t pos_frequencies = 4;
  std::size_t max_tokens = kDefaultMaxTokens;
  std::size_t max_objects = kDefaultMaxObjects;
  std::vector<std::string> relations{"none", "related_to", "depicts", "in_front_of"};
  double init_scale = 1.0;

  // Optimal transport.
  double lambda = 0.1;
  double sinkhorn_tol = 1e-6;
  int sinkhorn_max_iter = 200;

  // Optimization.
  double learning_rate = 1e-5;
  std::size_t batch_size = 32;
  double dropout = 0.5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
  std::size_t steps = 2000;
  std::size_t pairs_per_sample = 4;
  std::size_t log_every = 500;

  // Head.
  SpanRepr span_repr = SpanRepr::kMean;
  bool allow_self_relations = false;

  // Ablations.
  bool disable_mot = false;
  MotVariant mot_variant = MotVariant::kOptimalTransport;
  bool disable_mmoe = false;
  FeatureFlags features;
  ExpertFlags experts;

  SyntheticConfig synthetic;

  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : 2 * d; }
  std::size_t mlp_width() const { return mlp_hidden ? mlp_hidden : 2 * d; }
  std::size_t relation_count() const { return relations.size(); }
  std::size_t expert_count() const { return 2 * layers + 2; }

  DatasetLimits limits() const { return {max_tokens, max_objects, vocab_size, relation_count()}; }

  void validate() const;
};

namespace detail {

template <class Fn>
void for_each_checked(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where, Fn fn) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
    try {
      fn(it.key(), it.value());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + where + it.key() + "': " + e.what());
    }
  }
}

inline std::string variant_name(MotVariant v) {
  return v == MotVariant::kOptimalTransport ? "optimal_transport" : "cross_attention";
}
inline std::string variant_name(SyntheticVariant v) { return v == SyntheticVariant::kDefault ? "default" : "low_level"; }
inline std::string variant_name(SpanRepr v) { return v == SpanRepr::kMean ? "mean" : "marker"; }

}  // namespace detail

inline void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(d > 0, "d must be positive");
  need(layers >= 2, "L must be at least 2");
  need(vocab_size > static_cast<std::size_t>(tokens::kFirstWordId), "vocab_size must exceed the reserved ids");
  need(patch_size > 0 && pos_frequencies > 0, "patch_size and pos_frequencies must be positive");
  need(max_tokens > 0 && max_objects > 0, "token/object limits must be positive");
  need(relations.size() >= 2, "need `none` plus at least one relation");
  need(relations.front() == "none", "relation id 0 must be `none`");
  need(std::set<std::string>(relations.begin(), relations.end()).size() == relations.size(), "duplicate relation");
  need(lambda > 0.0 && sinkhorn_tol > 0.0 && sinkhorn_max_iter > 0, "sinkhorn settings must be positive");
  need(learning_rate >= 0.0, "learning_rate must be non-negative");
  need(batch_size > 0 && pairs_per_sample > 0 && log_every > 0, "batch settings must be positive");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  need(weight_decay >= 0.0 && beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0,
       "invalid AdamW settings");
  need(init_scale > 0.0, "init_scale must be positive");
  need(experts.t2v || experts.v2t || experts.t || experts.v, "at least one expert must be enabled");
  const auto& s = synthetic;
  need(s.image_size > 0 && s.image_size % patch_size == 0, "synthetic.image_size must be a multiple of patch_size");
  need(s.min_entities >= 2 && s.min_entities <= s.max_entities, "synthetic entity range invalid");
  need(s.min_objects >= 2 && s.min_objects <= s.max_objects && s.max_objects <= max_objects,
       "synthetic object range invalid");
  need(s.min_filler <= s.max_filler, "synthetic filler range invalid");
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  static const std::set<std::string> known{
      "d",          "L",           "vocab_size",     "ffn_hidden",    "mlp_hidden",       "patch_size",
      "pos_frequencies", "max_tokens", "max_objects", "relations",   "init_scale",       "lambda",
      "sinkhorn_tol", "sinkhorn_max_iter", "learning_rate", "batch_size", "dropout",       "weight_decay",
      "beta1",      "beta2",       "adam_eps",       "seed",          "steps",            "pairs_per_sample",
      "log_every",  "span_repr",   "allow_self_relations", "disable_mot", "mot_variant", "disable_mmoe",
      "features",   "experts",     "synthetic"};
  detail::for_each_checked(j, known, "", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "d") c.d = v.get<std::size_t>();
    else if (k == "L") c.layers = v.get<std::size_t>();
    else if (k == "vocab_size") c.vocab_size = v.get<std::size_t>();
    else if (k == "ffn_hidden") c.ffn_hidden = v.get<std::size_t>();
    else if (k == "mlp_hidden") c.mlp_hidden = v.get<std::size_t>();
    else if (k == "patch_size") c.patch_size = v.get<std::size_t>();
    else if (k == "pos_frequencies") c.pos_frequencies = v.get<std::size_t>();
    else if (k == "max_tokens") c.max_tokens = v.get<std::size_t>();
    else if (k == "max_objects") c.max_objects = v.get<std::size_t>();
    else if (k == "relations") c.relations = v.get<std::vector<std::string>>();
    else if (k == "init_scale") c.init_scale = v.get<double>();
    else if (k == "lambda") c.lambda = v.get<double>();
    else if (k == "sinkhorn_tol") c.sinkhorn_tol = v.get<double>();
    else if (k == "sinkhorn_max_iter") c.sinkhorn_max_iter = v.get<int>();
    else if (k == "learning_rate") c.learning_rate = v.get<double>();
    else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (k == "dropout") c.dropout = v.get<double>();
    else if (k == "weight_decay") c.weight_decay = v.get<double>();
    else if (k == "beta1") c.beta1 = v.get<double>();
    else if (k == "beta2") c.beta2 = v.get<double>();
    else if (k == "adam_eps") c.adam_eps = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "steps") c.steps = v.get<std::size_t>();
    else if (k == "pairs_per_sample") c.pairs_per_sample = v.get<std::size_t>();
    else if (k == "log_every") c.log_every = v.get<std::size_t>();
    else if (k == "allow_self_relations") c.allow_self_relations = v.get<bool>();
    else if (k == "disable_mot") c.disable_mot = v.get<bool>();
    else if (k == "disable_mmoe") c.disable_mmoe = v.get<bool>();
    else if (k == "span_repr") {
      const auto s = v.get<std::string>();
      if (s == "mean") c.span_repr = SpanRepr::kMean;
      else if (s == "marker") c.span_repr = SpanRepr::kMarker;
      else throw ConfigError("span_repr must be 'mean' or 'marker'");
    } else if (k == "mot_variant") {
      const auto s = v.get<std::string>();
      if (s == "optimal_transport") c.mot_variant = MotVariant::kOptimalTransport;
      else if (s == "cross_attention") c.mot_variant = MotVariant::kCrossAttention;
      else throw ConfigError("mot_variant must be 'optimal_transport' or 'cross_attention'");
    } else if (k == "features") {
      detail::for_each_checked(v, {"position", "caption", "depth"}, "features.", [&](const std::string& f, const nlohmann::json& b) {
        (f == "position" ? c.features.position : f == "caption" ? c.features.caption : c.features.depth) = b.get<bool>();
      });
    } else if (k == "experts") {
      detail::for_each_checked(v, {"t2v", "v2t", "t", "v"}, "experts.", [&](const std::string& f, const nlohmann::json& b) {
        (f == "t2v" ? c.experts.t2v : f == "v2t" ? c.experts.v2t : f == "t" ? c.experts.t : c.experts.v) = b.get<bool>();
      });
    } else if (k == "synthetic") {
      static const std::set<std::string> skeys{"variant",     "image_size", "min_entities", "max_entities",
                                               "min_objects", "max_objects", "min_filler",  "max_filler"};
      detail::for_each_checked(v, skeys, "synthetic.", [&](const std::string& f, const nlohmann::json& b) {
        auto& s = c.synthetic;
        if (f == "variant") {
          const auto name = b.get<std::string>();
          if (name == "default") s.variant = SyntheticVariant::kDefault;
          else if (name == "low_level") s.variant = SyntheticVariant::kLowLevel;
          else throw ConfigError("synthetic.variant must be 'default' or 'low_level'");
        } else if (f == "image_size") s.image_size = b.get<std::size_t>();
        else if (f == "min_entities") s.min_entities = b.get<std::size_t>();
        else if (f == "max_entities") s.max_entities = b.get<std::size_t>();
        else if (f == "min_objects") s.min_objects = b.get<std::size_t>();
        else if (f == "max_objects") s.max_objects = b.get<std::size_t>();
        else if (f == "min_filler") s.min_filler = b.get<std::size_t>();
        else s.max_filler = b.get<std::size_t>();
      });
    }
  });
  c.validate();
  return c;
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["d"] = c.d;
  j["L"] = c.layers;
  j["vocab_size"] = c.vocab_size;
  j["ffn_hidden"] = c.ffn_hidden;
  j["mlp_hidden"] = c.mlp_hidden;
  j["patch_size"] = c.patch_size;
  j["pos_frequencies"] = c.pos_frequencies;
  j["max_tokens"] = c.max_tokens;
  j["max_objects"] = c.max_objects;
  j["relations"] = c.relations;
  j["init_scale"] = c.init_scale;
  j["lambda"] = c.lambda;
  j["sinkhorn_tol"] = c.sinkhorn_tol;
  j["sinkhorn_max_iter"] = c.sinkhorn_max_iter;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["dropout"] = c.dropout;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["pairs_per_sample"] = c.pairs_per_sample;
  j["log_every"] = c.log_every;
  j["span_repr"] = detail::variant_name(c.span_repr);
  j["allow_self_relations"] = c.allow_self_relations;
  j["disable_mot"] = c.disable_mot;
  j["mot_variant"] = detail::variant_name(c.mot_variant);
  j["disable_mmoe"] = c.disable_mmoe;
  j["features"] = {{"position", c.features.position}, {"caption", c.features.caption}, {"depth", c.features.depth}};
  j["experts"] = {{"t2v", c.experts.t2v}, {"v2t", c.experts.v2t}, {"t", c.experts.t}, {"v", c.experts.v}};
  const auto& s = c.synthetic;
  j["synthetic"] = {{"variant", detail::variant_name(s.variant)},
                    {"image_size", s.image_size},
                    {"min_entities", s.min_entities},
                    {"max_entities", s.max_entities},
                    {"min_objects", s.min_objects},
                    {"max_objects", s.max_objects},
                    {"min_filler", s.min_filler},
                    {"max_filler", s.max_filler}};
  return j;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace remote
