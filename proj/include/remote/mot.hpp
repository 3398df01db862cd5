#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "remote/attention.hpp"
#include "remote/config.hpp"
#include "remote/encoder.hpp"
#include "remote/ot.hpp"
#include "remote/params.hpp"

namespace remote {

/// a·(Π·μ) with Π held constant; each output row is a convex combination of
/// source rows under uniform weights.
template <std::floating_point T>
Var<T> transport_features(const BasicTensor<double>& plan, const Var<T>& mu) {
  if (plan.rank() != 2 || plan.cols() != mu.rows()) {
    throw DimensionError("transport_features: plan " + shape_string(plan.shape()) + " does not match source " +
                         shape_string(mu.shape()));
  }
  const T a = static_cast<T>(plan.rows());
  return scale(matmul(mu.tape().constant(plan.cast<T>()), mu), a);
}

/// α⊙original + (1−α)⊙transported with α = sigmoid(alpha_raw).
template <std::floating_point T>
Var<T> fuse(const Var<T>& original, const Var<T>& transported, const Var<T>& alpha_raw) {
  if (original.shape() != transported.shape()) {
    throw DimensionError("fuse: " + shape_string(original.shape()) + " vs " + shape_string(transported.shape()));
  }
  const Var<T> keep = sigmoid(alpha_raw);
  const Var<T> take = sigmoid(scale(alpha_raw, T{-1}));
  return add(mul(original, keep), mul(transported, take));
}

/// Transport plans keyed by "<modality>/<layer>[/<object>]". In replay mode
/// stored plans are reused instead of re-solving, which freezes Π for finite
/// differences.
struct PlanLog {
  bool replay = false;
  std::map<std::string, TransportPlan> plans;
};

inline std::string plan_key(Modality m, std::size_t layer, std::optional<std::size_t> object = std::nullopt) {
  std::string key = std::string(modality_name(m)) + "/" + std::to_string(layer);
  if (object) key += "/" + std::to_string(*object);
  return key;
}

template <std::floating_point T>
void add_mot_params(ParameterStore<T>& store, const RunConfig& cfg, std::mt19937_64& rng) {
  for (const char* side : {"text", "vision"}) {
    for (std::size_t l = 1; l < cfg.layers; ++l)
      store.add(std::string(side) + ".alpha" + std::to_string(l), "fusion", BasicTensor<T>(Shape{1, cfg.d}));
    if (cfg.mot_variant == MotVariant::kCrossAttention)
      add_attention_params(store, std::string(side) + ".mot_attn", "fusion", cfg.d, rng, cfg.init_scale);
  }
}

/// Enhanced stack: layer 0 unchanged; layer l fuses raw layer l with lower
/// raw layers 0..l-1 moved onto it. Vision objects are aligned one at a time.
template <std::floating_point T>
MultilevelFeatures<T> enhance_multilevel(Leaves<T>& leaves, const MultilevelFeatures<T>& raw, const RunConfig& cfg,
                                         PlanLog* log = nullptr) {
  if (raw.depth() < 2) throw ConfigError("enhance_multilevel needs L >= 2");
  if (cfg.disable_mot) return raw;
  const std::string side = modality_name(raw.modality);
  const std::size_t rows = raw.rows();
  const std::size_t group = raw.rows_per_object && rows % raw.rows_per_object == 0 ? raw.rows_per_object : rows;
  const std::size_t groups = rows / group;
  const SinkhornOptions options{cfg.sinkhorn_max_iter, cfg.sinkhorn_tol, SinkhornOptions{}.log_domain_below};

  MultilevelFeatures<T> out{raw.modality, {raw.layers.front()}, raw.rows_per_object};
  for (std::size_t l = 1; l < raw.depth(); ++l) {
    const Var<T> alpha = leaves(side + ".alpha" + std::to_string(l));
    std::vector<Var<T>> fused;
    for (std::size_t g = 0; g < groups; ++g) {
      auto rows_of = [&](const Var<T>& layer) {
        return groups == 1 ? layer : slice(layer, 0, g * group, (g + 1) * group);
      };
      std::vector<Var<T>> lower;
      for (std::size_t j = 0; j < l; ++j) lower.push_back(rows_of(raw.layers[j]));
      const Var<T> source = lower.size() == 1 ? lower.front() : concat<T>(std::span<const Var<T>>(lower), 0);
      const Var<T> target = rows_of(raw.layers[l]);
      Var<T> transported;
      if (cfg.mot_variant == MotVariant::kCrossAttention) {
        transported = cross_attend(target, source, AttentionParams<T>::from(leaves, side + ".mot_attn"));
      } else {
        const std::string key = plan_key(raw.modality, l, groups == 1 ? std::nullopt : std::optional<std::size_t>(g));
        const TransportPlan* plan = nullptr;
        TransportPlan solved;
        if (log && log->replay) {
          auto it = log->plans.find(key);
          if (it == log->plans.end()) throw ContractError("no recorded plan for " + key);
          plan = &it->second;
        } else {
          solved = sinkhorn(OtProblem<T>::uniform(source.value(), target.value(), cfg.lambda), options);
          plan = &solved;
        }
        transported = transport_features(plan->plan, source);
        if (log && !log->replay) log->plans[key] = std::move(solved);
      }
      fused.push_back(fuse(target, transported, alpha));
    }
    out.layers.push_back(fused.size() == 1 ? fused.front() : concat<T>(std::span<const Var<T>>(fused), 0));
  }
  return out;
}

}  // namespace remote
