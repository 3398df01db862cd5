#pragma once

#include <random>
#include <string>
#include <vector>

#include "remote/attention.hpp"
#include "remote/config.hpp"
#include "remote/params.hpp"

namespace remote {

/// Logit assigned to disabled experts.
inline constexpr double kMaskedLogit = -1e30;

/// Experts in routing order:
/// [V→T_0 … V→T_{L-1}, T→V_0 … T→V_{L-1}, T top, V top].
template <std::floating_point T>
struct ExpertSet {
  std::vector<Var<T>> experts;
  std::size_t levels = 0;

  std::size_t size() const { return experts.size(); }
  std::size_t text_top() const { return 2 * levels; }
  std::size_t vision_top() const { return 2 * levels + 1; }

  // Indices whose rows are text positions, then those whose rows are vision rows.
  std::vector<std::size_t> text_side() const {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < levels; ++j) idx.push_back(j);
    idx.push_back(text_top());
    return idx;
  }
  std::vector<std::size_t> vision_side() const {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < levels; ++j) idx.push_back(levels + j);
    idx.push_back(vision_top());
    return idx;
  }
};

template <std::floating_point T>
ExpertSet<T> make_experts(const InteractionFeatures<T>& inter, const Var<T>& text_top, const Var<T>& vision_top) {
  ExpertSet<T> set{{}, inter.v_to_t.size()};
  if (inter.t_to_v.size() != set.levels) throw ConfigError("interaction directions disagree on level count");
  set.experts.insert(set.experts.end(), inter.v_to_t.begin(), inter.v_to_t.end());
  set.experts.insert(set.experts.end(), inter.t_to_v.begin(), inter.t_to_v.end());
  set.experts.push_back(text_top);
  set.experts.push_back(vision_top);
  return set;
}

/// Per-expert enable mask in routing order.
inline std::vector<bool> expert_mask(const ExpertFlags& flags, std::size_t levels) {
  std::vector<bool> mask;
  for (std::size_t j = 0; j < levels; ++j) mask.push_back(flags.v2t);
  for (std::size_t j = 0; j < levels; ++j) mask.push_back(flags.t2v);
  mask.push_back(flags.t);
  mask.push_back(flags.v);
  return mask;
}

template <std::floating_point T>
void add_router_params(ParameterStore<T>& store, const RunConfig& cfg, std::mt19937_64& rng) {
  const std::size_t e = cfg.expert_count();
  store.add("router.p", "router", scaled_normal<T>({e * cfg.d, e}, rng, cfg.init_scale));
}

/// Routing logits: mean-pool each expert over rows, concatenate, project.
template <std::floating_point T>
Var<T> routing_logits(const ExpertSet<T>& set, const Var<T>& p_route) {
  if (p_route.rows() != set.size() * set.experts.front().cols() || p_route.cols() != set.size()) {
    throw ConfigError("router expects " + std::to_string(p_route.cols()) + " experts, got " +
                      std::to_string(set.size()));
  }
  std::vector<Var<T>> pooled;
  for (const auto& e : set.experts) pooled.push_back(mean(e, 0));
  return matmul(concat<T>(std::span<const Var<T>>(pooled), 1), p_route);
}

/// S(T,V) as a 1×(2L+2) row on the simplex. Masked experts get zero weight.
template <std::floating_point T>
Var<T> route(const ExpertSet<T>& set, const Var<T>& p_route, const std::vector<bool>& mask = {}) {
  Var<T> logits = routing_logits(set, p_route);
  if (!mask.empty()) {
    if (mask.size() != set.size()) throw ConfigError("expert mask length does not match expert count");
    BasicTensor<T> bias(Shape{1, set.size()});
    for (std::size_t k = 0; k < mask.size(); ++k) bias[k] = mask[k] ? T{0} : static_cast<T>(kMaskedLogit);
    logits = add(logits, p_route.tape().constant(std::move(bias)));
  }
  return softmax(logits, 1);
}

/// Uniform weights over enabled experts, used when routing is disabled.
template <std::floating_point T>
Var<T> uniform_route(Tape<T>& tape, std::size_t experts, const std::vector<bool>& mask = {}) {
  BasicTensor<T> w(Shape{1, experts});
  std::size_t enabled = 0;
  for (std::size_t k = 0; k < experts; ++k) enabled += mask.empty() || mask[k];
  for (std::size_t k = 0; k < experts; ++k)
    w[k] = mask.empty() || mask[k] ? T{1} / static_cast<T>(enabled) : T{0};
  return tape.constant(std::move(w));
}

template <std::floating_point T>
struct MixedRepresentation {
  Var<T> text_side;    // H^{T,V}, text rows
  Var<T> vision_side;  // H^{V,T}, vision rows
};

namespace detail {

// Weighted sum over one row space, weights renormalized within the side. A
// side holding no weight falls back to its unimodal top feature.
template <std::floating_point T>
Var<T> mix_side(const ExpertSet<T>& set, const Var<T>& weights, const std::vector<std::size_t>& idx,
                std::size_t fallback) {
  const Shape& shape = set.experts[idx.front()].shape();
  T total{0};
  for (std::size_t k : idx) {
    if (set.experts[k].shape() != shape) {
      throw DimensionError("mix: expert " + std::to_string(k) + " has shape " + shape_string(set.experts[k].shape()) +
                           ", expected " + shape_string(shape));
    }
    total += weights.value()[k];
  }
  if (!(total > T{0})) return set.experts[fallback];
  std::vector<Var<T>> w;
  for (std::size_t k : idx) w.push_back(slice(weights, 1, k, k + 1));
  const Var<T> side_w = concat<T>(std::span<const Var<T>>(w), 1);
  const Var<T> norm = div(side_w, sum(side_w));
  Var<T> acc;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Var<T> term = mul(set.experts[idx[i]], slice(norm, 1, i, i + 1));
    acc = acc.valid() ? add(acc, term) : term;
  }
  return acc;
}

}  // namespace detail

template <std::floating_point T>
MixedRepresentation<T> mix(const ExpertSet<T>& set, const Var<T>& weights) {
  if (weights.value().numel() != set.size()) {
    throw DimensionError("mix: " + std::to_string(weights.value().numel()) + " weights for " +
                         std::to_string(set.size()) + " experts");
  }
  return {detail::mix_side(set, weights, set.text_side(), set.text_top()),
          detail::mix_side(set, weights, set.vision_side(), set.vision_top())};
}

}  // namespace remote
