#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "remote/autograd.hpp"
#include "remote/encoder.hpp"
#include "remote/params.hpp"

namespace remote {

template <std::floating_point T>
struct AttentionParams {
  Var<T> wq, wk, wh;

  static AttentionParams from(Leaves<T>& leaves, const std::string& prefix) {
    return {leaves(prefix + ".wq"), leaves(prefix + ".wk"), leaves(prefix + ".wh")};
  }
};

template <std::floating_point T>
void add_attention_params(ParameterStore<T>& store, const std::string& prefix, const std::string& group,
                          std::size_t d, std::mt19937_64& rng, double scale) {
  for (const char* w : {".wq", ".wk", ".wh"}) store.add(prefix + w, group, scaled_normal<T>({d, d}, rng, scale));
}

/// A = softmax(query·Wq (kv·Wk)ᵀ / √d) row-wise.
template <std::floating_point T>
Var<T> attention_map(const Var<T>& query, const Var<T>& kv, const AttentionParams<T>& p) {
  if (query.cols() != kv.cols()) {
    throw DimensionError("cross_attend: query " + shape_string(query.shape()) + " and key/value " +
                         shape_string(kv.shape()) + " differ in width");
  }
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(query.cols()));
  return softmax(scale(matmul(matmul(query, p.wq), transpose(matmul(kv, p.wk))), inv_sqrt_d), 1);
}

/// A·(kv·Wh); one output row per query row.
template <std::floating_point T>
Var<T> cross_attend(const Var<T>& query, const Var<T>& kv, const AttentionParams<T>& p) {
  return matmul(attention_map(query, kv, p), matmul(kv, p.wh));
}

/// Per-level cross-modal features. v_to_t[j] has text rows (text top queries
/// vision level j); t_to_v[j] has vision rows (vision top queries text level j).
template <std::floating_point T>
struct InteractionFeatures {
  std::vector<Var<T>> v_to_t;
  std::vector<Var<T>> t_to_v;
};

template <std::floating_point T>
InteractionFeatures<T> interact(const MultilevelFeatures<T>& text, const MultilevelFeatures<T>& vision,
                                const AttentionParams<T>& v2t, const AttentionParams<T>& t2v) {
  if (text.depth() != vision.depth()) {
    throw ConfigError("interact: text has " + std::to_string(text.depth()) + " levels, vision has " +
                      std::to_string(vision.depth()));
  }
  InteractionFeatures<T> out;
  for (std::size_t j = 0; j < text.depth(); ++j) {
    out.v_to_t.push_back(cross_attend(text.top(), vision.layers[j], v2t));
    out.t_to_v.push_back(cross_attend(vision.top(), text.layers[j], t2v));
  }
  return out;
}

}  // namespace remote
