#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "remote/config.hpp"
#include "remote/mmoe.hpp"
#include "remote/params.hpp"
#include "remote/sample.hpp"

namespace remote {

/// Mean of text-side rows over the span interior, or the opening marker row
/// in marker mode.
template <std::floating_point T>
Var<T> entity_repr(const Var<T>& text_side, const Span& span, SpanRepr mode = SpanRepr::kMean) {
  if (span.end <= span.begin) throw ContractError("entity span is empty");
  if (span.end > text_side.rows()) {
    throw ContractError("span [" + std::to_string(span.begin) + "," + std::to_string(span.end) + ") exceeds " +
                        std::to_string(text_side.rows()) + " text rows");
  }
  if (mode == SpanRepr::kMarker) {
    if (span.begin == 0) throw ContractError("marker mode needs a marker before the span");
    return slice(text_side, 0, span.begin - 1, span.begin);
  }
  return mean(slice(text_side, 0, span.begin, span.end), 0);
}

/// [caption pooled over text-side rows, object region pooled over vision-side rows], 1×2d.
template <std::floating_point T>
Var<T> object_repr(const MixedRepresentation<T>& mixed, const Span& caption, std::size_t object_index,
                   std::size_t rows_per_object, SpanRepr mode = SpanRepr::kMean) {
  const std::size_t begin = object_index * rows_per_object, end = begin + rows_per_object;
  if (rows_per_object == 0 || end > mixed.vision_side.rows()) {
    throw ContractError("object " + std::to_string(object_index) + " has no visual rows");
  }
  const Var<T> region = mean(slice(mixed.vision_side, 0, begin, end), 0);
  return concat<T>({entity_repr(mixed.text_side, caption, mode), region}, 1);
}

/// Entity vectors are zero-padded to 2d so one classifier serves all pair kinds.
template <std::floating_point T>
Var<T> pad_to(const Var<T>& rep, std::size_t width) {
  if (rep.cols() == width) return rep;
  if (rep.cols() > width) throw ConfigError("representation wider than " + std::to_string(width));
  return concat<T>({rep, rep.tape().constant(BasicTensor<T>(Shape{1, width - rep.cols()}))}, 1);
}

template <std::floating_point T>
void add_head_params(ParameterStore<T>& store, const RunConfig& cfg, std::mt19937_64& rng) {
  const std::size_t in = 4 * cfg.d, h = cfg.mlp_width(), r = cfg.relation_count();
  store.add("head.w1", "classifier", scaled_normal<T>({in, h}, rng, cfg.init_scale));
  store.add("head.b1", "classifier", BasicTensor<T>(Shape{1, h}));
  store.add("head.w2", "classifier", scaled_normal<T>({h, r}, rng, cfg.init_scale));
  store.add("head.b2", "classifier", BasicTensor<T>(Shape{1, r}));
}

template <std::floating_point T>
struct HeadParams {
  Var<T> w1, b1, w2, b2;

  static HeadParams from(Leaves<T>& leaves) {
    return {leaves("head.w1"), leaves("head.b1"), leaves("head.w2"), leaves("head.b2")};
  }
};

/// MLP([h_head, h_tail]) logits, 1×R. Dropout applies to the hidden layer.
template <std::floating_point T>
Var<T> classify_logits(const Var<T>& head, const Var<T>& tail, const HeadParams<T>& p, double dropout_rate = 0.0) {
  const std::size_t half = p.w1.rows() / 2;
  const Var<T> x = concat<T>({pad_to(head, half), pad_to(tail, half)}, 1);
  if (x.cols() != p.w1.rows()) {
    throw ConfigError("classifier expects width " + std::to_string(p.w1.rows()) + ", got " + std::to_string(x.cols()));
  }
  const Var<T> hidden = dropout(tanh(add(matmul(x, p.w1), p.b1)), dropout_rate);
  return add(matmul(hidden, p.w2), p.b2);
}

/// Argmax with the lowest id winning ties.
template <class Range>
int predict(const Range& logits) {
  int best = 0;
  for (std::size_t k = 1; k < std::size(logits); ++k)
    if (logits[k] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  return best;
}

template <std::floating_point T>
int predict(const Var<T>& logits) {
  return predict(logits.value().data());
}

/// −log softmax(logits)[gold].
template <std::floating_point T>
Var<T> relation_loss(const Var<T>& logits, int gold, const std::string& sample_id = "") {
  if (gold < 0 || static_cast<std::size_t>(gold) >= logits.value().numel()) {
    throw DataError("sample '" + sample_id + "': gold relation " + std::to_string(gold) + " outside " +
                    std::to_string(logits.value().numel()) + " relations");
  }
  return cross_entropy(logits, static_cast<std::size_t>(gold));
}

struct RelationCounts {
  std::size_t tp = 0, fp = 0, fn = 0, support = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;  // micro over non-none relations
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  std::size_t pairs = 0;
  std::map<std::string, RelationCounts> per_relation;
};

namespace detail {

inline void fill_prf(std::size_t tp, std::size_t fp, std::size_t fn, double& p, double& r, double& f) {
  p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  f = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

}  // namespace detail

/// Accuracy over all pairs; precision/recall/F1 treat relation 0 as negative.
inline Metrics score(const std::vector<int>& predictions, const std::vector<int>& golds,
                     const std::vector<std::string>& relation_names) {
  if (predictions.size() != golds.size()) {
    throw ContractError("score: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(golds.size()) + " golds");
  }
  const std::size_t r = relation_names.size();
  std::vector<RelationCounts> counts(r);
  Metrics m;
  m.pairs = golds.size();
  std::size_t correct = 0, tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const int p = predictions[i], g = golds[i];
    if (p < 0 || static_cast<std::size_t>(p) >= r || g < 0 || static_cast<std::size_t>(g) >= r) {
      throw ContractError("score: relation id out of range at pair " + std::to_string(i));
    }
    correct += p == g;
    if (g != 0) ++counts[static_cast<std::size_t>(g)].support;
    if (p == g) {
      if (g != 0) ++tp, ++counts[static_cast<std::size_t>(g)].tp;
      continue;
    }
    if (p != 0) ++fp, ++counts[static_cast<std::size_t>(p)].fp;
    if (g != 0) ++fn, ++counts[static_cast<std::size_t>(g)].fn;
  }
  m.accuracy = golds.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(golds.size());
  detail::fill_prf(tp, fp, fn, m.precision, m.recall, m.f1);
  for (std::size_t k = 1; k < r; ++k) {
    auto& c = counts[k];
    detail::fill_prf(c.tp, c.fp, c.fn, c.precision, c.recall, c.f1);
    m.macro_precision += c.precision;
    m.macro_recall += c.recall;
    m.macro_f1 += c.f1;
    m.per_relation[relation_names[k]] = c;
  }
  if (r > 1) {
    const double n = static_cast<double>(r - 1);
    m.macro_precision /= n;
    m.macro_recall /= n;
    m.macro_f1 /= n;
  }
  return m;
}

inline nlohmann::ordered_json to_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["accuracy"] = m.accuracy;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["macro_precision"] = m.macro_precision;
  j["macro_recall"] = m.macro_recall;
  j["macro_f1"] = m.macro_f1;
  j["pairs"] = m.pairs;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [name, c] : m.per_relation) {
    per[name] = {{"tp", c.tp},           {"fp", c.fp},         {"fn", c.fn}, {"support", c.support},
                 {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}};
  }
  j["per_relation"] = per;
  return j;
}

}  // namespace remote
