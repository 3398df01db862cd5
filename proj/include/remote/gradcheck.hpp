#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "remote/model.hpp"

namespace remote {

struct GroupReport {
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
  std::size_t elements = 0;
  std::string worst_parameter;
};

struct GradCheckReport {
  std::map<std::string, GroupReport> groups;
  double tolerance = 1e-3;
  double loss = 0.0;

  bool passed() const {
    return std::all_of(groups.begin(), groups.end(),
                       [&](const auto& g) { return g.second.max_relative_error < tolerance; });
  }
  std::vector<std::string> failing_groups() const {
    std::vector<std::string> out;
    for (const auto& [name, g] : groups)
      if (!(g.max_relative_error < tolerance)) out.push_back(name);
    return out;
  }
};

struct GradCheckOptions {
  double epsilon = 1e-4;
  double tolerance = 1e-3;
  std::optional<OpKind> fault;  // doubles the backward pass of this op kind
  bool zero_head = false;       // zero the classifier weights
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Smallest sample that exercises every pair kind: two single-token entities
/// and one object, with one gold triplet of each kind the sample can hold.
inline SampleRecord grad_check_sample(const RunConfig& cfg) {
  const int w = tokens::kFirstWordId;
  const int top = static_cast<int>(cfg.vocab_size) - 1;
  const AssembledText t = assemble_text({w, std::min(w + 1, top), std::min(w + 2, top), w}, {{1, 2}, {3, 4}},
                                        {{std::min(w + 1, top)}}, cfg.max_tokens, "grad-check");
  ObjectDescriptor o;
  o.height = o.width = cfg.synthetic.image_size;
  const std::size_t px = o.height * o.width;
  for (std::size_t p = 0; p < px; ++p) {
    for (std::size_t c = 0; c < 3; ++c) o.rgb.push_back(static_cast<float>((p * 7 + c * 3) % 11) / 10.0f);
    o.depth.push_back(static_cast<float>((p * 5) % 9) / 8.0f);
  }
  o.position = {0.4f, 0.6f, 0.3f, 0.5f};
  SampleRecord s{"grad-check", t.tokens, t.entity_spans, t.caption_spans, {o}, {}};
  const int r = static_cast<int>(cfg.relation_count());
  s.gold_triplets.push_back({Ref::entity(0), Ref::entity(1), 1 % r});
  s.gold_triplets.push_back({Ref::entity(1), Ref::object(0), 2 % r});
  return s;
}

/// Mean cross-entropy over all candidate pairs of `sample`.
inline Var<double> grad_check_loss(Tape<double>& tape, ParameterStore<double>& params, const SampleRecord& sample,
                                   const RunConfig& cfg, PlanLog& plans) {
  Leaves<double> leaves(tape, params);
  const auto f = forward_sample(leaves, sample, cfg, &plans);
  const auto pairs = candidate_pairs(sample, cfg.allow_self_relations);
  Var<double> total;
  for (const auto& [h, t] : pairs) {
    const Var<double> l = relation_loss(pair_logits(leaves, f, sample, h, t, cfg), gold_relation(sample, h, t));
    total = total.valid() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(pairs.size()));
}

/// Compares analytic gradients (f64, train mode with a fixed dropout seed) to
/// central differences for every parameter element. Transport plans from the
/// first pass are replayed so the loss is a smooth function of parameters.
inline GradCheckReport grad_check(const RunConfig& cfg, std::uint64_t seed, const GradCheckOptions& opts = {}) {
  cfg.validate();
  if (cfg.d > 8 || cfg.layers != 2) throw ConfigError("grad-check needs a tiny config (d <= 8, L = 2)");
  ParameterStore<double> params = init_parameters<double>(cfg, seed);
  if (opts.zero_head)
    for (const char* n : {"head.w1", "head.b1", "head.w2", "head.b2"})
      for (auto& x : params.get(n).data()) x = 0.0;
  const SampleRecord sample = grad_check_sample(cfg);
  const std::uint64_t dropout_seed = seed ^ 0xD0D0u;

  PlanLog plans;
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  {
    Tape<double> tape(true, dropout_seed);
    tape.inject_fault(opts.fault);
    const Var<double> loss = grad_check_loss(tape, params, sample, cfg, plans);
    report.loss = loss.value()[0];
    params.zero_grad();
    tape.backward(loss);
  }
  plans.replay = true;
  auto evaluate_at = [&]() {
    Tape<double> tape(true, dropout_seed);
    return grad_check_loss(tape, params, sample, cfg, plans).value()[0];
  };

  for (auto& e : params.entries()) {
    auto& g = report.groups[e.group];
    const std::vector<double> analytic = e.value.grad().value_or(std::vector<double>(e.value.numel(), 0.0));
    auto values = e.value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opts.epsilon;
      const double up = evaluate_at();
      values[i] = saved - opts.epsilon;
      const double down = evaluate_at();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.epsilon);
      const double err = relative_error(analytic[i], numeric);
      ++g.elements;
      g.max_abs_gradient = std::max(g.max_abs_gradient, std::abs(analytic[i]));
      if (err > g.max_relative_error || g.worst_parameter.empty()) {
        g.max_relative_error = std::max(g.max_relative_error, err);
        g.worst_parameter = e.name;
      }
    }
  }
  return report;
}

}  // namespace remote
