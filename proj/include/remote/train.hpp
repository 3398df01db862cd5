#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "remote/checkpoint.hpp"
#include "remote/config.hpp"
#include "remote/model.hpp"
#include "remote/relation.hpp"
#include "remote/sample.hpp"

namespace remote {

/// splitmix64 finalizer over (base, a, b); gives independent per-step seeds.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = base ^ (a * 0x9E3779B97F4A7C15ull) ^ (b * 0xBF58476D1CE4E5B9ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// AdamW with decoupled weight decay.
class AdamW {
 public:
  AdamW(double lr, double beta1, double beta2, double eps, double weight_decay)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), decay_(weight_decay) {}

  explicit AdamW(const RunConfig& c) : AdamW(c.learning_rate, c.beta1, c.beta2, c.adam_eps, c.weight_decay) {}

  void step(ParameterStore<float>& params) {
    ++t_;
    if (m_.empty()) {
      for (const auto& e : params.entries()) {
        m_.emplace_back(e.value.numel(), 0.0f);
        v_.emplace_back(e.value.numel(), 0.0f);
      }
    }
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& e : params.entries()) {
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      const auto& grad = e.value.grad();
      auto w = e.value.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = grad ? (*grad)[i] : 0.0;
        m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * g);
        v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * g * g);
        const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + decay_ * w[i];
        w[i] = static_cast<float>(w[i] - lr_ * update);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_, decay_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct PairPrediction {
  std::string sample_id;
  Ref head, tail;
  int gold = 0;
  int pred = 0;
  std::vector<float> logits;
  std::vector<float> expert_weights;
};

struct EvalOptions {
  std::ostream* predictions = nullptr;     // JSONL, one line per candidate pair
  std::ostream* expert_weights = nullptr;  // CSV, one row per candidate pair
  std::string plan_dir;                    // transport-plan CSV + JSON per solve
};

struct EvalResult {
  Metrics metrics;
  std::vector<PairPrediction> pairs;
};

inline void write_plan_dump(const std::string& dir, const std::string& stem, const TransportPlan& p) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(std::filesystem::path(dir) / (stem + ".csv"));
  csv << "row,col,plan,cost\n" << std::setprecision(17);
  for (std::size_t i = 0; i < p.plan.rows(); ++i)
    for (std::size_t j = 0; j < p.plan.cols(); ++j) csv << i << ',' << j << ',' << p.plan(i, j) << ',' << p.cost(i, j) << '\n';
  nlohmann::ordered_json side;
  side["lambda"] = p.lambda;
  side["iterations"] = p.iterations;
  side["converged"] = p.converged;
  side["residual"] = p.marginal_residual;
  side["transport_cost"] = p.transport_cost;
  side["entropy"] = p.entropy;
  side["zero_norm_rows"] = p.zero_norm_rows;
  std::ofstream(std::filesystem::path(dir) / (stem + ".json")) << side.dump(2) << '\n';
}

inline std::string plan_stem(const std::string& sample_id, const std::string& key) {
  std::string stem = sample_id + "_" + key;
  for (char& c : stem)
    if (c == '/') c = '_';
  return stem;
}

/// Dropout-free pass over every candidate pair of every sample.
inline EvalResult evaluate(const RunConfig& cfg, ParameterStore<float>& params, const std::vector<SampleRecord>& data,
                           const EvalOptions& opts = {}) {
  EvalResult out;
  std::vector<int> preds, golds;
  if (opts.expert_weights) {
    *opts.expert_weights << "sample_id,relation_gold,relation_pred";
    for (std::size_t k = 0; k < cfg.expert_count(); ++k) *opts.expert_weights << ",w_" << k;
    *opts.expert_weights << '\n';
  }
  for (const auto& s : data) {
    Tape<float> tape(false);
    Leaves<float> leaves(tape, params);
    PlanLog plans;
    const auto f = forward_sample(leaves, s, cfg, opts.plan_dir.empty() ? nullptr : &plans);
    for (const auto& [key, plan] : plans.plans) write_plan_dump(opts.plan_dir, plan_stem(s.sample_id, key), plan);
    const auto weights = f.weights.value().values();
    for (const auto& [h, t] : candidate_pairs(s, cfg.allow_self_relations)) {
      const Var<float> logits = pair_logits(leaves, f, s, h, t, cfg);
      PairPrediction p{s.sample_id, h, t, gold_relation(s, h, t), predict(logits), logits.value().values(), weights};
      preds.push_back(p.pred);
      golds.push_back(p.gold);
      if (opts.predictions) {
        nlohmann::ordered_json j{{"sample_id", p.sample_id}, {"head_ref", h.str()}, {"tail_ref", t.str()},
                                 {"gold", p.gold},           {"pred", p.pred},      {"logits", p.logits}};
        *opts.predictions << j.dump() << '\n';
      }
      if (opts.expert_weights) {
        *opts.expert_weights << s.sample_id << ',' << cfg.relations.at(static_cast<std::size_t>(p.gold)) << ','
                             << cfg.relations.at(static_cast<std::size_t>(p.pred));
        for (float w : weights) *opts.expert_weights << ',' << std::setprecision(9) << w;
        *opts.expert_weights << '\n';
      }
      out.pairs.push_back(std::move(p));
    }
  }
  out.metrics = score(preds, golds, cfg.relations);
  return out;
}

struct HistoryRow {
  std::size_t step = 0;
  double loss = 0.0;  // mean batch loss since the previous row
  Metrics train;      // evaluation on the training split
};

struct TrainResult {
  ParameterStore<float> params;
  std::vector<HistoryRow> history;
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os << "step,loss,accuracy,precision,recall,f1\n" << std::setprecision(9);
  for (const auto& r : rows)
    os << r.step << ',' << r.loss << ',' << r.train.accuracy << ',' << r.train.precision << ',' << r.train.recall
       << ',' << r.train.f1 << '\n';
  return os.str();
}

namespace detail {

// First group holding a non-finite value or gradient.
inline std::optional<std::string> nonfinite_group(const ParameterStore<float>& params) {
  for (const auto& e : params.entries()) {
    if (!e.value.all_finite()) return e.group;
    if (const auto& g = e.value.grad())
      for (float x : *g)
        if (!std::isfinite(x)) return e.group;
  }
  return std::nullopt;
}

}  // namespace detail

using StepCallback = std::function<void(const HistoryRow&)>;

/// Minibatch AdamW on candidate pairs drawn 1:1 from gold relations and `none`.
inline TrainResult train(const RunConfig& cfg, const std::vector<SampleRecord>& data, const StepCallback& on_log = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  TrainResult result{init_parameters<float>(cfg, cfg.seed), {}};
  auto& params = result.params;
  AdamW opt(cfg);
  std::mt19937_64 rng(derive_seed(cfg.seed, 0xBA7C4));

  std::vector<std::vector<std::pair<Ref, Ref>>> positives(data.size()), negatives(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (const auto& pr : candidate_pairs(data[i], cfg.allow_self_relations))
      (gold_relation(data[i], pr.first, pr.second) ? positives : negatives)[i].push_back(pr);
  }

  std::uniform_int_distribution<std::size_t> pick_sample(0, data.size() - 1);
  double loss_sum = 0.0;
  std::size_t loss_steps = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    params.zero_grad();
    double batch_loss = 0.0;
    std::size_t taken = 0;
    for (std::size_t k = 0; taken < cfg.batch_size; ++k) {
      const std::size_t si = pick_sample(rng);
      const SampleRecord& s = data[si];
      try {
        Tape<float> tape(true, derive_seed(cfg.seed, step, k));
        Leaves<float> leaves(tape, params);
        const auto f = forward_sample(leaves, s, cfg);
        Var<float> total;
        for (std::size_t p = 0; p < cfg.pairs_per_sample && taken < cfg.batch_size; ++p, ++taken) {
          const bool want_gold = taken % 2 == 0;
          const auto& pool =
              (want_gold && !positives[si].empty()) || negatives[si].empty() ? positives[si] : negatives[si];
          if (pool.empty()) break;
          const auto& [h, t] = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
          const Var<float> l = relation_loss(pair_logits(leaves, f, s, h, t, cfg), gold_relation(s, h, t), s.sample_id);
          total = total.valid() ? add(total, l) : l;
        }
        if (!total.valid()) continue;
        const Var<float> scaled = scale(total, 1.0f / static_cast<float>(cfg.batch_size));
        batch_loss += static_cast<double>(scaled.value()[0]);
        tape.backward(scaled);
      } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(step) + ", sample '" + s.sample_id + "': " + e.what() +
                             " (parameter group '" + detail::nonfinite_group(params).value_or("none identified") +
                             "')");
      }
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericalError("step " + std::to_string(step) + ": non-finite loss (parameter group '" +
                           detail::nonfinite_group(params).value_or("none identified") + "')");
    }
    opt.step(params);
    if (const auto bad = detail::nonfinite_group(params)) {
      throw NumericalError("step " + std::to_string(step) + ": parameter group '" + *bad + "' became non-finite");
    }
    loss_sum += batch_loss;
    ++loss_steps;
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      HistoryRow row{step, loss_sum / static_cast<double>(loss_steps), evaluate(cfg, params, data).metrics};
      loss_sum = 0.0;
      loss_steps = 0;
      if (on_log) on_log(row);
      result.history.push_back(std::move(row));
    }
  }
  params.zero_grad();
  return result;
}

/// Writes `final` (checkpoint), history.csv, metrics.json and config.json.
inline void write_training_outputs(const std::string& dir, const RunConfig& cfg, const TrainResult& r) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  save_checkpoint((root / "final").string(), cfg, r.params);
  std::ofstream(root / "history.csv") << history_csv(r.history);
  nlohmann::ordered_json metrics =
      r.history.empty() ? nlohmann::ordered_json::object() : to_json(r.history.back().train);
  std::ofstream(root / "metrics.json") << metrics.dump(2) << '\n';
  std::ofstream(root / "config.json") << to_json(cfg).dump(2) << '\n';
}

}  // namespace remote
