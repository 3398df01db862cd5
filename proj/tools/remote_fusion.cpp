#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "remote/checkpoint.hpp"
#include "remote/config.hpp"
#include "remote/gradcheck.hpp"
#include "remote/synthetic.hpp"
#include "remote/train.hpp"

namespace fs = std::filesystem;
using namespace remote;

namespace {

std::ofstream open_out(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

// data.jsonl -> data.eval.jsonl
std::string default_eval_path(const std::string& train_path) {
  fs::path p(train_path);
  const std::string ext = p.has_extension() ? p.extension().string() : ".jsonl";
  return (p.parent_path() / (p.stem().string() + ".eval" + ext)).string();
}

void print_metrics(const std::string& label, const Metrics& m) {
  std::printf("%s accuracy=%.4f precision=%.4f recall=%.4f f1=%.4f pairs=%zu\n", label.c_str(), m.accuracy, m.precision,
              m.recall, m.f1, m.pairs);
  std::fflush(stdout);
}

struct GenerateArgs {
  std::string config, out, eval_out;
  std::size_t n = 2000, n_eval = 500;
  std::optional<std::uint64_t> seed;
};

int run_generate(const GenerateArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const auto splits = synthetic::generate(cfg, a.n, a.n_eval, a.seed.value_or(cfg.seed));
  const std::string eval_path = a.eval_out.empty() ? default_eval_path(a.out) : a.eval_out;
  {
    auto out = open_out(a.out);
    write_jsonl(out, splits.train);
  }
  if (a.n_eval > 0) {
    auto out = open_out(eval_path);
    write_jsonl(out, splits.eval);
  }
  std::cout << "wrote " << splits.train.size() << " train samples to " << a.out;
  if (a.n_eval > 0) std::cout << " and " << splits.eval.size() << " eval samples to " << eval_path;
  std::cout << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, out, eval_data;
};

int run_train(const TrainArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const auto data = read_jsonl(a.data, cfg.limits());
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result = train(cfg, data, [&](const HistoryRow& row) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "step %zu loss %.6f train_acc %.4f (%.1fs)\n", row.step, row.loss, row.train.accuracy, secs);
  });
  write_training_outputs(a.out, cfg, result);
  if (!result.history.empty()) print_metrics("train", result.history.back().train);
  if (!a.eval_data.empty()) {
    auto params = result.params;
    print_metrics("eval", evaluate(cfg, params, read_jsonl(a.eval_data, cfg.limits())).metrics);
  }
  std::cout << "checkpoint " << (fs::path(a.out) / "final").string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, expert_weights, plans, predictions, metrics;
  bool disable_mmoe = false, disable_mot = false;
};

int run_eval(const EvalArgs& a) {
  Checkpoint ck = load_checkpoint(a.ckpt);
  RunConfig cfg = ck.config;
  cfg.disable_mmoe = cfg.disable_mmoe || a.disable_mmoe;
  cfg.disable_mot = cfg.disable_mot || a.disable_mot;
  check_compatible(init_parameters<float>(ck.config, ck.config.seed), ck.params);
  const auto data = read_jsonl(a.data, cfg.limits());

  std::optional<std::ofstream> weights, predictions;
  EvalOptions opts;
  if (!a.expert_weights.empty()) opts.expert_weights = &weights.emplace(open_out(a.expert_weights));
  if (!a.predictions.empty()) opts.predictions = &predictions.emplace(open_out(a.predictions));
  opts.plan_dir = a.plans;
  const EvalResult r = evaluate(cfg, ck.params, data, opts);

  const std::string metrics = to_json(r.metrics).dump(2) + "\n";
  if (a.metrics.empty()) {
    std::cout << metrics;
  } else {
    open_out(a.metrics) << metrics;
    print_metrics("eval", r.metrics);
  }
  return 0;
}

struct GradCheckArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
};

int run_grad_check(const GradCheckArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport r = grad_check(cfg, a.seed.value_or(cfg.seed));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << std::left << std::setw(12) << "group" << std::setw(10) << "elements" << std::setw(14) << "max_rel_err"
            << "worst\n";
  for (const auto& [name, g] : r.groups) {
    std::cout << std::setw(12) << name << std::setw(10) << g.elements << std::setw(14) << std::setprecision(3)
              << g.max_relative_error << g.worst_parameter << '\n';
  }
  std::cout << (r.passed() ? "PASS" : "FAIL") << " (tolerance " << r.tolerance << ", " << std::setprecision(3) << secs
            << "s)\n";
  return r.passed() ? 0 : static_cast<int>(ExitCode::kNumerical);
}

struct InspectArgs {
  std::string ckpt, data, sample_id, out = "plans";
};

int run_inspect_plan(const InspectArgs& a) {
  Checkpoint ck = load_checkpoint(a.ckpt);
  const RunConfig& cfg = ck.config;
  if (cfg.disable_mot || cfg.mot_variant != MotVariant::kOptimalTransport)
    throw ConfigError("checkpoint was trained without optimal transport; there are no plans to inspect");
  check_compatible(init_parameters<float>(cfg, cfg.seed), ck.params);
  const auto data = read_jsonl(a.data, cfg.limits());
  const auto it = std::find_if(data.begin(), data.end(), [&](const auto& s) { return s.sample_id == a.sample_id; });
  if (it == data.end()) throw DataError("sample '" + a.sample_id + "' not found in " + a.data);

  Tape<float> tape(false);
  Leaves<float> leaves(tape, ck.params);
  PlanLog plans;
  forward_sample(leaves, *it, cfg, &plans);
  for (const auto& [key, plan] : plans.plans) {
    const std::string stem = plan_stem(it->sample_id, key);
    write_plan_dump(a.out, stem, plan);
    std::cout << key << ": " << plan.plan.rows() << "x" << plan.plan.cols() << " iterations=" << plan.iterations
              << " residual=" << plan.marginal_residual << " transport_cost=" << plan.transport_cost
              << " entropy=" << plan.entropy << " -> " << (fs::path(a.out) / (stem + ".csv")).string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal relation extraction with multilevel optimal transport and mixture-of-experts fusion"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic train/eval dataset as JSONL");
  generate->add_option("--config", gen.config, "Run config JSON")->required()->check(CLI::ExistingFile);
  generate->add_option("--out", gen.out, "Training split output path")->required();
  generate->add_option("--eval-out", gen.eval_out, "Eval split output path (default <out stem>.eval.jsonl)");
  generate->add_option("--n", gen.n, "Training samples")->capture_default_str();
  generate->add_option("--n-eval", gen.n_eval, "Eval samples")->capture_default_str();
  generate->add_option("--seed", gen.seed, "Generator seed (default: config seed)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint directory");
  train_cmd->add_option("--config", tr.config, "Run config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", tr.data, "Training JSONL")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--eval-data", tr.eval_data, "Held-out JSONL scored after training");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset JSONL")->required();
  eval_cmd->add_option("--dump-expert-weights", ev.expert_weights, "Expert weight CSV, one row per candidate pair");
  eval_cmd->add_option("--dump-plans", ev.plans, "Directory for transport plan CSV/JSON dumps");
  eval_cmd->add_option("--predictions", ev.predictions, "Prediction JSONL");
  eval_cmd->add_option("--metrics", ev.metrics, "Metrics JSON (default: stdout)");
  eval_cmd->add_flag("--disable-mmoe", ev.disable_mmoe, "Route with uniform expert weights");
  eval_cmd->add_flag("--disable-mot", ev.disable_mot, "Skip multilevel transport");

  GradCheckArgs gc;
  auto* grad_cmd = app.add_subcommand("grad-check", "Compare analytic and finite-difference gradients");
  grad_cmd->add_option("--config", gc.config, "Tiny run config JSON")->required()->check(CLI::ExistingFile);
  grad_cmd->add_option("--seed", gc.seed, "Parameter seed (default: config seed)");

  InspectArgs ins;
  auto* inspect = app.add_subcommand("inspect-plan", "Dump every transport plan of one sample");
  inspect->add_option("--ckpt", ins.ckpt, "Checkpoint file")->required();
  inspect->add_option("--data", ins.data, "Dataset JSONL holding the sample")->required();
  inspect->add_option("--sample-id", ins.sample_id, "Sample id")->required();
  inspect->add_option("--out", ins.out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  try {
    if (*generate) return run_generate(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*grad_cmd) return run_grad_check(gc);
    if (*inspect) return run_inspect_plan(ins);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kFailure);
  }
  return static_cast<int>(ExitCode::kFailure);
}
