// epgfn: config-driven driver for client training, aggregation, baselines,
// evaluation and sweeps.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "epgfn/checks.hpp"
#include "epgfn/experiment.hpp"

namespace fs = std::filesystem;
using namespace epgfn;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kNumeric = 3, kGuard = 4 };

int exit_code(Errc c) {
  switch (c) {
    case Errc::invalid_config:
    case Errc::unsupported_loss:
    case Errc::unsupported_env:
    case Errc::io:
    case Errc::shard:
    case Errc::fingerprint_mismatch:
    case Errc::unknown_version:
    case Errc::truncated_payload:
    case Errc::architecture_mismatch:
    case Errc::no_snapshots:
      return kConfig;
    case Errc::enumeration_too_large:
    case Errc::guard_exceeded:
      return kGuard;
    default:
      return kNumeric;
  }
}

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

RunConfig load_config(const Common& c) {
  ConfigMap m = c.config.empty() ? ConfigMap{} : ConfigMap::load(c.config);
  for (const auto& o : c.overrides) m.apply_override(o);
  return RunConfig::from(m);
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

PolicySnapshot load_snapshot_file(const fs::path& p, const Environment& env) { return load_snapshot(read_text(p), env); }

std::vector<PolicySnapshot> load_clients(const Experiment& x, const OutputLayout& out) {
  std::vector<PolicySnapshot> snaps;
  for (std::size_t k = 0; k < x.clients.size(); ++k) {
    const fs::path p = out.client_snapshot(k);
    if (!fs::exists(p)) throw Error(Errc::io, "missing client snapshot " + p.string() + " (run train-clients first)");
    snaps.push_back(load_snapshot_file(p, *x.structure));
  }
  return snaps;
}

void save_client(const OutputLayout& out, std::size_t k, const TrainResult& r) {
  write_text(out.client_snapshot(k), save_snapshot(r.snapshot));
  write_text(out.client_metrics(k), metrics_csv(r.metrics));
}

int cmd_train_local(const Common& c, std::size_t client) {
  const RunConfig rc = load_config(c);
  if (client >= rc.clients) throw Error(Errc::invalid_config, "--client: index " + std::to_string(client) + " out of range");
  const Experiment x = Experiment::build(rc);
  auto jobs = x.client_jobs();
  TrainConfig cfg = jobs[client].config;
  cfg.seed = derive_seed(rc.seed, client);
  const auto r = train_local(jobs[client].env, cfg, jobs[client].eval);
  const auto out = OutputLayout::of(rc);
  save_client(out, client, r);
  log_line("wrote " + out.client_snapshot(client).string());
  return kOk;
}

int cmd_train_clients(const Common& c) {
  const RunConfig rc = load_config(c);
  const Experiment x = Experiment::build(rc);
  const auto outcomes = run_clients(x);
  const auto out = OutputLayout::of(rc);
  int status = kOk;
  for (std::size_t k = 0; k < outcomes.size(); ++k) {
    if (outcomes[k].result) {
      save_client(out, k, *outcomes[k].result);
      log_line("wrote " + out.client_snapshot(k).string());
    } else {
      log_line("client " + std::to_string(k) + " failed: " + outcomes[k].error);
      const int code = outcomes[k].error_code > 0 ? exit_code(static_cast<Errc>(outcomes[k].error_code - 1)) : kNumeric;
      status = std::max(status, code);
    }
  }
  if (status == kOk) write_manifest(out, outcomes.size(), rc.loss.weights);
  return status;
}

int cmd_aggregate(const Common& c, const std::string& manifest, const std::vector<double>& weights) {
  RunConfig rc = load_config(c);
  const auto out = OutputLayout::of(rc);
  const Manifest m = read_manifest(manifest.empty() ? out.manifest() : fs::path(manifest));
  if (m.paths.size() != rc.clients) {
    rc.clients = m.paths.size();
  }
  rc.loss.weights = weights.empty() ? m.weights : weights;
  bool all_ones = true;
  for (double w : rc.loss.weights) all_ones = all_ones && w == 1.0;
  if (all_ones) rc.loss.weights.clear();
  rc.validate();
  const Experiment x = Experiment::build(rc);
  std::vector<PolicySnapshot> snaps;
  for (const auto& p : m.paths) snaps.push_back(load_snapshot_file(p, *x.structure));
  const auto r = run_aggregate(x, snaps);
  write_text(out.global_snapshot(), save_snapshot(r.snapshot));
  write_text(out.global_metrics(), metrics_csv(r.metrics));
  log_line("wrote " + out.global_snapshot().string());
  return kOk;
}

int cmd_evaluate(const Common& c, const BaselineSet& which) {
  const RunConfig rc = load_config(c);
  const auto out = OutputLayout::of(rc);
  const Experiment x = Experiment::build(rc);
  const auto clients = load_clients(x, out);
  if (!fs::exists(out.global_snapshot())) throw Error(Errc::io, "missing " + out.global_snapshot().string() + " (run aggregate first)");
  const auto global = load_snapshot_file(out.global_snapshot(), *x.structure);
  const Json report = evaluate_report(x, global, clients, which);
  write_text(out.report(), report.dump(2) + "\n");
  std::cout << report.dump(2) << '\n';
  return kOk;
}

int cmd_sweep(const Common& c, const std::string& axis) {
  RunConfig rc = load_config(c);
  if (!axis.empty()) rc.sweep_axis = axis;
  if (rc.sweep_axis != "clients" && rc.sweep_axis != "logz_lr" && rc.sweep_axis != "noise" && rc.sweep_axis != "loss")
    throw Error(Errc::invalid_config, "sweep.axis: expected clients|logz_lr|noise|loss, got '" + rc.sweep_axis + "'");
  const auto rows = run_sweep(rc, &std::cerr);
  const auto out = OutputLayout::of(rc);
  const fs::path p = out.dir / ("sweep_" + rc.sweep_axis + ".csv");
  write_text(p, sweep_csv(rows));
  log_line("wrote " + p.string());
  return kOk;
}

int cmd_identity_checks(std::uint64_t seed) {
  std::cout << checks::run_all(seed).dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated GFlowNet experiments"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "experiment config file")->check(CLI::ExistingFile);
    sub->add_option("--set", common.overrides, "override a dotted key, e.g. --set train.epochs=200");
  };

  std::size_t client = 0;
  auto* train_local_cmd = app.add_subcommand("train-local", "train one client");
  add_common(train_local_cmd);
  train_local_cmd->add_option("--client", client, "client index")->required();

  auto* train_clients_cmd = app.add_subcommand("train-clients", "train every client and write a manifest");
  add_common(train_clients_cmd);

  std::string manifest;
  std::vector<double> weights;
  auto* aggregate_cmd = app.add_subcommand("aggregate", "train the global model from client snapshots");
  add_common(aggregate_cmd);
  aggregate_cmd->add_option("--manifest", manifest, "snapshot manifest (default: <out>/manifest.txt)");
  aggregate_cmd->add_option("--weights", weights, "pooling weights, one per client")->delimiter(',');

  bool no_pcvi = false, no_fedavg = false, no_naive = false;
  auto* baselines_cmd = app.add_subcommand("baselines", "evaluate the global model against PCVI, FedAvg and the naive product");
  add_common(baselines_cmd);
  baselines_cmd->add_flag("--no-pcvi", no_pcvi);
  baselines_cmd->add_flag("--no-fedavg", no_fedavg);
  baselines_cmd->add_flag("--no-naive", no_naive);

  auto* evaluate_cmd = app.add_subcommand("evaluate", "evaluate the global model and clients");
  add_common(evaluate_cmd);

  std::string axis;
  auto* sweep_cmd = app.add_subcommand("sweep", "rerun the pipeline along one axis");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--axis", axis, "clients | logz_lr | noise | loss");

  std::uint64_t check_seed = 0;
  auto* checks_cmd = app.add_subcommand("identity-checks", "run numeric identity checks on tiny environments");
  checks_cmd->add_option("--seed", check_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*train_local_cmd) return cmd_train_local(common, client);
    if (*train_clients_cmd) return cmd_train_clients(common);
    if (*aggregate_cmd) return cmd_aggregate(common, manifest, weights);
    if (*baselines_cmd) return cmd_evaluate(common, {!no_pcvi, !no_fedavg, !no_naive});
    if (*evaluate_cmd) return cmd_evaluate(common, {false, false, false});
    if (*sweep_cmd) return cmd_sweep(common, axis);
    if (*checks_cmd) return cmd_identity_checks(check_seed);
  } catch (const Error& e) {
    std::cerr << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  }
  return kOk;
}
