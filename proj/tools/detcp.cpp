// detcp: run scenarios, loss sweeps and pendulum comparisons.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "detcp/harness.hpp"

#ifndef DETCP_SCENARIO_DIR
#define DETCP_SCENARIO_DIR "scenarios"
#endif

namespace fs = std::filesystem;
using namespace detcp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitScenarioError = 1;
constexpr int kExitTimeout = 2;

// A path, or a bare name looked up in $DETCP_SCENARIO_DIR then the
// build-time scenario directory.
std::string resolve_scenario(const std::string& arg) {
  if (fs::exists(arg)) return arg;
  std::vector<fs::path> dirs;
  if (const char* env = std::getenv("DETCP_SCENARIO_DIR")) dirs.emplace_back(env);
  dirs.emplace_back(DETCP_SCENARIO_DIR);
  for (const auto& d : dirs) {
    for (const fs::path& p : {d / arg, d / (arg + ".scn")}) {
      if (fs::exists(p)) return p.string();
    }
  }
  return arg;  // load_scenario reports the failure
}

void print_flows(const RunReport& r, const char* title) {
  std::printf("%s\n", title);
  for (const FlowResult& f : r.flows) {
    std::printf("  %-7s %s -> %s  goodput %.6g bps  utilization %.4f  completion %.6g s  rexmit %llu%s\n",
                f.label.c_str(), f.path.sender.c_str(), f.path.receiver.c_str(), f.metrics.goodput_bps,
                f.metrics.utilization, f.metrics.completion_s,
                static_cast<unsigned long long>(f.metrics.retransmissions),
                f.metrics.complete ? "" : "  INCOMPLETE");
  }
  std::printf("  aggregate goodput %.6g bps\n", r.aggregate.goodput_bps);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled transport simulator"};
  app.require_subcommand(1);

  std::string scenario;
  std::optional<double> loss;
  std::optional<std::uint64_t> seed;
  std::string format = "csv";
  std::string trace_file;

  auto* run = app.add_subcommand("run", "Run one scenario");
  run->add_option("scenario", scenario, "Scenario file or shipped name")->required();
  run->add_option("--loss", loss, "Loss probability for lossy links")->check(CLI::Range(0.0, 1.0));
  run->add_option("--seed", seed, "Master seed");
  run->add_option("--format", format, "csv, table or plotdata")->check(CLI::IsMember({"csv", "table", "plotdata"}));
  run->add_option("--trace", trace_file, "Write the packet trace (TSV) here");

  auto* sweep = app.add_subcommand("sweep", "Run the scenario's loss sweep");
  sweep->add_option("scenario", scenario, "Scenario file or shipped name")->required();
  sweep->add_option("--format", format, "csv, table or plotdata")->check(CLI::IsMember({"csv", "table", "plotdata"}));

  auto* pendulum = app.add_subcommand("pendulum", "Compare coupled and decoupled variants");
  pendulum->add_option("scenario", scenario, "Scenario file or shipped name")->required();

  auto* validate = app.add_subcommand("validate", "Parse and build the scenario without running it");
  validate->add_option("scenario", scenario, "Scenario file or shipped name")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const ScenarioConfig cfg = load_scenario(resolve_scenario(scenario));
    const ReportFormat fmt = *parse_report_format(format);

    if (*run) {
      RunOptions opts;
      opts.loss = loss;
      opts.seed = seed;
      std::ofstream trace_out;
      if (!trace_file.empty()) {
        trace_out.open(trace_file);
        if (!trace_out) {
          std::fprintf(stderr, "detcp: cannot write %s\n", trace_file.c_str());
          return kExitScenarioError;
        }
        trace_out << trace_header() << '\n';
        opts.trace_sink = [&trace_out](const TraceRecord& r) { trace_out << format_trace(r) << '\n'; };
      }
      ScenarioConfig chosen = cfg;
      if (!cfg.variants().empty()) chosen = cfg.select_variant(*cfg.variants().begin());
      const RunReport report = run_scenario(chosen, opts);
      std::fputs(emit_report({report}, fmt).c_str(), stdout);
      if (report.timeout) {
        std::fprintf(stderr, "detcp: TIMEOUT: flows incomplete at %.6g s\n", chosen.duration_cap);
        return kExitTimeout;
      }
      return kExitOk;
    }

    if (*sweep) {
      const auto rows = loss_sweep(cfg);
      std::fputs(emit_report(rows, fmt).c_str(), stdout);
      for (const auto& r : rows) {
        if (r.timeout) {
          std::fprintf(stderr, "detcp: TIMEOUT at loss %.6g\n", r.loss_rate);
          return kExitTimeout;
        }
      }
      return kExitOk;
    }

    if (*pendulum) {
      const PendulumReport p = run_pendulum_comparison(cfg);
      print_flows(p.coupled, "coupled");
      print_flows(p.decoupled, "decoupled");
      for (std::size_t i = 0; i < p.isolated.size(); ++i) {
        print_flows(p.isolated[i], ("isolated flow " + std::to_string(i + 1) + " (coupled topology)").c_str());
      }
      bool timeout = p.coupled.timeout || p.decoupled.timeout;
      for (const auto& r : p.isolated) timeout |= r.timeout;
      return timeout ? kExitTimeout : kExitOk;
    }

    // validate
    auto check = [](const ScenarioConfig& c, const std::string& label) {
      const Topology topo = build_topology(topology_spec(c));
      std::printf("%s: %zu nodes, %zu links, %zu flows\n", label.c_str(), topo.nodes().size(), topo.links().size(),
                  c.flows.size());
      for (std::size_t i = 0; i < c.flows.size(); ++i) {
        const FlowPath p = describe_flow(c, topo, i);
        std::printf("  flow %zu: %s -> %s, %zu+%zu hops, bottleneck %.6g bps, rtt %.6g s, window %llu bytes\n", i + 1,
                    p.sender.c_str(), p.receiver.c_str(), p.forward.size(), p.reverse.size(), p.bottleneck_bps, p.rtt,
                    static_cast<unsigned long long>(c.window.value_or(p.window)));
      }
    };
    if (cfg.variants().empty()) {
      check(cfg, cfg.name);
    } else {
      for (const auto& v : cfg.variants()) check(cfg.select_variant(v), cfg.name + " [" + v + "]");
    }
    return kExitOk;
  } catch (const ScenarioError& e) {
    std::fprintf(stderr, "detcp: %s\n", e.what());
  } catch (const SimError& e) {
    std::fprintf(stderr, "detcp: %s\n", e.what());
  } catch (const EndpointError& e) {
    std::fprintf(stderr, "detcp: endpoint: %s\n", e.what());
  }
  return kExitScenarioError;
}
