#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "detcp/netsim.hpp"
#include "detcp/scenario.hpp"

namespace detcp {

struct RunMetrics {
  std::uint64_t bytes = 0;  // application payload delivered
  double goodput_bps = 0;
  double utilization = 0;
  double completion_s = 0;  // first data emission to last delivery
  std::uint64_t retransmissions = 0;
  std::uint64_t losses_random = 0;
  std::uint64_t losses_overflow = 0;
  double rtt_min = 0;
  double rtt_mean = 0;
  double rtt_max = 0;
  bool complete = false;
};

// Static facts about one flow's path in a built topology.
struct FlowPath {
  std::string sender;
  std::string receiver;
  Address send_addr;  // data sender's original address for the flow
  Address recv_addr;  // where the data sender addresses its segments
  std::vector<LinkIndex> forward;
  std::vector<LinkIndex> reverse;
  double bottleneck_bps = 0;
  double rtt = 0;  // propagation plus one data / one ACK serialization per hop
  std::uint64_t window = 0;  // 2 x BDP, whole segments
};

struct FlowResult {
  std::string label;
  FlowPath path;
  RunMetrics metrics;
  bool digest_ok = false;
  std::optional<std::string> failure;  // e.g. connection reset
};

struct RunReport {
  std::string scenario;
  std::uint64_t seed = 0;
  double loss_rate = 0;
  RunMetrics aggregate;
  std::vector<FlowResult> flows;
  bool timeout = false;
  double end_time = 0;
  LinkCounters network;
  std::vector<TraceRecord> trace;  // only with RunOptions::keep_trace
  std::vector<EndpointStats> endpoint_stats;
};

struct RunOptions {
  std::optional<double> loss;  // replaces the loss rate of every lossy link
  std::optional<std::uint64_t> seed;
  bool keep_trace = false;
  std::function<void(const TraceRecord&)> trace_sink;
};

// Topology for a (variant-free) scenario, with the loss override applied
// and a forward and reverse path requirement per flow.
TopologySpec topology_spec(const ScenarioConfig& config, std::optional<double> loss = std::nullopt);
FlowPath describe_flow(const ScenarioConfig& config, const Topology& topology, std::size_t flow);

RunReport run_scenario(const ScenarioConfig& config, const RunOptions& options = {});

// One run per sweep rate, seed = master seed + rate index, rows by rate.
std::vector<RunReport> loss_sweep(const ScenarioConfig& config, bool parallel = true);

struct PendulumReport {
  RunReport coupled;
  RunReport decoupled;
  // Each flow alone on the coupled variant, same seed.
  std::vector<RunReport> isolated;
};

PendulumReport run_pendulum_comparison(const ScenarioConfig& config);

enum class ReportFormat { kCsv, kTable, kPlotData };
std::optional<ReportFormat> parse_report_format(std::string_view text);

std::string emit_report(const std::vector<RunReport>& runs, ReportFormat format);
std::string csv_header();

}  // namespace detcp
