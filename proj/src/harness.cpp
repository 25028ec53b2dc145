#include "detcp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <limits>
#include <random>

namespace detcp {

namespace {

constexpr std::size_t kCidOptionSize = 10;
constexpr std::size_t kRefillChunk = 64 * 1024;

std::uint64_t fnv1a_update(std::uint64_t h, std::span<const std::uint8_t> data) {
  for (std::uint8_t b : data) {
    h ^= b;
    h *= 0x100000001B3ull;
  }
  return h;
}

constexpr std::uint64_t kFnvBasis = 0xCBF29CE484222325ull;

AddressBinding binding_of(const NodeDecl& n, std::uint16_t port) {
  if (auto it = n.bindings.find(port); it != n.bindings.end()) return it->second;
  return {*n.original, n.complementary};
}

Address receive_addr(const AddressBinding& b) { return b.complementary.value_or(b.original); }

const NodeDecl& node_decl(const ScenarioConfig& cfg, const std::string& name) {
  const NodeDecl* n = cfg.find_node(name);
  if (!n) throw ScenarioError(ScenarioErrc::kUndeclaredReference, 0, "undeclared node '" + name + "'");
  return *n;
}

// Deterministic application payload for one flow.
class PayloadSource {
 public:
  explicit PayloadSource(std::uint64_t seed) : rng_(seed) {}

  Bytes next(std::size_t n) {
    Bytes out(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (avail_ == 0) {
        word_ = rng_();
        avail_ = 8;
      }
      out[i] = static_cast<std::uint8_t>(word_);
      word_ >>= 8;
      --avail_;
    }
    digest_ = fnv1a_update(digest_, out);
    return out;
  }
  std::uint64_t digest() const { return digest_; }

 private:
  std::mt19937_64 rng_;
  std::uint64_t word_ = 0;
  int avail_ = 0;
  std::uint64_t digest_ = kFnvBasis;
};

struct FlowRuntime {
  const FlowDecl* decl = nullptr;
  NodeIndex client = 0;
  NodeIndex server = 0;
  NodeIndex sender = 0;
  NodeIndex receiver = 0;
  std::optional<ConnHandle> client_conn;
  std::optional<ConnHandle> server_conn;
  std::unique_ptr<PayloadSource> source;
  std::uint64_t queued = 0;
  bool close_requested = false;
  std::uint64_t delivered = 0;
  std::uint64_t recv_digest = kFnvBasis;
  std::optional<double> last_delivery;
  bool done = false;
  std::optional<std::string> failure;

  std::optional<ConnHandle> sender_conn() const { return sender == client ? client_conn : server_conn; }
  std::optional<ConnHandle> receiver_conn() const { return receiver == client ? client_conn : server_conn; }
};

double rate_of(const ScenarioConfig& cfg, std::optional<double> loss) {
  if (loss) return *loss;
  double max_loss = 0;
  bool any_lossy = std::any_of(cfg.links.begin(), cfg.links.end(), [](const LinkDecl& l) { return l.lossy; });
  for (const LinkDecl& l : cfg.links) {
    if (l.lossy || !any_lossy) max_loss = std::max(max_loss, l.spec.loss_rate);
  }
  return max_loss;
}

void accumulate_rtt(RunMetrics& m, const ConnectionStats& s, std::uint64_t& samples, double& sum) {
  if (s.rtt_samples == 0) return;
  m.rtt_min = samples == 0 ? s.rtt_min : std::min(m.rtt_min, s.rtt_min);
  m.rtt_max = std::max(m.rtt_max, s.rtt_max);
  samples += s.rtt_samples;
  sum += s.rtt_sum;
  m.rtt_mean = sum / static_cast<double>(samples);
}

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

TopologySpec topology_spec(const ScenarioConfig& cfg, std::optional<double> loss) {
  if (!cfg.variants().empty()) {
    throw ScenarioError(ScenarioErrc::kMissingVariant, 0, "scenario has variants; select one first");
  }
  TopologySpec spec;
  for (const NodeDecl& n : cfg.nodes) spec.nodes.push_back(n.spec);
  const bool any_lossy = std::any_of(cfg.links.begin(), cfg.links.end(), [](const LinkDecl& l) { return l.lossy; });
  for (const LinkDecl& l : cfg.links) {
    LinkSpec ls = l.spec;
    if (loss && (l.lossy || !any_lossy)) ls.loss_rate = *loss;
    spec.links.push_back(std::move(ls));
  }
  for (const RouteDecl& r : cfg.routes) spec.routes.push_back(r.spec);
  for (std::size_t i = 0; i < cfg.flows.size(); ++i) {
    const FlowDecl& f = cfg.flows[i];
    const NodeDecl& c = node_decl(cfg, f.client);
    const NodeDecl& s = node_decl(cfg, f.server);
    const AddressBinding cb = binding_of(c, f.local_port());
    const AddressBinding sb = binding_of(s, f.port);
    const std::string label = "flow " + std::to_string(i + 1) + " (" + f.client + " -> " + f.server + ")";
    spec.required_paths.push_back({label, f.client, cb.original, receive_addr(sb), true});
    spec.required_paths.push_back({label, f.server, sb.original, receive_addr(cb), false});
  }
  return spec;
}

FlowPath describe_flow(const ScenarioConfig& cfg, const Topology& topo, std::size_t index) {
  const FlowDecl& f = cfg.flows.at(index);
  const NodeDecl& c = node_decl(cfg, f.client);
  const NodeDecl& s = node_decl(cfg, f.server);
  AddressBinding sender_b = binding_of(c, f.local_port());
  AddressBinding receiver_b = binding_of(s, f.port);
  FlowPath p;
  p.sender = f.client;
  p.receiver = f.server;
  if (f.server_sends) {
    std::swap(sender_b, receiver_b);
    std::swap(p.sender, p.receiver);
  }
  p.send_addr = sender_b.original;
  p.recv_addr = receive_addr(receiver_b);

  auto src = topo.owner(p.send_addr);
  auto back = topo.owner(receiver_b.original);
  if (src) p.forward = topo.path(src->node, src->interface, p.recv_addr);
  if (back) p.reverse = topo.path(back->node, back->interface, receive_addr(sender_b));

  const double data_bits = static_cast<double>(kHeaderSize + kCidOptionSize + cfg.mss) * 8;
  const double ack_bits = static_cast<double>(kHeaderSize + kCidOptionSize) * 8;
  p.bottleneck_bps = std::numeric_limits<double>::infinity();
  for (LinkIndex l : p.forward) {
    const SimplexLink& link = topo.links()[l];
    p.bottleneck_bps = std::min(p.bottleneck_bps, link.capacity_bps);
    p.rtt += link.prop_delay + data_bits / link.capacity_bps;
  }
  for (LinkIndex l : p.reverse) {
    const SimplexLink& link = topo.links()[l];
    p.rtt += link.prop_delay + ack_bits / link.capacity_bps;
  }
  if (p.forward.empty()) p.bottleneck_bps = 0;
  const double bdp = p.bottleneck_bps * p.rtt / 8;
  const double segments = std::ceil(2 * bdp / cfg.mss);
  p.window = std::max<std::uint64_t>(static_cast<std::uint64_t>(segments), 2) * cfg.mss;
  return p;
}

RunReport run_scenario(const ScenarioConfig& cfg, const RunOptions& opts) {
  RunReport report;
  report.scenario = cfg.name;
  report.seed = opts.seed.value_or(cfg.seed);
  report.loss_rate = rate_of(cfg, opts.loss);
  if (cfg.flows.empty()) return report;

  Simulation sim(build_topology(topology_spec(cfg, opts.loss)), report.seed);
  const Topology& topo = sim.topology();
  if (opts.trace_sink) {
    sim.set_trace_sink(opts.trace_sink);
  } else if (opts.keep_trace) {
    sim.set_tracing(true);
  }

  std::vector<FlowPath> paths;
  for (std::size_t i = 0; i < cfg.flows.size(); ++i) paths.push_back(describe_flow(cfg, topo, i));

  // Endpoints: one per endpoint node, window sized for the flows it sends.
  for (const NodeDecl& n : cfg.nodes) {
    if (n.spec.kind != NodeKind::kEndpoint) continue;
    EndpointConfig ec;
    ec.name = n.spec.name;
    ec.original_addr = *n.original;
    ec.complementary_addr = n.complementary;
    ec.port_bindings = n.bindings;
    ec.seed = derive_seed(report.seed, "node/" + n.spec.name);
    ec.transport.mss = cfg.mss;
    ec.transport.recv_buffer = cfg.recv_buffer;
    ec.transport.aimd = cfg.aimd;
    std::uint64_t window = 0;
    for (std::size_t i = 0; i < cfg.flows.size(); ++i) {
      if (paths[i].sender == n.spec.name) window = std::max(window, cfg.window.value_or(paths[i].window));
      if (cfg.flows[i].server == n.spec.name) ec.listen_ports.insert(cfg.flows[i].port);
    }
    if (window == 0) window = cfg.window.value_or(ec.transport.send_window);
    ec.transport.send_window = std::max<std::uint64_t>(window, cfg.mss);
    sim.add_endpoint(n.spec.name, std::move(ec));
  }

  std::vector<FlowRuntime> flows(cfg.flows.size());
  std::size_t remaining = flows.size();
  for (std::size_t i = 0; i < flows.size(); ++i) {
    FlowRuntime& fr = flows[i];
    fr.decl = &cfg.flows[i];
    fr.client = *topo.find_node(fr.decl->client);
    fr.server = *topo.find_node(fr.decl->server);
    fr.sender = fr.decl->server_sends ? fr.server : fr.client;
    fr.receiver = fr.decl->server_sends ? fr.client : fr.server;
    fr.source = std::make_unique<PayloadSource>(derive_seed(report.seed, "payload/" + std::to_string(i)));
  }

  auto finish_flow = [&](FlowRuntime& fr) {
    if (fr.done) return;
    fr.done = true;
    if (--remaining == 0) sim.stop();
  };

  // Keeps each sender's buffer topped up, then closes once everything is queued.
  auto refill = [&]() {
    for (FlowRuntime& fr : flows) {
      if (fr.done || fr.close_requested) continue;
      auto h = fr.sender_conn();
      if (!h) continue;
      Endpoint& ep = *sim.endpoint(fr.sender);
      const Connection& c = ep.connection(*h);
      if (c.state() != ConnState::kEstablished && c.state() != ConnState::kCloseWait) continue;
      const std::uint64_t left = fr.decl->size - fr.queued;
      if (left == 0) {
        fr.close_requested = true;
        sim.call_endpoint(fr.sender, [&](Endpoint& e) { return e.close_connection(*h, sim.now()); });
        continue;
      }
      const std::size_t space = c.send_buffer_space();
      const std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(left, kRefillChunk));
      if (space < want) continue;
      const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(left, space));
      Bytes chunk = fr.source->next(n);
      fr.queued += n;
      sim.call_endpoint(fr.sender, [&](Endpoint& e) { return e.send_data(*h, chunk, sim.now()); });
    }
  };

  sim.set_observer([&](NodeIndex node, const Action& action) {
    if (const auto* sig = std::get_if<Signal>(&action)) {
      Endpoint& ep = *sim.endpoint(node);
      if (sig->event == ConnEvent::kEstablished) {
        const SixTuple& t = ep.connection(sig->conn).six_tuple();
        for (FlowRuntime& fr : flows) {
          if (node == fr.server && !fr.server_conn && t.src_port == fr.decl->port &&
              t.dst_port == fr.decl->local_port()) {
            fr.server_conn = sig->conn;
            break;
          }
        }
      } else if (sig->event == ConnEvent::kPeerClosed) {
        // Only the passive closer still owes a FIN.
        const ConnHandle h = sig->conn;
        if (ep.connection(h).state() == ConnState::kCloseWait) {
          sim.call_endpoint(node, [&](Endpoint& e) { return e.close_connection(h, sim.now()); });
        }
      } else if (sig->event == ConnEvent::kReset) {
        for (FlowRuntime& fr : flows) {
          if ((node == fr.client && fr.client_conn == sig->conn) || (node == fr.server && fr.server_conn == sig->conn)) {
            if (!fr.done) {
              fr.failure = "connection reset";
              finish_flow(fr);
            }
          }
        }
      }
    } else if (const auto* del = std::get_if<Deliver>(&action)) {
      for (FlowRuntime& fr : flows) {
        if (node != fr.receiver || fr.receiver_conn() != del->conn) continue;
        fr.delivered += del->data.size();
        fr.recv_digest = fnv1a_update(fr.recv_digest, del->data);
        fr.last_delivery = sim.now();
        if (fr.delivered >= fr.decl->size) finish_flow(fr);
        break;
      }
    }
  });
  sim.set_post_event(refill);

  for (FlowRuntime& fr : flows) {
    FlowRuntime* f = &fr;
    sim.schedule(fr.decl->start, [&sim, &cfg, f]() {
      const NodeDecl& server = *cfg.find_node(f->decl->server);
      const Address target = receive_addr(binding_of(server, f->decl->port));
      sim.call_endpoint(f->client, [&](Endpoint& e) {
        auto [h, actions] = e.open_active(f->decl->local_port(), target, f->decl->port, sim.now());
        f->client_conn = h;
        return actions;
      });
    });
  }

  const auto result = sim.run_until(cfg.duration_cap);
  report.end_time = result.final_time;
  report.network = sim.totals();
  report.trace = sim.trace();

  std::uint64_t agg_samples = 0;
  double agg_rtt_sum = 0;
  std::optional<double> agg_first, agg_last;
  double capacity_sum = 0;
  for (std::size_t i = 0; i < flows.size(); ++i) {
    FlowRuntime& fr = flows[i];
    FlowResult out;
    out.label = "flow " + std::to_string(i + 1);
    out.path = paths[i];
    out.failure = fr.failure;
    RunMetrics& m = out.metrics;
    m.bytes = fr.delivered;
    m.complete = fr.delivered >= fr.decl->size && !fr.failure;
    out.digest_ok = m.complete && fr.recv_digest == fr.source->digest() && fr.queued == fr.decl->size;
    std::optional<double> first;
    if (auto h = fr.sender_conn()) {
      const ConnectionStats& s = sim.endpoint(fr.sender)->connection(*h).stats();
      m.retransmissions = s.retransmissions;
      first = s.first_data_sent;
      std::uint64_t samples = 0;
      double sum = 0;
      accumulate_rtt(m, s, samples, sum);
    }
    if (first && fr.last_delivery) {
      m.completion_s = *fr.last_delivery - *first;
      if (m.completion_s > 0) m.goodput_bps = static_cast<double>(m.bytes) * 8 / m.completion_s;
    }
    if (out.path.bottleneck_bps > 0) m.utilization = m.goodput_bps / out.path.bottleneck_bps;

    RunMetrics& a = report.aggregate;
    a.bytes += m.bytes;
    a.retransmissions += m.retransmissions;
    if (auto h = fr.sender_conn()) {
      accumulate_rtt(a, sim.endpoint(fr.sender)->connection(*h).stats(), agg_samples, agg_rtt_sum);
    }
    if (first) agg_first = agg_first ? std::min(*agg_first, *first) : *first;
    if (fr.last_delivery) agg_last = agg_last ? std::max(*agg_last, *fr.last_delivery) : *fr.last_delivery;
    capacity_sum += out.path.bottleneck_bps;
    report.flows.push_back(std::move(out));
  }

  RunMetrics& a = report.aggregate;
  a.complete = std::all_of(report.flows.begin(), report.flows.end(), [](const FlowResult& f) { return f.metrics.complete; });
  if (agg_first && agg_last && *agg_last > *agg_first) {
    a.completion_s = *agg_last - *agg_first;
    a.goodput_bps = static_cast<double>(a.bytes) * 8 / a.completion_s;
  }
  if (capacity_sum > 0) a.utilization = a.goodput_bps / capacity_sum;
  a.losses_random = report.network.lost_random;
  a.losses_overflow = report.network.lost_overflow;
  for (FlowResult& f : report.flows) {
    f.metrics.losses_random = a.losses_random;
    f.metrics.losses_overflow = a.losses_overflow;
  }
  report.timeout = !a.complete && remaining > 0;
  for (NodeIndex i = 0; i < topo.nodes().size(); ++i) {
    if (Endpoint* ep = sim.endpoint(i)) report.endpoint_stats.push_back(ep->stats());
  }
  return report;
}

std::vector<RunReport> loss_sweep(const ScenarioConfig& cfg, bool parallel) {
  if (cfg.loss_sweep.empty()) {
    throw ScenarioError(ScenarioErrc::kInvalidValue, 0, "scenario '" + cfg.name + "' declares no [sweep] rates");
  }
  std::vector<double> rates = cfg.loss_sweep;
  std::sort(rates.begin(), rates.end());
  auto run_one = [&cfg, &rates](std::size_t i) {
    RunOptions o;
    o.loss = rates[i];
    o.seed = cfg.seed + i;
    return run_scenario(cfg, o);
  };
  std::vector<RunReport> rows;
  if (!parallel) {
    for (std::size_t i = 0; i < rates.size(); ++i) rows.push_back(run_one(i));
    return rows;
  }
  std::vector<std::future<RunReport>> jobs;
  for (std::size_t i = 0; i < rates.size(); ++i) jobs.push_back(std::async(std::launch::async, run_one, i));
  for (auto& j : jobs) rows.push_back(j.get());
  return rows;
}

PendulumReport run_pendulum_comparison(const ScenarioConfig& cfg) {
  const auto variants = cfg.variants();
  if (!variants.count("coupled") || !variants.count("decoupled")) {
    throw ScenarioError(ScenarioErrc::kMissingVariant, 0, "pendulum needs both a coupled and a decoupled variant");
  }
  if (cfg.flows.size() < 2) {
    throw ScenarioError(ScenarioErrc::kMissingVariant, 0, "pendulum needs two antiparallel flows");
  }
  const ScenarioConfig coupled = cfg.select_variant("coupled");
  const ScenarioConfig decoupled = cfg.select_variant("decoupled");

  auto a = std::async(std::launch::async, [&] { return run_scenario(coupled); });
  auto b = std::async(std::launch::async, [&] { return run_scenario(decoupled); });
  std::vector<std::future<RunReport>> alone;
  for (std::size_t i = 0; i < cfg.flows.size(); ++i) {
    alone.push_back(std::async(std::launch::async, [&coupled, i] {
      ScenarioConfig one = coupled;
      one.flows = {coupled.flows[i]};
      RunReport r = run_scenario(one);
      r.flows.front().label = "flow " + std::to_string(i + 1);
      return r;
    }));
  }
  PendulumReport out;
  out.coupled = a.get();
  out.decoupled = b.get();
  for (auto& f : alone) out.isolated.push_back(f.get());
  return out;
}

std::optional<ReportFormat> parse_report_format(std::string_view text) {
  if (text == "csv") return ReportFormat::kCsv;
  if (text == "table") return ReportFormat::kTable;
  if (text == "plotdata") return ReportFormat::kPlotData;
  return std::nullopt;
}

std::string csv_header() {
  return "loss_rate,goodput_bps,utilization,completion_s,retransmissions,losses_random,losses_overflow";
}

std::string emit_report(const std::vector<RunReport>& runs, ReportFormat format) {
  std::string out;
  switch (format) {
    case ReportFormat::kCsv:
      out = csv_header() + "\n";
      for (const RunReport& r : runs) {
        const RunMetrics& m = r.aggregate;
        out += fmt6(r.loss_rate) + "," + fmt6(m.goodput_bps) + "," + fmt6(m.utilization) + "," +
               fmt6(m.completion_s) + "," + std::to_string(m.retransmissions) + "," +
               std::to_string(m.losses_random) + "," + std::to_string(m.losses_overflow) + "\n";
      }
      break;
    case ReportFormat::kPlotData:
      for (const RunReport& r : runs) out += fmt6(r.loss_rate) + " " + fmt6(r.aggregate.utilization) + "\n";
      break;
    case ReportFormat::kTable: {
      char line[256];
      std::snprintf(line, sizeof line, "%-10s %14s %11s %12s %8s %8s %8s %s\n", "loss", "goodput(bps)", "utilization",
                    "completion", "rexmit", "lost", "overflow", "status");
      out = line;
      for (const RunReport& r : runs) {
        const RunMetrics& m = r.aggregate;
        std::snprintf(line, sizeof line, "%-10s %14s %11s %12s %8llu %8llu %8llu %s\n", fmt6(r.loss_rate).c_str(),
                      fmt6(m.goodput_bps).c_str(), fmt6(m.utilization).c_str(), fmt6(m.completion_s).c_str(),
                      static_cast<unsigned long long>(m.retransmissions),
                      static_cast<unsigned long long>(m.losses_random),
                      static_cast<unsigned long long>(m.losses_overflow), r.timeout ? "TIMEOUT" : "ok");
        out += line;
      }
      break;
    }
  }
  return out;
}

}  // namespace detcp
