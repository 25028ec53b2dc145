#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "detcp/endpoint.hpp"
#include "detcp/wire.hpp"

namespace detcp {

// ---------------------------------------------------------------------------
// Declarative topology.

enum class NodeKind { kEndpoint, kRouter };

struct InterfaceSpec {
  std::string name;
  Address addr;
  InterfaceRole role = InterfaceRole::kDuplex;
};

struct NodeSpec {
  std::string name;
  NodeKind kind = NodeKind::kEndpoint;
  std::vector<InterfaceSpec> interfaces;
  double processing_delay = 0;  // routers only
};

struct PortRef {
  std::string node;
  std::string interface;
};

struct LinkSpec {
  std::string name;
  PortRef from;
  PortRef to;
  double capacity_bps = 100e6;
  double prop_delay = 0.005;
  double loss_rate = 0;
  std::size_t queue_cap = 64;
};

struct RouteSpec {
  std::string node;
  Address destination;
  std::string link;
};

// A unidirectional reachability requirement checked at build time.
struct PathRequirement {
  std::string label;
  std::string node;
  Address from;
  Address to;
  bool forward = true;  // selects NO_FORWARD_PATH vs NO_REVERSE_PATH
};

struct TopologySpec {
  std::vector<NodeSpec> nodes;
  std::vector<LinkSpec> links;
  std::vector<RouteSpec> routes;
  std::vector<PathRequirement> required_paths;
};

enum class SimErrc {
  kInvalidTopology,
  kDanglingInterface,
  kNoForwardPath,
  kNoReversePath,
  kRouteLoop,
  kWrongLink,
  kEventInPast,
};

std::string_view to_string(SimErrc code);

class SimError : public std::runtime_error {
 public:
  SimError(SimErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  SimErrc code() const { return code_; }

 private:
  SimErrc code_;
};

// ---------------------------------------------------------------------------
// Validated topology.

using NodeIndex = std::size_t;
using LinkIndex = std::size_t;

struct InterfacePoint {
  NodeIndex node = 0;
  InterfaceId interface = 0;
  bool operator==(const InterfacePoint&) const = default;
};

struct SimplexLink {
  LinkIndex id = 0;
  std::string name;
  InterfacePoint from;
  InterfacePoint to;
  double capacity_bps = 0;
  double prop_delay = 0;
  double loss_rate = 0;
  std::size_t queue_cap = 0;

  double serialization_time(std::size_t octets) const { return static_cast<double>(octets) * 8.0 / capacity_bps; }
};

struct Node {
  std::string name;
  NodeKind kind = NodeKind::kEndpoint;
  std::vector<InterfaceSpec> interfaces;  // InterfaceId is the index
  double processing_delay = 0;
};

class Topology {
 public:
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<SimplexLink>& links() const { return links_; }

  std::optional<NodeIndex> find_node(std::string_view name) const;
  std::optional<LinkIndex> find_link(std::string_view name) const;
  std::optional<InterfacePoint> owner(Address addr) const;
  // Interface table of a node in the form the endpoint module expects.
  std::vector<InterfaceConfig> interface_configs(NodeIndex node) const;

  // Next hop for `dst` leaving `node`. Endpoints pass the interface they
  // emit on; routers pass nullopt. Explicit routes win over derived ones.
  std::optional<LinkIndex> next_link(NodeIndex node, std::optional<InterfaceId> egress, Address dst) const;
  // Links traversed from `node`/`egress` to the interface owning `dst`;
  // empty if unreachable.
  std::vector<LinkIndex> path(NodeIndex node, std::optional<InterfaceId> egress, Address dst) const;

 private:
  friend Topology build_topology(const TopologySpec& spec);

  std::vector<Node> nodes_;
  std::vector<SimplexLink> links_;
  std::map<Address, InterfacePoint> owners_;
  std::vector<std::map<Address, LinkIndex>> explicit_routes_;
  // hops_[dst][link]: links needed to reach dst when entering `link`.
  std::map<Address, std::vector<std::uint32_t>> hops_;
};

Topology build_topology(const TopologySpec& spec);

// Stable per-stream seed: changing one key never perturbs another.
std::uint64_t derive_seed(std::uint64_t master, std::string_view key);

// ---------------------------------------------------------------------------
// Trace.

enum class EventKind { kLinkDelivery, kLinkDequeue, kEndpointTick, kAppCall };
enum class Disposition { kEnqueued, kDelivered, kLostRandom, kLostOverflow, kNoRoute };

std::string_view to_string(EventKind kind);
std::string_view to_string(Disposition d);

struct TraceRecord {
  double time = 0;
  EventKind kind = EventKind::kAppCall;
  std::uint64_t packet = 0;
  std::string node;
  std::string interface;
  std::string link;  // "-" when no link is involved
  Address src;
  Address dst;
  SegmentFlags flags;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t seq = 0;
  std::uint32_t ack = 0;
  std::uint32_t length = 0;
  std::string options;  // comma-separated kinds, "-" when none
  Disposition disposition = Disposition::kEnqueued;
};

// Column names of the tab-separated trace format.
std::string trace_header();
std::string format_trace(const TraceRecord& record);

struct LinkCounters {
  std::uint64_t injected = 0;
  std::uint64_t delivered = 0;
  std::uint64_t lost_random = 0;
  std::uint64_t lost_overflow = 0;
  std::uint64_t queued = 0;       // currently waiting or serializing
  std::uint64_t propagating = 0;  // serialized, not yet delivered
  std::size_t max_queue = 0;

  std::uint64_t in_flight() const { return queued + propagating; }
};

// ---------------------------------------------------------------------------
// Event loop.

class Simulation {
 public:
  using Observer = std::function<void(NodeIndex node, const Action& action)>;

  struct RunResult {
    double final_time = 0;
    std::uint64_t events_executed = 0;
    bool drained = false;  // event queue empty at return
  };

  Simulation(Topology topology, std::uint64_t master_seed);
  ~Simulation();
  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  const Topology& topology() const { return topology_; }
  double now() const { return now_; }

  Endpoint& add_endpoint(std::string_view node, EndpointConfig config);
  Endpoint* endpoint(NodeIndex node);

  void set_observer(Observer observer) { observer_ = std::move(observer); }
  void set_tracing(bool on) { tracing_ = on; }
  // Records go to `sink` instead of the in-memory trace.
  void set_trace_sink(std::function<void(const TraceRecord&)> sink) {
    sink_ = std::move(sink);
    tracing_ = static_cast<bool>(sink_);
  }
  // Runs after every executed event.
  void set_post_event(std::function<void()> fn) { post_event_ = std::move(fn); }
  const std::vector<TraceRecord>& trace() const { return trace_; }
  const std::vector<LinkCounters>& link_counters() const { return counters_; }
  std::uint64_t no_route_drops() const { return no_route_drops_; }
  // Totals across every link.
  LinkCounters totals() const;

  // Runs endpoint outputs: emissions enter the network, timers become tick
  // events, deliveries and signals go to the observer.
  void apply(NodeIndex node, Actions actions);
  // Invokes `fn` against the node's endpoint now and applies its actions.
  void call_endpoint(NodeIndex node, const std::function<Actions(Endpoint&)>& fn);

  void schedule(double time, std::function<void()> fn);
  void transmit(LinkIndex link, InterfacePoint from, Envelope envelope);
  void forward_at_router(NodeIndex router, Envelope envelope);

  RunResult run_until(double end_time);
  void stop() { stopped_ = true; }

 private:
  struct Event;
  struct LinkState {
    std::deque<std::pair<std::uint64_t, Envelope>> queue;
    bool busy = false;
    std::mt19937_64 rng;
  };

  void push_event(Event event);
  void start_service(LinkIndex link);
  void on_dequeue(LinkIndex link);
  void on_delivery(LinkIndex link, std::uint64_t packet, Envelope envelope);
  void on_tick(NodeIndex node);
  void record(EventKind kind, std::uint64_t packet, NodeIndex node, InterfaceId itf,
              std::optional<LinkIndex> link, const Envelope& env, Disposition d);

  Topology topology_;
  std::uint64_t master_seed_;
  double now_ = 0;
  std::uint64_t next_seqno_ = 0;
  std::uint64_t next_packet_ = 0;
  EventKind cause_ = EventKind::kAppCall;  // event being executed, for trace records
  std::uint64_t executed_ = 0;
  bool stopped_ = false;
  bool tracing_ = false;
  std::vector<Event> heap_;
  std::vector<LinkState> links_;
  std::vector<LinkCounters> counters_;
  std::vector<std::unique_ptr<Endpoint>> endpoints_;
  std::vector<std::set<double>> pending_ticks_;
  std::vector<TraceRecord> trace_;
  std::uint64_t no_route_drops_ = 0;
  Observer observer_;
  std::function<void(const TraceRecord&)> sink_;
  std::function<void()> post_event_;
};

}  // namespace detcp
