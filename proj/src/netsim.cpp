#include "detcp/netsim.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <queue>

namespace detcp {

namespace {

constexpr std::uint32_t kUnreachable = std::numeric_limits<std::uint32_t>::max();

[[noreturn]] void fail(SimErrc code, const std::string& msg) {
  throw SimError(code, std::string(to_string(code)) + ": " + msg);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

enum class Walk { kOk, kUnreachable, kLoop };

// Follows next_link from `node` until the owner of `dst` is reached.
Walk walk(const Topology& t, NodeIndex node, std::optional<InterfaceId> egress, Address dst,
          std::vector<LinkIndex>* out) {
  const auto target = t.owner(dst);
  std::vector<bool> visited(t.nodes().size(), false);
  for (std::size_t hop = 0; hop <= t.nodes().size(); ++hop) {
    if (visited[node]) return Walk::kLoop;
    visited[node] = true;
    auto link = t.next_link(node, egress, dst);
    if (!link) return Walk::kUnreachable;
    if (out) out->push_back(*link);
    const SimplexLink& l = t.links()[*link];
    if (target && l.to == *target) return Walk::kOk;
    if (t.nodes()[l.to.node].kind != NodeKind::kRouter) return Walk::kUnreachable;
    node = l.to.node;
    egress.reset();
  }
  return Walk::kLoop;
}

}  // namespace

std::string_view to_string(SimErrc code) {
  switch (code) {
    case SimErrc::kInvalidTopology: return "INVALID_TOPOLOGY";
    case SimErrc::kDanglingInterface: return "DANGLING_INTERFACE";
    case SimErrc::kNoForwardPath: return "NO_FORWARD_PATH";
    case SimErrc::kNoReversePath: return "NO_REVERSE_PATH";
    case SimErrc::kRouteLoop: return "ROUTE_LOOP";
    case SimErrc::kWrongLink: return "WRONG_LINK";
    case SimErrc::kEventInPast: return "EVENT_IN_PAST";
  }
  return "UNKNOWN";
}

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::kLinkDelivery: return "LINK_DELIVERY";
    case EventKind::kLinkDequeue: return "LINK_DEQUEUE";
    case EventKind::kEndpointTick: return "ENDPOINT_TICK";
    case EventKind::kAppCall: return "APP_CALL";
  }
  return "UNKNOWN";
}

std::string_view to_string(Disposition d) {
  switch (d) {
    case Disposition::kEnqueued: return "ENQUEUED";
    case Disposition::kDelivered: return "DELIVERED";
    case Disposition::kLostRandom: return "LOST_RANDOM";
    case Disposition::kLostOverflow: return "LOST_OVERFLOW";
    case Disposition::kNoRoute: return "NO_ROUTE";
  }
  return "UNKNOWN";
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view key) {
  return splitmix64(master ^ splitmix64(fnv1a(key)));
}

// ---------------------------------------------------------------------------
// Topology

std::optional<NodeIndex> Topology::find_node(std::string_view name) const {
  for (NodeIndex i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == name) return i;
  }
  return std::nullopt;
}

std::optional<LinkIndex> Topology::find_link(std::string_view name) const {
  for (LinkIndex i = 0; i < links_.size(); ++i) {
    if (links_[i].name == name) return i;
  }
  return std::nullopt;
}

std::optional<InterfacePoint> Topology::owner(Address addr) const {
  auto it = owners_.find(addr);
  if (it == owners_.end()) return std::nullopt;
  return it->second;
}

std::vector<InterfaceConfig> Topology::interface_configs(NodeIndex node) const {
  std::vector<InterfaceConfig> out;
  const auto& itfs = nodes_.at(node).interfaces;
  for (std::size_t i = 0; i < itfs.size(); ++i) {
    out.push_back({static_cast<InterfaceId>(i), itfs[i].addr, itfs[i].role});
  }
  return out;
}

std::optional<LinkIndex> Topology::next_link(NodeIndex node, std::optional<InterfaceId> egress,
                                             Address dst) const {
  const auto& routes = explicit_routes_.at(node);
  if (auto it = routes.find(dst); it != routes.end()) {
    if (!egress || links_[it->second].from.interface == *egress) return it->second;
  }
  auto h = hops_.find(dst);
  if (h == hops_.end()) return std::nullopt;
  std::optional<LinkIndex> best;
  for (const SimplexLink& l : links_) {
    if (l.from.node != node || (egress && l.from.interface != *egress)) continue;
    if (h->second[l.id] == kUnreachable) continue;
    if (!best || h->second[l.id] < h->second[*best]) best = l.id;
  }
  return best;
}

std::vector<LinkIndex> Topology::path(NodeIndex node, std::optional<InterfaceId> egress, Address dst) const {
  std::vector<LinkIndex> out;
  if (walk(*this, node, egress, dst, &out) != Walk::kOk) out.clear();
  return out;
}

Topology build_topology(const TopologySpec& spec) {
  Topology t;
  std::map<std::string, NodeIndex, std::less<>> node_index;

  for (const NodeSpec& ns : spec.nodes) {
    if (ns.name.empty()) fail(SimErrc::kInvalidTopology, "node without a name");
    if (!node_index.emplace(ns.name, t.nodes_.size()).second) {
      fail(SimErrc::kInvalidTopology, "duplicate node '" + ns.name + "'");
    }
    if (ns.processing_delay < 0) fail(SimErrc::kInvalidTopology, "negative processing delay on '" + ns.name + "'");
    std::set<std::string> names;
    for (std::size_t i = 0; i < ns.interfaces.size(); ++i) {
      const InterfaceSpec& is = ns.interfaces[i];
      if (!names.insert(is.name).second) {
        fail(SimErrc::kInvalidTopology, "duplicate interface '" + ns.name + ":" + is.name + "'");
      }
      InterfacePoint p{t.nodes_.size(), static_cast<InterfaceId>(i)};
      if (!t.owners_.emplace(is.addr, p).second) {
        fail(SimErrc::kInvalidTopology, "address " + is.addr.to_string() + " declared twice");
      }
    }
    t.nodes_.push_back({ns.name, ns.kind, ns.interfaces, ns.processing_delay});
  }
  t.explicit_routes_.resize(t.nodes_.size());

  auto resolve = [&](const PortRef& ref, const std::string& link) {
    auto n = node_index.find(ref.node);
    if (n == node_index.end()) fail(SimErrc::kInvalidTopology, "link '" + link + "' names unknown node '" + ref.node + "'");
    const auto& itfs = t.nodes_[n->second].interfaces;
    for (std::size_t i = 0; i < itfs.size(); ++i) {
      if (itfs[i].name == ref.interface) return InterfacePoint{n->second, static_cast<InterfaceId>(i)};
    }
    fail(SimErrc::kInvalidTopology,
         "link '" + link + "' names unknown interface '" + ref.node + ":" + ref.interface + "'");
  };

  std::set<std::string> link_names;
  for (const LinkSpec& ls : spec.links) {
    if (!link_names.insert(ls.name).second) fail(SimErrc::kInvalidTopology, "duplicate link '" + ls.name + "'");
    SimplexLink l;
    l.id = t.links_.size();
    l.name = ls.name;
    l.from = resolve(ls.from, ls.name);
    l.to = resolve(ls.to, ls.name);
    if (l.from.node == l.to.node) fail(SimErrc::kInvalidTopology, "link '" + ls.name + "' loops back to its node");
    if (!can_send(t.nodes_[l.from.node].interfaces[l.from.interface].role)) {
      fail(SimErrc::kInvalidTopology, "link '" + ls.name + "' originates at a receive-only interface");
    }
    if (!can_receive(t.nodes_[l.to.node].interfaces[l.to.interface].role)) {
      fail(SimErrc::kInvalidTopology, "link '" + ls.name + "' terminates at a send-only interface");
    }
    if (!(ls.capacity_bps > 0)) fail(SimErrc::kInvalidTopology, "link '" + ls.name + "' needs a positive rate");
    if (!(ls.prop_delay >= 0)) fail(SimErrc::kInvalidTopology, "link '" + ls.name + "' has a negative delay");
    if (!(ls.loss_rate >= 0 && ls.loss_rate <= 1)) fail(SimErrc::kInvalidTopology, "link '" + ls.name + "' loss outside [0,1]");
    if (ls.queue_cap == 0) fail(SimErrc::kInvalidTopology, "link '" + ls.name + "' needs a queue of at least 1");
    l.capacity_bps = ls.capacity_bps;
    l.prop_delay = ls.prop_delay;
    l.loss_rate = ls.loss_rate;
    l.queue_cap = ls.queue_cap;
    t.links_.push_back(std::move(l));
  }

  for (NodeIndex n = 0; n < t.nodes_.size(); ++n) {
    const auto& itfs = t.nodes_[n].interfaces;
    for (std::size_t i = 0; i < itfs.size(); ++i) {
      InterfacePoint p{n, static_cast<InterfaceId>(i)};
      bool out = false, in = false;
      for (const SimplexLink& l : t.links_) {
        out |= l.from == p;
        in |= l.to == p;
      }
      const std::string where = t.nodes_[n].name + ":" + itfs[i].name;
      if (itfs[i].role == InterfaceRole::kSendOnly && !out) {
        fail(SimErrc::kDanglingInterface, "send-only interface " + where + " has no outgoing link");
      }
      if (itfs[i].role == InterfaceRole::kReceiveOnly && !in) {
        fail(SimErrc::kDanglingInterface, "receive-only interface " + where + " has no incoming link");
      }
      if (!out && !in) fail(SimErrc::kDanglingInterface, "interface " + where + " is not attached to any link");
    }
  }

  for (const RouteSpec& rs : spec.routes) {
    auto n = node_index.find(rs.node);
    if (n == node_index.end()) fail(SimErrc::kInvalidTopology, "route on unknown node '" + rs.node + "'");
    auto l = t.find_link(rs.link);
    if (!l) fail(SimErrc::kInvalidTopology, "route names unknown link '" + rs.link + "'");
    if (t.links_[*l].from.node != n->second) {
      fail(SimErrc::kInvalidTopology, "route on '" + rs.node + "' uses link '" + rs.link + "' that does not leave it");
    }
    t.explicit_routes_[n->second][rs.destination] = *l;
  }

  // Derived routes: breadth-first over links, backwards from each
  // receive-capable address, passing only through routers.
  for (const auto& [addr, point] : t.owners_) {
    if (!can_receive(t.nodes_[point.node].interfaces[point.interface].role)) continue;
    std::vector<std::uint32_t> hops(t.links_.size(), kUnreachable);
    std::queue<LinkIndex> frontier;
    for (const SimplexLink& l : t.links_) {
      if (l.to == point) {
        hops[l.id] = 1;
        frontier.push(l.id);
      }
    }
    while (!frontier.empty()) {
      const SimplexLink& cur = t.links_[frontier.front()];
      frontier.pop();
      const NodeIndex via = cur.from.node;
      if (t.nodes_[via].kind != NodeKind::kRouter) continue;
      for (const SimplexLink& l : t.links_) {
        if (l.to.node == via && hops[l.id] == kUnreachable) {
          hops[l.id] = hops[cur.id] + 1;
          frontier.push(l.id);
        }
      }
    }
    t.hops_[addr] = std::move(hops);
  }

  for (NodeIndex n = 0; n < t.nodes_.size(); ++n) {
    for (const auto& [dst, link] : t.explicit_routes_[n]) {
      std::optional<InterfaceId> egress;
      if (t.nodes_[n].kind == NodeKind::kEndpoint) egress = t.links_[link].from.interface;
      if (walk(t, n, egress, dst, nullptr) == Walk::kLoop) {
        fail(SimErrc::kRouteLoop, "route to " + dst.to_string() + " from '" + t.nodes_[n].name + "' loops");
      }
    }
  }

  for (const PathRequirement& req : spec.required_paths) {
    const SimErrc code = req.forward ? SimErrc::kNoForwardPath : SimErrc::kNoReversePath;
    auto src = t.owner(req.from);
    if (!src || t.nodes_[src->node].name != req.node) {
      fail(code, req.label + ": " + req.from.to_string() + " is not an address of '" + req.node + "'");
    }
    const Walk w = walk(t, src->node, src->interface, req.to, nullptr);
    if (w == Walk::kLoop) fail(SimErrc::kRouteLoop, req.label + ": path to " + req.to.to_string() + " loops");
    if (w != Walk::kOk) {
      fail(code, req.label + ": no path from " + req.from.to_string() + " to " + req.to.to_string());
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Trace

std::string trace_header() {
  return "time\tevent\tpacket\tnode\tinterface\tlink\tsrc\tdst\tflags\tsport\tdport\tseq\tack\tlen\toptions\tdisposition";
}

std::string format_trace(const TraceRecord& r) {
  char head[64];
  std::snprintf(head, sizeof head, "%.9f", r.time);
  std::string out = head;
  auto col = [&out](std::string_view v) {
    out += '\t';
    out += v;
  };
  col(to_string(r.kind));
  col(std::to_string(r.packet));
  col(r.node);
  col(r.interface);
  col(r.link);
  col(r.src.to_string());
  col(r.dst.to_string());
  col(r.flags.to_string());
  col(std::to_string(r.src_port));
  col(std::to_string(r.dst_port));
  col(std::to_string(r.seq));
  col(std::to_string(r.ack));
  col(std::to_string(r.length));
  col(r.options);
  col(to_string(r.disposition));
  return out;
}

// ---------------------------------------------------------------------------
// Simulation

struct Simulation::Event {
  double time = 0;
  std::uint64_t seqno = 0;
  EventKind kind = EventKind::kAppCall;
  std::size_t index = 0;  // link or node
  std::uint64_t packet = 0;
  Envelope envelope;
  std::function<void()> fn;
};

namespace {
struct LaterFirst {
  template <typename E>
  bool operator()(const E& a, const E& b) const {
    if (a.time != b.time) return a.time > b.time;
    return a.seqno > b.seqno;
  }
};
}  // namespace

Simulation::Simulation(Topology topology, std::uint64_t master_seed)
    : topology_(std::move(topology)), master_seed_(master_seed) {
  const auto& links = topology_.links();
  links_.resize(links.size());
  counters_.resize(links.size());
  for (const SimplexLink& l : links) links_[l.id].rng.seed(derive_seed(master_seed_, "link/" + l.name));
  endpoints_.resize(topology_.nodes().size());
  pending_ticks_.resize(topology_.nodes().size());
}

Simulation::~Simulation() = default;

Endpoint& Simulation::add_endpoint(std::string_view node, EndpointConfig config) {
  auto n = topology_.find_node(node);
  if (!n || topology_.nodes()[*n].kind != NodeKind::kEndpoint) {
    fail(SimErrc::kInvalidTopology, "no endpoint node named '" + std::string(node) + "'");
  }
  if (config.interfaces.empty()) config.interfaces = topology_.interface_configs(*n);
  if (config.name.empty()) config.name = std::string(node);
  endpoints_[*n] = std::make_unique<Endpoint>(std::move(config));
  return *endpoints_[*n];
}

Endpoint* Simulation::endpoint(NodeIndex node) { return endpoints_.at(node).get(); }

LinkCounters Simulation::totals() const {
  LinkCounters sum;
  for (const LinkCounters& c : counters_) {
    sum.injected += c.injected;
    sum.delivered += c.delivered;
    sum.lost_random += c.lost_random;
    sum.lost_overflow += c.lost_overflow;
    sum.queued += c.queued;
    sum.propagating += c.propagating;
    sum.max_queue = std::max(sum.max_queue, c.max_queue);
  }
  return sum;
}

void Simulation::push_event(Event event) {
  if (event.time < now_) {
    fail(SimErrc::kEventInPast, "event at " + std::to_string(event.time) + " before now " + std::to_string(now_));
  }
  event.seqno = next_seqno_++;
  heap_.push_back(std::move(event));
  std::push_heap(heap_.begin(), heap_.end(), LaterFirst{});
}

void Simulation::schedule(double time, std::function<void()> fn) {
  Event e;
  e.time = time;
  e.kind = EventKind::kAppCall;
  e.fn = std::move(fn);
  push_event(std::move(e));
}

void Simulation::record(EventKind kind, std::uint64_t packet, NodeIndex node, InterfaceId itf,
                        std::optional<LinkIndex> link, const Envelope& env, Disposition d) {
  if (!tracing_) return;
  const Node& n = topology_.nodes()[node];
  TraceRecord r;
  r.time = now_;
  r.kind = kind;
  r.packet = packet;
  r.node = n.name;
  r.interface = itf < n.interfaces.size() ? n.interfaces[itf].name : "-";
  r.link = link ? topology_.links()[*link].name : "-";
  r.src = env.src_addr;
  r.dst = env.dst_addr;
  const Segment& s = env.segment;
  r.flags = s.flags;
  r.src_port = s.source_port;
  r.dst_port = s.dest_port;
  r.seq = s.seq;
  r.ack = s.ack;
  r.length = static_cast<std::uint32_t>(s.payload.size());
  for (const auto& opt : s.options) {
    if (!r.options.empty()) r.options += ',';
    switch (opt.kind) {
      case 0x01: r.options += "CA"; break;
      case 0x02: r.options += "CID"; break;
      case 0x03: r.options += "SACK"; break;
      default: r.options += "K" + std::to_string(opt.kind);
    }
  }
  if (r.options.empty()) r.options = "-";
  r.disposition = d;
  if (sink_) {
    sink_(r);
  } else {
    trace_.push_back(std::move(r));
  }
}

void Simulation::transmit(LinkIndex link, InterfacePoint from, Envelope envelope) {
  const SimplexLink& l = topology_.links().at(link);
  if (!(l.from == from)) {
    const Node& n = topology_.nodes().at(from.node);
    fail(SimErrc::kWrongLink, "link '" + l.name + "' does not originate at " + n.name + ":" +
                                  (from.interface < n.interfaces.size() ? n.interfaces[from.interface].name : "?"));
  }
  LinkCounters& c = counters_[link];
  LinkState& st = links_[link];
  const std::uint64_t packet = next_packet_++;
  ++c.injected;
  if (st.queue.size() >= l.queue_cap) {
    ++c.lost_overflow;
    record(cause_, packet, from.node, from.interface, link, envelope, Disposition::kLostOverflow);
    return;
  }
  record(cause_, packet, from.node, from.interface, link, envelope, Disposition::kEnqueued);
  st.queue.emplace_back(packet, std::move(envelope));
  ++c.queued;
  c.max_queue = std::max(c.max_queue, st.queue.size());
  if (!st.busy) start_service(link);
}

void Simulation::start_service(LinkIndex link) {
  LinkState& st = links_[link];
  st.busy = true;
  Event e;
  e.time = now_ + topology_.links()[link].serialization_time(st.queue.front().second.segment.encoded_size());
  e.kind = EventKind::kLinkDequeue;
  e.index = link;
  push_event(std::move(e));
}

void Simulation::on_dequeue(LinkIndex link) {
  const SimplexLink& l = topology_.links()[link];
  LinkState& st = links_[link];
  LinkCounters& c = counters_[link];
  auto [packet, env] = std::move(st.queue.front());
  st.queue.pop_front();
  --c.queued;
  // 53 random bits give a uniform double in [0, 1).
  const double u = static_cast<double>(st.rng() >> 11) * 0x1.0p-53;
  if (u < l.loss_rate) {
    ++c.lost_random;
    record(EventKind::kLinkDequeue, packet, l.from.node, l.from.interface, link, env, Disposition::kLostRandom);
  } else {
    ++c.propagating;
    Event e;
    e.time = now_ + l.prop_delay;
    e.kind = EventKind::kLinkDelivery;
    e.index = link;
    e.packet = packet;
    e.envelope = std::move(env);
    push_event(std::move(e));
  }
  if (!st.queue.empty()) {
    start_service(link);
  } else {
    st.busy = false;
  }
}

void Simulation::on_delivery(LinkIndex link, std::uint64_t packet, Envelope envelope) {
  const SimplexLink& l = topology_.links()[link];
  LinkCounters& c = counters_[link];
  --c.propagating;
  ++c.delivered;
  record(EventKind::kLinkDelivery, packet, l.to.node, l.to.interface, link, envelope, Disposition::kDelivered);
  const Node& n = topology_.nodes()[l.to.node];
  if (n.kind == NodeKind::kRouter) {
    if (n.processing_delay > 0) {
      const NodeIndex router = l.to.node;
      schedule(now_ + n.processing_delay,
               [this, router, env = std::move(envelope)]() mutable { forward_at_router(router, std::move(env)); });
    } else {
      forward_at_router(l.to.node, std::move(envelope));
    }
    return;
  }
  Endpoint* ep = endpoints_[l.to.node].get();
  if (!ep) return;
  apply(l.to.node, ep->on_segment(l.to.interface, envelope, now_));
}

void Simulation::forward_at_router(NodeIndex router, Envelope envelope) {
  auto link = topology_.next_link(router, std::nullopt, envelope.dst_addr);
  const auto& n = topology_.nodes().at(router);
  if (!link) {
    ++no_route_drops_;
    record(EventKind::kLinkDelivery, next_packet_++, router, static_cast<InterfaceId>(n.interfaces.size()),
           std::nullopt, envelope, Disposition::kNoRoute);
    return;
  }
  const SimplexLink& l = topology_.links()[*link];
  transmit(*link, l.from, std::move(envelope));
}

void Simulation::on_tick(NodeIndex node) {
  if (Endpoint* ep = endpoints_[node].get()) apply(node, ep->on_tick(now_));
}

void Simulation::call_endpoint(NodeIndex node, const std::function<Actions(Endpoint&)>& fn) {
  Endpoint* ep = endpoints_.at(node).get();
  if (!ep) fail(SimErrc::kInvalidTopology, "node '" + topology_.nodes().at(node).name + "' has no endpoint");
  apply(node, fn(*ep));
}

void Simulation::apply(NodeIndex node, Actions actions) {
  for (Action& a : actions) {
    if (auto* emit = std::get_if<Emit>(&a)) {
      auto link = topology_.next_link(node, emit->interface, emit->envelope.dst_addr);
      if (!link) {
        ++no_route_drops_;
        record(cause_, next_packet_++, node, emit->interface, std::nullopt, emit->envelope,
               Disposition::kNoRoute);
        continue;
      }
      transmit(*link, {node, emit->interface}, std::move(emit->envelope));
    } else if (auto* arm = std::get_if<ArmTimer>(&a)) {
      const double at = std::max(arm->deadline, now_);
      if (pending_ticks_[node].insert(at).second) {
        Event e;
        e.time = at;
        e.kind = EventKind::kEndpointTick;
        e.index = node;
        push_event(std::move(e));
      }
    } else if (observer_) {
      observer_(node, a);
    }
  }
}

Simulation::RunResult Simulation::run_until(double end_time) {
  if (end_time < now_) fail(SimErrc::kEventInPast, "run_until target precedes the current time");
  stopped_ = false;
  RunResult result;
  while (!heap_.empty() && !stopped_) {
    if (heap_.front().time > end_time) break;
    std::pop_heap(heap_.begin(), heap_.end(), LaterFirst{});
    Event e = std::move(heap_.back());
    heap_.pop_back();
    now_ = e.time;
    ++executed_;
    ++result.events_executed;
    cause_ = e.kind;
    switch (e.kind) {
      case EventKind::kLinkDequeue: on_dequeue(e.index); break;
      case EventKind::kLinkDelivery: on_delivery(e.index, e.packet, std::move(e.envelope)); break;
      case EventKind::kEndpointTick:
        pending_ticks_[e.index].erase(e.time);
        on_tick(e.index);
        break;
      case EventKind::kAppCall: e.fn(); break;
    }
    cause_ = EventKind::kAppCall;
    if (post_event_) post_event_();
  }
  result.final_time = now_;
  result.drained = heap_.empty();
  return result;
}

}  // namespace detcp
