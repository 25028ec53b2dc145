#include <cmath>

#include "doctest.h"
#include "detcp/netsim.hpp"

using namespace detcp;

namespace {

NodeSpec host(const std::string& name, std::vector<InterfaceSpec> itfs) {
  return NodeSpec{name, NodeKind::kEndpoint, std::move(itfs), 0};
}

InterfaceSpec itf(const std::string& name, const char* addr, InterfaceRole role = InterfaceRole::kDuplex) {
  return InterfaceSpec{name, Address::parse(addr), role};
}

LinkSpec link(const std::string& name, PortRef from, PortRef to, double bps = 100e6, double delay = 0.005) {
  LinkSpec l;
  l.name = name;
  l.from = std::move(from);
  l.to = std::move(to);
  l.capacity_bps = bps;
  l.prop_delay = delay;
  return l;
}

// a:eth0 <-> b:eth0 as two mirrored simplex links.
TopologySpec duplex_pair(double loss = 0, std::size_t queue = 64) {
  TopologySpec t;
  t.nodes = {host("a", {itf("eth0", "10.0.0.1")}), host("b", {itf("eth0", "10.0.0.2")})};
  t.links = {link("ab", {"a", "eth0"}, {"b", "eth0"}), link("ba", {"b", "eth0"}, {"a", "eth0"})};
  for (auto& l : t.links) {
    l.loss_rate = loss;
    l.queue_cap = queue;
  }
  return t;
}

TopologySpec dual_simplex() {
  TopologySpec t;
  t.nodes = {host("a", {itf("tx", "10.1.0.1", InterfaceRole::kSendOnly), itf("rx", "10.2.0.1", InterfaceRole::kReceiveOnly)}),
             host("b", {itf("rx", "10.1.0.2", InterfaceRole::kReceiveOnly), itf("tx", "10.2.0.2", InterfaceRole::kSendOnly)})};
  t.links = {link("fwd", {"a", "tx"}, {"b", "rx"}, 50e6, 0.002), link("rev", {"b", "tx"}, {"a", "rx"}, 20e6, 0.003)};
  return t;
}

Envelope data_envelope(std::size_t payload, std::uint32_t seq = 0) {
  Envelope e;
  e.src_addr = Address::parse("10.0.0.1");
  e.dst_addr = Address::parse("10.0.0.2");
  e.segment.flags = {Flag::kAck};
  e.segment.seq = seq;
  e.segment.payload.resize(payload);
  return e;
}

SimErrc build_error(const TopologySpec& t) {
  try {
    build_topology(t);
  } catch (const SimError& e) {
    return e.code();
  }
  FAIL("topology built");
  return SimErrc::kInvalidTopology;
}

}  // namespace

TEST_CASE("duplex link becomes two mirrored simplex links") {
  const Topology topo = build_topology(duplex_pair());
  REQUIRE(topo.links().size() == 2);
  CHECK(topo.links()[0].from == topo.links()[1].to);
  CHECK(topo.links()[0].to == topo.links()[1].from);
  CHECK(topo.next_link(0, 0, Address::parse("10.0.0.2")) == 0u);
  CHECK(topo.next_link(1, 0, Address::parse("10.0.0.1")) == 1u);
}

TEST_CASE("opposite simplex links keep their own parameters") {
  const Topology topo = build_topology(dual_simplex());
  CHECK(topo.links()[0].capacity_bps == 50e6);
  CHECK(topo.links()[1].capacity_bps == 20e6);
  CHECK(topo.path(0, 0, Address::parse("10.1.0.2")) == std::vector<LinkIndex>{0});
  CHECK(topo.path(1, 1, Address::parse("10.2.0.1")) == std::vector<LinkIndex>{1});
  // nothing leaves a's receive-only interface
  CHECK_FALSE(topo.next_link(0, 1, Address::parse("10.1.0.2")));
}

TEST_CASE("topology validation errors") {
  TopologySpec dangling = dual_simplex();
  dangling.links.pop_back();
  CHECK(build_error(dangling) == SimErrc::kDanglingInterface);

  // b's only way out leads to c, never back to a
  TopologySpec no_reverse = dual_simplex();
  no_reverse.nodes.push_back(host("c", {itf("rx", "10.3.0.1", InterfaceRole::kReceiveOnly)}));
  no_reverse.links[1].to = {"c", "rx"};
  no_reverse.nodes[0].interfaces.pop_back();
  no_reverse.required_paths = {{"f", "a", Address::parse("10.1.0.1"), Address::parse("10.1.0.2"), true},
                               {"f", "b", Address::parse("10.2.0.2"), Address::parse("10.1.0.1"), false}};
  CHECK(build_error(no_reverse) == SimErrc::kNoReversePath);

  TopologySpec no_forward = duplex_pair();
  no_forward.required_paths = {{"f", "a", Address::parse("10.0.0.1"), Address::parse("10.7.7.7"), true}};
  CHECK(build_error(no_forward) == SimErrc::kNoForwardPath);

  TopologySpec wrong_dir = dual_simplex();
  wrong_dir.links[0].from = {"a", "rx"};
  CHECK(build_error(wrong_dir) == SimErrc::kInvalidTopology);

  TopologySpec bad_node = duplex_pair();
  bad_node.links[0].to = {"c", "eth0"};
  CHECK(build_error(bad_node) == SimErrc::kInvalidTopology);

  // two routers pointing a destination at each other
  TopologySpec loop;
  loop.nodes = {host("a", {itf("eth0", "10.0.0.1")}),
                NodeSpec{"r1", NodeKind::kRouter, {itf("x", "10.0.1.1"), itf("y", "10.0.1.2")}, 0},
                NodeSpec{"r2", NodeKind::kRouter, {itf("x", "10.0.2.1")}, 0}};
  loop.links = {link("a_r1", {"a", "eth0"}, {"r1", "x"}), link("r1_a", {"r1", "x"}, {"a", "eth0"}),
                link("r1_r2", {"r1", "y"}, {"r2", "x"}), link("r2_r1", {"r2", "x"}, {"r1", "y"})};
  loop.routes = {{"r1", Address::parse("10.9.0.1"), "r1_r2"}, {"r2", Address::parse("10.9.0.1"), "r2_r1"}};
  CHECK(build_error(loop) == SimErrc::kRouteLoop);

  TopologySpec foreign_route = duplex_pair();
  foreign_route.routes = {{"a", Address::parse("10.0.0.2"), "ba"}};
  CHECK(build_error(foreign_route) == SimErrc::kInvalidTopology);
}

TEST_CASE("delivery time is serialization plus propagation") {
  Simulation sim(build_topology(duplex_pair()), 1);
  sim.set_tracing(true);
  sim.schedule(0.25, [&] { sim.transmit(0, {0, 0}, data_envelope(1000)); });
  sim.run_until(10);
  REQUIRE(sim.trace().size() == 2);
  const TraceRecord& d = sim.trace()[1];
  CHECK(d.disposition == Disposition::kDelivered);
  CHECK(data_envelope(1000).segment.encoded_size() == 1019);
  const double want = 0.25 + 8.0 * 1019 / 1e8 + 0.005;
  CHECK(d.time == want);
}

TEST_CASE("two-router chain adds per-hop delays") {
  TopologySpec t;
  t.nodes = {host("a", {itf("eth0", "10.0.0.1")}),
             NodeSpec{"r1", NodeKind::kRouter, {itf("w", "10.0.1.1"), itf("e", "10.0.1.2")}, 0},
             NodeSpec{"r2", NodeKind::kRouter, {itf("w", "10.0.2.1"), itf("e", "10.0.2.2")}, 0.0001},
             host("b", {itf("eth0", "10.0.0.2")})};
  t.links = {link("a_r1", {"a", "eth0"}, {"r1", "w"}, 100e6, 0.001), link("r1_r2", {"r1", "e"}, {"r2", "w"}, 10e6, 0.002),
             link("r2_b", {"r2", "e"}, {"b", "eth0"}, 50e6, 0.003), link("b_a", {"b", "eth0"}, {"a", "eth0"}, 1e6, 0.01)};
  Simulation sim(build_topology(t), 1);
  sim.set_tracing(true);
  sim.schedule(0, [&] { sim.transmit(0, {0, 0}, data_envelope(1000)); });
  sim.run_until(10);
  const TraceRecord& last = sim.trace().back();
  CHECK(last.node == "b");
  CHECK(last.disposition == Disposition::kDelivered);
  const double bits = 8.0 * 1019;
  const double want = (bits / 100e6 + 0.001) + (bits / 10e6 + 0.002) + 0.0001 + (bits / 50e6 + 0.003);
  CHECK(last.time == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("unknown destination at a router is a NO_ROUTE drop") {
  TopologySpec t;
  t.nodes = {host("a", {itf("eth0", "10.0.0.1")}), NodeSpec{"r", NodeKind::kRouter, {itf("w", "10.0.1.1")}, 0}};
  t.links = {link("a_r", {"a", "eth0"}, {"r", "w"}), link("r_a", {"r", "w"}, {"a", "eth0"})};
  Simulation sim(build_topology(t), 1);
  sim.set_tracing(true);
  Envelope e = data_envelope(10);
  e.dst_addr = Address::parse("172.16.0.1");
  sim.schedule(0, [&] { sim.transmit(0, {0, 0}, e); });
  sim.run_until(1);
  CHECK(sim.no_route_drops() == 1);
  CHECK(sim.trace().back().disposition == Disposition::kNoRoute);
}

TEST_CASE("transmitting against a link's direction is WRONG_LINK") {
  Simulation sim(build_topology(dual_simplex()), 1);
  try {
    sim.transmit(1, {0, 1}, data_envelope(10));  // into a's receive-only side
    FAIL("transmit accepted");
  } catch (const SimError& e) {
    CHECK(e.code() == SimErrc::kWrongLink);
  }
}

TEST_CASE("FIFO order, overflow and conservation") {
  Simulation sim(build_topology(duplex_pair(0.2, 8)), 42);
  sim.set_tracing(true);
  sim.schedule(0, [&] {
    for (std::uint32_t i = 0; i < 20; ++i) sim.transmit(0, {0, 0}, data_envelope(500, i));
  });
  sim.schedule(0.5, [&] {
    for (std::uint32_t i = 20; i < 25; ++i) sim.transmit(0, {0, 0}, data_envelope(500, i));
  });
  const auto r = sim.run_until(0.5);
  const LinkCounters& c = sim.link_counters()[0];
  CHECK(c.injected == 25);
  CHECK(c.lost_overflow == 12);  // 8 fit, in-service one included
  CHECK(c.injected == c.delivered + c.lost_random + c.lost_overflow + c.in_flight());
  CHECK(c.in_flight() > 0);
  CHECK_FALSE(r.drained);
  sim.run_until(10);
  CHECK(c.in_flight() == 0);
  CHECK(c.injected == c.delivered + c.lost_random + c.lost_overflow);

  std::vector<std::uint32_t> delivered;
  std::map<std::uint64_t, int> terminal;
  for (const TraceRecord& t : sim.trace()) {
    if (t.disposition == Disposition::kDelivered) delivered.push_back(t.seq);
    if (t.disposition != Disposition::kEnqueued) ++terminal[t.packet];
  }
  CHECK(std::is_sorted(delivered.begin(), delivered.end()));
  CHECK(terminal.size() == 25);
  for (auto& [p, n] : terminal) CHECK(n == 1);
}

TEST_CASE("loss fraction converges") {
  const double p = 0.02;
  const int n = 20000;
  TopologySpec t = duplex_pair(p, n + 1);
  Simulation sim(build_topology(t), 7);
  sim.schedule(0, [&] {
    for (int i = 0; i < n; ++i) sim.transmit(0, {0, 0}, data_envelope(0));
  });
  sim.run_until(100);
  const double observed = static_cast<double>(sim.link_counters()[0].lost_random) / n;
  CHECK(std::abs(observed - p) <= 3 * std::sqrt(p * (1 - p) / n));
}

TEST_CASE("event ordering and run bounds") {
  Simulation sim(build_topology(duplex_pair()), 1);
  CHECK(sim.run_until(0).drained);
  std::vector<int> order;
  for (int i = 0; i < 5; ++i) sim.schedule(1.0, [&order, i] { order.push_back(i); });
  sim.schedule(0.5, [&] { order.push_back(-1); });
  const auto r = sim.run_until(2);
  CHECK(order == std::vector<int>{-1, 0, 1, 2, 3, 4});
  CHECK(r.final_time == 1.0);
  CHECK(r.events_executed == 6);
  try {
    sim.schedule(0.1, [] {});
    FAIL("past event accepted");
  } catch (const SimError& e) {
    CHECK(e.code() == SimErrc::kEventInPast);
  }
  CHECK_THROWS_AS(sim.run_until(0.5), SimError);
}

TEST_CASE("per-link seeds are independent and stable") {
  CHECK(derive_seed(1, "link/ab") == derive_seed(1, "link/ab"));
  CHECK(derive_seed(1, "link/ab") != derive_seed(2, "link/ab"));
  CHECK(derive_seed(1, "link/ab") != derive_seed(1, "link/ba"));

  auto losses = [](TopologySpec t) {
    Simulation sim(build_topology(t), 9);
    sim.set_tracing(true);
    sim.schedule(0, [&] {
      for (std::uint32_t i = 0; i < 200; ++i) sim.transmit(0, {0, 0}, data_envelope(0, i));
    });
    sim.run_until(10);
    std::vector<std::uint32_t> lost;
    for (const auto& r : sim.trace()) {
      if (r.disposition == Disposition::kLostRandom) lost.push_back(r.seq);
    }
    return lost;
  };
  TopologySpec base = duplex_pair(0.1, 1000);
  TopologySpec more = base;
  more.nodes.push_back(host("c", {itf("eth0", "10.0.0.3")}));
  more.links.push_back(link("ac", {"c", "eth0"}, {"a", "eth0"}));
  more.links.back().loss_rate = 0.5;
  more.nodes[0].interfaces.push_back(itf("eth1", "10.0.0.4"));
  more.links.push_back(link("ca", {"a", "eth1"}, {"c", "eth0"}));
  const auto a = losses(base);
  CHECK_FALSE(a.empty());
  CHECK(a == losses(base));
  CHECK(a == losses(more));
}

TEST_CASE("trace lines are tab separated with a fixed column order") {
  const std::string h = trace_header();
  CHECK(h.rfind("time\t", 0) == 0);
  CHECK(std::count(h.begin(), h.end(), '\t') == 15);
  TraceRecord r;
  r.time = 1.5;
  r.node = "a";
  r.interface = "eth0";
  r.link = "ab";
  r.flags = {Flag::kAck};
  r.options = "CID";
  const std::string line = format_trace(r);
  CHECK(std::count(line.begin(), line.end(), '\t') == 15);
  CHECK(line.rfind("1.500000000\t", 0) == 0);
}
