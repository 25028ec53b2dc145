#include <random>

#include "doctest.h"
#include "support.hpp"

using namespace detcp;
using detcp::test::Pair;
using detcp::test::Sent;

namespace {

const Address kClientTx = Address::parse("10.0.1.1");
const Address kClientRx = Address::parse("10.0.2.1");
const Address kServerRx = Address::parse("10.0.1.2");
const Address kServerTx = Address::parse("10.0.2.2");

// Opens a->b:80 and runs until both sides are established.
ConnHandle connect(Pair& p, std::uint16_t port = 80) {
  ConnHandle h;
  p.call(0, [&](Endpoint& e) {
    auto [conn, out] = e.open_active(4000, kServerRx, port, p.now());
    h = conn;
    return out;
  });
  p.run(p.now() + 0.1);
  return h;
}

std::optional<ConnHandle> server_conn(Pair& p) {
  for (auto h : p.ep(1).connections()) return h;
  return std::nullopt;
}

bool is_data(const Sent& s) { return !s.envelope.segment.payload.empty(); }

std::vector<Sent> data_from(const Pair& p, int who) {
  std::vector<Sent> out;
  for (const Sent& s : p.from(who)) {
    if (is_data(s)) out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("dual-simplex open carries both options and keeps directions") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  const ConnHandle h = connect(p);

  REQUIRE(p.sent.size() >= 3);
  const Sent& syn = p.sent[0];
  CHECK(syn.from == 0);
  CHECK(syn.interface == 0);
  CHECK(syn.envelope.segment.flags == SegmentFlags{Flag::kSyn});
  CHECK(syn.envelope.src_addr == kClientTx);
  CHECK(syn.envelope.dst_addr == kServerRx);
  CHECK(syn.envelope.segment.complementary_addr() == kClientRx);
  REQUIRE(syn.envelope.segment.connection_id());

  const Sent& synack = p.sent[1];
  CHECK(synack.from == 1);
  CHECK(synack.interface == 1);
  CHECK(synack.envelope.segment.flags == SegmentFlags{Flag::kSyn, Flag::kAck});
  CHECK(synack.envelope.src_addr == kServerTx);
  CHECK(synack.envelope.dst_addr == kClientRx);
  CHECK(synack.envelope.segment.connection_id() == syn.envelope.segment.connection_id());
  CHECK(synack.envelope.segment.complementary_addr() == kServerRx);

  CHECK(p.sent[2].envelope.segment.flags == SegmentFlags{Flag::kAck});
  CHECK(p.wrong_direction == 0);

  const auto sh = server_conn(p);
  REQUIRE(sh);
  const Connection& a = p.ep(0).connection(h);
  const Connection& b = p.ep(1).connection(*sh);
  CHECK(a.state() == ConnState::kEstablished);
  CHECK(b.state() == ConnState::kEstablished);
  CHECK(a.conn_id() == b.conn_id());
  // both ends hold the same six addresses, mirrored
  CHECK(a.six_tuple().normalized() == b.six_tuple().mirrored().normalized());
  CHECK(a.six_tuple().comp_src == kClientRx);
  CHECK(a.six_tuple().comp_dst == kServerTx);
  CHECK(b.six_tuple().orig_dst == kClientRx);
  CHECK(b.six_tuple().comp_dst == kClientTx);

  CHECK(p.ep(0).select_egress_interface(h, SegmentKind::kAck) == 0);
  CHECK(p.ep(1).select_egress_interface(*sh, SegmentKind::kData) == 1);
}

TEST_CASE("duplex peers fall back to the four-tuple") {
  EndpointConfig a;
  a.name = "a";
  a.interfaces = {test::itf(0, "10.9.0.1", InterfaceRole::kDuplex)};
  a.original_addr = Address::parse("10.9.0.1");
  EndpointConfig b = a;
  b.name = "b";
  b.interfaces = {test::itf(0, "10.9.0.2", InterfaceRole::kDuplex)};
  b.original_addr = Address::parse("10.9.0.2");
  b.listen_ports = {80};
  Pair p(a, b);
  p.call(0, [&](Endpoint& e) { return e.open_active(4000, b.original_addr, 80, 0).second; });
  p.run(0.1);
  CHECK_FALSE(p.sent[0].envelope.segment.complementary_addr());
  const auto sh = server_conn(p);
  REQUIRE(sh);
  const SixTuple& t = p.ep(1).connection(*sh).six_tuple();
  CHECK_FALSE(t.comp_src);
  CHECK_FALSE(t.comp_dst);
  CHECK(t.orig_dst == a.original_addr);
}

TEST_CASE("open and listen errors") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  p.call(0, [&](Endpoint& e) { return e.open_active(4000, kServerRx, 80, 0).second; });
  try {
    p.ep(0).open_active(4000, kServerRx, 80, 0);
    FAIL("second open succeeded");
  } catch (const EndpointError& e) {
    CHECK(e.code() == EndpointErrc::kPortInUse);
  }
  try {
    p.ep(1).open_passive(80);
    FAIL("second listen succeeded");
  } catch (const EndpointError& e) {
    CHECK(e.code() == EndpointErrc::kPortInUse);
  }

  EndpointConfig deaf;
  deaf.name = "deaf";
  deaf.interfaces = {test::itf(0, "10.8.0.1", InterfaceRole::kReceiveOnly)};
  deaf.original_addr = Address::parse("10.8.0.1");
  Endpoint e(deaf);
  try {
    e.open_active(1, kServerRx, 80, 0);
    FAIL("open without a sending interface");
  } catch (const EndpointError& err) {
    CHECK(err.code() == EndpointErrc::kNoSendInterface);
  }

  EndpointConfig bad = test::dual_simplex_client();
  bad.complementary_addr = Address::parse("10.0.1.1");
  CHECK_THROWS_AS(Endpoint{bad}, EndpointError);
}

TEST_CASE("send before established and unknown connections") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  ConnHandle h;
  p.call(0, [&](Endpoint& e) {
    auto r = e.open_active(4000, kServerRx, 80, 0);
    h = r.first;
    return r.second;
  });
  try {
    p.ep(0).send_data(h, test::pattern(10), 0);
    FAIL("send in SYN_SENT");
  } catch (const EndpointError& e) {
    CHECK(e.code() == EndpointErrc::kNotEstablished);
  }
  CHECK_THROWS_AS(p.ep(0).connection(ConnHandle{99}), EndpointError);
  CHECK(p.ep(1).on_tick(0).empty());
}

TEST_CASE("refusals") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  // SYN for a port nobody listens on
  p.call(0, [&](Endpoint& e) { return e.open_active(4000, kServerRx, 81, 0).second; });
  p.run(0.01);
  REQUIRE(p.from(1).size() == 1);
  CHECK(p.from(1)[0].envelope.segment.flags.has(Flag::kRst));
  CHECK(p.from(1)[0].interface == 1);
  CHECK(p.ep(1).stats().not_found == 1);

  // stray segment without options
  Envelope stray{kClientTx, kServerRx, {}};
  stray.segment.flags = {Flag::kAck};
  stray.segment.source_port = 7;
  stray.segment.dest_port = 9;
  stray.segment.ack = 1;
  CHECK_FALSE(p.ep(1).demultiplex(stray).found());
  const Actions out = p.ep(1).on_segment(0, stray, 0.02);
  REQUIRE(out.size() == 1);
  CHECK(std::get<Emit>(out[0]).envelope.segment.flags.has(Flag::kRst));
  CHECK(p.ep(1).stats().not_found == 2);
}

TEST_CASE("demultiplex lookup order") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  const ConnHandle h = connect(p);
  const Connection& a = p.ep(0).connection(h);

  Segment seg;
  seg.flags = {Flag::kAck};
  seg.source_port = 80;
  seg.dest_port = 4000;
  seg.ack = a.snd_nxt();

  // from the address the client sends to (its view of the peer's original)
  Envelope plain{kServerRx, kClientRx, seg};
  CHECK(p.ep(0).demultiplex(plain).step == DemuxStep::kTuple);
  // from the peer's sending address: the learned complementary match
  Envelope comp{kServerTx, kClientRx, seg};
  CHECK(p.ep(0).demultiplex(comp).step == DemuxStep::kComplementary);
  // an unrelated source with the connection id still lands
  seg.options = {SegmentOption::connection_id(a.conn_id())};
  Envelope odd{Address::parse("192.0.2.1"), kClientRx, seg};
  const DemuxResult r = p.ep(0).demultiplex(odd);
  CHECK(r.step == DemuxStep::kConnectionId);
  CHECK(r.conn == h);
  // a SYN to a listener
  Segment syn;
  syn.flags = {Flag::kSyn};
  syn.source_port = 5555;
  syn.dest_port = 80;
  const DemuxResult l = p.ep(1).demultiplex({kClientTx, kServerRx, syn});
  CHECK(l.step == DemuxStep::kListener);
  CHECK(l.listener_port == 80);
}

TEST_CASE("segmentation of a small write") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  const ConnHandle h = connect(p);
  const std::size_t before = p.sent.size();
  p.call(0, [&](Endpoint& e) { return e.send_data(h, test::pattern(3000), p.now()); });
  std::vector<std::uint32_t> seqs;
  for (std::size_t i = before; i < p.sent.size(); ++i) {
    const Segment& s = p.sent[i].envelope.segment;
    CHECK(s.payload.size() == 1000);
    seqs.push_back(s.seq);
  }
  REQUIRE(seqs.size() == 3);
  const std::uint32_t isn = p.ep(0).connection(h).iss();
  CHECK(seqs[0] == isn + 1);
  CHECK(seqs[1] == isn + 1001);
  CHECK(seqs[2] == isn + 2001);
  CHECK(p.ep(0).connection(h).timer_deadline(TimerKind::kRetransmit));
  p.run(p.now() + 1);
  CHECK(p.delivered[1] == test::pattern(3000));
}

TEST_CASE("zero peer window holds data and arms the persist timer") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  p.filter = [](const Sent& s, Envelope& env) {
    if (s.from == 1) env.segment.window = 0;
    return true;
  };
  const ConnHandle h = connect(p);
  REQUIRE(p.ep(0).connection(h).peer_window() == 0);
  const std::size_t before = p.sent.size();
  p.call(0, [&](Endpoint& e) { return e.send_data(h, test::pattern(3000), p.now()); });
  CHECK(p.sent.size() == before);
  CHECK(p.ep(0).connection(h).timer_deadline(TimerKind::kPersist));
}

TEST_CASE("third duplicate ACK triggers one fast retransmission") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  const ConnHandle h = connect(p);
  const std::uint32_t lost_seq = p.ep(0).connection(h).iss() + 1 + 2000;  // third segment
  int drops = 0;
  p.filter = [&](const Sent& s, Envelope& env) {
    if (s.from == 0 && env.segment.seq == lost_seq && !env.segment.payload.empty() && drops == 0) {
      ++drops;
      return false;
    }
    return true;
  };
  const double t0 = p.now();
  p.call(0, [&](Endpoint& e) { return e.send_data(h, test::pattern(10000), p.now()); });
  p.run(t0 + 0.1);  // well inside the 200 ms RTO floor

  int copies = 0;
  for (const Sent& s : data_from(p, 0)) copies += s.envelope.segment.seq == lost_seq;
  CHECK(copies == 2);
  const ConnectionStats& st = p.ep(0).connection(h).stats();
  CHECK(st.retransmissions == 1);
  CHECK(st.fast_retransmits == 1);
  CHECK(st.timeouts == 0);
  CHECK(p.delivered[1] == test::pattern(10000));
  // receiver ACKs out-of-order arrivals at once, with SACK
  bool saw_sack = false;
  for (const Sent& s : p.from(1)) saw_sack |= !s.envelope.segment.sack_blocks().empty();
  CHECK(saw_sack);
}

TEST_CASE("retransmission timeout resends snd_una once and backs off") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  const ConnHandle h = connect(p);
  bool blackhole = true;
  p.filter = [&](const Sent& s, Envelope&) { return !(blackhole && s.from == 0); };
  p.call(0, [&](Endpoint& e) { return e.send_data(h, test::pattern(500), p.now()); });
  const Connection& c = p.ep(0).connection(h);
  // one clean handshake sample: srtt + 4 rttvar, floored at 200 ms
  const double rto0 = c.rto();
  CHECK(rto0 == doctest::Approx(std::max(0.2, c.srtt() + 4 * c.rttvar())));

  // a tail probe may go out (and vanish) first; stop just short of the timer
  while (p.step(*c.timer_deadline(TimerKind::kRetransmit) - 1e-9)) {
  }
  const double deadline = *c.timer_deadline(TimerKind::kRetransmit);
  const std::size_t before = p.sent.size();
  p.run(deadline);
  CHECK(c.stats().timeouts == 1);
  REQUIRE(p.sent.size() == before + 1);
  CHECK(p.sent[before].time == deadline);
  CHECK(p.sent[before].envelope.segment.seq == c.iss() + 1);
  CHECK(c.rto() == doctest::Approx(std::min(2 * rto0, 60.0)));
  CHECK(*c.timer_deadline(TimerKind::kRetransmit) == doctest::Approx(deadline + 2 * rto0));

  blackhole = false;
  p.run(p.now() + 5);
  CHECK(p.delivered[1] == test::pattern(500));
  CHECK(c.stats().rtt_samples_from_retransmitted == 0);
}

TEST_CASE("four-segment close and TIME_WAIT") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  std::vector<std::pair<int, TransitionRecord>> log;
  p.ep(0).set_trace([&](const TransitionRecord& r) { log.emplace_back(0, r); });
  p.ep(1).set_trace([&](const TransitionRecord& r) { log.emplace_back(1, r); });
  const ConnHandle h = connect(p);
  const auto sh = server_conn(p);
  REQUIRE(sh);
  p.call(0, [&](Endpoint& e) { return e.send_data(h, test::pattern(1500), p.now()); });
  p.run(p.now() + 0.2);

  const std::size_t mark = p.sent.size();
  p.call(0, [&](Endpoint& e) { return e.close_connection(h, p.now()); });
  p.run(p.now() + 0.05);
  CHECK(p.ep(1).connection(*sh).state() == ConnState::kCloseWait);
  CHECK(p.ep(0).connection(h).state() == ConnState::kFinWait2);
  p.call(1, [&](Endpoint& e) { return e.close_connection(*sh, p.now()); });
  p.run(p.now() + 0.05);

  std::vector<std::pair<int, std::string>> close;
  for (std::size_t i = mark; i < p.sent.size(); ++i) {
    close.emplace_back(p.sent[i].from, p.sent[i].envelope.segment.flags.to_string());
  }
  const std::vector<std::pair<int, std::string>> want{{0, "AF"}, {1, "A"}, {1, "AF"}, {0, "A"}};
  CHECK(close == want);
  for (std::size_t i = mark; i < p.sent.size(); ++i) CHECK(p.sent[i].interface == (p.sent[i].from == 0 ? 0u : 1u));

  CHECK(p.ep(0).connection(h).state() == ConnState::kTimeWait);
  CHECK(p.ep(1).connection(*sh).state() == ConnState::kClosed);
  p.run(p.now() + 2 * 5.0 + 0.1);
  CHECK(p.ep(0).connection(h).state() == ConnState::kClosed);
  bool closed_signal = false;
  for (auto& [who, s] : p.signals) closed_signal |= who == 0 && s.event == ConnEvent::kClosed;
  CHECK(closed_signal);

  std::vector<ConnState> client, server;
  for (auto& [who, r] : log) {
    CHECK(is_legal_transition(r.from, r.to));
    (who == 0 ? client : server).push_back(r.to);
  }
  using S = ConnState;
  CHECK(client == std::vector<S>{S::kSynSent, S::kEstablished, S::kFinWait1, S::kFinWait2, S::kTimeWait, S::kClosed});
  CHECK(server == std::vector<S>{S::kSynRcvd, S::kEstablished, S::kCloseWait, S::kLastAck, S::kClosed});

  try {
    p.ep(0).close_connection(h, p.now());
    FAIL("close on a closed connection");
  } catch (const EndpointError& e) {
    CHECK(e.code() == EndpointErrc::kAlreadyClosing);
  }
}

TEST_CASE("simultaneous close passes through CLOSING") {
  Pair p(test::dual_simplex_client(), test::dual_simplex_server());
  const ConnHandle h = connect(p);
  const auto sh = server_conn(p);
  REQUIRE(sh);
  std::vector<ConnState> seen[2];
  p.ep(0).set_trace([&](const TransitionRecord& r) { seen[0].push_back(r.to); });
  p.ep(1).set_trace([&](const TransitionRecord& r) { seen[1].push_back(r.to); });
  p.call(0, [&](Endpoint& e) { return e.close_connection(h, p.now()); });
  p.call(1, [&](Endpoint& e) { return e.close_connection(*sh, p.now()); });
  p.run(p.now() + 0.05);
  using S = ConnState;
  for (auto& s : seen) {
    REQUIRE(s.size() >= 3);
    CHECK(std::vector<S>(s.begin(), s.begin() + 3) == std::vector<S>{S::kFinWait1, S::kClosing, S::kTimeWait});
  }
}

TEST_CASE("transition table") {
  using S = ConnState;
  CHECK(is_legal_transition(S::kListen, S::kSynRcvd));
  CHECK(is_legal_transition(S::kSynSent, S::kEstablished));
  CHECK(is_legal_transition(S::kFinWait1, S::kClosing));
  CHECK_FALSE(is_legal_transition(S::kClosed, S::kEstablished));
  CHECK_FALSE(is_legal_transition(S::kTimeWait, S::kEstablished));
  CHECK_FALSE(is_legal_transition(S::kCloseWait, S::kFinWait1));
  CHECK(to_string(S::kFinWait2) == "FIN_WAIT_2");
}

TEST_CASE("delivery across the sequence wrap under loss") {
  auto cfg = test::dual_simplex_client();
  cfg.transport.initial_seq = 0xFFFFFFFFu - 4999;
  Pair p(cfg, test::dual_simplex_server());
  const ConnHandle h = connect(p);
  std::mt19937_64 rng(3);
  p.filter = [&](const Sent&, Envelope&) { return (rng() % 100) >= 5; };
  CHECK(p.ep(0).connection(h).iss() == 0xFFFFFFFFu - 4999);
  const Bytes data = test::pattern(60000, 9);
  p.call(0, [&](Endpoint& e) { return e.send_data(h, data, p.now()); });
  p.run(p.now() + 30);
  CHECK(p.delivered[1] == data);
  CHECK(p.ep(0).connection(h).stats().rtt_samples_from_retransmitted == 0);
  CHECK(p.ep(0).connection(h).stats().karn_skipped > 0);
  CHECK(p.wrong_direction == 0);
}
