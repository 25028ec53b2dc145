#include "detcp/endpoint.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "detcp/seq.hpp"

namespace detcp {

namespace {

using S = ConnState;

constexpr std::pair<ConnState, ConnState> kTransitions[] = {
    {S::kClosed, S::kListen},       {S::kClosed, S::kSynSent},      {S::kListen, S::kSynRcvd},
    {S::kListen, S::kSynSent},      {S::kListen, S::kClosed},       {S::kSynSent, S::kSynRcvd},
    {S::kSynSent, S::kEstablished}, {S::kSynSent, S::kClosed},      {S::kSynRcvd, S::kEstablished},
    {S::kSynRcvd, S::kFinWait1},    {S::kSynRcvd, S::kListen},      {S::kSynRcvd, S::kClosed},
    {S::kEstablished, S::kFinWait1}, {S::kEstablished, S::kCloseWait}, {S::kEstablished, S::kClosed},
    {S::kFinWait1, S::kFinWait2},   {S::kFinWait1, S::kClosing},    {S::kFinWait1, S::kTimeWait},
    {S::kFinWait1, S::kClosed},     {S::kFinWait2, S::kTimeWait},   {S::kFinWait2, S::kClosed},
    {S::kClosing, S::kTimeWait},    {S::kClosing, S::kClosed},      {S::kCloseWait, S::kLastAck},
    {S::kCloseWait, S::kClosed},    {S::kLastAck, S::kClosed},      {S::kTimeWait, S::kClosed},
};

std::size_t timer_index(TimerKind k) { return static_cast<std::size_t>(k); }

}  // namespace

std::string_view to_string(InterfaceRole role) {
  switch (role) {
    case InterfaceRole::kDuplex: return "duplex";
    case InterfaceRole::kSendOnly: return "send_only";
    case InterfaceRole::kReceiveOnly: return "receive_only";
  }
  return "?";
}

std::optional<InterfaceRole> parse_interface_role(std::string_view text) {
  if (text == "duplex") return InterfaceRole::kDuplex;
  if (text == "send_only" || text == "tx") return InterfaceRole::kSendOnly;
  if (text == "receive_only" || text == "rx") return InterfaceRole::kReceiveOnly;
  return std::nullopt;
}

std::string SixTuple::to_string() const {
  auto opt = [](const std::optional<Address>& a) { return a ? a->to_string() : std::string("-"); };
  return "(" + orig_src.to_string() + ", " + opt(comp_src) + ", " + std::to_string(src_port) + ", " +
         orig_dst.to_string() + ", " + opt(comp_dst) + ", " + std::to_string(dst_port) + ")";
}

std::string_view to_string(ConnState state) {
  switch (state) {
    case S::kClosed: return "CLOSED";
    case S::kListen: return "LISTEN";
    case S::kSynSent: return "SYN_SENT";
    case S::kSynRcvd: return "SYN_RCVD";
    case S::kEstablished: return "ESTABLISHED";
    case S::kFinWait1: return "FIN_WAIT_1";
    case S::kFinWait2: return "FIN_WAIT_2";
    case S::kClosing: return "CLOSING";
    case S::kCloseWait: return "CLOSE_WAIT";
    case S::kLastAck: return "LAST_ACK";
    case S::kTimeWait: return "TIME_WAIT";
  }
  return "?";
}

std::span<const std::pair<ConnState, ConnState>> legal_transitions() { return kTransitions; }

bool is_legal_transition(ConnState from, ConnState to) {
  return std::find(std::begin(kTransitions), std::end(kTransitions), std::pair{from, to}) !=
         std::end(kTransitions);
}

std::string_view to_string(ConnEvent event) {
  switch (event) {
    case ConnEvent::kEstablished: return "ESTABLISHED";
    case ConnEvent::kPeerClosed: return "PEER_CLOSED";
    case ConnEvent::kClosed: return "CLOSED";
    case ConnEvent::kReset: return "RESET";
  }
  return "?";
}

std::string_view to_string(TimerKind kind) {
  switch (kind) {
    case TimerKind::kRetransmit: return "RTO";
    case TimerKind::kTimeWait: return "TIME_WAIT";
    case TimerKind::kDelayedAck: return "DELAYED_ACK";
    case TimerKind::kPersist: return "PERSIST";
    case TimerKind::kLossProbe: return "LOSS_PROBE";
  }
  return "?";
}

std::string_view to_string(EndpointErrc code) {
  switch (code) {
    case EndpointErrc::kInvalidConfig: return "INVALID_CONFIG";
    case EndpointErrc::kPortInUse: return "PORT_IN_USE";
    case EndpointErrc::kNoSendInterface: return "NO_SEND_INTERFACE";
    case EndpointErrc::kNotEstablished: return "NOT_ESTABLISHED";
    case EndpointErrc::kSendBufferFull: return "SEND_BUFFER_FULL";
    case EndpointErrc::kAlreadyClosing: return "ALREADY_CLOSING";
    case EndpointErrc::kUnknownConnection: return "UNKNOWN_CONNECTION";
  }
  return "?";
}

std::size_t Connection::send_buffer_space() const {
  const std::size_t cap = opts_.send_buffer_cap;
  return send_buf_.size() >= cap ? 0 : cap - send_buf_.size();
}

// ---------------------------------------------------------------------------
// Construction and configuration.

Endpoint::Endpoint(EndpointConfig config) : config_(std::move(config)), rng_(config_.seed) {
  auto fail = [this](const std::string& msg) {
    throw EndpointError(EndpointErrc::kInvalidConfig, config_.name + ": " + msg);
  };
  std::set<InterfaceId> ids;
  std::set<Address> addrs;
  bool any_sender = false;
  for (const auto& itf : config_.interfaces) {
    if (!ids.insert(itf.id).second) fail("duplicate interface id " + std::to_string(itf.id));
    if (!addrs.insert(itf.addr).second) fail("duplicate interface address " + itf.addr.to_string());
    any_sender = any_sender || can_send(itf.role);
  }
  auto check_binding = [&](const AddressBinding& b) {
    const InterfaceConfig* orig = interface_for(b.original);
    if (orig == nullptr) fail("original address " + b.original.to_string() + " is not a local interface");
    // A node with no sending interface at all is legal; it just cannot open.
    if (!can_send(orig->role) && any_sender) fail("original address must be on a sending interface");
    if (b.complementary) {
      const InterfaceConfig* comp = interface_for(*b.complementary);
      if (comp == nullptr) fail("complementary address " + b.complementary->to_string() + " is not local");
      if (comp->id == orig->id) fail("complementary address shares the original's interface");
      if (!can_receive(comp->role)) fail("complementary address must be on a receiving interface");
    }
  };
  check_binding({config_.original_addr, config_.complementary_addr});
  for (const auto& [port, b] : config_.port_bindings) check_binding(b);
  if (config_.transport.mss == 0 || config_.transport.mss > kMaxPayloadSize) fail("mss out of range");
  if (config_.transport.send_window < config_.transport.mss) fail("send window smaller than one segment");
  if (config_.transport.dup_ack_threshold < 1 || config_.transport.dup_ack_threshold > 3) {
    fail("dup_ack_threshold must be 1..3");
  }
  for (std::uint16_t port : config_.listen_ports) listeners_.insert(port);
}

const InterfaceConfig* Endpoint::find_interface(InterfaceId id) const {
  for (const auto& itf : config_.interfaces) {
    if (itf.id == id) return &itf;
  }
  return nullptr;
}

const InterfaceConfig* Endpoint::interface_for(Address addr) const {
  for (const auto& itf : config_.interfaces) {
    if (itf.addr == addr) return &itf;
  }
  return nullptr;
}

AddressBinding Endpoint::binding_for(std::uint16_t port) const {
  if (auto it = config_.port_bindings.find(port); it != config_.port_bindings.end()) return it->second;
  return {config_.original_addr, config_.complementary_addr};
}

std::uint64_t Endpoint::fresh_conn_id() {
  for (;;) {
    const std::uint64_t id = rng_();
    if (id != 0 && !by_id_.contains(id)) return id;
  }
}

Connection& Endpoint::conn_ref(ConnHandle h) {
  if (h.value >= conns_.size()) {
    throw EndpointError(EndpointErrc::kUnknownConnection, "no connection " + std::to_string(h.value));
  }
  return *conns_[h.value];
}

const Connection& Endpoint::connection(ConnHandle h) const {
  if (h.value >= conns_.size()) {
    throw EndpointError(EndpointErrc::kUnknownConnection, "no connection " + std::to_string(h.value));
  }
  return *conns_[h.value];
}

std::vector<ConnHandle> Endpoint::connections() const {
  std::vector<ConnHandle> out;
  for (const auto& c : conns_) out.push_back(c->handle_);
  return out;
}

Connection& Endpoint::create_connection(const SixTuple& tuple, std::uint64_t conn_id) {
  auto c = std::make_unique<Connection>();
  c->handle_ = ConnHandle{static_cast<std::uint32_t>(conns_.size())};
  c->tuple_ = tuple;
  c->conn_id_ = conn_id;
  c->opts_ = config_.transport;
  c->rto_ = c->opts_.initial_rto;
  c->cwnd_ = std::min<std::uint64_t>(c->opts_.send_window, 10ull * c->opts_.mss);
  c->iss_ = c->opts_.initial_seq ? *c->opts_.initial_seq : static_cast<std::uint32_t>(rng_());
  if (const InterfaceConfig* itf = interface_for(tuple.orig_src)) c->egress_ = itf->id;
  by_id_[conn_id] = c->handle_;
  by_ports_[{tuple.src_port, tuple.dst_port}].push_back(c->handle_);
  conns_.push_back(std::move(c));
  return *conns_.back();
}

void Endpoint::transition(Connection& c, ConnState to, double now, std::string_view cause) {
  const ConnState from = c.state_;
  assert(is_legal_transition(from, to));
  c.state_ = to;
  if (trace_) trace_({now, c.handle_, c.conn_id_, from, to, std::string(cause), c.egress_});
}

void Endpoint::release(Connection& c) {
  if (c.released_) return;
  c.released_ = true;
  if (auto it = by_id_.find(c.conn_id_); it != by_id_.end() && it->second == c.handle_) by_id_.erase(it);
  auto& bucket = by_ports_[{c.tuple_.src_port, c.tuple_.dst_port}];
  std::erase(bucket, c.handle_);
  c.send_buf_.clear();
  c.rtx_.clear();
  c.ooo_.clear();
  c.sack_recent_.clear();
  c.in_flight_ = 0;
  c.lost_count_ = 0;
  for (auto& t : c.timers_) t = {};
}

// ---------------------------------------------------------------------------
// Egress and demultiplexing.

InterfaceId Endpoint::select_egress_interface(ConnHandle h, SegmentKind) const {
  const Connection& c = connection(h);
  const InterfaceConfig* itf = interface_for(c.tuple_.orig_src);
  if (itf == nullptr || !can_send(itf->role)) {
    throw EndpointError(EndpointErrc::kNoSendInterface,
                        config_.name + ": no sending interface for " + c.tuple_.orig_src.to_string());
  }
  return itf->id;
}

DemuxResult Endpoint::demultiplex(const Envelope& env) const {
  const Segment& seg = env.segment;
  DemuxResult result;

  std::optional<ConnHandle> by_tuple;
  DemuxStep tuple_step = DemuxStep::kNone;
  if (auto it = by_ports_.find({seg.dest_port, seg.source_port}); it != by_ports_.end()) {
    for (ConnHandle h : it->second) {
      const SixTuple& t = conns_[h.value]->tuple_;
      if (env.dst_addr != t.orig_src && env.dst_addr != t.local_receive()) continue;
      if (env.src_addr == t.orig_dst) {
        by_tuple = h;
        tuple_step = DemuxStep::kTuple;
        break;
      }
      if (t.comp_dst && env.src_addr == *t.comp_dst && !by_tuple) {
        by_tuple = h;
        tuple_step = DemuxStep::kComplementary;
      }
    }
  }

  if (auto id = seg.connection_id()) {
    if (auto it = by_id_.find(*id); it != by_id_.end()) {
      const SixTuple& t = conns_[it->second.value]->tuple_;
      if (t.src_port == seg.dest_port && t.dst_port == seg.source_port) {
        result.step = DemuxStep::kConnectionId;
        result.conn = it->second;
        return result;
      }
    }
  }
  if (by_tuple) {
    result.step = tuple_step;
    result.conn = by_tuple;
    return result;
  }
  if (seg.flags.has(Flag::kSyn) && !seg.flags.has(Flag::kAck) && listeners_.contains(seg.dest_port)) {
    result.step = DemuxStep::kListener;
    result.listener_port = seg.dest_port;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Application calls.

std::pair<ConnHandle, Actions> Endpoint::open_active(std::uint16_t local_port, Address remote,
                                                     std::uint16_t remote_port, double now) {
  const AddressBinding b = binding_for(local_port);
  const InterfaceConfig* itf = interface_for(b.original);
  if (itf == nullptr || !can_send(itf->role)) {
    throw EndpointError(EndpointErrc::kNoSendInterface, config_.name + ": no interface can send");
  }
  if (auto it = by_ports_.find({local_port, remote_port}); it != by_ports_.end()) {
    for (ConnHandle h : it->second) {
      const SixTuple& t = conns_[h.value]->tuple_;
      if (t.orig_src == b.original && t.orig_dst == remote) {
        throw EndpointError(EndpointErrc::kPortInUse,
                            config_.name + ": four-tuple in use on port " + std::to_string(local_port));
      }
    }
  }

  SixTuple tuple{b.original, b.complementary, local_port, remote, std::nullopt, remote_port};
  if (tuple.comp_src == tuple.orig_src) tuple.comp_src.reset();
  Connection& c = create_connection(tuple, fresh_conn_id());
  Actions out;
  transition(c, S::kSynSent, now, "app:open_active");
  c.rtx_.push_back(TxSegment{.start = 0, .length = 1, .syn = true});
  c.snd_nxt_ = 1;
  c.in_flight_ = 1;
  send_syn(c, c.rtx_.back(), now, out);
  return {c.handle_, std::move(out)};
}

std::uint16_t Endpoint::open_passive(std::uint16_t port) {
  if (!listeners_.insert(port).second) {
    throw EndpointError(EndpointErrc::kPortInUse, config_.name + ": already listening on " + std::to_string(port));
  }
  return port;
}

Actions Endpoint::send_data(ConnHandle h, std::span<const std::uint8_t> data, double now) {
  Connection& c = conn_ref(h);
  if ((c.state_ != S::kEstablished && c.state_ != S::kCloseWait) || c.fin_queued_) {
    throw EndpointError(EndpointErrc::kNotEstablished,
                        "send on connection in " + std::string(to_string(c.state_)));
  }
  if (data.size() > c.send_buffer_space()) {
    throw EndpointError(EndpointErrc::kSendBufferFull, "send buffer full");
  }
  c.send_buf_.insert(c.send_buf_.end(), data.begin(), data.end());
  Actions out;
  pump(c, now, out);
  return out;
}

Actions Endpoint::close_connection(ConnHandle h, double now) {
  Connection& c = conn_ref(h);
  Actions out;
  switch (c.state_) {
    case S::kEstablished:
    case S::kSynRcvd:
      c.fin_queued_ = true;
      transition(c, S::kFinWait1, now, "app:close");
      break;
    case S::kCloseWait:
      c.fin_queued_ = true;
      transition(c, S::kLastAck, now, "app:close");
      break;
    default:
      throw EndpointError(EndpointErrc::kAlreadyClosing,
                          "close on connection in " + std::string(to_string(c.state_)));
  }
  pump(c, now, out);
  return out;
}

// ---------------------------------------------------------------------------
// Timers.

void Endpoint::arm(Connection& c, TimerKind kind, double deadline, Actions& out) {
  auto& t = c.timers_[timer_index(kind)];
  t.deadline = deadline;
  if (!t.announced || deadline < *t.announced) {
    t.announced = deadline;
    out.push_back(ArmTimer{c.handle_, kind, deadline});
  }
}

void Endpoint::disarm(Connection& c, TimerKind kind) { c.timers_[timer_index(kind)].deadline.reset(); }

Actions Endpoint::on_tick(double now) {
  Actions out;
  for (auto& ptr : conns_) {
    Connection& c = *ptr;
    if (c.released_) continue;
    for (auto& t : c.timers_) {
      if (t.announced && *t.announced <= now) t.announced.reset();
    }
    auto expired = [&](TimerKind k) {
      auto& t = c.timers_[timer_index(k)];
      if (!t.deadline || *t.deadline > now) return false;
      t.deadline.reset();
      return true;
    };
    if (expired(TimerKind::kTimeWait)) {
      transition(c, S::kClosed, now, "timer:2msl");
      out.push_back(Signal{c.handle_, ConnEvent::kClosed});
      release(c);
      continue;
    }
    if (expired(TimerKind::kRetransmit)) on_retransmit_timeout(c, now, out);
    if (expired(TimerKind::kPersist)) on_persist_timeout(c, now, out);
    if (expired(TimerKind::kLossProbe)) on_loss_probe(c, now, out);
    if (expired(TimerKind::kDelayedAck) && c.ack_pending_) send_ack(c, out);
    if (c.released_) continue;
    for (std::size_t k = 0; k < c.timers_.size(); ++k) {
      auto& t = c.timers_[k];
      if (t.deadline && !t.announced) {
        t.announced = t.deadline;
        out.push_back(ArmTimer{c.handle_, static_cast<TimerKind>(k), *t.deadline});
      }
    }
  }
  return out;
}

void Endpoint::on_retransmit_timeout(Connection& c, double now, Actions& out) {
  if (c.rtx_.empty()) return;
  ++c.stats_.timeouts;
  c.rto_ = std::min(2 * c.rto_, c.opts_.max_rto);
  if (c.state_ == S::kSynSent || c.state_ == S::kSynRcvd) {
    send_syn(c, c.rtx_.front(), now, out);
    return;
  }
  if (c.opts_.aimd) {
    c.ssthresh_ = std::max<std::uint64_t>(c.in_flight_ / 2, 2ull * c.opts_.mss);
    c.cwnd_ = c.opts_.mss;
    c.in_recovery_ = false;
  }
  for (auto& e : c.rtx_) {
    if (!e.sacked && !e.lost) mark_lost(c, e);
  }
  c.collapsed_ = true;
  c.dup_acks_ = 0;
  pump(c, now, out);
  arm(c, TimerKind::kRetransmit, now + c.rto_, out);
}

void Endpoint::on_persist_timeout(Connection& c, double now, Actions& out) {
  const std::uint64_t data_end = c.data_base_ + c.send_buf_.size();
  if (c.snd_nxt_ >= data_end || !c.rtx_.empty()) return;
  // One-byte window probe past the advertised edge.
  TxSegment probe{.start = c.snd_nxt_, .length = 1};
  c.rtx_.push_back(probe);
  c.snd_nxt_ += 1;
  transmit_entry(c, c.rtx_.back(), now, false, out);
}

// ---------------------------------------------------------------------------
// Segment construction.

Segment Endpoint::make_segment(const Connection& c, SegmentFlags flags, std::uint64_t seq_offset) const {
  Segment seg;
  seg.flags = flags;
  seg.source_port = c.tuple_.src_port;
  seg.dest_port = c.tuple_.dst_port;
  seg.seq = c.wrap(seq_offset);
  if (c.state_ != S::kSynSent) {
    seg.flags.set(Flag::kAck);
    seg.ack = c.rcv_nxt();
    seg.window = advertised_window(c);
  }
  if (flags.has(Flag::kSyn) && c.tuple_.comp_src) {
    seg.options.push_back(SegmentOption::complementary_addr(*c.tuple_.comp_src));
  }
  seg.options.push_back(SegmentOption::connection_id(c.conn_id_));
  if (seg.flags.has(Flag::kAck) && !flags.has(Flag::kSyn)) {
    auto blocks = sack_blocks(c);
    if (!blocks.empty()) seg.options.push_back(SegmentOption::sack_blocks(blocks));
  }
  return seg;
}

void Endpoint::emit(Connection& c, Segment seg, SegmentKind kind, Actions& out) {
  const InterfaceId itf = select_egress_interface(c.handle_, kind);
  ++c.stats_.segments_sent;
  if (seg.flags.has(Flag::kAck)) {
    c.ack_pending_ = false;
    c.unacked_segments_ = 0;
    disarm(c, TimerKind::kDelayedAck);
  }
  out.push_back(Emit{itf, Envelope{c.tuple_.orig_src, c.tuple_.orig_dst, std::move(seg)}});
}

void Endpoint::send_ack(Connection& c, Actions& out) {
  emit(c, make_segment(c, {}, c.snd_nxt_), SegmentKind::kAck, out);
}

void Endpoint::send_syn(Connection& c, TxSegment& entry, double now, Actions& out) {
  if (entry.send_order == 0) {
    entry.first_sent = now;
  } else {
    ++entry.retransmits;
    ++c.stats_.retransmissions;
  }
  entry.last_sent = now;
  entry.prev_send_order = entry.send_order;
  entry.send_order = ++c.send_counter_;
  const bool synack = c.state_ == S::kSynRcvd;
  emit(c, make_segment(c, {Flag::kSyn}, 0), synack ? SegmentKind::kSynAck : SegmentKind::kSyn, out);
  arm(c, TimerKind::kRetransmit, now + c.rto_, out);
}

void Endpoint::refuse(InterfaceId, const Envelope& env, Actions& out) {
  const Segment& in = env.segment;
  if (in.flags.has(Flag::kRst)) return;
  const AddressBinding b = binding_for(in.dest_port);
  const InterfaceConfig* itf = interface_for(b.original);
  if (itf == nullptr || !can_send(itf->role)) return;

  Segment rst;
  rst.source_port = in.dest_port;
  rst.dest_port = in.source_port;
  if (in.flags.has(Flag::kAck)) {
    rst.flags = {Flag::kRst};
    rst.seq = in.ack;
  } else {
    rst.flags = {Flag::kRst, Flag::kAck};
    rst.ack = in.seq + in.sequence_length();
  }
  if (auto id = in.connection_id()) rst.options.push_back(SegmentOption::connection_id(*id));
  const Address dst = in.complementary_addr().value_or(env.src_addr);
  ++stats_.rst_sent;
  out.push_back(Emit{itf->id, Envelope{b.original, dst, std::move(rst)}});
}

// ---------------------------------------------------------------------------
// Sender.

std::uint64_t Endpoint::effective_window(const Connection& c) const {
  if (c.collapsed_) return c.opts_.mss;
  if (c.opts_.aimd) return std::max<std::uint64_t>(std::min(c.cwnd_, c.opts_.send_window), c.opts_.mss);
  return c.opts_.send_window;
}

void Endpoint::transmit_entry(Connection& c, TxSegment& e, double now, bool retransmit, Actions& out) {
  SegmentFlags flags;
  if (e.fin) flags.set(Flag::kFin);
  Segment seg = make_segment(c, flags, e.start);
  const std::uint32_t payload = e.payload_length();
  if (payload > 0) {
    const auto from = static_cast<std::ptrdiff_t>(e.start - c.data_base_);
    seg.payload.assign(c.send_buf_.begin() + from, c.send_buf_.begin() + from + payload);
    ++c.stats_.data_segments_sent;
    if (!c.stats_.first_data_sent) c.stats_.first_data_sent = now;
  }
  if (retransmit) {
    ++e.retransmits;
    ++c.stats_.retransmissions;
    if (!c.collapsed_) ++c.stats_.fast_retransmits;
  } else {
    e.first_sent = now;
  }
  e.last_sent = now;
  e.prev_send_order = e.send_order;
  e.send_order = ++c.send_counter_;
  c.in_flight_ += e.length;
  emit(c, std::move(seg), e.fin ? SegmentKind::kFin : (payload > 0 ? SegmentKind::kData : SegmentKind::kAck), out);
  if (!c.timers_[timer_index(TimerKind::kRetransmit)].deadline) {
    arm(c, TimerKind::kRetransmit, now + c.rto_, out);
  }
}

void Endpoint::pump(Connection& c, double now, Actions& out) {
  if (c.released_) return;
  if (c.state_ == S::kSynSent || c.state_ == S::kSynRcvd) return;
  const std::uint64_t window = effective_window(c);

  for (;;) {
    if (c.lost_count_ > 0) {
      auto it = std::find_if(c.rtx_.begin(), c.rtx_.end(), [](const TxSegment& e) { return e.lost; });
      assert(it != c.rtx_.end());
      if (c.in_flight_ > 0 && c.in_flight_ + it->length > window) break;
      it->lost = false;
      --c.lost_count_;
      if (it->syn) {
        c.in_flight_ += it->length;
        send_syn(c, *it, now, out);
      } else {
        transmit_entry(c, *it, now, true, out);
      }
      continue;
    }

    const std::uint64_t data_end = c.data_base_ + c.send_buf_.size();
    if (c.snd_nxt_ < data_end) {
      std::uint64_t len = std::min<std::uint64_t>(c.opts_.mss, data_end - c.snd_nxt_);
      if (c.in_flight_ > 0 && c.in_flight_ + len > window) break;
      const std::uint64_t used = c.snd_nxt_ - c.snd_una_;
      const std::uint64_t allowed = c.peer_window_ > used ? c.peer_window_ - used : 0;
      if (allowed < len) {
        if (allowed == 0 || !c.rtx_.empty()) {
          if (c.rtx_.empty()) arm(c, TimerKind::kPersist, now + c.rto_, out);
          break;
        }
        len = allowed;
      }
      disarm(c, TimerKind::kPersist);
      c.rtx_.push_back(TxSegment{.start = c.snd_nxt_, .length = static_cast<std::uint32_t>(len)});
      c.snd_nxt_ += len;
      transmit_entry(c, c.rtx_.back(), now, false, out);
      continue;
    }

    if (c.fin_queued_ && !c.fin_sent_) {
      c.fin_sent_ = true;
      c.rtx_.push_back(TxSegment{.start = c.snd_nxt_, .length = 1, .fin = true});
      c.snd_nxt_ += 1;
      transmit_entry(c, c.rtx_.back(), now, false, out);
    }
    break;
  }
  arm_loss_probe(c, now, out);
}

bool Endpoint::all_data_sent(const Connection& c) const {
  return c.snd_nxt_ >= c.data_base_ + c.send_buf_.size() && (!c.fin_queued_ || c.fin_sent_);
}

void Endpoint::arm_loss_probe(Connection& c, double now, Actions& out) {
  if (c.rtx_.empty() || !all_data_sent(c) || c.probed_at_ == c.snd_nxt_ || !c.has_rtt_) {
    disarm(c, TimerKind::kLossProbe);
    return;
  }
  const double at = now + std::max(2 * c.srtt_, 0.01);
  const auto& rto = c.timers_[timer_index(TimerKind::kRetransmit)].deadline;
  if (rto && at >= *rto) {
    disarm(c, TimerKind::kLossProbe);
    return;
  }
  arm(c, TimerKind::kLossProbe, at, out);
}

// Tail loss probe: resend the highest outstanding segment so a lost tail
// is repaired, or revealed, without waiting for the RTO.
void Endpoint::on_loss_probe(Connection& c, double now, Actions& out) {
  if (c.rtx_.empty() || !all_data_sent(c) || c.probed_at_ == c.snd_nxt_) return;
  c.probed_at_ = c.snd_nxt_;
  auto it = std::find_if(c.rtx_.rbegin(), c.rtx_.rend(), [](const TxSegment& e) { return !e.sacked; });
  if (it == c.rtx_.rend()) return;
  ++c.stats_.loss_probes;
  if (it->lost) {
    pump(c, now, out);
    return;
  }
  c.in_flight_ -= it->length;
  transmit_entry(c, *it, now, true, out);
}

void Endpoint::mark_lost(Connection& c, TxSegment& e) {
  e.lost = true;
  ++c.lost_count_;
  c.in_flight_ -= e.length;
}

void Endpoint::sample_rtt(Connection& c, double rtt) {
  auto& st = c.stats_;
  st.rtt_min = st.rtt_samples == 0 ? rtt : std::min(st.rtt_min, rtt);
  st.rtt_max = std::max(st.rtt_max, rtt);
  st.rtt_sum += rtt;
  ++st.rtt_samples;
  if (!c.has_rtt_) {
    c.srtt_ = rtt;
    c.rttvar_ = rtt / 2;
    c.has_rtt_ = true;
  } else {
    c.rttvar_ = 0.75 * c.rttvar_ + 0.25 * std::abs(c.srtt_ - rtt);
    c.srtt_ = 0.875 * c.srtt_ + 0.125 * rtt;
  }
  c.rto_ = std::clamp(c.srtt_ + 4 * c.rttvar_, c.opts_.min_rto, c.opts_.max_rto);
}

void Endpoint::detect_losses(Connection& c) {
  // A segment is lost once dup_ack_threshold segments sent after it have
  // been delivered; this covers lost retransmissions as well.
  // Paths deliver in order, so once nothing new is left to send a single
  // later delivery is enough (early retransmit).
  const unsigned k = all_data_sent(c) ? 1 : c.opts_.dup_ack_threshold;
  const std::uint64_t third = c.top_delivered_[k - 1];
  bool newly_lost = false;
  for (auto& e : c.rtx_) {
    if (e.send_order >= third) continue;
    if (!e.sacked && !e.lost) {
      mark_lost(c, e);
      newly_lost = true;
    }
  }

  if (c.dup_acks_ == c.opts_.dup_ack_threshold && !c.rtx_.empty()) {
    TxSegment& front = c.rtx_.front();
    if (!front.sacked && !front.lost && front.retransmits == 0) {
      mark_lost(c, front);
      newly_lost = true;
    }
  }
  if (newly_lost && c.opts_.aimd && !c.in_recovery_) {
    c.in_recovery_ = true;
    c.recovery_point_ = c.snd_nxt_;
    c.ssthresh_ = std::max<std::uint64_t>(c.cwnd_ / 2, 2ull * c.opts_.mss);
    c.cwnd_ = c.ssthresh_;
  }
}

bool Endpoint::process_ack(Connection& c, const Segment& seg, double now, Actions& out) {
  const std::uint64_t ack = unwrap_seq(seg.ack, c.iss_, c.snd_una_);
  if (ack > c.snd_nxt_) {
    send_ack(c, out);
    return false;
  }
  if (ack < c.snd_una_) return true;

  // An acknowledgement arriving sooner than any round trip since the last
  // retransmission must be for an earlier copy.
  auto order_of = [&](const TxSegment& e) {
    if (e.retransmits > 0 && c.stats_.rtt_samples > 0 && now - e.last_sent < c.stats_.rtt_min) {
      return e.prev_send_order;
    }
    return e.send_order;
  };
  auto note_delivered = [&](std::uint64_t order) {
    auto& top = c.top_delivered_;
    if (order <= top[2]) return;
    top[2] = order;
    std::sort(top.begin(), top.end(), std::greater<>());
  };

  const bool window_changed = seg.window_bytes() != c.peer_window_;
  c.peer_window_ = seg.window_bytes();
  const bool has_payload = !seg.payload.empty() || seg.flags.has(Flag::kFin) || seg.flags.has(Flag::kSyn);

  if (ack > c.snd_una_) {
    const std::uint64_t acked = ack - c.snd_una_;
    std::optional<double> sample;
    bool sampled_retransmit = false;
    while (!c.rtx_.empty() && c.rtx_.front().end() <= ack) {
      TxSegment& e = c.rtx_.front();
      if (!e.sacked && !e.lost) c.in_flight_ -= e.length;
      if (e.lost) --c.lost_count_;
      if (!e.sacked) {
        note_delivered(order_of(e));
        if (e.retransmits == 0) {
          sample = now - e.first_sent;
          sampled_retransmit = false;
        } else {
          sample.reset();
          sampled_retransmit = true;
        }
      }
      c.rtx_.pop_front();
    }
    if (!c.rtx_.empty() && c.rtx_.front().start < ack) {
      // Partial acknowledgement of the head segment.
      TxSegment& e = c.rtx_.front();
      const auto trimmed = static_cast<std::uint32_t>(ack - e.start);
      if (!e.sacked && !e.lost) c.in_flight_ -= trimmed;
      if (e.syn) e.syn = false;
      e.start = ack;
      e.length -= trimmed;
    }
    if (sample) {
      sample_rtt(c, *sample);
    } else if (sampled_retransmit) {
      ++c.stats_.karn_skipped;
    }
    // Drop acknowledged payload bytes from the send buffer.
    const std::uint64_t data_ack = std::min<std::uint64_t>(ack, c.data_base_ + c.send_buf_.size());
    if (data_ack > c.data_base_) {
      c.send_buf_.erase(c.send_buf_.begin(), c.send_buf_.begin() + static_cast<std::ptrdiff_t>(data_ack - c.data_base_));
      c.data_base_ = data_ack;
    }
    c.snd_una_ = ack;
    c.dup_acks_ = 0;
    c.collapsed_ = false;
    if (c.opts_.aimd) {
      if (c.in_recovery_ && ack >= c.recovery_point_) c.in_recovery_ = false;
      if (!c.in_recovery_) {
        if (c.cwnd_ < c.ssthresh_) {
          c.cwnd_ += acked;
        } else {
          c.cwnd_ += std::max<std::uint64_t>(1, std::uint64_t{c.opts_.mss} * c.opts_.mss / c.cwnd_);
        }
      }
    }
    if (c.rtx_.empty()) {
      disarm(c, TimerKind::kRetransmit);
    } else {
      arm(c, TimerKind::kRetransmit, now + c.rto_, out);
    }
  } else if (!has_payload && !window_changed && !c.rtx_.empty()) {
    ++c.dup_acks_;
    ++c.stats_.dup_acks;
  }

  for (const SackBlock& b : seg.sack_blocks()) {
    const std::uint64_t left = unwrap_seq(b.left, c.iss_, c.snd_una_);
    const std::uint64_t right = left + static_cast<std::uint32_t>(b.right - b.left);
    if (right > c.snd_nxt_ || left < c.snd_una_) continue;
    auto it = std::lower_bound(c.rtx_.begin(), c.rtx_.end(), left,
                               [](const TxSegment& e, std::uint64_t v) { return e.end() <= v; });
    for (; it != c.rtx_.end() && it->start < right; ++it) {
      if (it->sacked || it->start < left || it->end() > right) continue;
      it->sacked = true;
      if (it->lost) {
        it->lost = false;
        --c.lost_count_;
      } else {
        c.in_flight_ -= it->length;
      }
      note_delivered(order_of(*it));
    }
  }
  detect_losses(c);
  return true;
}

// ---------------------------------------------------------------------------
// Receiver.

std::uint16_t Endpoint::advertised_window(const Connection& c) const {
  // The application consumes in-order data immediately and out-of-order
  // data is confined to [rcv_nxt, rcv_nxt + recv_buffer), so the right edge
  // simply slides with rcv_nxt.
  return static_cast<std::uint16_t>(std::min<std::uint64_t>(c.opts_.recv_buffer / kWindowUnit, 0xFFFF));
}

std::vector<SackBlock> Endpoint::sack_blocks(const Connection& c) const {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& [start, bytes] : c.ooo_) {
    const std::uint64_t end = start + bytes.size();
    if (!ranges.empty() && ranges.back().second == start) {
      ranges.back().second = end;
    } else {
      ranges.emplace_back(start, end);
    }
  }
  if (c.fin_at_ && !c.fin_consumed_ && !ranges.empty() && ranges.back().second == *c.fin_at_) {
    ranges.back().second += 1;
  }
  // The range holding the newest arrival goes first, then other recently
  // changed ranges, then the highest ones; the option lists them in order.
  std::vector<std::size_t> chosen;
  auto choose = [&](std::size_t i) {
    if (chosen.size() < kMaxSackBlocks && std::find(chosen.begin(), chosen.end(), i) == chosen.end()) {
      chosen.push_back(i);
    }
  };
  for (std::uint64_t at : c.sack_recent_) {
    for (std::size_t i = 0; i < ranges.size(); ++i) {
      if (ranges[i].first <= at && at < ranges[i].second) choose(i);
    }
  }
  for (std::size_t i = ranges.size(); i-- > 0;) choose(i);
  std::sort(chosen.begin(), chosen.end());
  std::vector<SackBlock> blocks;
  for (std::size_t i : chosen) {
    blocks.push_back({c.irs_ + static_cast<std::uint32_t>(ranges[i].first),
                      c.irs_ + static_cast<std::uint32_t>(ranges[i].second)});
  }
  return blocks;
}

void Endpoint::process_payload(Connection& c, const Segment& seg, double now, Actions& out) {
  std::uint64_t start = unwrap_seq(seg.seq, c.irs_, c.rcv_nxt_);
  if (seg.flags.has(Flag::kSyn)) start += 1;
  const std::uint64_t end = start + seg.payload.size();
  if (seg.flags.has(Flag::kFin) && !c.fin_at_) c.fin_at_ = end;

  if (seg.payload.empty()) return;
  const bool had_gap = !c.ooo_.empty();
  const std::uint64_t limit = c.rcv_nxt_ + c.opts_.recv_buffer;

  if (end <= c.rcv_nxt_ || start >= limit) {
    // Duplicate or beyond the window: re-announce our state.
    c.ack_pending_ = true;
    send_ack(c, out);
    return;
  }

  const std::uint64_t lo = std::max(start, c.rcv_nxt_);
  const std::uint64_t hi = std::min(end, limit);
  auto slice = [&](std::uint64_t a, std::uint64_t b) {
    return Bytes(seg.payload.begin() + static_cast<std::ptrdiff_t>(a - start),
                 seg.payload.begin() + static_cast<std::ptrdiff_t>(b - start));
  };

  if (lo == c.rcv_nxt_) {
    Bytes data = slice(lo, hi);
    c.rcv_nxt_ = hi;
    // Pull in any buffered continuation.
    while (!c.ooo_.empty()) {
      auto it = c.ooo_.begin();
      const std::uint64_t s = it->first;
      const std::uint64_t e = s + it->second.size();
      if (s > c.rcv_nxt_) break;
      if (e > c.rcv_nxt_) {
        data.insert(data.end(), it->second.begin() + static_cast<std::ptrdiff_t>(c.rcv_nxt_ - s), it->second.end());
        c.rcv_nxt_ = e;
      }
      c.ooo_bytes_ -= it->second.size();
      c.ooo_.erase(it);
    }
    std::erase_if(c.sack_recent_, [&](std::uint64_t at) { return at < c.rcv_nxt_; });
    c.stats_.bytes_delivered += data.size();
    c.stats_.last_delivery = now;
    out.push_back(Deliver{c.handle_, std::move(data)});

    if (had_gap || !c.ooo_.empty()) {
      send_ack(c, out);
    } else {
      c.ack_pending_ = true;
      if (++c.unacked_segments_ >= c.opts_.ack_every) {
        send_ack(c, out);
      } else if (!c.timers_[timer_index(TimerKind::kDelayedAck)].deadline) {
        arm(c, TimerKind::kDelayedAck, now + c.opts_.delayed_ack, out);
      }
    }
    return;
  }

  // Out of order: store the parts not already held.
  std::erase(c.sack_recent_, lo);
  c.sack_recent_.push_front(lo);
  if (c.sack_recent_.size() > 2 * kMaxSackBlocks) c.sack_recent_.pop_back();
  std::uint64_t pos = lo;
  while (pos < hi) {
    auto next = c.ooo_.upper_bound(pos);
    if (next != c.ooo_.begin()) {
      auto prev = std::prev(next);
      const std::uint64_t prev_end = prev->first + prev->second.size();
      if (prev_end > pos) {
        pos = prev_end;
        continue;
      }
    }
    const std::uint64_t stop = next == c.ooo_.end() ? hi : std::min(hi, next->first);
    if (stop > pos) {
      c.ooo_bytes_ += stop - pos;
      c.ooo_.emplace(pos, slice(pos, stop));
    }
    pos = std::max(stop, pos);
    if (next != c.ooo_.end() && pos == next->first) pos = next->first + next->second.size();
  }
  send_ack(c, out);
}

bool Endpoint::process_fin(Connection& c, double now, Actions& out) {
  if (c.fin_consumed_ || !c.fin_at_ || c.rcv_nxt_ != *c.fin_at_) return false;
  c.rcv_nxt_ += 1;
  c.fin_consumed_ = true;
  send_ack(c, out);
  switch (c.state_) {
    case S::kEstablished:
      transition(c, S::kCloseWait, now, "rcv:FIN");
      break;
    case S::kFinWait1:
      if (c.fin_sent_ && c.snd_una_ == c.snd_nxt_) {
        transition(c, S::kTimeWait, now, "rcv:FIN+ACK");
        arm(c, TimerKind::kTimeWait, now + 2 * c.opts_.msl, out);
      } else {
        transition(c, S::kClosing, now, "rcv:FIN");
      }
      break;
    case S::kFinWait2:
      transition(c, S::kTimeWait, now, "rcv:FIN");
      arm(c, TimerKind::kTimeWait, now + 2 * c.opts_.msl, out);
      break;
    default:
      break;
  }
  out.push_back(Signal{c.handle_, ConnEvent::kPeerClosed});
  return true;
}

// ---------------------------------------------------------------------------
// Inbound segments.

Actions Endpoint::on_datagram(InterfaceId arrival, Address src, Address dst, std::span<const std::uint8_t> bytes,
                              double now) {
  Segment seg;
  try {
    seg = decode_segment(bytes);
  } catch (const WireError&) {
    ++stats_.malformed_drops;
    return {};
  }
  return on_segment(arrival, Envelope{src, dst, std::move(seg)}, now);
}

Actions Endpoint::on_segment(InterfaceId arrival, const Envelope& env, double now) {
  Actions out;
  const InterfaceConfig* itf = find_interface(arrival);
  if (itf == nullptr || !can_receive(itf->role)) {
    ++stats_.wrong_interface_drops;
    return out;
  }
  ++stats_.segments_received;
  if (env.segment.flags.has(Flag::kRst)) ++stats_.rst_received;

  const DemuxResult r = demultiplex(env);
  ++stats_.demux_by_step[static_cast<std::size_t>(r.step)];
  if (r.step == DemuxStep::kConnectionId) {
    // Count disagreement between the id and a plain tuple lookup.
    const Segment& seg = env.segment;
    if (auto it = by_ports_.find({seg.dest_port, seg.source_port}); it != by_ports_.end()) {
      for (ConnHandle h : it->second) {
        const SixTuple& t = conns_[h.value]->tuple_;
        if (h != *r.conn && env.src_addr == t.orig_dst &&
            (env.dst_addr == t.orig_src || env.dst_addr == t.local_receive())) {
          ++stats_.demux_conflicts;
          break;
        }
      }
    }
  }
  if (r.conn) {
    handle_segment(conn_ref(*r.conn), arrival, env, now, out);
  } else if (r.listener_port) {
    spawn_from_listener(*r.listener_port, arrival, env, now, out);
  } else {
    ++stats_.not_found;
    refuse(arrival, env, out);
  }
  return out;
}

void Endpoint::spawn_from_listener(std::uint16_t port, InterfaceId, const Envelope& env, double now,
                                   Actions& out) {
  const Segment& syn = env.segment;
  const AddressBinding b = binding_for(port);
  const InterfaceConfig* itf = interface_for(b.original);
  if (itf == nullptr || !can_send(itf->role)) return;

  SixTuple tuple;
  tuple.orig_src = b.original;
  tuple.comp_src = b.complementary;
  if (tuple.comp_src == tuple.orig_src) tuple.comp_src.reset();
  tuple.src_port = port;
  tuple.dst_port = syn.source_port;
  // Without the option the peer is a plain duplex host.
  if (auto comp = syn.complementary_addr(); comp && *comp != env.src_addr) {
    tuple.orig_dst = *comp;
    tuple.comp_dst = env.src_addr;
  } else {
    tuple.orig_dst = env.src_addr;
  }

  std::uint64_t id = syn.connection_id().value_or(0);
  if (id == 0 || by_id_.contains(id)) id = fresh_conn_id();
  Connection& c = create_connection(tuple, id);
  c.state_ = S::kListen;
  c.irs_ = syn.seq;
  c.rcv_nxt_ = 1;
  c.peer_window_ = syn.window_bytes();
  transition(c, S::kSynRcvd, now, "rcv:" + summarize(syn));
  c.rtx_.push_back(TxSegment{.start = 0, .length = 1, .syn = true});
  c.snd_nxt_ = 1;
  c.in_flight_ = 1;
  send_syn(c, c.rtx_.back(), now, out);
}

void Endpoint::handle_segment(Connection& c, InterfaceId, const Envelope& env, double now, Actions& out) {
  const Segment& seg = env.segment;
  if (c.released_) return;

  if (seg.flags.has(Flag::kRst)) {
    const bool acceptable = c.state_ == S::kSynSent
                                ? seg.flags.has(Flag::kAck) && unwrap_seq(seg.ack, c.iss_, 0) == c.snd_nxt_
                                : seq_diff(seg.seq, c.rcv_nxt()) >= 0 &&
                                      static_cast<std::uint64_t>(seq_diff(seg.seq, c.rcv_nxt())) <
                                          std::max<std::uint64_t>(c.opts_.recv_buffer, 1);
    if (!acceptable) return;
    transition(c, S::kClosed, now, "rcv:RST");
    out.push_back(Signal{c.handle_, ConnEvent::kReset});
    release(c);
    return;
  }

  switch (c.state_) {
    case S::kSynSent: {
      if (!seg.flags.has(Flag::kSyn)) return;
      if (seg.flags.has(Flag::kAck)) {
        if (unwrap_seq(seg.ack, c.iss_, 0) != 1) {
          refuse(0, env, out);
          return;
        }
        c.irs_ = seg.seq;
        c.rcv_nxt_ = 1;
        if (env.src_addr != c.tuple_.orig_dst) c.tuple_.comp_dst = env.src_addr;
        process_ack(c, seg, now, out);
        transition(c, S::kEstablished, now, "rcv:" + summarize(seg));
        send_ack(c, out);
        out.push_back(Signal{c.handle_, ConnEvent::kEstablished});
        pump(c, now, out);
      } else {
        // Simultaneous open.
        c.irs_ = seg.seq;
        c.rcv_nxt_ = 1;
        if (env.src_addr != c.tuple_.orig_dst) c.tuple_.comp_dst = env.src_addr;
        transition(c, S::kSynRcvd, now, "rcv:" + summarize(seg));
        send_syn(c, c.rtx_.front(), now, out);
      }
      return;
    }
    case S::kSynRcvd: {
      if (seg.flags.has(Flag::kSyn) && !seg.flags.has(Flag::kAck)) {
        // Peer retransmitted its SYN; our SYN+ACK was lost.
        send_syn(c, c.rtx_.front(), now, out);
        return;
      }
      if (!seg.flags.has(Flag::kAck)) return;
      if (unwrap_seq(seg.ack, c.iss_, 0) < 1) return;
      if (!process_ack(c, seg, now, out)) return;
      transition(c, S::kEstablished, now, "rcv:" + summarize(seg));
      out.push_back(Signal{c.handle_, ConnEvent::kEstablished});
      break;  // fall through to data handling
    }
    default: {
      if (seg.flags.has(Flag::kSyn)) {
        // Retransmitted SYN+ACK: our handshake ACK was lost.
        send_ack(c, out);
        return;
      }
      if (seg.flags.has(Flag::kAck) && !process_ack(c, seg, now, out)) return;
      break;
    }
  }

  const bool fin_done = c.fin_sent_ && c.snd_una_ == c.snd_nxt_;
  switch (c.state_) {
    case S::kFinWait1:
      if (fin_done) transition(c, S::kFinWait2, now, "rcv:ACK of FIN");
      break;
    case S::kClosing:
      if (fin_done) {
        transition(c, S::kTimeWait, now, "rcv:ACK of FIN");
        arm(c, TimerKind::kTimeWait, now + 2 * c.opts_.msl, out);
      }
      break;
    case S::kLastAck:
      if (fin_done) {
        transition(c, S::kClosed, now, "rcv:ACK of FIN");
        out.push_back(Signal{c.handle_, ConnEvent::kClosed});
        release(c);
        return;
      }
      break;
    case S::kTimeWait:
      if (seg.flags.has(Flag::kFin)) {
        send_ack(c, out);
        arm(c, TimerKind::kTimeWait, now + 2 * c.opts_.msl, out);
      }
      return;
    default:
      break;
  }

  const bool accepts_data =
      c.state_ == S::kEstablished || c.state_ == S::kFinWait1 || c.state_ == S::kFinWait2;
  if (accepts_data) {
    process_payload(c, seg, now, out);
    if (!process_fin(c, now, out) && seg.flags.has(Flag::kFin)) send_ack(c, out);
  } else if (!seg.payload.empty() || seg.flags.has(Flag::kFin)) {
    // Peer retransmitted data or FIN we already consumed.
    send_ack(c, out);
  }
  pump(c, now, out);
}

}  // namespace detcp
