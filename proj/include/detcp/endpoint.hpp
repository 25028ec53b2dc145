#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "detcp/wire.hpp"

namespace detcp {

enum class InterfaceRole { kDuplex, kSendOnly, kReceiveOnly };

constexpr bool can_send(InterfaceRole r) { return r != InterfaceRole::kReceiveOnly; }
constexpr bool can_receive(InterfaceRole r) { return r != InterfaceRole::kSendOnly; }
std::string_view to_string(InterfaceRole role);
std::optional<InterfaceRole> parse_interface_role(std::string_view text);

using InterfaceId = std::uint32_t;

struct InterfaceConfig {
  InterfaceId id = 0;
  Address addr;
  InterfaceRole role = InterfaceRole::kDuplex;
};

// The sending identity of a socket plus, for decoupled nodes, the address
// it receives on.
struct AddressBinding {
  Address original;
  std::optional<Address> complementary;
};

struct TransportOptions {
  std::uint32_t mss = 1000;
  // Fixed send window used in place of congestion control.
  std::uint64_t send_window = 64 * 1024;
  std::uint64_t recv_buffer = 4 * 1024 * 1024;
  std::uint64_t send_buffer_cap = 1024 * 1024;
  double initial_rto = 1.0;
  double min_rto = 0.2;
  double max_rto = 60.0;
  double delayed_ack = 0.05;
  unsigned ack_every = 2;
  unsigned dup_ack_threshold = 3;
  double msl = 5.0;
  // Reno-style AIMD on top of the fixed window.
  bool aimd = false;
  // Overrides the RNG-drawn initial sequence number (tests only).
  std::optional<std::uint32_t> initial_seq;
};

struct EndpointConfig {
  std::string name;
  std::vector<InterfaceConfig> interfaces;
  Address original_addr;
  std::optional<Address> complementary_addr;  // absent: single-duplex node
  std::set<std::uint16_t> listen_ports;
  // Per-local-port overrides of (original, complementary).
  std::map<std::uint16_t, AddressBinding> port_bindings;
  TransportOptions transport;
  std::uint64_t seed = 0;
};

// Connection identity, oriented from the owning endpoint: orig_src is where
// it sends from, comp_src where it receives; orig_dst is where it sends to,
// comp_dst where the peer sends from. Absent complementary fields mean the
// corresponding side is a single duplex interface.
struct SixTuple {
  Address orig_src;
  std::optional<Address> comp_src;
  std::uint16_t src_port = 0;
  Address orig_dst;
  std::optional<Address> comp_dst;
  std::uint16_t dst_port = 0;

  Address local_receive() const { return comp_src.value_or(orig_src); }
  Address remote_send() const { return comp_dst.value_or(orig_dst); }
  // The same connection as seen from the peer.
  SixTuple mirrored() const {
    return {remote_send(), orig_dst, dst_port, local_receive(), orig_src, src_port};
  }
  // Collapses absent complements so mirrored tuples compare equal.
  SixTuple normalized() const {
    return {orig_src, local_receive(), src_port, orig_dst, remote_send(), dst_port};
  }
  std::string to_string() const;

  bool operator==(const SixTuple&) const = default;
};

enum class ConnState {
  kClosed,
  kListen,
  kSynSent,
  kSynRcvd,
  kEstablished,
  kFinWait1,
  kFinWait2,
  kClosing,
  kCloseWait,
  kLastAck,
  kTimeWait,
};

std::string_view to_string(ConnState state);
// Edges of the standard TCP state diagram, including abort edges to CLOSED.
std::span<const std::pair<ConnState, ConnState>> legal_transitions();
bool is_legal_transition(ConnState from, ConnState to);

enum class ConnEvent { kEstablished, kPeerClosed, kClosed, kReset };
enum class TimerKind { kRetransmit, kTimeWait, kDelayedAck, kPersist, kLossProbe };
enum class SegmentKind { kSyn, kSynAck, kData, kAck, kFin, kRst };

std::string_view to_string(ConnEvent event);
std::string_view to_string(TimerKind kind);

struct ConnHandle {
  std::uint32_t value = 0;
  auto operator<=>(const ConnHandle&) const = default;
};

struct Emit {
  InterfaceId interface = 0;
  Envelope envelope;
};
struct Deliver {
  ConnHandle conn;
  Bytes data;
};
struct Signal {
  ConnHandle conn;
  ConnEvent event;
};
struct ArmTimer {
  ConnHandle conn;
  TimerKind kind;
  double deadline;
};
using Action = std::variant<Emit, Deliver, Signal, ArmTimer>;
using Actions = std::vector<Action>;

enum class EndpointErrc {
  kInvalidConfig,
  kPortInUse,
  kNoSendInterface,
  kNotEstablished,
  kSendBufferFull,
  kAlreadyClosing,
  kUnknownConnection,
};

std::string_view to_string(EndpointErrc code);

class EndpointError : public std::runtime_error {
 public:
  EndpointError(EndpointErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  EndpointErrc code() const { return code_; }

 private:
  EndpointErrc code_;
};

// One transmission unit on the retransmission queue. Offsets are 64-bit
// stream positions relative to the ISN (the SYN sits at offset 0).
struct TxSegment {
  std::uint64_t start = 0;
  std::uint32_t length = 0;  // sequence space consumed
  bool syn = false;
  bool fin = false;
  double first_sent = 0;
  double last_sent = 0;
  std::uint64_t send_order = 0;
  std::uint64_t prev_send_order = 0;  // order of the previous transmission
  std::uint32_t retransmits = 0;
  bool sacked = false;
  bool lost = false;

  std::uint64_t end() const { return start + length; }
  std::uint32_t payload_length() const { return length - (syn ? 1 : 0) - (fin ? 1 : 0); }
};

struct ConnectionStats {
  std::uint64_t segments_sent = 0;
  std::uint64_t data_segments_sent = 0;
  std::uint64_t retransmissions = 0;
  std::uint64_t fast_retransmits = 0;
  std::uint64_t timeouts = 0;
  std::uint64_t loss_probes = 0;
  std::uint64_t dup_acks = 0;
  std::uint64_t rtt_samples = 0;
  std::uint64_t karn_skipped = 0;
  // Karn's rule violations; must stay zero.
  std::uint64_t rtt_samples_from_retransmitted = 0;
  std::uint64_t bytes_delivered = 0;
  double rtt_min = 0;
  double rtt_max = 0;
  double rtt_sum = 0;
  std::optional<double> first_data_sent;
  std::optional<double> last_delivery;
};

class Endpoint;

class Connection {
 public:
  ConnState state() const { return state_; }
  const SixTuple& six_tuple() const { return tuple_; }
  std::uint64_t conn_id() const { return conn_id_; }

  std::uint32_t iss() const { return iss_; }
  std::uint32_t snd_una() const { return wrap(snd_una_); }
  std::uint32_t snd_nxt() const { return wrap(snd_nxt_); }
  std::uint32_t rcv_nxt() const { return irs_ + static_cast<std::uint32_t>(rcv_nxt_); }
  std::uint64_t bytes_in_flight() const { return in_flight_; }
  std::uint64_t peer_window() const { return peer_window_; }
  std::size_t send_buffered() const { return send_buf_.size(); }
  std::size_t send_buffer_space() const;
  const std::deque<TxSegment>& rtx_queue() const { return rtx_; }
  unsigned dup_ack_count() const { return dup_acks_; }
  double srtt() const { return srtt_; }
  double rttvar() const { return rttvar_; }
  double rto() const { return rto_; }
  std::optional<double> timer_deadline(TimerKind kind) const {
    return timers_[static_cast<std::size_t>(kind)].deadline;
  }
  const ConnectionStats& stats() const { return stats_; }
  bool released() const { return released_; }

 private:
  friend class Endpoint;

  struct Timer {
    std::optional<double> deadline;
    std::optional<double> announced;
  };

  std::uint32_t wrap(std::uint64_t offset) const { return iss_ + static_cast<std::uint32_t>(offset); }

  ConnHandle handle_;
  ConnState state_ = ConnState::kClosed;
  SixTuple tuple_;
  std::uint64_t conn_id_ = 0;
  InterfaceId egress_ = 0;
  TransportOptions opts_;
  bool released_ = false;

  // Send side.
  std::uint32_t iss_ = 0;
  std::uint64_t snd_una_ = 0;
  std::uint64_t snd_nxt_ = 0;
  std::deque<std::uint8_t> send_buf_;  // unacked + unsent data, starting at data_base_
  std::uint64_t data_base_ = 1;        // stream offset of send_buf_.front()
  bool fin_queued_ = false;
  bool fin_sent_ = false;
  std::uint64_t probed_at_ = 0;  // snd_nxt when the last tail probe went out
  std::deque<TxSegment> rtx_;
  std::uint64_t in_flight_ = 0;
  std::size_t lost_count_ = 0;
  std::uint64_t send_counter_ = 0;
  std::array<std::uint64_t, 3> top_delivered_{};  // highest delivered send orders, descending
  std::uint64_t peer_window_ = 0;
  unsigned dup_acks_ = 0;
  bool collapsed_ = false;  // one-segment sending after RTO
  std::uint64_t cwnd_ = 0;
  std::uint64_t ssthresh_ = UINT64_MAX;
  bool in_recovery_ = false;
  std::uint64_t recovery_point_ = 0;
  bool has_rtt_ = false;
  double srtt_ = 0;
  double rttvar_ = 0;
  double rto_ = 1.0;

  // Receive side.
  std::uint32_t irs_ = 0;
  std::uint64_t rcv_nxt_ = 0;
  std::map<std::uint64_t, Bytes> ooo_;
  std::uint64_t ooo_bytes_ = 0;
  // Offsets of recent out-of-order arrivals, newest first; picks which
  // ranges the SACK option reports.
  std::deque<std::uint64_t> sack_recent_;
  std::optional<std::uint64_t> fin_at_;
  bool fin_consumed_ = false;
  unsigned unacked_segments_ = 0;
  bool ack_pending_ = false;

  std::array<Timer, 5> timers_{};
  ConnectionStats stats_;
};

// Key to state-change records and segment summaries; consumed by the harness.
struct TransitionRecord {
  double time = 0;
  ConnHandle conn;
  std::uint64_t conn_id = 0;
  ConnState from = ConnState::kClosed;
  ConnState to = ConnState::kClosed;
  std::string cause;
  std::optional<InterfaceId> interface;
};

enum class DemuxStep { kNone = 0, kConnectionId = 1, kTuple = 2, kComplementary = 3, kListener = 4 };

struct DemuxResult {
  DemuxStep step = DemuxStep::kNone;
  std::optional<ConnHandle> conn;
  std::optional<std::uint16_t> listener_port;

  bool found() const { return step != DemuxStep::kNone; }
};

struct EndpointStats {
  std::uint64_t segments_received = 0;
  std::uint64_t malformed_drops = 0;
  std::uint64_t wrong_interface_drops = 0;
  std::uint64_t not_found = 0;
  std::uint64_t rst_sent = 0;
  std::uint64_t rst_received = 0;
  std::uint64_t demux_conflicts = 0;
  std::array<std::uint64_t, 5> demux_by_step{};
};

class Endpoint {
 public:
  explicit Endpoint(EndpointConfig config);
  Endpoint(const Endpoint&) = delete;
  Endpoint& operator=(const Endpoint&) = delete;

  const EndpointConfig& config() const { return config_; }
  const EndpointStats& stats() const { return stats_; }

  std::pair<ConnHandle, Actions> open_active(std::uint16_t local_port, Address remote_orig_addr,
                                             std::uint16_t remote_port, double now);
  // Returns the port as the listener handle.
  std::uint16_t open_passive(std::uint16_t local_port);

  Actions on_segment(InterfaceId arrival, const Envelope& envelope, double now);
  // Decodes first; undecodable datagrams are dropped and counted.
  Actions on_datagram(InterfaceId arrival, Address src, Address dst, std::span<const std::uint8_t> bytes,
                      double now);
  Actions send_data(ConnHandle conn, std::span<const std::uint8_t> data, double now);
  Actions close_connection(ConnHandle conn, double now);
  Actions on_tick(double now);

  InterfaceId select_egress_interface(ConnHandle conn, SegmentKind kind) const;
  DemuxResult demultiplex(const Envelope& envelope) const;

  const Connection& connection(ConnHandle conn) const;
  std::vector<ConnHandle> connections() const;
  const InterfaceConfig* find_interface(InterfaceId id) const;
  const InterfaceConfig* interface_for(Address addr) const;

  void set_trace(std::function<void(const TransitionRecord&)> sink) { trace_ = std::move(sink); }

 private:
  Connection& conn_ref(ConnHandle h);
  Connection& create_connection(const SixTuple& tuple, std::uint64_t conn_id);
  AddressBinding binding_for(std::uint16_t port) const;
  std::uint64_t fresh_conn_id();

  void transition(Connection& c, ConnState to, double now, std::string_view cause);
  void release(Connection& c);

  // Segment construction and emission.
  Segment make_segment(const Connection& c, SegmentFlags flags, std::uint64_t seq_offset) const;
  void emit(Connection& c, Segment seg, SegmentKind kind, Actions& out);
  void send_ack(Connection& c, Actions& out);
  void send_syn(Connection& c, TxSegment& entry, double now, Actions& out);
  void refuse(InterfaceId arrival, const Envelope& env, Actions& out);

  // Sender.
  void pump(Connection& c, double now, Actions& out);
  void transmit_entry(Connection& c, TxSegment& entry, double now, bool retransmit, Actions& out);
  std::uint64_t effective_window(const Connection& c) const;
  bool process_ack(Connection& c, const Segment& seg, double now, Actions& out);
  void sample_rtt(Connection& c, double rtt);
  void mark_lost(Connection& c, TxSegment& entry);
  void detect_losses(Connection& c);
  void on_retransmit_timeout(Connection& c, double now, Actions& out);
  void on_persist_timeout(Connection& c, double now, Actions& out);
  void on_loss_probe(Connection& c, double now, Actions& out);
  void arm_loss_probe(Connection& c, double now, Actions& out);
  bool all_data_sent(const Connection& c) const;

  // Receiver.
  void process_payload(Connection& c, const Segment& seg, double now, Actions& out);
  bool process_fin(Connection& c, double now, Actions& out);
  std::vector<SackBlock> sack_blocks(const Connection& c) const;
  std::uint16_t advertised_window(const Connection& c) const;

  void handle_segment(Connection& c, InterfaceId arrival, const Envelope& env, double now, Actions& out);
  void spawn_from_listener(std::uint16_t port, InterfaceId arrival, const Envelope& env, double now,
                           Actions& out);

  void arm(Connection& c, TimerKind kind, double deadline, Actions& out);
  void disarm(Connection& c, TimerKind kind);

  EndpointConfig config_;
  std::mt19937_64 rng_;
  std::vector<std::unique_ptr<Connection>> conns_;
  std::set<std::uint16_t> listeners_;
  std::unordered_map<std::uint64_t, ConnHandle> by_id_;
  // (local port, remote port) -> live connections.
  std::map<std::pair<std::uint16_t, std::uint16_t>, std::vector<ConnHandle>> by_ports_;
  EndpointStats stats_;
  std::function<void(const TransitionRecord&)> trace_;
};

}  // namespace detcp
