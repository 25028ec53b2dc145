#pragma once

// Two endpoints joined by an ideal wire with a fixed one-way delay. Enough
// network to script handshakes and losses without the simulator.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "detcp/endpoint.hpp"

namespace detcp::test {

inline InterfaceConfig itf(InterfaceId id, const char* addr, InterfaceRole role) {
  return InterfaceConfig{id, Address::parse(addr), role};
}

// a: tx 10.0.1.1 / rx 10.0.2.1, b: rx 10.0.1.2 / tx 10.0.2.2.
inline EndpointConfig dual_simplex_client(std::uint64_t seed = 1) {
  EndpointConfig c;
  c.name = "a";
  c.interfaces = {itf(0, "10.0.1.1", InterfaceRole::kSendOnly), itf(1, "10.0.2.1", InterfaceRole::kReceiveOnly)};
  c.original_addr = Address::parse("10.0.1.1");
  c.complementary_addr = Address::parse("10.0.2.1");
  c.seed = seed;
  return c;
}

inline EndpointConfig dual_simplex_server(std::uint64_t seed = 2) {
  EndpointConfig c;
  c.name = "b";
  c.interfaces = {itf(0, "10.0.1.2", InterfaceRole::kReceiveOnly), itf(1, "10.0.2.2", InterfaceRole::kSendOnly)};
  c.original_addr = Address::parse("10.0.2.2");
  c.complementary_addr = Address::parse("10.0.1.2");
  c.listen_ports = {80};
  c.seed = seed;
  return c;
}

struct Sent {
  double time = 0;
  int from = 0;
  InterfaceId interface = 0;
  Envelope envelope;
};

class Pair {
 public:
  Pair(EndpointConfig a, EndpointConfig b) {
    eps_[0] = std::make_unique<Endpoint>(std::move(a));
    eps_[1] = std::make_unique<Endpoint>(std::move(b));
  }

  Endpoint& ep(int i) { return *eps_[i]; }
  double now() const { return now_; }

  double delay = 0.001;
  // Return false to drop; may rewrite the envelope.
  std::function<bool(const Sent&, Envelope&)> filter;
  std::function<void(int, const Signal&)> on_signal;

  std::vector<Sent> sent;
  std::map<int, Bytes> delivered;
  std::vector<std::pair<int, Signal>> signals;
  std::uint64_t wrong_direction = 0;  // emissions on receive-only interfaces or arrivals on send-only ones

  void apply(int who, Actions actions) {
    for (Action& a : actions) {
      if (auto* e = std::get_if<Emit>(&a)) {
        const InterfaceConfig* out = ep(who).find_interface(e->interface);
        if (out == nullptr || !can_send(out->role) || out->addr != e->envelope.src_addr) ++wrong_direction;
        Sent s{now_, who, e->interface, e->envelope};
        sent.push_back(s);
        Envelope env = e->envelope;
        if (filter && !filter(s, env)) continue;
        wire_.push_back({now_ + delay, next_++, 1 - who, std::move(env)});
      } else if (auto* d = std::get_if<Deliver>(&a)) {
        Bytes& b = delivered[who];
        b.insert(b.end(), d->data.begin(), d->data.end());
      } else if (auto* s = std::get_if<Signal>(&a)) {
        signals.emplace_back(who, *s);
        if (on_signal) on_signal(who, *s);
      } else if (auto* t = std::get_if<ArmTimer>(&a)) {
        ticks_.insert({t->deadline, who});
      }
    }
  }

  void call(int who, const std::function<Actions(Endpoint&)>& fn) { apply(who, fn(ep(who))); }

  // Runs the next event; false when nothing is pending before `until`.
  bool step(double until) {
    auto w = std::min_element(wire_.begin(), wire_.end(), [](const InFlight& x, const InFlight& y) {
      return x.time != y.time ? x.time < y.time : x.seq < y.seq;
    });
    const bool have_wire = w != wire_.end() && w->time <= until;
    const bool have_tick = !ticks_.empty() && ticks_.begin()->first <= until;
    if (!have_wire && !have_tick) return false;
    if (have_wire && (!have_tick || w->time <= ticks_.begin()->first)) {
      InFlight f = std::move(*w);
      wire_.erase(w);
      now_ = f.time;
      const InterfaceConfig* in = ep(f.to).interface_for(f.env.dst_addr);
      if (in == nullptr || !can_receive(in->role)) {
        ++wrong_direction;
        return true;
      }
      apply(f.to, ep(f.to).on_segment(in->id, f.env, now_));
    } else {
      auto [t, who] = *ticks_.begin();
      ticks_.erase(ticks_.begin());
      now_ = t;
      apply(who, ep(who).on_tick(now_));
    }
    return true;
  }

  void run(double until) {
    while (step(until)) {
    }
    now_ = std::max(now_, until);
  }

  // Sent segments from `who`, optionally only those with payload.
  std::vector<Sent> from(int who) const {
    std::vector<Sent> out;
    for (const Sent& s : sent) {
      if (s.from == who) out.push_back(s);
    }
    return out;
  }

 private:
  struct InFlight {
    double time;
    std::uint64_t seq;
    int to;
    Envelope env;
  };

  std::unique_ptr<Endpoint> eps_[2];
  std::vector<InFlight> wire_;
  std::set<std::pair<double, int>> ticks_;
  std::uint64_t next_ = 0;
  double now_ = 0;
};

inline Bytes pattern(std::size_t n, std::uint8_t salt = 0) {
  Bytes b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = static_cast<std::uint8_t>((i * 131 + salt) ^ (i >> 8));
  return b;
}

}  // namespace detcp::test
