#include "detcp/scenario.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace detcp {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

// Leading number and the (trimmed, lower-cased) unit text after it.
std::pair<double, std::string> number_and_unit(std::string_view text) {
  text = trim(text);
  double v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || !std::isfinite(v)) throw std::invalid_argument("expected a number in '" + std::string(text) + "'");
  return {v, lower(trim(std::string_view(ptr, static_cast<std::size_t>(text.data() + text.size() - ptr))))};
}

struct Entry {
  std::string key;
  std::string value;
  int line = 0;
};

struct Section {
  std::string kind;  // "" for the top level
  int line = 0;
  std::vector<Entry> entries;
};

[[noreturn]] void fail(ScenarioErrc code, int line, const std::string& msg) { throw ScenarioError(code, line, msg); }

// Wraps a quantity parser so its failures carry the line.
template <typename F>
auto value_of(const Entry& e, F parse) {
  try {
    return parse(e.value);
  } catch (const std::invalid_argument& ex) {
    fail(ScenarioErrc::kInvalidValue, e.line, e.key + ": " + ex.what());
  }
}

std::uint16_t parse_port(std::string_view text) {
  unsigned v = 0;
  text = trim(text);
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || v == 0 || v > 65535) {
    throw std::invalid_argument("invalid port '" + std::string(text) + "'");
  }
  return static_cast<std::uint16_t>(v);
}

Address parse_addr(std::string_view text) {
  auto a = Address::try_parse(trim(text));
  if (!a) throw std::invalid_argument("invalid address '" + std::string(trim(text)) + "'");
  return *a;
}

bool parse_bool(std::string_view text) {
  const std::string v = lower(trim(text));
  if (v == "true" || v == "yes" || v == "1" || v == "on") return true;
  if (v == "false" || v == "no" || v == "0" || v == "off") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

PortRef parse_port_ref(const Entry& e) {
  const auto colon = e.value.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == e.value.size()) {
    fail(ScenarioErrc::kParseError, e.line, e.key + ": expected node:interface");
  }
  return {e.value.substr(0, colon), e.value.substr(colon + 1)};
}

std::vector<Section> tokenize(std::string_view text) {
  std::vector<Section> sections(1);
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view raw = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    std::string_view line = trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(ScenarioErrc::kParseError, line_no, "unterminated section header");
      const std::string kind = lower(trim(line.substr(1, line.size() - 2)));
      static const std::set<std::string> kKnown{"node", "link", "route", "flow", "sweep"};
      if (!kKnown.count(kind)) fail(ScenarioErrc::kParseError, line_no, "unknown section [" + kind + "]");
      sections.push_back({kind, line_no, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(ScenarioErrc::kParseError, line_no, "expected key = value");
    const std::string key = lower(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) fail(ScenarioErrc::kParseError, line_no, "missing key");
    if (value.empty()) fail(ScenarioErrc::kParseError, line_no, "missing value for '" + key + "'");
    sections.back().entries.push_back({key, value, line_no});
  }
  return sections;
}

// Rejects repeats of keys that are not list-valued.
void check_unique(const Section& s, const std::set<std::string>& repeatable) {
  std::set<std::string> seen;
  for (const Entry& e : s.entries) {
    if (repeatable.count(e.key)) continue;
    if (!seen.insert(e.key).second) fail(ScenarioErrc::kParseError, e.line, "duplicate key '" + e.key + "'");
  }
}

[[noreturn]] void unknown_key(const Entry& e, std::string_view where) {
  fail(ScenarioErrc::kParseError, e.line, "unknown key '" + e.key + "' in " + std::string(where));
}

void parse_top(const Section& s, ScenarioConfig& cfg) {
  check_unique(s, {});
  for (const Entry& e : s.entries) {
    if (e.key == "name") {
      cfg.name = e.value;
    } else if (e.key == "seed") {
      cfg.seed = value_of(e, [](const std::string& v) {
        std::uint64_t x = 0;
        auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
        if (ec != std::errc{} || ptr != v.data() + v.size()) throw std::invalid_argument("invalid seed");
        return x;
      });
    } else if (e.key == "duration_cap") {
      cfg.duration_cap = value_of(e, parse_duration);
      if (!(cfg.duration_cap > 0)) fail(ScenarioErrc::kInvalidValue, e.line, "duration_cap must be positive");
    } else if (e.key == "mss") {
      const std::uint64_t mss = value_of(e, parse_size);
      if (mss < 1 || mss > kMaxPayloadSize) fail(ScenarioErrc::kInvalidValue, e.line, "mss out of range");
      cfg.mss = static_cast<std::uint32_t>(mss);
    } else if (e.key == "window") {
      cfg.window = value_of(e, parse_size);
    } else if (e.key == "recv_buffer") {
      cfg.recv_buffer = value_of(e, parse_size);
      if (cfg.recv_buffer < kWindowUnit) fail(ScenarioErrc::kInvalidValue, e.line, "recv_buffer below 1024");
    } else if (e.key == "aimd") {
      cfg.aimd = value_of(e, parse_bool);
    } else {
      unknown_key(e, "the top level");
    }
  }
}

NodeDecl parse_node(const Section& s) {
  check_unique(s, {"iface", "bind"});
  NodeDecl n;
  n.line = s.line;
  for (const Entry& e : s.entries) {
    if (e.key == "name") {
      n.spec.name = e.value;
    } else if (e.key == "kind") {
      const std::string k = lower(e.value);
      if (k == "router") {
        n.spec.kind = NodeKind::kRouter;
      } else if (k == "endpoint" || k == "host") {
        n.spec.kind = NodeKind::kEndpoint;
      } else {
        fail(ScenarioErrc::kInvalidValue, e.line, "kind must be endpoint or router");
      }
    } else if (e.key == "iface") {
      auto parts = split_ws(e.value);
      if (parts.size() < 2 || parts.size() > 3) {
        fail(ScenarioErrc::kParseError, e.line, "iface expects: name address [duplex|send_only|receive_only]");
      }
      InterfaceSpec is;
      is.name = std::string(parts[0]);
      is.addr = value_of(Entry{e.key, std::string(parts[1]), e.line}, parse_addr);
      if (parts.size() == 3) {
        auto role = parse_interface_role(lower(parts[2]));
        if (!role) fail(ScenarioErrc::kInvalidValue, e.line, "unknown interface role '" + std::string(parts[2]) + "'");
        is.role = *role;
      }
      n.spec.interfaces.push_back(std::move(is));
    } else if (e.key == "original") {
      n.original = value_of(e, parse_addr);
    } else if (e.key == "complementary") {
      n.complementary = value_of(e, parse_addr);
    } else if (e.key == "bind") {
      auto parts = split_ws(e.value);
      if (parts.size() < 2 || parts.size() > 3) fail(ScenarioErrc::kParseError, e.line, "bind expects: port original [complementary]");
      const auto port = value_of(Entry{e.key, std::string(parts[0]), e.line}, parse_port);
      AddressBinding b;
      b.original = value_of(Entry{e.key, std::string(parts[1]), e.line}, parse_addr);
      if (parts.size() == 3) b.complementary = value_of(Entry{e.key, std::string(parts[2]), e.line}, parse_addr);
      if (!n.bindings.emplace(port, b).second) fail(ScenarioErrc::kParseError, e.line, "port bound twice");
    } else if (e.key == "processing_delay") {
      n.spec.processing_delay = value_of(e, parse_duration);
      if (n.spec.processing_delay < 0) fail(ScenarioErrc::kInvalidValue, e.line, "negative processing_delay");
    } else if (e.key == "variant") {
      n.variant = lower(e.value);
    } else {
      unknown_key(e, "[node]");
    }
  }
  if (n.spec.name.empty()) fail(ScenarioErrc::kParseError, s.line, "[node] without name");
  if (n.spec.interfaces.empty()) fail(ScenarioErrc::kParseError, s.line, "node '" + n.spec.name + "' has no iface");
  return n;
}

std::vector<LinkDecl> parse_link(const Section& s) {
  check_unique(s, {});
  LinkDecl l;
  l.line = s.line;
  bool duplex = false;
  std::optional<double> reverse_rate, reverse_delay;
  bool have_from = false, have_to = false;
  for (const Entry& e : s.entries) {
    if (e.key == "name") {
      l.spec.name = e.value;
    } else if (e.key == "from") {
      l.spec.from = parse_port_ref(e);
      l.from_line = e.line;
      have_from = true;
    } else if (e.key == "to") {
      l.spec.to = parse_port_ref(e);
      l.to_line = e.line;
      have_to = true;
    } else if (e.key == "rate") {
      l.spec.capacity_bps = value_of(e, parse_rate);
    } else if (e.key == "delay") {
      l.spec.prop_delay = value_of(e, parse_duration);
    } else if (e.key == "loss") {
      l.spec.loss_rate = value_of(e, parse_probability);
    } else if (e.key == "queue") {
      const std::uint64_t q = value_of(e, parse_size);
      if (q == 0) fail(ScenarioErrc::kInvalidValue, e.line, "queue must hold at least one packet");
      l.spec.queue_cap = static_cast<std::size_t>(q);
    } else if (e.key == "duplex") {
      duplex = value_of(e, parse_bool);
    } else if (e.key == "reverse_rate") {
      reverse_rate = value_of(e, parse_rate);
    } else if (e.key == "reverse_delay") {
      reverse_delay = value_of(e, parse_duration);
    } else if (e.key == "lossy") {
      l.lossy = value_of(e, parse_bool);
    } else if (e.key == "variant") {
      l.variant = lower(e.value);
    } else {
      unknown_key(e, "[link]");
    }
  }
  if (l.spec.name.empty()) fail(ScenarioErrc::kParseError, s.line, "[link] without name");
  if (!have_from || !have_to) fail(ScenarioErrc::kParseError, s.line, "link '" + l.spec.name + "' needs from and to");
  if (!(l.spec.capacity_bps > 0)) fail(ScenarioErrc::kInvalidValue, s.line, "link '" + l.spec.name + "' needs a positive rate");
  if (l.spec.prop_delay < 0) fail(ScenarioErrc::kInvalidValue, s.line, "link '" + l.spec.name + "' has a negative delay");
  if ((reverse_rate || reverse_delay) && !duplex) {
    fail(ScenarioErrc::kParseError, s.line, "reverse_rate/reverse_delay need duplex = true");
  }
  if (reverse_rate && !(*reverse_rate > 0)) fail(ScenarioErrc::kInvalidValue, s.line, "reverse_rate must be positive");
  if (reverse_delay && *reverse_delay < 0) fail(ScenarioErrc::kInvalidValue, s.line, "negative reverse_delay");
  if (!duplex) return {l};

  LinkDecl fwd = l, rev = l;
  fwd.spec.name = l.spec.name + ":fwd";
  rev.spec.name = l.spec.name + ":rev";
  std::swap(rev.spec.from, rev.spec.to);
  std::swap(rev.from_line, rev.to_line);
  if (reverse_rate) rev.spec.capacity_bps = *reverse_rate;
  if (reverse_delay) rev.spec.prop_delay = *reverse_delay;
  return {fwd, rev};
}

RouteDecl parse_route(const Section& s) {
  check_unique(s, {});
  RouteDecl r;
  r.line = s.line;
  bool have_dst = false;
  for (const Entry& e : s.entries) {
    if (e.key == "node") {
      r.spec.node = e.value;
    } else if (e.key == "dst" || e.key == "destination") {
      r.spec.destination = value_of(e, parse_addr);
      have_dst = true;
    } else if (e.key == "link") {
      r.spec.link = e.value;
    } else if (e.key == "variant") {
      r.variant = lower(e.value);
    } else {
      unknown_key(e, "[route]");
    }
  }
  if (r.spec.node.empty() || r.spec.link.empty() || !have_dst) {
    fail(ScenarioErrc::kParseError, s.line, "[route] needs node, dst and link");
  }
  return r;
}

FlowDecl parse_flow(const Section& s) {
  check_unique(s, {});
  FlowDecl f;
  f.line = s.line;
  for (const Entry& e : s.entries) {
    if (e.key == "client") {
      f.client = e.value;
      f.client_line = e.line;
    } else if (e.key == "server") {
      f.server = e.value;
      f.server_line = e.line;
    } else if (e.key == "port") {
      f.port = value_of(e, parse_port);
    } else if (e.key == "client_port") {
      f.client_port = value_of(e, parse_port);
    } else if (e.key == "size") {
      f.size = value_of(e, parse_size);
      if (f.size == 0) fail(ScenarioErrc::kInvalidValue, e.line, "flow size must be positive");
    } else if (e.key == "start") {
      f.start = value_of(e, parse_duration);
      if (f.start < 0) fail(ScenarioErrc::kInvalidValue, e.line, "negative start time");
    } else if (e.key == "sender") {
      const std::string v = lower(e.value);
      if (v != "client" && v != "server") fail(ScenarioErrc::kInvalidValue, e.line, "sender must be client or server");
      f.server_sends = v == "server";
    } else {
      unknown_key(e, "[flow]");
    }
  }
  if (f.client.empty() || f.server.empty() || f.port == 0 || f.size == 0) {
    fail(ScenarioErrc::kParseError, s.line, "[flow] needs client, server, port and size");
  }
  return f;
}

void parse_sweep(const Section& s, ScenarioConfig& cfg) {
  check_unique(s, {});
  for (const Entry& e : s.entries) {
    if (e.key != "rates") unknown_key(e, "[sweep]");
    std::string list = e.value;
    std::replace(list.begin(), list.end(), ',', ' ');
    for (auto item : split_ws(list)) {
      const double p = value_of(Entry{e.key, std::string(item), e.line}, parse_probability);
      if (p > 0.5) fail(ScenarioErrc::kInvalidValue, e.line, "sweep rates must lie in [0, 0.5]");
      cfg.loss_sweep.push_back(p);
    }
  }
  std::sort(cfg.loss_sweep.begin(), cfg.loss_sweep.end());
}

void fill_addresses(NodeDecl& n) {
  auto role_of = [&](Address a) -> std::optional<InterfaceRole> {
    for (const auto& is : n.spec.interfaces) {
      if (is.addr == a) return is.role;
    }
    return std::nullopt;
  };
  if (!n.original) {
    for (const auto& is : n.spec.interfaces) {
      if (can_send(is.role)) {
        n.original = is.addr;
        break;
      }
    }
    if (!n.original) n.original = n.spec.interfaces.front().addr;
  }
  if (!n.complementary && role_of(*n.original) == InterfaceRole::kSendOnly) {
    for (const auto& is : n.spec.interfaces) {
      if (is.addr != *n.original && can_receive(is.role)) {
        n.complementary = is.addr;
        break;
      }
    }
  }
}

void check_references(const ScenarioConfig& cfg) {
  std::map<std::string, const NodeDecl*> nodes;
  for (const NodeDecl& n : cfg.nodes) {
    if (!nodes.emplace(n.spec.name, &n).second) {
      fail(ScenarioErrc::kParseError, n.line, "node '" + n.spec.name + "' declared twice");
    }
    auto owns = [&](Address a) {
      return std::any_of(n.spec.interfaces.begin(), n.spec.interfaces.end(),
                         [&](const InterfaceSpec& is) { return is.addr == a; });
    };
    auto check_addr = [&](const std::optional<Address>& a, const char* what) {
      if (a && !owns(*a)) {
        fail(ScenarioErrc::kUndeclaredReference, n.line,
             std::string(what) + " address " + a->to_string() + " is not an interface of '" + n.spec.name + "'");
      }
    };
    check_addr(n.original, "original");
    check_addr(n.complementary, "complementary");
    for (const auto& [port, b] : n.bindings) {
      check_addr(b.original, "bound");
      check_addr(b.complementary, "bound");
    }
  }
  auto node_ref = [&](const std::string& name, int line) -> const NodeDecl& {
    auto it = nodes.find(name);
    if (it == nodes.end()) fail(ScenarioErrc::kUndeclaredReference, line, "undeclared node '" + name + "'");
    return *it->second;
  };
  auto iface_ref = [&](const PortRef& p, int line) {
    const NodeDecl& n = node_ref(p.node, line);
    for (const auto& is : n.spec.interfaces) {
      if (is.name == p.interface) return;
    }
    fail(ScenarioErrc::kUndeclaredReference, line, "undeclared interface '" + p.node + ":" + p.interface + "'");
  };
  std::set<std::string> links;
  for (const LinkDecl& l : cfg.links) {
    iface_ref(l.spec.from, l.from_line);
    iface_ref(l.spec.to, l.to_line);
    if (!links.insert(l.spec.name).second) fail(ScenarioErrc::kParseError, l.line, "link '" + l.spec.name + "' declared twice");
  }
  for (const RouteDecl& r : cfg.routes) {
    node_ref(r.spec.node, r.line);
    if (!links.count(r.spec.link)) fail(ScenarioErrc::kUndeclaredReference, r.line, "undeclared link '" + r.spec.link + "'");
  }
  for (const FlowDecl& f : cfg.flows) {
    const NodeDecl& c = node_ref(f.client, f.client_line);
    const NodeDecl& s = node_ref(f.server, f.server_line);
    if (c.spec.kind != NodeKind::kEndpoint || s.spec.kind != NodeKind::kEndpoint) {
      fail(ScenarioErrc::kInvalidValue, f.line, "flow endpoints must not be routers");
    }
    if (f.client == f.server) fail(ScenarioErrc::kInvalidValue, f.line, "flow client and server are the same node");
  }
}

}  // namespace

std::string_view to_string(ScenarioErrc code) {
  switch (code) {
    case ScenarioErrc::kParseError: return "PARSE_ERROR";
    case ScenarioErrc::kUndeclaredReference: return "UNDECLARED_REFERENCE";
    case ScenarioErrc::kInvalidValue: return "INVALID_VALUE";
    case ScenarioErrc::kMissingVariant: return "CONFIG_MISSING_VARIANT";
  }
  return "UNKNOWN";
}

ScenarioError::ScenarioError(ScenarioErrc code, int line, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + (line > 0 ? " (line " + std::to_string(line) + ")" : "") +
                         ": " + what),
      code_(code),
      line_(line) {}

double parse_rate(std::string_view text) {
  auto [v, unit] = number_and_unit(text);
  for (std::string_view suffix : {"bit/s", "bps", "b/s"}) {
    if (unit.size() >= suffix.size() && unit.compare(unit.size() - suffix.size(), suffix.size(), suffix) == 0) {
      unit.resize(unit.size() - suffix.size());
      break;
    }
  }
  unit = std::string(trim(unit));
  double scale = 1;
  if (unit == "k") {
    scale = 1e3;
  } else if (unit == "m") {
    scale = 1e6;
  } else if (unit == "g") {
    scale = 1e9;
  } else if (!unit.empty()) {
    throw std::invalid_argument("unknown rate unit '" + unit + "'");
  }
  if (!(v > 0)) throw std::invalid_argument("rate must be positive");
  return v * scale;
}

double parse_duration(std::string_view text) {
  auto [v, unit] = number_and_unit(text);
  double scale = 1;
  if (unit.empty() || unit == "s") {
    scale = 1;
  } else if (unit == "ms") {
    scale = 1e-3;
  } else if (unit == "us") {
    scale = 1e-6;
  } else if (unit == "ns") {
    scale = 1e-9;
  } else {
    throw std::invalid_argument("unknown time unit '" + unit + "'");
  }
  return v * scale;
}

std::uint64_t parse_size(std::string_view text) {
  auto [v, unit] = number_and_unit(text);
  static const std::map<std::string, double> kUnits{
      {"", 1},      {"b", 1},          {"k", 1e3},          {"kb", 1e3},         {"m", 1e6},
      {"mb", 1e6},  {"g", 1e9},        {"gb", 1e9},         {"kib", 1024.0},     {"mib", 1048576.0},
      {"gib", 1073741824.0}};
  auto it = kUnits.find(unit);
  if (it == kUnits.end()) throw std::invalid_argument("unknown size unit '" + unit + "'");
  const double bytes = v * it->second;
  if (bytes < 0 || bytes != std::floor(bytes) || bytes > 1e18) throw std::invalid_argument("size must be a whole number of bytes");
  return static_cast<std::uint64_t>(bytes);
}

double parse_probability(std::string_view text) {
  auto [v, unit] = number_and_unit(text);
  if (unit == "%") {
    v /= 100;
  } else if (!unit.empty()) {
    throw std::invalid_argument("unexpected text after probability");
  }
  if (!(v >= 0 && v <= 1)) throw std::invalid_argument("probability outside [0, 1]");
  return v;
}

std::set<std::string> ScenarioConfig::variants() const {
  std::set<std::string> out;
  for (const auto& n : nodes) {
    if (!n.variant.empty()) out.insert(n.variant);
  }
  for (const auto& l : links) {
    if (!l.variant.empty()) out.insert(l.variant);
  }
  for (const auto& r : routes) {
    if (!r.variant.empty()) out.insert(r.variant);
  }
  return out;
}

ScenarioConfig ScenarioConfig::select_variant(std::string_view variant) const {
  ScenarioConfig out = *this;
  auto keep = [&](const std::string& v) { return v.empty() || v == variant; };
  out.nodes.clear();
  out.links.clear();
  out.routes.clear();
  for (auto n : nodes) {
    if (keep(n.variant)) {
      n.variant.clear();
      out.nodes.push_back(std::move(n));
    }
  }
  for (auto l : links) {
    if (keep(l.variant)) {
      l.variant.clear();
      out.links.push_back(std::move(l));
    }
  }
  for (auto r : routes) {
    if (keep(r.variant)) {
      r.variant.clear();
      out.routes.push_back(std::move(r));
    }
  }
  return out;
}

const NodeDecl* ScenarioConfig::find_node(std::string_view name) const {
  for (const auto& n : nodes) {
    if (n.spec.name == name) return &n;
  }
  return nullptr;
}

ScenarioConfig parse_scenario(std::string_view text) {
  ScenarioConfig cfg;
  const auto sections = tokenize(text);
  parse_top(sections.front(), cfg);
  for (std::size_t i = 1; i < sections.size(); ++i) {
    const Section& s = sections[i];
    if (s.kind == "node") {
      cfg.nodes.push_back(parse_node(s));
      fill_addresses(cfg.nodes.back());
    } else if (s.kind == "link") {
      for (auto& l : parse_link(s)) cfg.links.push_back(std::move(l));
    } else if (s.kind == "route") {
      cfg.routes.push_back(parse_route(s));
    } else if (s.kind == "flow") {
      cfg.flows.push_back(parse_flow(s));
    } else {
      parse_sweep(s, cfg);
    }
  }
  const auto variants = cfg.variants();
  if (variants.empty()) {
    check_references(cfg);
  } else {
    for (const auto& v : variants) check_references(cfg.select_variant(v));
  }
  return cfg;
}

ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ScenarioErrc::kParseError, 0, "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  ScenarioConfig cfg = parse_scenario(ss.str());
  if (cfg.name.empty()) {
    auto slash = path.find_last_of('/');
    std::string base = path.substr(slash == std::string::npos ? 0 : slash + 1);
    if (auto dot = base.rfind('.'); dot != std::string::npos) base.resize(dot);
    cfg.name = base;
  }
  return cfg;
}

}  // namespace detcp
