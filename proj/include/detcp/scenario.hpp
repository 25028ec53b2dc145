#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "detcp/endpoint.hpp"
#include "detcp/netsim.hpp"

namespace detcp {

enum class ScenarioErrc { kParseError, kUndeclaredReference, kInvalidValue, kMissingVariant };

std::string_view to_string(ScenarioErrc code);

class ScenarioError : public std::runtime_error {
 public:
  ScenarioError(ScenarioErrc code, int line, const std::string& what);
  ScenarioErrc code() const { return code_; }
  int line() const { return line_; }  // 0 when not tied to a line

 private:
  ScenarioErrc code_;
  int line_;
};

struct NodeDecl {
  NodeSpec spec;
  std::optional<Address> original;
  std::optional<Address> complementary;
  std::map<std::uint16_t, AddressBinding> bindings;
  std::string variant;  // empty: shared by every variant
  int line = 0;
};

struct LinkDecl {
  LinkSpec spec;
  bool lossy = false;  // subject to the loss override
  std::string variant;
  int line = 0;
  int from_line = 0;
  int to_line = 0;
};

struct RouteDecl {
  RouteSpec spec;
  std::string variant;
  int line = 0;
};

struct FlowDecl {
  std::string client;
  std::string server;
  std::uint16_t port = 0;
  std::optional<std::uint16_t> client_port;
  std::uint64_t size = 0;
  double start = 0;
  bool server_sends = false;
  int line = 0;
  int client_line = 0;
  int server_line = 0;

  std::uint16_t local_port() const { return client_port.value_or(port); }
};

struct ScenarioConfig {
  std::string name;
  std::uint64_t seed = 1;
  double duration_cap = 60;
  std::uint32_t mss = 1000;
  std::optional<std::uint64_t> window;  // default: 2 x BDP of each flow
  std::uint64_t recv_buffer = 4 * 1024 * 1024;
  bool aimd = false;
  std::vector<double> loss_sweep;
  std::vector<NodeDecl> nodes;
  std::vector<LinkDecl> links;
  std::vector<RouteDecl> routes;
  std::vector<FlowDecl> flows;

  std::set<std::string> variants() const;
  // The declarations that apply to `variant`, with the tags stripped.
  ScenarioConfig select_variant(std::string_view variant) const;
  const NodeDecl* find_node(std::string_view name) const;
};

ScenarioConfig parse_scenario(std::string_view text);
ScenarioConfig load_scenario(const std::string& path);

// Quantity parsers shared with the CLI. All throw std::invalid_argument.
double parse_rate(std::string_view text);      // "100M", "10 Mbit/s", "1e6"
double parse_duration(std::string_view text);  // "5ms", "0.005", "20 us"
std::uint64_t parse_size(std::string_view text);  // "100MB", "64KiB", "2000"
double parse_probability(std::string_view text);  // "0.02", "2%"

}  // namespace detcp
