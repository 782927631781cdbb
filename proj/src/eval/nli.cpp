#include "stagechain/eval/nli.hpp"

#include <atomic>
#include <cmath>
#include <thread>

#include <nlohmann/json.hpp>

#include "httplib.h"
#include "stagechain/errors.hpp"
#include "stagechain/eval/attributes.hpp"
#include "stagechain/eval/text.hpp"

namespace stagechain::eval {

NLIVerdict normalized(double entail, double neutral, double contradiction) {
  for (double v : {entail, neutral, contradiction}) {
    if (!std::isfinite(v) || v < 0.0) throw DataError("NLI probabilities must be finite and >= 0");
  }
  const double total = entail + neutral + contradiction;
  if (total <= 0.0) throw DataError("NLI probabilities sum to zero");
  return {entail / total, neutral / total, contradiction / total};
}

NLIVerdict HeuristicNli::verdict(const std::string& premise, const std::string& hypothesis) {
  const RuleCheck rules = check_rules(extract_attributes(premise), extract_attributes(hypothesis));
  if (rules.contradictions > 0) return normalized(0.0, 0.05, 0.95);
  const double entail = 0.9 * lexical_overlap(premise, hypothesis).value_or(0.0);
  return normalized(entail, 1.0 - entail, 0.0);
}

std::vector<std::optional<NLIVerdict>> HeuristicNli::score(const std::vector<NLIPair>& pairs) {
  std::vector<std::optional<NLIVerdict>> out;
  out.reserve(pairs.size());
  for (const NLIPair& p : pairs) out.emplace_back(verdict(p.premise, p.hypothesis));
  return out;
}

namespace {

// Splits "http://host:port/prefix" into the client address and a path prefix.
std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto path = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path == std::string::npos) return {url, ""};
  std::string prefix = url.substr(path);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, path), prefix};
}

std::optional<NLIVerdict> parse_verdict(const nlohmann::json& j) {
  try {
    return normalized(j.at("entail").get<double>(), j.at("neutral").get<double>(),
                      j.at("contradiction").get<double>());
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

HttpNli::HttpNli(std::string base_url, std::size_t max_in_flight, std::chrono::milliseconds timeout)
    : base_url_(std::move(base_url)), max_in_flight_(std::max<std::size_t>(1, max_in_flight)),
      timeout_(timeout) {}

std::vector<std::optional<NLIVerdict>> HttpNli::score(const std::vector<NLIPair>& pairs) {
  std::vector<std::optional<NLIVerdict>> out(pairs.size());
  const auto [address, prefix] = split_url(base_url_);
  std::atomic<std::size_t> next{0};
  auto worker = [&, address = address, prefix = prefix] {
    httplib::Client client(address);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    for (std::size_t i = next++; i < pairs.size(); i = next++) {
      const nlohmann::json body = {{"premise", pairs[i].premise},
                                   {"hypothesis", pairs[i].hypothesis}};
      auto res = client.Post(prefix + "/nli", body.dump(), "application/json");
      if (!res || res->status < 200 || res->status >= 300) continue;
      try {
        out[i] = parse_verdict(nlohmann::json::parse(res->body));
      } catch (const std::exception&) {
      }
    }
  };
  std::vector<std::thread> threads;
  const std::size_t n = std::min(max_in_flight_, pairs.size());
  for (std::size_t t = 0; t < n; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  return out;
}

struct HeuristicNliServer::Impl {
  httplib::Server server;
};

HeuristicNliServer::HeuristicNliServer() : impl_(std::make_unique<Impl>()) {
  auto reply = [](httplib::Response& res, const nlohmann::json& j) {
    res.set_content(j.dump(), "application/json");
  };
  impl_->server.Post("/nli", [reply](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto j = nlohmann::json::parse(req.body);
      const NLIVerdict v = HeuristicNli::verdict(j.at("premise").get<std::string>(),
                                                 j.at("hypothesis").get<std::string>());
      reply(res, {{"entail", v.p_entail}, {"neutral", v.p_neutral}, {"contradiction", v.p_contra}});
    } catch (const std::exception& e) {
      res.status = 400;
      reply(res, {{"error", e.what()}});
    }
  });
  impl_->server.Post("/nli/batch", [reply](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto j = nlohmann::json::parse(req.body);
      const auto premises = j.at("premise").get<std::vector<std::string>>();
      const auto hypotheses = j.at("hypothesis").get<std::vector<std::string>>();
      if (premises.size() != hypotheses.size()) throw DataError("premise/hypothesis length mismatch");
      nlohmann::json e = nlohmann::json::array(), n = nlohmann::json::array(),
                     c = nlohmann::json::array();
      for (std::size_t i = 0; i < premises.size(); ++i) {
        const NLIVerdict v = HeuristicNli::verdict(premises[i], hypotheses[i]);
        e.push_back(v.p_entail);
        n.push_back(v.p_neutral);
        c.push_back(v.p_contra);
      }
      reply(res, {{"entail", e}, {"neutral", n}, {"contradiction", c}});
    } catch (const std::exception& ex) {
      res.status = 400;
      reply(res, {{"error", ex.what()}});
    }
  });
}

HeuristicNliServer::~HeuristicNliServer() = default;

int HeuristicNliServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind NLI server on " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw Error("cannot bind NLI server on " + host + ":" + std::to_string(port));
  }
  return port;
}

void HeuristicNliServer::listen() { impl_->server.listen_after_bind(); }

void HeuristicNliServer::stop() { impl_->server.stop(); }

}  // namespace stagechain::eval
