#pragma once

#include <chrono>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace stagechain::eval {

struct NLIVerdict {
  double p_entail = 0.0;
  double p_neutral = 1.0;
  double p_contra = 0.0;
};

// Rescales to sum 1. Throws DataError on negative, non-finite or all-zero input.
NLIVerdict normalized(double entail, double neutral, double contradiction);

struct NLIPair {
  std::string premise;
  std::string hypothesis;
};

class NliBackend {
 public:
  virtual ~NliBackend() = default;
  virtual std::string name() const = 0;
  // One verdict per pair; nullopt marks a failed request.
  virtual std::vector<std::optional<NLIVerdict>> score(const std::vector<NLIPair>& pairs) = 0;
};

// Deterministic stand-in classifier: if the rule table fires between
// premise and hypothesis attributes, contradiction 0.95 and neutral 0.05;
// otherwise entailment 0.9 × lexical overlap (0 when undefined) and the rest
// neutral.
class HeuristicNli : public NliBackend {
 public:
  std::string name() const override { return "heuristic"; }
  std::vector<std::optional<NLIVerdict>> score(const std::vector<NLIPair>& pairs) override;
  static NLIVerdict verdict(const std::string& premise, const std::string& hypothesis);
};

// Client for a remote classifier: POST {base_url}/nli with
// {"premise","hypothesis"} answered by {"entail","neutral","contradiction"}.
// Requests run on up to max_in_flight threads; a non-2xx reply, a malformed
// body or no reply within the timeout leaves that record absent.
class HttpNli : public NliBackend {
 public:
  explicit HttpNli(std::string base_url, std::size_t max_in_flight = 8,
                   std::chrono::milliseconds timeout = std::chrono::seconds(10));
  std::string name() const override { return base_url_; }
  std::vector<std::optional<NLIVerdict>> score(const std::vector<NLIPair>& pairs) override;

 private:
  std::string base_url_;
  std::size_t max_in_flight_;
  std::chrono::milliseconds timeout_;
};

// Serves /nli and /nli/batch from the heuristic backend. Blocks until stop()
// is called from another thread.
class HeuristicNliServer {
 public:
  HeuristicNliServer();
  ~HeuristicNliServer();
  // Binds host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port);
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace stagechain::eval
