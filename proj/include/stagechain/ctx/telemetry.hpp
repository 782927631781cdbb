#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <vector>

#include "stagechain/ctx/projector.hpp"

namespace stagechain::ctx {

struct TelemetryRecord {
  std::size_t step = 0;
  Transition transition = Transition::perc_to_pred;
  double gate_opening = 0.0;     // σ(g)
  double injection_ratio = 0.0;  // ‖h̃‖₂ / ‖E[τ]‖₂, averaged over the step's examples
};

// Collects per-example injection ratios within an optimizer step and emits
// one record per transition when the step closes.
class TelemetryRecorder {
 public:
  void observe(Transition t, double ratio);
  void close_step(std::size_t step, const std::vector<const GatedProjector*>& projectors);

  const std::vector<TelemetryRecord>& records() const { return records_; }

 private:
  struct Pending {
    double sum = 0.0;
    std::size_t count = 0;
  };
  std::map<Transition, Pending> pending_;
  std::vector<TelemetryRecord> records_;
};

// JSONL lines {"step","transition","gate_opening","injection_ratio"}.
void write_telemetry_jsonl(std::ostream& out, const std::vector<TelemetryRecord>& records);

struct TelemetryParse {
  std::vector<TelemetryRecord> records;
  std::size_t malformed = 0;
};
TelemetryParse read_telemetry_jsonl(std::istream& in);

// CSV with header step,transition,gate,ratio (values printed with %.17g).
void write_telemetry_csv(std::ostream& out, const std::vector<TelemetryRecord>& records);

}  // namespace stagechain::ctx
