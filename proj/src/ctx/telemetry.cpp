#include "stagechain/ctx/telemetry.hpp"

#include <cstdio>
#include <string>

#include <nlohmann/json.hpp>

namespace stagechain::ctx {

void TelemetryRecorder::observe(Transition t, double ratio) {
  Pending& p = pending_[t];
  p.sum += ratio;
  ++p.count;
}

void TelemetryRecorder::close_step(std::size_t step,
                                   const std::vector<const GatedProjector*>& projectors) {
  for (const GatedProjector* proj : projectors) {
    auto it = pending_.find(proj->transition());
    if (it == pending_.end() || it->second.count == 0) continue;
    records_.push_back({step, proj->transition(), proj->gate_opening(),
                        it->second.sum / static_cast<double>(it->second.count)});
  }
  pending_.clear();
}

void write_telemetry_jsonl(std::ostream& out, const std::vector<TelemetryRecord>& records) {
  for (const TelemetryRecord& r : records) {
    nlohmann::json j = {{"step", r.step},
                        {"transition", std::string(transition_tag(r.transition))},
                        {"gate_opening", r.gate_opening},
                        {"injection_ratio", r.injection_ratio}};
    out << j.dump() << '\n';
  }
}

TelemetryParse read_telemetry_jsonl(std::istream& in) {
  TelemetryParse result;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TelemetryRecord r;
      r.step = j.at("step").get<std::size_t>();
      r.transition = parse_transition(j.at("transition").get<std::string>());
      r.gate_opening = j.at("gate_opening").get<double>();
      r.injection_ratio = j.at("injection_ratio").get<double>();
      result.records.push_back(r);
    } catch (const std::exception&) {
      ++result.malformed;
    }
  }
  return result;
}

void write_telemetry_csv(std::ostream& out, const std::vector<TelemetryRecord>& records) {
  out << "step,transition,gate,ratio\n";
  char buf[128];
  for (const TelemetryRecord& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g\n", r.step,
                  std::string(transition_tag(r.transition)).c_str(), r.gate_opening,
                  r.injection_ratio);
    out << buf;
  }
}

}  // namespace stagechain::ctx
