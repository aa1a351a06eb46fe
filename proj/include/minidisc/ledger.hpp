#pragma once

// Per-phase accounting of optimizer steps and full-distillation trials; the
// efficiency counterpart of wall-clock GPU-hour columns.

#include <json.hpp>

#include <array>
#include <cstdint>
#include <mutex>
#include <string>

namespace minidisc {

enum class Phase : uint8_t {
  Sandwich = 0,
  TaDistill = 1,
  StudentDistill = 2,
  MaxidiscEnumeration = 3,
};

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::Sandwich: return "sandwich";
    case Phase::TaDistill: return "ta_distill";
    case Phase::StudentDistill: return "student_distill";
    case Phase::MaxidiscEnumeration: return "maxidisc_enumeration";
  }
  return "?";
}

struct TrialLedger {
  struct Counters {
    uint64_t steps = 0;
    uint64_t trials = 0;
  };
  std::array<Counters, 4> phases;

  void add_steps(Phase p, uint64_t n) {
    std::lock_guard<std::mutex> lk(mu_);
    phases[size_t(p)].steps += n;
  }
  void add_trial(Phase p) {
    std::lock_guard<std::mutex> lk(mu_);
    phases[size_t(p)].trials += 1;
  }

  uint64_t total_steps() const {
    uint64_t s = 0;
    for (const auto& c : phases) s += c.steps;
    return s;
  }
  uint64_t total_trials() const {
    uint64_t s = 0;
    for (const auto& c : phases) s += c.trials;
    return s;
  }
  const Counters& at(Phase p) const { return phases[size_t(p)]; }

  // Trials spent deciding which assistant to use: the single sandwich run
  // for the one-trial schedule, the whole enumeration for the exhaustive one.
  uint64_t ta_selection_trials() const {
    return at(Phase::Sandwich).trials + at(Phase::MaxidiscEnumeration).trials;
  }

  nlohmann::json to_json() const {
    nlohmann::json out;
    for (size_t i = 0; i < phases.size(); ++i)
      out[phase_name(Phase(i))] = {{"steps", phases[i].steps}, {"trials", phases[i].trials}};
    out["total_steps"] = total_steps();
    out["total_trials"] = total_trials();
    return out;
  }

  static TrialLedger from_json(const nlohmann::json& j) {
    TrialLedger ledger;
    for (size_t i = 0; i < ledger.phases.size(); ++i) {
      const char* name = phase_name(Phase(i));
      if (!j.contains(name)) continue;
      ledger.phases[i].steps = j.at(name).value("steps", uint64_t(0));
      ledger.phases[i].trials = j.at(name).value("trials", uint64_t(0));
    }
    return ledger;
  }

  TrialLedger() = default;
  TrialLedger(const TrialLedger& o) : phases(o.phases) {}
  TrialLedger& operator=(const TrialLedger& o) {
    phases = o.phases;
    return *this;
  }

 private:
  mutable std::mutex mu_;
};

}  // namespace minidisc
