#pragma once

#include <string>
#include <vector>

#include "dmaudit/errors.hpp"

namespace dmaudit {

enum class ScheduleKind { kLinear, kCosine };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

// Cumulative noise-retention curve: alpha_bar[t] is the fraction of signal
// variance surviving at step t, alpha_bar[0] = 1 and alpha_bar[T] ~ 0.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::kLinear;
  int T = 0;
  std::vector<double> alpha_bar;  // T + 1 entries

  // Checks alpha_bar[0] in (0.999, 1], strict monotone decrease, all in
  // (0, 1]. The near-pure-noise endpoint alpha_bar[T] < 0.02 additionally
  // holds for the cosine curve at any T and for the linear curve once
  // T >= 40; short linear toy schedules keep the fixed beta ramp and land
  // above it.
  void validate() const;
};

inline constexpr int kDefaultScheduleSteps = 100;
inline constexpr double kLinearBetaMin = 1e-4;
inline constexpr double kLinearBetaMax = 0.2;

// Linear: beta_t ramps linearly over [kLinearBetaMin, kLinearBetaMax] and
// alpha_bar is the cumulative product of (1 - beta_t). Cosine: squared-cosine
// curve with the usual 0.008 offset.
NoiseSchedule make_schedule(ScheduleKind kind, int T);

}  // namespace dmaudit
