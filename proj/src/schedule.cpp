#include "dmaudit/schedule.hpp"

#include <cmath>

namespace dmaudit {

std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::kLinear ? "linear" : "cosine";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::kLinear;
  if (s == "cosine") return ScheduleKind::kCosine;
  throw ArgumentError("unknown schedule kind: " + s);
}

void NoiseSchedule::validate() const {
  if (T < 4 || alpha_bar.size() != static_cast<std::size_t>(T) + 1)
    throw ArgumentError("NoiseSchedule: need T >= 4 and T+1 alpha_bar entries");
  if (!(alpha_bar[0] > 0.999 && alpha_bar[0] <= 1.0))
    throw NumericError("NoiseSchedule: alpha_bar[0] must lie in (0.999, 1]");
  for (int t = 0; t <= T; ++t) {
    const double a = alpha_bar[static_cast<std::size_t>(t)];
    if (!(a > 0.0 && a <= 1.0)) throw NumericError("NoiseSchedule: alpha_bar out of (0, 1]");
    if (t > 0 && !(a < alpha_bar[static_cast<std::size_t>(t) - 1]))
      throw NumericError("NoiseSchedule: alpha_bar must be strictly decreasing");
  }
  const bool endpoint_required = kind == ScheduleKind::kCosine || T >= 40;
  if (endpoint_required && !(alpha_bar[static_cast<std::size_t>(T)] < 0.02))
    throw NumericError("NoiseSchedule: endpoint alpha_bar[T] not close enough to pure noise");
}

NoiseSchedule make_schedule(ScheduleKind kind, int T) {
  if (T < 4) throw ArgumentError("make_schedule: T must be >= 4");
  NoiseSchedule s;
  s.kind = kind;
  s.T = T;
  s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  if (kind == ScheduleKind::kLinear) {
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double frac = T > 1 ? static_cast<double>(t - 1) / static_cast<double>(T - 1) : 0.0;
      const double beta = kLinearBetaMin + frac * (kLinearBetaMax - kLinearBetaMin);
      prod *= 1.0 - beta;
      s.alpha_bar[static_cast<std::size_t>(t)] = prod;
    }
  } else {
    const double offset = 0.008;
    auto f = [&](double t) {
      const double x = (t / static_cast<double>(T) + offset) / (1.0 + offset) * M_PI / 2.0;
      const double c = std::cos(x);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int t = 1; t <= T; ++t)
      s.alpha_bar[static_cast<std::size_t>(t)] = f(static_cast<double>(t)) / f0;
  }
  s.validate();
  return s;
}

}  // namespace dmaudit
