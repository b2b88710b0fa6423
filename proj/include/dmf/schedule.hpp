#pragma once

#include <string>

namespace dmf {

enum class ScheduleKind { Sd, Linear, Cosine };

// Signal-retention schedule alpha(t) on t in [0,1]: alpha(0)=1, alpha(1)=0 up
// to the endpoint clamp, strictly decreasing in between. Closed forms:
//   sd(d):  alpha = 1 / (1 + d^2 tan^2(pi t / 2))
//   linear: alpha = exp(-(b0 t + (b1-b0) t^2 / 2)), b0 = 0.1, b1 = 20
//   cosine: alpha = cos^2((t+s)/(1+s) * pi/2) / cos^2(s/(1+s) * pi/2), s = 0.008
// t is clamped to [t_clamp, 1 - t_clamp] before evaluation.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::Sd;
  double d = 10.0;
  double t_clamp = 1e-4;

  double alpha(double t) const;   // throws if t is outside [0,1]
};

ScheduleKind schedule_kind_from_string(const std::string& name);
std::string schedule_kind_to_string(ScheduleKind kind);

} // namespace dmf
