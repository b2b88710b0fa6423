#include "dmf/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dmf {

double NoiseSchedule::alpha(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("schedule: t outside [0,1]");
  t = std::clamp(t, t_clamp, 1.0 - t_clamp);
  switch (kind) {
    case ScheduleKind::Sd: {
      const double tn = std::tan(M_PI * t / 2.0);
      return 1.0 / (1.0 + d * d * tn * tn);
    }
    case ScheduleKind::Linear: {
      const double b0 = 0.1, b1 = 20.0;
      return std::exp(-(b0 * t + 0.5 * (b1 - b0) * t * t));
    }
    case ScheduleKind::Cosine: {
      const double s = 0.008;
      const double f = std::cos((t + s) / (1.0 + s) * M_PI / 2.0);
      const double f0 = std::cos(s / (1.0 + s) * M_PI / 2.0);
      return (f * f) / (f0 * f0);
    }
  }
  throw std::logic_error("schedule: unknown kind");
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "sd") return ScheduleKind::Sd;
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "cosine") return ScheduleKind::Cosine;
  throw std::invalid_argument("schedule: unknown kind '" + name + "' (sd|linear|cosine)");
}

std::string schedule_kind_to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Sd: return "sd";
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Cosine: return "cosine";
  }
  return "?";
}

} // namespace dmf
