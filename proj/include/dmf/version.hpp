#pragma once

namespace dmf {
inline constexpr const char* kCodeVersion = "dima-forge 0.1.0";
inline constexpr unsigned kCheckpointVersion = 1;
} // namespace dmf
