#pragma once

namespace poisonforge {

inline constexpr const char* kArtifactVersion = "poisonforge 0.1.0";
inline constexpr const char* kContainerMagic = "PFRGCONT";

}  // namespace poisonforge
