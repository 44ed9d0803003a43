#pragma once

namespace tsdm {
inline constexpr const char* kVersion = "0.1.0";
}
