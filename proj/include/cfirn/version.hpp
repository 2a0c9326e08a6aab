#pragma once

namespace cfirn {
inline constexpr const char* kVersion = "0.1.0";
}
