#pragma once

#include <cstdio>
#include <string>

namespace coarsegrain {

/// Shortest form that round-trips a double (17 significant digits).
inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace coarsegrain
