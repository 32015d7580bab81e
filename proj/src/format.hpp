#pragma once

#include <charconv>
#include <string>
#include <vector>

namespace cglab {

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string join_problems(const std::string& what, const std::vector<std::string>& problems) {
    std::string out = what + ": ";
    for (std::size_t i = 0; i < problems.size(); ++i) out += (i ? "; " : "") + problems[i];
    return out;
}

}  // namespace cglab
