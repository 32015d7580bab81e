#pragma once

#include <functional>
#include <string>

namespace cglab {

using WarningSink = std::function<void(const std::string&)>;

/// Routes warnings to the installed sink (standard error by default).
void warn(const std::string& message);
/// Installs a sink and returns the previous one.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace cglab
