#pragma once

#include <string>

namespace pyramid {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from the PYRAMID_LOG env var (error|info|debug), default error.
LogLevel log_level();
void log_msg(LogLevel level, const std::string& msg);

}  // namespace pyramid
