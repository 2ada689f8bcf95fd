#pragma once

#include <string>

namespace s3 {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kOff = 4 };

/// Messages below the level are dropped. Defaults to kWarn, or the value of
/// S3_LOG_LEVEL (debug|info|warn|error|off) when set.
void set_log_level(LogLevel level);
LogLevel log_level();

void log(LogLevel level, const std::string& msg);
inline void log_info(const std::string& msg) { log(LogLevel::kInfo, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::kWarn, msg); }

}  // namespace s3
