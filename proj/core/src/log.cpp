#include "s3/log.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>

namespace s3 {

namespace {

LogLevel initial_level() {
    const char* env = std::getenv("S3_LOG_LEVEL");
    if (!env) return LogLevel::kWarn;
    const std::string v(env);
    if (v == "debug") return LogLevel::kDebug;
    if (v == "info") return LogLevel::kInfo;
    if (v == "error") return LogLevel::kError;
    if (v == "off") return LogLevel::kOff;
    return LogLevel::kWarn;
}

LogLevel& level_ref() {
    static LogLevel level = initial_level();
    return level;
}

std::mutex g_log_mutex;

}  // namespace

void set_log_level(LogLevel level) { level_ref() = level; }
LogLevel log_level() { return level_ref(); }

void log(LogLevel level, const std::string& msg) {
    if (level < level_ref()) return;
    static const char* names[] = {"debug", "info", "warning", "error"};
    std::lock_guard<std::mutex> lock(g_log_mutex);
    std::cerr << "[s3] " << names[static_cast<int>(level)] << ": " << msg << '\n';
}

}  // namespace s3
