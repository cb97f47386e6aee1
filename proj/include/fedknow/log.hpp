#pragma once

// stderr logging filtered by FEDKNOW_LOG = error | info | debug (default info).

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>

namespace fedknow::log {

enum class Level { error = 0, info = 1, debug = 2 };

inline Level threshold() {
    static const Level level = [] {
        const char* env = std::getenv("FEDKNOW_LOG");
        if (env == nullptr) return Level::info;
        std::string_view v(env);
        if (v == "error") return Level::error;
        if (v == "debug") return Level::debug;
        return Level::info;
    }();
    return level;
}

inline void write(Level level, std::string_view tag, const std::string& msg) {
    if (static_cast<int>(level) > static_cast<int>(threshold())) return;
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::cerr << "[fedknow " << tag << "] " << msg << '\n';
}

template <typename... Args>
std::string concat(const Args&... args) {
    std::ostringstream ss;
    (ss << ... << args);
    return ss.str();
}

template <typename... Args>
void error(const Args&... args) {
    write(Level::error, "error", concat(args...));
}
template <typename... Args>
void warn(const Args&... args) {
    write(Level::info, "warn", concat(args...));
}
template <typename... Args>
void info(const Args&... args) {
    write(Level::info, "info", concat(args...));
}
template <typename... Args>
void debug(const Args&... args) {
    write(Level::debug, "debug", concat(args...));
}

}  // namespace fedknow::log
