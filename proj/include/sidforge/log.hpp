#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace sidforge {

enum class LogLevel { quiet = 0, warning = 1, info = 2 };

inline std::atomic<int>& log_level_storage() {
    static std::atomic<int> level{static_cast<int>(LogLevel::warning)};
    return level;
}

inline void set_log_level(LogLevel level) { log_level_storage() = static_cast<int>(level); }

inline std::atomic<long>& warning_count() {
    static std::atomic<long> count{0};
    return count;
}

inline void log_warning(std::string_view msg) {
    ++warning_count();
    if (log_level_storage() >= static_cast<int>(LogLevel::warning)) {
        std::cerr << "warning: " << msg << '\n';
    }
}

inline void log_info(std::string_view msg) {
    if (log_level_storage() >= static_cast<int>(LogLevel::info)) {
        std::cerr << msg << '\n';
    }
}

}  // namespace sidforge
