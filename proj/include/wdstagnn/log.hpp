#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace wdstagnn {

using WarningSink = std::function<void(std::string_view)>;

namespace detail {
inline std::mutex &warning_mutex() {
    static std::mutex m;
    return m;
}
inline WarningSink &warning_sink_slot() {
    static WarningSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
    return sink;
}
} // namespace detail

/// Replaces the process-wide warning sink and returns the previous one.
inline WarningSink set_warning_sink(WarningSink sink) {
    std::lock_guard lock(detail::warning_mutex());
    return std::exchange(detail::warning_sink_slot(), std::move(sink));
}

inline void warn(std::string_view message) {
    std::lock_guard lock(detail::warning_mutex());
    if (auto &sink = detail::warning_sink_slot()) {
        sink(message);
    }
}

/// Collects warnings for the lifetime of the object (tests, quiet CLI paths).
class WarningCapture {
public:
    WarningCapture() {
        previous_ = set_warning_sink([this](std::string_view m) { messages_.emplace_back(m); });
    }
    ~WarningCapture() { set_warning_sink(std::move(previous_)); }
    WarningCapture(const WarningCapture &) = delete;
    WarningCapture &operator=(const WarningCapture &) = delete;

    const std::vector<std::string> &messages() const { return messages_; }

private:
    WarningSink previous_;
    std::vector<std::string> messages_;
};

} // namespace wdstagnn
