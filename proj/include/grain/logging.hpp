#pragma once

// Structured JSON Lines logging. Each entry is one object with "ts", "level",
// "event" and any extra fields.

#include <nlohmann/json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <string>

namespace grain {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3 };

inline const char* level_name(LogLevel l) {
  switch (l) {
    case LogLevel::kDebug: return "debug";
    case LogLevel::kInfo: return "info";
    case LogLevel::kWarn: return "warn";
    case LogLevel::kError: return "error";
  }
  return "info";
}

class Logger {
 public:
  Logger() = default;
  explicit Logger(std::ostream* sink, LogLevel min_level = LogLevel::kInfo) : sink_(sink), min_level_(min_level) {}

  static Logger to_file(const std::string& path, LogLevel min_level = LogLevel::kInfo) {
    Logger l;
    l.file_ = std::make_shared<std::ofstream>(path, std::ios::app);
    l.sink_ = l.file_.get();
    l.min_level_ = min_level;
    return l;
  }

  static Logger silent() { return Logger(nullptr); }

  void log(LogLevel level, const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    if (!sink_ || level < min_level_) return;
    nlohmann::ordered_json entry;
    entry["ts"] = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    entry["level"] = level_name(level);
    entry["event"] = event;
    for (auto& [k, v] : fields.items()) entry[k] = v;
    std::lock_guard lock(*mutex_);
    *sink_ << entry.dump() << '\n';
    sink_->flush();
  }

  void info(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    log(LogLevel::kInfo, event, std::move(fields));
  }
  void warn(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    log(LogLevel::kWarn, event, std::move(fields));
  }
  void error(const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    log(LogLevel::kError, event, std::move(fields));
  }

 private:
  std::ostream* sink_ = &std::cerr;
  std::shared_ptr<std::ofstream> file_;
  LogLevel min_level_ = LogLevel::kInfo;
  std::shared_ptr<std::mutex> mutex_ = std::make_shared<std::mutex>();
};

}  // namespace grain
