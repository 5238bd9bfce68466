#include "koopman_lab/log.hpp"

#include <iostream>
#include <mutex>

#include "koopman_lab/errors.hpp"

namespace koopman_lab {

namespace {

std::string join_violations(const std::vector<std::string>& v) {
  std::string out = "config validation failed (" + std::to_string(v.size()) + " violation";
  out += v.size() == 1 ? ")" : "s)";
  for (const auto& s : v) {
    out += "\n  - ";
    out += s;
  }
  return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> violations)
    : std::runtime_error(join_violations(violations)), violations_(std::move(violations)) {}

namespace log {

namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

const char* level_name(Level level) {
  switch (level) {
    case Level::Debug: return "debug";
    case Level::Info: return "info";
    case Level::Warning: return "warning";
    case Level::Error: return "error";
  }
  return "?";
}

Sink& current_sink() {
  static Sink sink = [](Level level, std::string_view message) {
    std::cerr << "[" << level_name(level) << "] " << message << '\n';
  };
  return sink;
}

Level& min_level() {
  static Level level = Level::Info;
  return level;
}

}  // namespace

Sink set_sink(Sink sink) {
  std::lock_guard lock(sink_mutex());
  Sink old = std::move(current_sink());
  current_sink() = std::move(sink);
  return old;
}

void set_min_level(Level level) {
  std::lock_guard lock(sink_mutex());
  min_level() = level;
}

void write(Level level, std::string_view message) {
  std::lock_guard lock(sink_mutex());
  if (level < min_level() || !current_sink()) return;
  current_sink()(level, message);
}

}  // namespace log
}  // namespace koopman_lab
