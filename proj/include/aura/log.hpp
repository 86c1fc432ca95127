#pragma once

#include <string>

// Thin wrapper over spdlog. libtorch bundles a newer fmt whose headers shadow the
// one spdlog was built against, so spdlog is only included from log.cpp, which is
// compiled without the torch include paths.
namespace aura::log {

/// Accepts trace, debug, info, warn, error, off.
void set_level(const std::string& level);

void debug(const std::string& message);
void info(const std::string& message);
void warn(const std::string& message);
void error(const std::string& message);

} // namespace aura::log
