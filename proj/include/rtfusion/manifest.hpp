#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "rtfusion/config.hpp"
#include "rtfusion/errors.hpp"

namespace rtfusion {

inline constexpr const char* kRunManifest = "run_manifest.json";

/// Record of one CLI invocation. `config_hash` is the git blob SHA-1 of the
/// canonical (sorted, compact) JSON text of `config`.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string output;
  std::string timestamp;

  std::string config_hash() const { return git_blob_sha1(config.dump()); }

  nlohmann::json to_json() const {
    return {{"format", "rtfusion-run-manifest"},
            {"version", 1},
            {"command", command},
            {"config", config},
            {"config_hash", config_hash()},
            {"seed", seed},
            {"output", output},
            {"timestamp", timestamp}};
  }
};

/// Current UTC time as ISO 8601, e.g. 2026-01-31T12:00:00Z.
inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_run_manifest(const std::filesystem::path& path, const RunManifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << m.to_json().dump(2) << '\n';
}

}  // namespace rtfusion
