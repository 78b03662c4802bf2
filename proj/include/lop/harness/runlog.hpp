#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lop/core/common.hpp"
#include "lop/core/json.hpp"

namespace lop {

inline constexpr const char* kVersion = "0.1.0";

/// FNV-1a over the canonical dump (sorted keys) of the config without its
/// seeds and output directory, so runs of one setup share a hash.
inline std::string config_hash(const Json& config) {
  Json c = config;
  if (c.is_object()) {
    c.erase("seeds");
    c.erase("output_dir");
  }
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : c.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline Json run_header(const Json& config, std::uint64_t seed) {
  return Json{{"header", Json{{"config_hash", config_hash(config)}, {"seed", seed}, {"version", kVersion}, {"config", config}}}};
}

/// Append-only JSONL writer: the header line first, then one row per call,
/// each flushed so a crash leaves every completed row on disk. Steps must
/// strictly increase.
class RunLogWriter {
 public:
  RunLogWriter(const std::string& path, const Json& config, std::uint64_t seed) : path_(path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    out_.open(path, std::ios::trunc);
    if (!out_) throw Error("cannot open log for writing", path);
    out_ << run_header(config, seed).dump() << '\n';
    out_.flush();
  }

  void write(const Json& row) {
    const long step = row.at("step").get<long>();
    if (rows_ > 0 && step <= last_step_) throw Error("log steps must strictly increase", path_);
    last_step_ = step;
    ++rows_;
    out_ << row.dump() << '\n';
    out_.flush();
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
  long last_step_ = 0;
  long rows_ = 0;
};

struct RunLog {
  Json header;  // the object under "header"
  std::vector<Json> rows;
};

inline RunLog read_runlog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open log", path);
  RunLog log;
  std::string line;
  long n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw ValidationError(std::string("line ") + std::to_string(n) + ": " + e.what(), path);
    }
    if (j.contains("header")) {
      if (!log.header.is_null()) throw ValidationError("second header at line " + std::to_string(n), path);
      log.header = j["header"];
    } else {
      if (log.header.is_null()) throw ValidationError("row before header", path);
      log.rows.push_back(std::move(j));
    }
  }
  if (log.header.is_null()) throw ValidationError("missing header", path);
  return log;
}

/// Output root from LOP_OUTPUT_ROOT, "." when unset.
inline std::filesystem::path output_root() {
  const char* env = std::getenv("LOP_OUTPUT_ROOT");
  return env != nullptr && *env != '\0' ? std::filesystem::path(env) : std::filesystem::path(".");
}

}  // namespace lop
