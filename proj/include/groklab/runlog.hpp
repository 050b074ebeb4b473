#pragma once

// JSON-lines metric log. Line 1 is a header carrying the schema version;
// every later line is one record whose first key is "step".

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "groklab/error.hpp"
#include "groklab/training.hpp"

namespace groklab {

inline constexpr const char* kRunLogSchema = "groklab-runlog";
inline constexpr int kRunLogVersion = 1;

inline std::string runlog_header_line() {
  nlohmann::ordered_json h;
  h["schema"] = kRunLogSchema;
  h["version"] = kRunLogVersion;
  return h.dump();
}

/// One record as a single JSON line: step first, then values in name order.
/// Doubles are written with enough digits to round-trip exactly.
inline std::string record_line(const MetricRecord& rec) {
  nlohmann::ordered_json j;
  j["step"] = rec.step;
  for (const auto& [name, value] : rec.values) j[name] = value;
  return j.dump();
}

struct RunLog {
  int version = kRunLogVersion;
  std::vector<MetricRecord> records;

  bool has(const std::string& name) const {
    for (const auto& r : records) {
      if (!r.values.count(name)) return false;
    }
    return !records.empty();
  }
};

/// Parses a log; a malformed line is reported with its 1-based line number.
inline RunLog parse_runlog(std::istream& in, const std::string& source) {
  RunLog log;
  std::string line;
  std::size_t number = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    auto where = [&] { return source + ":" + std::to_string(number) + ": "; };
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw FormatError(where() + "malformed log line");
    if (!header) {
      if (j.value("schema", "") != kRunLogSchema || !j.contains("version") || !j["version"].is_number_integer()) {
        throw FormatError(where() + "missing run log header");
      }
      log.version = j["version"].get<int>();
      if (log.version != kRunLogVersion) {
        throw FormatError(where() + "unsupported run log version " + std::to_string(log.version));
      }
      header = true;
      continue;
    }
    if (!j.contains("step") || !j["step"].is_number_unsigned()) {
      throw FormatError(where() + "record lacks a nonnegative integer 'step'");
    }
    MetricRecord rec;
    rec.step = j["step"].get<std::uint64_t>();
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "step") continue;
      if (!it->is_number()) throw FormatError(where() + "value of '" + it.key() + "' is not a number");
      rec.values[it.key()] = it->get<double>();
    }
    log.records.push_back(std::move(rec));
  }
  if (!header) throw FormatError(source + ": empty run log");
  return log;
}

inline RunLog read_runlog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  return parse_runlog(in, path);
}

/// Appends records to a log file, writing the header first if the file is
/// new or empty.
class RunLogWriter {
 public:
  explicit RunLogWriter(const std::string& path) : path_(path) {
    bool fresh = true;
    {
      std::ifstream probe(path, std::ios::binary | std::ios::ate);
      fresh = !probe || probe.tellg() == 0;
    }
    out_.open(path, std::ios::app);
    if (!out_) throw FormatError("cannot open " + path + " for writing");
    if (fresh) write_line(runlog_header_line());
  }

  void append(const MetricRecord& rec) { write_line(record_line(rec)); }

 private:
  void write_line(const std::string& line) {
    out_ << line << '\n';
    out_.flush();
    if (!out_) throw FormatError("short write to " + path_);
  }

  std::string path_;
  std::ofstream out_;
};

/// Rewrites `path` keeping the header and records with step <= `last_step`.
inline void truncate_runlog(const std::string& path, std::uint64_t last_step) {
  RunLog log = read_runlog(path);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp);
    out << runlog_header_line() << '\n';
    for (const auto& r : log.records) {
      if (r.step <= last_step) out << record_line(r) << '\n';
    }
    if (!out) throw FormatError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot rename " + tmp);
}

}  // namespace groklab
