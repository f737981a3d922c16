#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace ctmaas::store {

/// One change in the append-only log. `crc` covers the canonical JSON of every other field.
struct LogRecord {
  std::uint64_t seq = 0;
  double timestamp = 0.0;
  std::string ns;    // "auth" | "fleet"
  std::string kind;  // "put" | "erase" | "append"
  nlohmann::json payload;
  std::uint32_t crc = 0;

  friend bool operator==(const LogRecord&, const LogRecord&) = default;
};

inline constexpr std::string_view kNamespaces[] = {"auth", "fleet"};

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Bad checksum, torn line or unparseable record. `offset` is the byte where the bad record starts.
class CorruptRecord : public StoreError {
 public:
  CorruptRecord(std::uint64_t offset, const std::string& what) : StoreError(what), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};
class SequenceGap : public StoreError {
 public:
  using StoreError::StoreError;
};

/// Whole-store state: {namespace: {collection: {id: value}}}.
using State = nlohmann::json;

std::uint32_t record_checksum(const LogRecord& r);
/// One NDJSON line including the trailing newline.
std::string encode_record(const LogRecord& r);
/// Parses one line (without newline). Throws CorruptRecord on any defect.
LogRecord decode_record(std::string_view line, std::uint64_t offset = 0);

/// Applies a put/erase/append change to the state.
///   put    {collection, id, value}   replaces the value
///   erase  {collection, id}          removes it
///   append {collection, id, value}   pushes onto an array value
void apply(State& state, const LogRecord& r);
/// Throws StoreError if `apply` would reject the record; never mutates.
void check(const State& state, const LogRecord& r);

/// Records of a log image in order, stopping at the first defect.
struct ReadResult {
  std::vector<LogRecord> records;
  std::uint64_t valid_bytes = 0;
  std::optional<std::string> error;  // what stopped the read, if anything
};
ReadResult read_log(std::string_view content);

/// Strict replay: throws CorruptRecord or SequenceGap instead of stopping quietly.
std::vector<LogRecord> replay(std::string_view content, std::uint64_t from_seq = 0);

struct Snapshot {
  std::uint64_t seq = 0;  // last record folded into `state`
  double timestamp = 0.0;
  State state = State::object();
};

nlohmann::json to_json(const Snapshot& s);
Snapshot snapshot_from_json(const nlohmann::json& j);

/// State from an optional snapshot plus the records after it. Records at or below the
/// snapshot seq are skipped; a gap after it throws SequenceGap.
State restore(const std::optional<Snapshot>& snapshot, const std::vector<LogRecord>& tail);

/// Log plus snapshot files. An empty log path keeps everything in memory.
class Store {
 public:
  Store() = default;
  /// Opens (or creates) the files and recovers the state. A torn or corrupt tail is
  /// cut off so later appends continue from the last good record; `recovery_error`
  /// reports what was discarded.
  Store(std::filesystem::path log_path, std::filesystem::path snapshot_path);

  std::uint64_t append(std::string_view ns, std::string_view kind, nlohmann::json payload, double timestamp);

  std::uint64_t put(std::string_view ns, std::string_view collection, std::string_view id, nlohmann::json value,
                    double timestamp);
  std::uint64_t erase(std::string_view ns, std::string_view collection, std::string_view id, double timestamp);
  std::uint64_t push(std::string_view ns, std::string_view collection, std::string_view id, nlohmann::json value,
                     double timestamp);

  /// Records with seq > from_seq, read from the in-memory log.
  std::vector<LogRecord> records(std::uint64_t from_seq = 0) const;

  /// Writes the snapshot atomically (temp file and rename) and returns it.
  Snapshot snapshot(double now);

  State state() const;
  std::optional<nlohmann::json> get(std::string_view ns, std::string_view collection, std::string_view id) const;
  std::uint64_t last_seq() const;
  const std::optional<std::string>& recovery_error() const { return recovery_error_; }

 private:
  std::filesystem::path log_path_;
  std::filesystem::path snapshot_path_;
  mutable std::mutex mu_;
  State state_ = State::object();
  std::vector<LogRecord> log_;
  std::uint64_t last_seq_ = 0;
  std::optional<std::string> recovery_error_;
};

}  // namespace ctmaas::store
