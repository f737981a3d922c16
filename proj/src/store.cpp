#include "ctmaas/store.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <boost/crc.hpp>

namespace ctmaas::store {

using nlohmann::json;

namespace {

json body_of(const LogRecord& r) {
  return json{{"seq", r.seq}, {"timestamp", r.timestamp}, {"namespace", r.ns}, {"kind", r.kind}, {"payload", r.payload}};
}

bool known_namespace(std::string_view ns) {
  return std::find(std::begin(kNamespaces), std::end(kNamespaces), ns) != std::end(kNamespaces);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::uint32_t record_checksum(const LogRecord& r) {
  const std::string text = body_of(r).dump();
  boost::crc_32_type crc;
  crc.process_bytes(text.data(), text.size());
  return crc.checksum();
}

std::string encode_record(const LogRecord& r) {
  json j = body_of(r);
  j["crc"] = record_checksum(r);
  return j.dump() + "\n";
}

LogRecord decode_record(std::string_view line, std::uint64_t offset) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw CorruptRecord(offset, "unparseable record at byte " + std::to_string(offset));
  }
  LogRecord r;
  try {
    r.seq = j.at("seq").get<std::uint64_t>();
    r.timestamp = j.at("timestamp").get<double>();
    r.ns = j.at("namespace").get<std::string>();
    r.kind = j.at("kind").get<std::string>();
    r.payload = j.at("payload");
    r.crc = j.at("crc").get<std::uint32_t>();
  } catch (const json::exception&) {
    throw CorruptRecord(offset, "record at byte " + std::to_string(offset) + " lacks required fields");
  }
  if (record_checksum(r) != r.crc)
    throw CorruptRecord(offset, "checksum mismatch for record seq " + std::to_string(r.seq));
  return r;
}

void check(const State& state, const LogRecord& r) {
  if (!known_namespace(r.ns)) throw StoreError("unknown namespace " + r.ns);
  const auto& p = r.payload;
  if (!p.is_object() || !p.contains("collection") || !p.contains("id") || !p["collection"].is_string() ||
      !p["id"].is_string())
    throw StoreError("record " + std::to_string(r.seq) + " payload needs collection and id");
  if (r.kind != "put" && r.kind != "erase" && r.kind != "append") throw StoreError("unknown record kind " + r.kind);
  if (r.kind != "erase" && !p.contains("value")) throw StoreError("record " + std::to_string(r.seq) + " lacks a value");
  if (r.kind != "append") return;
  const auto ns = state.find(r.ns);
  if (ns == state.end()) return;
  const auto coll = ns->find(p["collection"].get<std::string>());
  if (coll == ns->end()) return;
  const auto it = coll->find(p["id"].get<std::string>());
  if (it != coll->end() && !it->is_array())
    throw StoreError("append onto non-array " + p["collection"].get<std::string>() + "/" + p["id"].get<std::string>());
}

void apply(State& state, const LogRecord& r) {
  check(state, r);
  const auto& p = r.payload;
  const std::string collection = p["collection"].get<std::string>();
  const std::string id = p["id"].get<std::string>();
  if (r.kind == "erase") {
    // erasing something never stored leaves no empty containers behind
    const auto ns = state.find(r.ns);
    if (ns == state.end()) return;
    const auto coll = ns->find(collection);
    if (coll != ns->end()) coll->erase(id);
    return;
  }
  auto& coll = state[r.ns][collection];
  if (r.kind == "put") {
    coll[id] = p["value"];
  } else {
    auto& arr = coll[id];
    if (arr.is_null()) arr = json::array();
    arr.push_back(p["value"]);
  }
}

ReadResult read_log(std::string_view content) {
  ReadResult out;
  std::size_t pos = 0;
  std::uint64_t prev = 0;
  while (pos < content.size()) {
    const auto nl = content.find('\n', pos);
    if (nl == std::string_view::npos) {
      out.error = "torn record at byte " + std::to_string(pos);
      break;
    }
    try {
      auto r = decode_record(content.substr(pos, nl - pos), pos);
      if (!out.records.empty() && r.seq != prev + 1) {
        out.error = "sequence gap after " + std::to_string(prev);
        break;
      }
      prev = r.seq;
      out.records.push_back(std::move(r));
    } catch (const CorruptRecord& e) {
      out.error = e.what();
      break;
    }
    pos = nl + 1;
    out.valid_bytes = pos;
  }
  return out;
}

std::vector<LogRecord> replay(std::string_view content, std::uint64_t from_seq) {
  std::vector<LogRecord> out;
  std::size_t pos = 0;
  std::optional<std::uint64_t> prev;
  while (pos < content.size()) {
    const auto nl = content.find('\n', pos);
    if (nl == std::string_view::npos) throw CorruptRecord(pos, "torn record at byte " + std::to_string(pos));
    auto r = decode_record(content.substr(pos, nl - pos), pos);
    if (prev && r.seq != *prev + 1)
      throw SequenceGap("sequence jumps from " + std::to_string(*prev) + " to " + std::to_string(r.seq));
    prev = r.seq;
    if (r.seq > from_seq) out.push_back(std::move(r));
    pos = nl + 1;
  }
  return out;
}

json to_json(const Snapshot& s) { return json{{"seq", s.seq}, {"timestamp", s.timestamp}, {"state", s.state}}; }

Snapshot snapshot_from_json(const json& j) {
  try {
    return Snapshot{j.at("seq").get<std::uint64_t>(), j.at("timestamp").get<double>(), j.at("state")};
  } catch (const json::exception& e) {
    throw StoreError(std::string("bad snapshot: ") + e.what());
  }
}

State restore(const std::optional<Snapshot>& snapshot, const std::vector<LogRecord>& tail) {
  State state = snapshot ? snapshot->state : State::object();
  std::uint64_t seq = snapshot ? snapshot->seq : 0;
  for (const auto& r : tail) {
    if (r.seq <= seq) continue;
    if (r.seq != seq + 1)
      throw SequenceGap("expected seq " + std::to_string(seq + 1) + ", found " + std::to_string(r.seq));
    store::apply(state, r);
    seq = r.seq;
  }
  return state;
}

Store::Store(std::filesystem::path log_path, std::filesystem::path snapshot_path)
    : log_path_(std::move(log_path)), snapshot_path_(std::move(snapshot_path)) {
  for (const auto& p : {log_path_, snapshot_path_})
    if (!p.empty() && p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::optional<Snapshot> snap;
  if (!snapshot_path_.empty() && std::filesystem::exists(snapshot_path_)) {
    try {
      snap = snapshot_from_json(json::parse(read_file(snapshot_path_)));
    } catch (const json::parse_error& e) {
      throw StoreError("snapshot " + snapshot_path_.string() + " is not valid JSON");
    }
  }
  if (!log_path_.empty() && std::filesystem::exists(log_path_)) {
    const std::string content = read_file(log_path_);
    auto result = read_log(content);
    if (result.error) {
      recovery_error_ = result.error;
      std::filesystem::resize_file(log_path_, result.valid_bytes);
    }
    log_ = std::move(result.records);
  }
  state_ = restore(snap, log_);
  last_seq_ = log_.empty() ? (snap ? snap->seq : 0) : std::max(log_.back().seq, snap ? snap->seq : 0);
}

std::uint64_t Store::append(std::string_view ns, std::string_view kind, json payload, double timestamp) {
  std::lock_guard lock(mu_);
  LogRecord r{last_seq_ + 1, timestamp, std::string(ns), std::string(kind), std::move(payload), 0};
  r.crc = record_checksum(r);
  check(state_, r);  // rejects bad records before they reach the file
  if (!log_path_.empty()) {
    std::ofstream out(log_path_, std::ios::binary | std::ios::app);
    out << encode_record(r);
    out.flush();
    if (!out) throw StoreError("cannot append to " + log_path_.string());
  }
  store::apply(state_, r);
  last_seq_ = r.seq;
  log_.push_back(std::move(r));
  return last_seq_;
}

std::uint64_t Store::put(std::string_view ns, std::string_view collection, std::string_view id, json value,
                         double timestamp) {
  return append(ns, "put", json{{"collection", collection}, {"id", id}, {"value", std::move(value)}}, timestamp);
}

std::uint64_t Store::erase(std::string_view ns, std::string_view collection, std::string_view id, double timestamp) {
  return append(ns, "erase", json{{"collection", collection}, {"id", id}}, timestamp);
}

std::uint64_t Store::push(std::string_view ns, std::string_view collection, std::string_view id, json value,
                          double timestamp) {
  return append(ns, "append", json{{"collection", collection}, {"id", id}, {"value", std::move(value)}}, timestamp);
}

std::vector<LogRecord> Store::records(std::uint64_t from_seq) const {
  std::lock_guard lock(mu_);
  std::vector<LogRecord> out;
  for (const auto& r : log_)
    if (r.seq > from_seq) out.push_back(r);
  return out;
}

Snapshot Store::snapshot(double now) {
  std::lock_guard lock(mu_);
  Snapshot s{last_seq_, now, state_};
  if (!snapshot_path_.empty()) {
    auto tmp = snapshot_path_;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << to_json(s).dump() << "\n";
      if (!out) throw StoreError("cannot write snapshot " + tmp.string());
    }
    std::filesystem::rename(tmp, snapshot_path_);
  }
  return s;
}

State Store::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

std::optional<json> Store::get(std::string_view ns, std::string_view collection, std::string_view id) const {
  std::lock_guard lock(mu_);
  const std::string n(ns), c(collection), i(id);
  if (!state_.contains(n) || !state_[n].contains(c) || !state_[n][c].contains(i)) return std::nullopt;
  return std::optional<json>(std::in_place, state_[n][c][i]);
}

std::uint64_t Store::last_seq() const {
  std::lock_guard lock(mu_);
  return last_seq_;
}

}  // namespace ctmaas::store
