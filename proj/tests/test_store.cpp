#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "ctmaas/store.hpp"
#include "support/oracles.hpp"

using namespace ctmaas::store;
using nlohmann::json;
namespace oracle = ctmaas::oracle;

namespace {

/// Plain-map model of the store, applied independently of `apply`.
struct Model {
  std::map<std::string, std::map<std::string, std::map<std::string, json>>> data;

  void put(const std::string& ns, const std::string& c, const std::string& id, const json& v) { data[ns][c][id] = v; }
  void erase(const std::string& ns, const std::string& c, const std::string& id) { data[ns][c].erase(id); }
  void push(const std::string& ns, const std::string& c, const std::string& id, const json& v) {
    auto& slot = data[ns][c][id];
    if (slot.is_null()) slot = json::array();
    slot.push_back(v);
  }

  /// Same comparison shape as the store: empty collections count as absent.
  bool matches(const State& s) const {
    std::size_t seen = 0;
    for (const auto& [ns, colls] : data)
      for (const auto& [c, items] : colls)
        for (const auto& [id, v] : items) {
          ++seen;
          if (!s.contains(ns) || !s[ns].contains(c) || !s[ns][c].contains(id) || s[ns][c][id] != v) return false;
        }
    std::size_t total = 0;
    for (const auto& [ns, colls] : s.items())
      for (const auto& [c, items] : colls.items()) total += items.size();
    return seen == total;
  }
};

struct Op {
  std::string kind, ns, coll, id;
  json value;
};

Op random_op(std::mt19937_64& rng, const Model& m) {
  Op op;
  op.ns = oracle::coin(rng, 0.5) ? "auth" : "fleet";
  op.coll = std::vector<std::string>{"vehicles", "drivers", "trips"}[oracle::uniform_int(rng, 0, 2)];
  op.id = "id" + std::to_string(oracle::uniform_int(rng, 0, 5));
  bool scalar = false;
  if (const auto ns = m.data.find(op.ns); ns != m.data.end())
    if (const auto c = ns->second.find(op.coll); c != ns->second.end())
      if (const auto v = c->second.find(op.id); v != c->second.end()) scalar = !v->second.is_array();
  const int pick = oracle::uniform_int(rng, 0, 9);
  if (pick < 2) {
    op.kind = "erase";
  } else if (pick < 5 && !scalar) {
    op.kind = "append";
    op.value = json{{"t", oracle::uniform_int(rng, 0, 1000)}};
  } else {
    op.kind = "put";
    op.value = json{{"name", oracle::random_word(rng)}, {"n", oracle::uniform(rng, -5, 5)}};
  }
  return op;
}

/// Runs `n` random ops against the store and the model. Returns the ops.
std::vector<Op> drive(Store& s, Model& m, std::mt19937_64& rng, int n, double t0 = 1000) {
  std::vector<Op> ops;
  for (int i = 0; i < n; ++i) {
    const auto op = random_op(rng, m);
    const double t = t0 + i;
    if (op.kind == "put") {
      s.put(op.ns, op.coll, op.id, op.value, t);
      m.put(op.ns, op.coll, op.id, op.value);
    } else if (op.kind == "erase") {
      s.erase(op.ns, op.coll, op.id, t);
      m.erase(op.ns, op.coll, op.id);
    } else {
      s.push(op.ns, op.coll, op.id, op.value, t);
      m.push(op.ns, op.coll, op.id, op.value);
    }
    ops.push_back(op);
  }
  return ops;
}

std::string log_image(const std::vector<LogRecord>& records) {
  std::string out;
  for (const auto& r : records) out += encode_record(r);
  return out;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("ctmaas-store-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(d);
  return d;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Append, ThreeRecordsReplayInOrder) {
  Store s;
  s.put("fleet", "vehicles", "v1", json{{"plate", "A"}}, 1);
  s.put("fleet", "vehicles", "v2", json{{"plate", "B"}}, 2);
  s.erase("fleet", "vehicles", "v1", 3);
  const auto records = replay(log_image(s.records()));
  ASSERT_EQ(records.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(records[i].seq, i + 1);
  EXPECT_EQ(records[2].kind, "erase");
  EXPECT_FALSE(s.get("fleet", "vehicles", "v1"));
  EXPECT_EQ(*s.get("fleet", "vehicles", "v2"), (json{{"plate", "B"}}));
}

TEST(Append, RejectsMalformedChanges) {
  Store s;
  EXPECT_THROW(s.put("billing", "x", "y", 1, 0), StoreError);
  EXPECT_THROW(s.append("fleet", "upsert", json{{"collection", "c"}, {"id", "i"}, {"value", 1}}, 0), StoreError);
  EXPECT_THROW(s.append("fleet", "put", json{{"collection", "c"}, {"id", "i"}}, 0), StoreError);
  s.put("fleet", "c", "scalar", 5, 0);
  EXPECT_THROW(s.push("fleet", "c", "scalar", 6, 0), StoreError);
  EXPECT_EQ(s.last_seq(), 1u);
}

TEST(Record, ChecksumDetectsTamperingAndDecodesBack) {
  LogRecord r{7, 12.5, "fleet", "put", json{{"collection", "c"}, {"id", "i"}, {"value", {1, 2}}}, 0};
  r.crc = record_checksum(r);
  const auto line = encode_record(r);
  ASSERT_EQ(line.back(), '\n');
  EXPECT_EQ(decode_record(std::string_view(line).substr(0, line.size() - 1)), r);
  auto bad = line.substr(0, line.size() - 1);
  bad[bad.find("\"c\"") + 1] = 'd';
  EXPECT_THROW(decode_record(bad), CorruptRecord);
  EXPECT_THROW(decode_record("{not json"), CorruptRecord);
}

TEST(Replay, TruncatedFinalRecordIsCorruptWithPrefixIntact) {
  Store s;
  for (int i = 0; i < 4; ++i) s.put("fleet", "c", "i" + std::to_string(i), i, i);
  const auto image = log_image(s.records());
  const auto cut = image.substr(0, image.size() - 5);
  try {
    replay(cut);
    FAIL() << "expected CorruptRecord";
  } catch (const CorruptRecord& e) {
    EXPECT_EQ(e.offset(), image.rfind('\n', image.size() - 2) + 1);
  }
  const auto read = read_log(cut);
  EXPECT_EQ(read.records.size(), 3u);
  EXPECT_TRUE(read.error);
  EXPECT_EQ(read.valid_bytes, image.rfind('\n', image.size() - 2) + 1);
}

TEST(Replay, GapAndFromSeq) {
  Store s;
  for (int i = 0; i < 5; ++i) s.put("fleet", "c", "k", i, i);
  auto records = s.records();
  EXPECT_EQ(replay(log_image(records), 3).size(), 2u);
  records.erase(records.begin() + 2);
  EXPECT_THROW(replay(log_image(records)), SequenceGap);
  EXPECT_THROW(restore(std::nullopt, records), SequenceGap);
}

TEST(Restore, SnapshotPlusTailEqualsFullReplay) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    Store s;
    Model m;
    const int n = oracle::uniform_int(rng, 1, 60);
    drive(s, m, rng, n);
    const auto all = s.records();
    const auto full = restore(std::nullopt, all);
    EXPECT_TRUE(m.matches(full)) << "trial " << trial;
    EXPECT_EQ(full, s.state());
    // snapshot at an arbitrary k, rebuilt independently from the prefix
    const auto k = static_cast<std::size_t>(oracle::uniform_int(rng, 0, n));
    Snapshot snap{k, 0, restore(std::nullopt, std::vector<LogRecord>(all.begin(), all.begin() + k))};
    EXPECT_EQ(restore(snap, all), full) << "trial " << trial << " k " << k;
    EXPECT_EQ(restore(snap, std::vector<LogRecord>(all.begin() + k, all.end())), full);
    EXPECT_EQ(restore(snapshot_from_json(to_json(snap)), all), full);
  }
}

TEST(Restore, ReplayIsDeterministic) {
  std::mt19937_64 rng(8);
  Store s;
  Model m;
  drive(s, m, rng, 200);
  const auto image = log_image(s.records());
  EXPECT_EQ(restore(std::nullopt, replay(image)), restore(std::nullopt, replay(image)));
  EXPECT_EQ(log_image(replay(image)), image);
}

TEST(Truncation, AnyCutYieldsValidPrefix) {
  std::mt19937_64 rng(77);
  Store s;
  Model reference;
  drive(s, reference, rng, 80);
  const auto all = s.records();
  const auto image = log_image(all);
  std::vector<std::size_t> line_ends;  // byte just after each newline
  for (std::size_t i = 0; i < image.size(); ++i)
    if (image[i] == '\n') line_ends.push_back(i + 1);
  ASSERT_EQ(line_ends.size(), all.size());

  for (int trial = 0; trial < 500; ++trial) {
    const auto cut = static_cast<std::size_t>(oracle::uniform_int(rng, 0, static_cast<int>(image.size())));
    const auto whole = static_cast<std::size_t>(std::upper_bound(line_ends.begin(), line_ends.end(), cut) -
                                                line_ends.begin());
    const auto read = read_log(std::string_view(image).substr(0, cut));
    ASSERT_EQ(read.records.size(), whole) << "cut " << cut;
    EXPECT_EQ(read.valid_bytes, whole == 0 ? 0 : line_ends[whole - 1]);
    EXPECT_EQ(read.error.has_value(), cut != read.valid_bytes);
    for (std::size_t i = 0; i < whole; ++i) EXPECT_EQ(read.records[i], all[i]);
    EXPECT_EQ(restore(std::nullopt, read.records),
              restore(std::nullopt, std::vector<LogRecord>(all.begin(), all.begin() + whole)));
  }
}

TEST(Truncation, FlippedByteNeverYieldsForeignRecord) {
  std::mt19937_64 rng(78);
  Store s;
  Model m;
  drive(s, m, rng, 30);
  const auto all = s.records();
  const auto image = log_image(all);
  for (int trial = 0; trial < 300; ++trial) {
    auto bad = image;
    const auto at = static_cast<std::size_t>(oracle::uniform_int(rng, 0, static_cast<int>(image.size()) - 1));
    bad[at] = static_cast<char>(bad[at] ^ (1 << oracle::uniform_int(rng, 0, 6)));
    const auto read = read_log(bad);
    // whatever survives is a prefix of the true log
    ASSERT_LE(read.records.size(), all.size());
    for (std::size_t i = 0; i < read.records.size(); ++i) EXPECT_EQ(read.records[i], all[i]) << "trial " << trial;
  }
}

TEST(StoreFiles, ReopenRecoversStateAndCutsTornTail) {
  const auto dir = temp_dir("reopen");
  const auto log = dir / "log.ndjson";
  const auto snap = dir / "snapshot.json";
  std::mt19937_64 rng(4);
  Model m;
  {
    Store s(log, snap);
    drive(s, m, rng, 40);
    s.snapshot(2000);
    drive(s, m, rng, 20, 3000);
  }
  {
    Store s(log, snap);
    EXPECT_FALSE(s.recovery_error());
    EXPECT_EQ(s.last_seq(), 60u);
    EXPECT_TRUE(m.matches(s.state()));
  }
  // tear the last record
  const auto size = std::filesystem::file_size(log);
  std::filesystem::resize_file(log, size - 3);
  const auto image = slurp(log);
  const auto good = image.rfind('\n') + 1;
  {
    Store s(log, snap);
    ASSERT_TRUE(s.recovery_error());
    EXPECT_EQ(s.last_seq(), 59u);
    EXPECT_EQ(std::filesystem::file_size(log), good);
    s.put("fleet", "after", "x", 1, 5000);
    EXPECT_EQ(s.last_seq(), 60u);
  }
  Store again(log, snap);
  EXPECT_FALSE(again.recovery_error());
  EXPECT_EQ(*again.get("fleet", "after", "x"), 1);
  EXPECT_EQ(replay(slurp(log)).back().seq, 60u);
  std::filesystem::remove_all(dir);
}

TEST(StoreFiles, BadSnapshotRefused) {
  const auto dir = temp_dir("badsnap");
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "snapshot.json") << "{oops";
  EXPECT_THROW(Store(dir / "log.ndjson", dir / "snapshot.json"), StoreError);
  std::filesystem::remove_all(dir);
}
