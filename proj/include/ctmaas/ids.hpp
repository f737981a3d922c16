#pragma once

#include <cstdint>
#include <mutex>
#include <random>
#include <string>

#include <boost/uuid/random_generator.hpp>
#include <boost/uuid/uuid_io.hpp>

namespace ctmaas {

/// Seeded UUID source; the same seed yields the same id sequence.
class UuidSource {
 public:
  explicit UuidSource(std::uint64_t seed = 0x5eed) : engine_(seed), gen_(engine_) {}

  std::string next() {
    std::lock_guard lock(mu_);
    return boost::uuids::to_string(gen_());
  }

 private:
  std::mutex mu_;
  std::mt19937_64 engine_;
  boost::uuids::basic_random_generator<std::mt19937_64> gen_;
};

}  // namespace ctmaas
