#pragma once

#include <string>

#include "json.hpp"

namespace sslseg {

/// Canonical hash of a run configuration: SHA-256 over the sorted-key JSON
/// dump. Identical configs collide by construction, which is what makes
/// re-runs no-ops.
std::string config_hash(const nlohmann::json& config);

/// Content-addressed run store: one directory per config hash holding
/// record.json (committed last, atomically) plus the run's artifacts
/// (checkpoint, history.csv). A cell whose record.json exists is complete.
class RunLedger {
 public:
  explicit RunLedger(std::string root);

  const std::string& root() const { return root_; }
  std::string dir_for(const std::string& hash) const;

  bool has(const std::string& hash) const;
  nlohmann::json load_record(const std::string& hash) const;

  /// Creates the cell directory (for artifacts written before commit).
  std::string prepare(const std::string& hash) const;

  /// Atomically publishes the record; the cell counts as complete afterwards.
  void commit(const std::string& hash, const nlohmann::json& record) const;

  std::vector<std::string> all_hashes() const;

 private:
  std::string root_;
};

}  // namespace sslseg
