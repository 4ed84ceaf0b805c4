#include "sslseg/ledger.hpp"

#include <filesystem>

#include "sslseg/errors.hpp"
#include "sslseg/io_util.hpp"
#include "sslseg/sha256.hpp"

namespace sslseg {

namespace fs = std::filesystem;

std::string config_hash(const nlohmann::json& config) {
  return sha256_hex(config.dump());
}

RunLedger::RunLedger(std::string root) : root_(std::move(root)) {
  fs::create_directories(root_);
}

std::string RunLedger::dir_for(const std::string& hash) const {
  return root_ + "/" + hash;
}

bool RunLedger::has(const std::string& hash) const {
  return fs::exists(dir_for(hash) + "/record.json");
}

nlohmann::json RunLedger::load_record(const std::string& hash) const {
  return nlohmann::json::parse(read_text_file(dir_for(hash) + "/record.json"));
}

std::string RunLedger::prepare(const std::string& hash) const {
  const std::string dir = dir_for(hash);
  fs::create_directories(dir);
  return dir;
}

void RunLedger::commit(const std::string& hash, const nlohmann::json& record) const {
  prepare(hash);
  write_file_atomic(dir_for(hash) + "/record.json", record.dump(2) + "\n");
}

std::vector<std::string> RunLedger::all_hashes() const {
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(root_)) {
    if (entry.is_directory() && fs::exists(entry.path() / "record.json")) {
      out.push_back(entry.path().filename().string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace sslseg
