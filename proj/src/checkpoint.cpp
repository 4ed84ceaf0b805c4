#include <filesystem>
#include <map>

#include "json.hpp"
#include "sslseg/errors.hpp"
#include "sslseg/io_util.hpp"
#include "sslseg/unet.hpp"

namespace sslseg {

namespace {

using nlohmann::json;

const char* head_name(Head h) {
  return h == Head::Inpaint ? "inpaint" : "segment";
}

Head head_from_name(const std::string& s) {
  if (s == "inpaint") return Head::Inpaint;
  if (s == "segment") return Head::Segment;
  throw ConfigError("checkpoint: unknown head '" + s + "'");
}

json config_to_json(const UNetConfig& cfg) {
  return json{{"depth", cfg.depth},
              {"base_filters", cfg.base_filters},
              {"in_channels", cfg.in_channels},
              {"out_channels", cfg.out_channels},
              {"groups", cfg.groups},
              {"head", head_name(cfg.head)},
              {"seed", cfg.seed}};
}

UNetConfig config_from_json(const json& j) {
  UNetConfig cfg;
  cfg.depth = j.at("depth").get<std::size_t>();
  cfg.base_filters = j.at("base_filters").get<std::size_t>();
  cfg.in_channels = j.at("in_channels").get<std::size_t>();
  cfg.out_channels = j.at("out_channels").get<std::size_t>();
  cfg.groups = j.at("groups").get<std::size_t>();
  cfg.head = head_from_name(j.at("head").get<std::string>());
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const UNet& model, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::uint8_t> blob;
  json groups = {{"encoder", json::array()},
                 {"decoder", json::array()},
                 {"post", json::array()}};
  for (const Param& p : model.params()) {
    json entry = {{"name", p.name},
                  {"shape", p.value.shape()},
                  {"offset", blob.size()}};
    groups[group_name(p.group)].push_back(entry);
    for (double v : p.value.data()) append_f64_le(blob, v);
  }
  json manifest = {
      {"config", config_to_json(model.config())},
      {"seed", model.config().seed},
      {"groups", groups},
      {"freeze_flags",
       {{"encoder", model.frozen(Group::Encoder)},
        {"decoder", model.frozen(Group::Decoder)},
        {"post", model.frozen(Group::Post)}}},
  };
  write_file_atomic(dir + "/weights.bin", blob);
  write_file_atomic(dir + "/manifest.json", manifest.dump(2) + "\n");
}

UNet load_checkpoint(const std::string& dir) {
  const json manifest = json::parse(read_text_file(dir + "/manifest.json"));
  const std::vector<std::uint8_t> blob = read_binary_file(dir + "/weights.bin");
  UNet model = UNet::build(config_from_json(manifest.at("config")));

  std::map<std::string, std::pair<std::vector<std::size_t>, std::size_t>> entries;
  for (const Group g : {Group::Encoder, Group::Decoder, Group::Post}) {
    for (const json& e : manifest.at("groups").at(group_name(g))) {
      entries[e.at("name").get<std::string>()] = {
          e.at("shape").get<std::vector<std::size_t>>(),
          e.at("offset").get<std::size_t>()};
    }
  }
  if (entries.size() != model.params().size()) {
    throw IncompatibleError("checkpoint: parameter count mismatch");
  }
  for (Param& p : model.params_mut()) {
    auto it = entries.find(p.name);
    if (it == entries.end()) {
      throw IncompatibleError("checkpoint: missing parameter " + p.name);
    }
    const auto& [shape, offset] = it->second;
    if (shape != p.value.shape()) {
      throw IncompatibleError("checkpoint: shape mismatch for " + p.name);
    }
    if (offset + 8 * p.value.size() > blob.size()) {
      throw ChecksumError("checkpoint: weights.bin too short for " + p.name);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i)
      p.value[i] = read_f64_le(blob.data() + offset + 8 * i);
  }
  const json& ff = manifest.at("freeze_flags");
  model.set_frozen(Group::Encoder, ff.at("encoder").get<bool>());
  model.set_frozen(Group::Decoder, ff.at("decoder").get<bool>());
  model.set_frozen(Group::Post, ff.at("post").get<bool>());
  return model;
}

}  // namespace sslseg
