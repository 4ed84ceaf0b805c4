#include <filesystem>

#include "json.hpp"
#include "sslseg/datapipe.hpp"
#include "sslseg/errors.hpp"
#include "sslseg/io_util.hpp"
#include "sslseg/sha256.hpp"

namespace sslseg {

namespace {

using nlohmann::json;

std::vector<std::uint8_t> tensor_to_f64_blob(const Tensor& t) {
  std::vector<std::uint8_t> blob;
  blob.reserve(8 * t.size());
  for (double v : t.data()) append_f64_le(blob, v);
  return blob;
}

Tensor f64_blob_to_tensor(const std::vector<std::uint8_t>& blob,
                          std::vector<std::size_t> shape) {
  Tensor t(shape);
  if (blob.size() != 8 * t.size()) {
    throw ChecksumError("dataset blob has wrong length");
  }
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = read_f64_le(blob.data() + 8 * i);
  return t;
}

json spec_to_json(const PhantomSpec& s) {
  json classes = json::array();
  for (const ClassIntensity& c : s.classes)
    classes.push_back({{"mean", c.mean}, {"std", c.std}});
  return json{{"image_size", s.image_size},
              {"n_images", s.n_images},
              {"background", {{"mean", s.background.mean}, {"std", s.background.std}}},
              {"classes", classes},
              {"noise_std", s.noise_std},
              {"seed", s.seed}};
}

PhantomSpec spec_from_json(const json& j) {
  PhantomSpec s;
  s.image_size = j.at("image_size").get<std::size_t>();
  s.n_images = j.at("n_images").get<std::size_t>();
  s.background = {j.at("background").at("mean").get<double>(),
                  j.at("background").at("std").get<double>()};
  s.classes.clear();
  for (const json& c : j.at("classes"))
    s.classes.push_back({c.at("mean").get<double>(), c.at("std").get<double>()});
  s.noise_std = j.at("noise_std").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

void save_dataset(const PhantomDataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::vector<std::uint8_t> images = tensor_to_f64_blob(ds.images);
  const std::vector<std::uint8_t> raw = tensor_to_f64_blob(ds.raw);
  std::vector<std::uint8_t> labels(ds.labels.size());
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    labels[i] = ds.labels[i] != 0.0 ? 1 : 0;

  json manifest = {
      {"spec", spec_to_json(ds.spec)},
      {"seed", ds.spec.seed},
      {"shapes",
       {{"images", ds.images.shape()},
        {"labels", ds.labels.shape()},
        {"raw", ds.raw.shape()}}},
      {"checksums",
       {{"images.bin", sha256_hex(images)},
        {"labels.bin", sha256_hex(labels)},
        {"raw.bin", sha256_hex(raw)}}},
  };
  write_file_atomic(dir + "/images.bin", images);
  write_file_atomic(dir + "/labels.bin", labels);
  write_file_atomic(dir + "/raw.bin", raw);
  write_file_atomic(dir + "/manifest.json", manifest.dump(2) + "\n");
}

PhantomDataset load_dataset(const std::string& dir) {
  const json manifest = json::parse(read_text_file(dir + "/manifest.json"));
  PhantomDataset ds;
  ds.spec = spec_from_json(manifest.at("spec"));

  auto load_blob = [&](const std::string& name) {
    std::vector<std::uint8_t> blob = read_binary_file(dir + "/" + name);
    const std::string want =
        manifest.at("checksums").at(name).get<std::string>();
    const std::string got = sha256_hex(blob);
    if (got != want) {
      throw ChecksumError("dataset: checksum mismatch for " + name +
                          " (expected " + want + ", got " + got + ")");
    }
    return blob;
  };

  const auto shapes = manifest.at("shapes");
  ds.images = f64_blob_to_tensor(
      load_blob("images.bin"), shapes.at("images").get<std::vector<std::size_t>>());
  ds.raw = f64_blob_to_tensor(
      load_blob("raw.bin"), shapes.at("raw").get<std::vector<std::size_t>>());
  const std::vector<std::uint8_t> labels = load_blob("labels.bin");
  Tensor lab(shapes.at("labels").get<std::vector<std::size_t>>());
  if (labels.size() != lab.size()) {
    throw ChecksumError("dataset: labels.bin has wrong length");
  }
  for (std::size_t i = 0; i < lab.size(); ++i)
    lab[i] = labels[i] ? 1.0 : 0.0;
  ds.labels = std::move(lab);
  return ds;
}

}  // namespace sslseg
