// Copyright 2026 The atpt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "atpt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

namespace atpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'A', 'T', 'P', 'T', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::istream& in, const std::string& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw Error("truncated archive: " + path);
  return value;
}

std::string take_bytes(std::istream& in, std::size_t n, const std::string& path) {
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n)))
    throw Error("truncated archive: " + path);
  return s;
}

}  // namespace

const Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [key, t] : tensors)
    if (key == name) return t;
  throw Error("archive has no tensor named '" + name + "'");
}

void write_archive(const std::string& path, const TensorArchive& archive) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(kMagic, sizeof kMagic);
  const std::string config = archive.config.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, t] : archive.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw Error("write failed: " + path);
}

TensorArchive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  if (take_bytes(in, sizeof kMagic, path) != std::string(kMagic, sizeof kMagic))
    throw Error("not a tensor archive: " + path);
  TensorArchive archive;
  const auto config_len = take<std::uint32_t>(in, path);
  archive.config = Json::parse(take_bytes(in, config_len, path));
  const auto count = take<std::uint32_t>(in, path);
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = take_bytes(in, take<std::uint32_t>(in, path), path);
    const auto rank = take<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(take<std::uint64_t>(in, path));
    Tensor t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw Error("truncated archive: " + path);
    archive.tensors.emplace_back(std::move(name), std::move(t));
  }
  return archive;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes.data(), bytes.size());
  return s.str();
}

Json to_json(const ModelConfig& c) {
  return Json{{"encoder",
               {{"image_size", c.encoder.image_size},
                {"patch_size", c.encoder.patch_size},
                {"blocks", c.encoder.blocks},
                {"heads", c.encoder.heads},
                {"embed_dim", c.encoder.embed_dim},
                {"mlp_ratio", c.encoder.mlp_ratio},
                {"feature_dim", c.encoder.feature_dim},
                {"pixel_mean", c.encoder.pixel_mean},
                {"pixel_std", c.encoder.pixel_std}}},
              {"text",
               {{"classes", c.text.classes},
                {"prompts", c.text.prompts},
                {"text_dim", c.text.text_dim},
                {"mlp_ratio", c.text.mlp_ratio}}},
              {"tau", c.tau}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  const Json& e = j.at("encoder");
  c.encoder.image_size = e.at("image_size");
  c.encoder.patch_size = e.at("patch_size");
  c.encoder.blocks = e.at("blocks");
  c.encoder.heads = e.at("heads");
  c.encoder.embed_dim = e.at("embed_dim");
  c.encoder.mlp_ratio = e.at("mlp_ratio");
  c.encoder.feature_dim = e.at("feature_dim");
  c.encoder.pixel_mean = e.at("pixel_mean");
  c.encoder.pixel_std = e.at("pixel_std");
  const Json& t = j.at("text");
  c.text.classes = t.at("classes");
  c.text.prompts = t.at("prompts");
  c.text.text_dim = t.at("text_dim");
  c.text.mlp_ratio = t.at("mlp_ratio");
  c.tau = j.at("tau");
  c.validate();
  return c;
}

void save_model(const std::string& path, const Model& model, const Json& manifest_extra) {
  TensorArchive archive;
  archive.config = to_json(model.config);
  for (const auto& [name, t] : named_tensors(model)) archive.tensors.emplace_back(name, *t);
  write_archive(path, archive);
  Json manifest = manifest_extra.is_object() ? manifest_extra : Json::object();
  manifest["config"] = archive.config;
  manifest["tau"] = model.config.tau;
  manifest["model_hash"] = file_hash(path);
  write_json(path + ".json", manifest);
}

Model load_model(const std::string& path) {
  const TensorArchive archive = read_archive(path);
  Model model = init_model(model_config_from_json(archive.config), 0);
  for (auto& [name, t] : named_tensors(model)) {
    const Tensor& stored = archive.get(name);
    if (stored.shape() != t->shape()) throw ShapeError("load_model " + name, stored.shape(), t->shape());
    *t = stored;
  }
  model.refresh_cache();
  return model;
}

Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return Json::parse(in);
}

void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace atpt
