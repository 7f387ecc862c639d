#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include <json.hpp>

#include "poisonforge/image_batch.hpp"
#include "poisonforge/version.hpp"

namespace poisonforge::data {

using json = nlohmann::json;

// Single-file binary container: 8-byte magic, u64-LE header length, JSON
// header, then raw little-endian float32 arrays at offsets recorded in the
// header. Headers are plain text so artifact files diff cleanly; payloads
// round-trip bit-exact.

struct Container {
  json header;
  std::map<std::string, std::vector<float>> arrays;
  std::map<std::string, std::vector<int>> array_shapes;
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

/// Write bytes to `path` atomically (temp file + rename).
inline void atomic_write(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + tmp.string() + "' for write");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, target);
}

}  // namespace detail

/// Serialize named float arrays plus a JSON header. `kind` tags the payload
/// ("image_batch", "poisoned_dataset", "checkpoint", "representations").
/// Every file embeds the artifact version and the resolved run config.
inline void save_container(
    const std::string& path, const std::string& kind, json extra_header,
    const std::vector<std::pair<std::string, const Tensor<float>*>>& arrays,
    const std::map<std::string, std::string>& config = {}) {
  json header = std::move(extra_header);
  header["magic"] = "poisonforge-container";
  header["artifact_version"] = kArtifactVersion;
  header["kind"] = kind;
  header["config"] = config;
  json arr = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : arrays) {
    std::uint64_t bytes = std::uint64_t(t->numel()) * 4;
    arr.push_back({{"name", name},
                   {"dtype", "f32"},
                   {"shape", t->shape},
                   {"byte_offset", offset},
                   {"byte_length", bytes}});
    offset += bytes;
  }
  header["arrays"] = arr;

  std::string htext = header.dump();
  std::string out;
  out.reserve(16 + htext.size() + offset);
  out.append(kContainerMagic, 8);
  detail::put_u64_le(out, htext.size());
  out += htext;
  for (const auto& [name, t] : arrays) {
    static_assert(sizeof(float) == 4);
    out.append(reinterpret_cast<const char*>(t->v.data()), t->v.size() * 4);
  }
  detail::atomic_write(path, out);
}

inline Container load_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw FormatError("truncated container: no header");
  if (bytes.compare(0, 8, kContainerMagic, 8) != 0)
    throw FormatError("bad container magic");
  std::uint64_t hlen = detail::get_u64_le(
      reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  if (16 + hlen > bytes.size())
    throw FormatError("truncated container: header length exceeds file");
  Container c;
  try {
    c.header = json::parse(bytes.substr(16, hlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("unparsable container header: ") + e.what());
  }
  if (!c.header.contains("arrays"))
    throw FormatError("container header missing field 'arrays'");
  std::size_t payload = 16 + hlen;
  for (const auto& a : c.header["arrays"]) {
    for (const char* field : {"name", "dtype", "shape", "byte_offset",
                              "byte_length"})
      if (!a.contains(field))
        throw FormatError(std::string("array entry missing field '") + field +
                          "'");
    std::string name = a["name"];
    if (a["dtype"] != "f32")
      throw FormatError("array '" + name + "': unsupported dtype");
    std::uint64_t off = a["byte_offset"], len = a["byte_length"];
    if (payload + off + len > bytes.size())
      throw FormatError("array '" + name + "' is truncated");
    std::vector<int> shape = a["shape"].get<std::vector<int>>();
    if (std::uint64_t(Tensor<float>::count(shape)) * 4 != len)
      throw FormatError("array '" + name + "': shape does not match length");
    std::vector<float> v(len / 4);
    std::memcpy(v.data(), bytes.data() + payload + off, len);
    c.arrays[name] = std::move(v);
    c.array_shapes[name] = std::move(shape);
  }
  return c;
}

namespace detail {

inline json batch_meta(const ImageBatch& b) {
  return json{{"labels", b.labels},
              {"ids", b.ids},
              {"num_classes", b.num_classes}};
}

inline void read_batch_meta(const json& j, ImageBatch& b,
                            const std::string& what) {
  for (const char* field : {"labels", "ids", "num_classes"})
    if (!j.contains(field))
      throw FormatError(what + " header missing field '" + field + "'");
  b.labels = j["labels"].get<std::vector<int>>();
  b.ids = j["ids"].get<std::vector<std::string>>();
  b.num_classes = j["num_classes"];
}

inline Tensor<float> take_array(Container& c, const std::string& name) {
  auto it = c.arrays.find(name);
  if (it == c.arrays.end())
    throw FormatError("container missing array '" + name + "'");
  return Tensor<float>(c.array_shapes[name], std::move(it->second));
}

}  // namespace detail

inline void save_dataset(const std::string& path, const ImageBatch& b,
                         const std::map<std::string, std::string>& config = {}) {
  b.validate();
  save_container(path, "image_batch", detail::batch_meta(b),
                 {{"pixels", &b.pixels}}, config);
}

inline ImageBatch load_image_batch(const std::string& path) {
  Container c = load_container(path);
  if (c.header.value("kind", "") != "image_batch")
    throw FormatError("container kind is not image_batch");
  ImageBatch b;
  detail::read_batch_meta(c.header, b, "image_batch");
  b.pixels = detail::take_array(c, "pixels");
  try {
    b.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("invalid image_batch contents: ") + e.what());
  }
  return b;
}

inline void save_dataset(const std::string& path, const PoisonedDataset& ds,
                         const std::map<std::string, std::string>& config = {}) {
  ds.validate();
  json h = detail::batch_meta(ds.clean);
  h["budget"] = {{"norm", norm_name(ds.budget.norm)},
                 {"epsilon", ds.budget.epsilon}};
  h["generator_tag"] = ds.generator_tag;
  h["generator_config"] = ds.generator_config;
  save_container(path, "poisoned_dataset", std::move(h),
                 {{"clean_pixels", &ds.clean.pixels},
                  {"poisoned_pixels", &ds.poisoned.pixels}},
                 config);
}

/// Loads and re-validates: structural damage raises FormatError while a
/// stored budget violation raises IntegrityError; no partial data escapes.
inline PoisonedDataset load_poisoned_dataset(const std::string& path) {
  Container c = load_container(path);
  if (c.header.value("kind", "") != "poisoned_dataset")
    throw FormatError("container kind is not poisoned_dataset");
  PoisonedDataset ds;
  detail::read_batch_meta(c.header, ds.clean, "poisoned_dataset");
  ds.poisoned.labels = ds.clean.labels;
  ds.poisoned.ids = ds.clean.ids;
  ds.poisoned.num_classes = ds.clean.num_classes;
  if (!c.header.contains("budget"))
    throw FormatError("poisoned_dataset header missing field 'budget'");
  ds.budget.norm = norm_from_name(c.header["budget"].value("norm", ""));
  ds.budget.epsilon = c.header["budget"].value("epsilon", -1.0);
  ds.generator_tag = c.header.value("generator_tag", "");
  if (c.header.contains("generator_config"))
    ds.generator_config = c.header["generator_config"]
                              .get<std::map<std::string, std::string>>();
  ds.clean.pixels = detail::take_array(c, "clean_pixels");
  ds.poisoned.pixels = detail::take_array(c, "poisoned_pixels");
  try {
    ds.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("invalid poisoned_dataset contents: ") +
                      e.what());
  }
  return ds;
}

/// Reads the standard CIFAR binary layout: every *.bin file in `dir`
/// (sorted by name) as records of 1 label byte + 3072 pixel bytes stored
/// as R,G,B planes row-major. Pixels scale to [0,1] with 255 -> 1.0; the
/// output channel order is RGB.
inline ImageBatch load_cifar_format(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir))
    throw FormatError("'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".bin")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw FormatError("no .bin files in CIFAR directory '" + dir + "'");

  constexpr int kRecord = 1 + 3 * 32 * 32;
  std::vector<unsigned char> all;
  for (const auto& p : files) {
    std::ifstream f(p, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kRecord != 0)
      throw FormatError("file '" + p.filename().string() +
                        "' is not a whole number of CIFAR records");
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  const int N = static_cast<int>(all.size()) / kRecord;
  ImageBatch b;
  b.pixels = Tensor<float>({N, 3, 32, 32});
  b.num_classes = 10;
  b.labels.resize(static_cast<std::size_t>(N));
  b.ids.resize(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    const unsigned char* rec = all.data() + std::size_t(i) * kRecord;
    if (rec[0] > 9)
      throw FormatError("record " + std::to_string(i) + ": label " +
                        std::to_string(int(rec[0])) + " out of range");
    b.labels[i] = rec[0];
    b.ids[i] = "cifar:" + std::to_string(i);
    for (int c = 0; c < 3; ++c)
      for (int px = 0; px < 32 * 32; ++px)
        b.pixels.v[((std::size_t(i) * 3 + c) * 32 * 32) + px] =
            float(rec[1 + c * 1024 + px]) / 255.0f;
  }
  b.validate();
  return b;
}

}  // namespace poisonforge::data
