// SPDX-License-Identifier: Apache-2.0
#include "sentinel/container.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "sentinel/errors.hpp"

namespace sentinel {

namespace {

// Explicit little-endian packing keeps files byte-identical across hosts.
void put_f32_le(float v, unsigned char* out) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out[0] = static_cast<unsigned char>(bits & 0xff);
  out[1] = static_cast<unsigned char>((bits >> 8) & 0xff);
  out[2] = static_cast<unsigned char>((bits >> 16) & 0xff);
  out[3] = static_cast<unsigned char>((bits >> 24) & 0xff);
}

float get_f32_le(const unsigned char* in) {
  const uint32_t bits = static_cast<uint32_t>(in[0]) | (static_cast<uint32_t>(in[1]) << 8) |
                        (static_cast<uint32_t>(in[2]) << 16) |
                        (static_cast<uint32_t>(in[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

const Tensor& Container::require(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) fail(ErrorKind::Format, "container: missing tensor '" + name + "'");
  return *t;
}

void save_container(const std::filesystem::path& path, const Container& c) {
  nlohmann::json header = c.meta;
  header["magic"] = kContainerMagic;
  nlohmann::json dir = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& nt : c.tensors) {
    nlohmann::json entry;
    entry["name"] = nt.name;
    entry["shape"] = nt.tensor.shape;
    entry["offset"] = offset;
    dir.push_back(entry);
    offset += static_cast<uint64_t>(nt.tensor.numel()) * 4;
  }
  header["tensors"] = dir;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
  const std::string hs = header.dump();
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.put('\0');
  std::vector<unsigned char> buf;
  for (const auto& nt : c.tensors) {
    buf.resize(nt.tensor.data.size() * 4);
    for (size_t i = 0; i < nt.tensor.data.size(); ++i)
      put_f32_le(nt.tensor.data[i], buf.data() + i * 4);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  out.flush();
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open: " + path.string());
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const size_t sep = raw.find('\0');
  if (sep == std::string::npos)
    fail(ErrorKind::Format, path.string() + ": no header separator found");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.substr(0, sep));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": header parse error at offset 0: " + e.what());
  }
  if (!header.contains("magic") || header["magic"] != kContainerMagic)
    fail(ErrorKind::Format, path.string() + ": bad magic at offset 0");
  if (!header.contains("tensors") || !header["tensors"].is_array())
    fail(ErrorKind::Format, path.string() + ": missing tensor directory");

  const size_t blob_base = sep + 1;
  const size_t blob_len = raw.size() - blob_base;

  Container c;
  c.meta = header;
  c.meta.erase("magic");
  c.meta.erase("tensors");

  uint64_t expect_offset = 0;
  for (const auto& entry : header["tensors"]) {
    NamedTensor nt;
    nt.name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    if (offset != expect_offset)
      fail(ErrorKind::Format, path.string() + ": tensor '" + nt.name +
                                  "' offset " + std::to_string(offset) + " != expected " +
                                  std::to_string(expect_offset));
    const uint64_t nbytes = static_cast<uint64_t>(shape_numel(shape)) * 4;
    if (offset + nbytes > blob_len)
      fail(ErrorKind::Format, path.string() + ": truncated blob for tensor '" + nt.name +
                                  "' at offset " + std::to_string(blob_base + offset));
    Tensor t(shape);
    const unsigned char* src =
        reinterpret_cast<const unsigned char*>(raw.data()) + blob_base + offset;
    for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = get_f32_le(src + i * 4);
    nt.tensor = std::move(t);
    c.tensors.push_back(std::move(nt));
    expect_offset = offset + nbytes;
  }
  if (expect_offset != blob_len)
    fail(ErrorKind::Format, path.string() + ": trailing bytes after offset " +
                                std::to_string(blob_base + expect_offset));
  return c;
}

}  // namespace sentinel
