#include "dwp/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>

namespace dwp {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, std::size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw FormatError("checkpoint: short write");
}

template <class T>
void write_le(std::FILE* f, T v) {
  // Host is little-endian on every supported platform.
  write_bytes(f, &v, sizeof(T));
}

void read_bytes(std::FILE* f, void* p, std::size_t n, const char* what) {
  if (std::fread(p, 1, n, f) != n)
    throw FormatError(std::string("checkpoint: truncated file reading ") + what);
}

template <class T>
T read_le(std::FILE* f, const char* what) {
  T v;
  read_bytes(f, &v, sizeof(T), what);
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    FilePtr f(std::fopen(tmp.c_str(), "wb"));
    if (!f) throw FormatError("checkpoint: cannot open '" + tmp + "' for writing");
    write_bytes(f.get(), "DWPC", 4);
    write_le<std::uint32_t>(f.get(), Checkpoint::kVersion);
    write_le<std::uint32_t>(f.get(), static_cast<std::uint32_t>(ckpt.order.size()));
    for (const auto& name : ckpt.order) {
      const auto& t = ckpt.blobs.at(name);
      write_le<std::uint16_t>(f.get(), static_cast<std::uint16_t>(name.size()));
      write_bytes(f.get(), name.data(), name.size());
      write_le<std::uint8_t>(f.get(), static_cast<std::uint8_t>(t.rank()));
      for (auto d : t.shape()) write_le<std::uint32_t>(f.get(), static_cast<std::uint32_t>(d));
      write_bytes(f.get(), t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
    }
    write_le<std::uint32_t>(f.get(), static_cast<std::uint32_t>(ckpt.metadata_json.size()));
    write_bytes(f.get(), ckpt.metadata_json.data(), ckpt.metadata_json.size());
    if (std::fflush(f.get()) != 0) throw FormatError("checkpoint: flush failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw FormatError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  read_bytes(f.get(), magic, 4, "magic");
  if (std::memcmp(magic, "DWPC", 4) != 0) throw FormatError("checkpoint: bad magic");
  const auto version = read_le<std::uint32_t>(f.get(), "version");
  if (version != Checkpoint::kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = read_le<std::uint32_t>(f.get(), "blob count");
  Checkpoint ckpt;
  for (std::uint32_t b = 0; b < count; ++b) {
    const auto name_len = read_le<std::uint16_t>(f.get(), "name length");
    std::string name(name_len, '\0');
    read_bytes(f.get(), name.data(), name_len, "name");
    const auto rank = read_le<std::uint8_t>(f.get(), "rank");
    Shape shape;
    std::int64_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const auto d = read_le<std::uint32_t>(f.get(), "dims");
      shape.push_back(static_cast<std::int64_t>(d));
      numel *= d;
    }
    std::vector<float> data(static_cast<std::size_t>(numel));
    read_bytes(f.get(), data.data(), sizeof(float) * data.size(), "blob data");
    ckpt.put(name, Tensor<float>::from(std::move(shape), std::move(data)));
  }
  const auto meta_len = read_le<std::uint32_t>(f.get(), "metadata length");
  ckpt.metadata_json.assign(meta_len, '\0');
  read_bytes(f.get(), ckpt.metadata_json.data(), meta_len, "metadata");
  return ckpt;
}

}  // namespace dwp
