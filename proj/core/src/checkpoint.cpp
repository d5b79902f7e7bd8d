#include "qvae/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace qvae {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'Q', 'V', 'A', 'E'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T value;
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error(std::string("checkpoint: truncated ") + what);
  return value;
}

}  // namespace

void save_checkpoint(const ParameterStore& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& name : store.names()) {
    const Matrix& value = store.get(name).value();
    write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<std::uint32_t>(2));
    write_pod(os, static_cast<std::uint64_t>(value.rows()));
    write_pod(os, static_cast<std::uint64_t>(value.cols()));
    os.write(reinterpret_cast<const char*>(value.data()),
             static_cast<std::streamsize>(sizeof(double) * value.size()));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

void load_checkpoint(ParameterStore& store, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic bytes");
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = read_pod<std::uint32_t>(is, "tensor count");
  std::size_t loaded = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated name");
    const auto rank = read_pod<std::uint32_t>(is, "rank");
    if (rank != 2) throw std::runtime_error("checkpoint: unsupported rank");
    const auto rows = read_pod<std::uint64_t>(is, "shape");
    const auto cols = read_pod<std::uint64_t>(is, "shape");
    if (!store.contains(name))
      throw std::runtime_error("checkpoint: unexpected tensor '" + name + "'");
    Matrix& dst = store.get(name).node()->value;
    if (static_cast<std::uint64_t>(dst.rows()) != rows ||
        static_cast<std::uint64_t>(dst.cols()) != cols)
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    is.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(sizeof(double) * dst.size()));
    if (!is) throw std::runtime_error("checkpoint: truncated payload for '" + name + "'");
    ++loaded;
  }
  if (loaded != store.size())
    throw std::runtime_error("checkpoint: file is missing parameters");
}

}  // namespace qvae
