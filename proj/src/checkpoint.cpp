#include "hicl/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace hicl {

namespace {

constexpr std::array<char, 8> kMagic = {'H', 'I', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void put_le(std::ostream& out, T v) {
  std::array<char, sizeof(T)> buf{};
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf.data(), buf.size());
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename T>
  T get_le() {
    std::array<unsigned char, sizeof(T)> buf{};
    read(reinterpret_cast<char*>(buf.data()), buf.size());
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
  }

  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw CheckpointError("checkpoint truncated at byte offset " + std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
    }
    offset_ += n;
  }

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::istream& in_;
  std::size_t offset_ = 0;
};

}  // namespace

const Tensor& Checkpoint::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return r.tensor;
  }
  throw CheckpointError("checkpoint has no record named '" + name + "'");
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, Checkpoint::kVersion);
  put_le<std::uint64_t>(out, ckpt.header.size());
  out.write(ckpt.header.data(), static_cast<std::streamsize>(ckpt.header.size()));
  put_le<std::uint64_t>(out, ckpt.records.size());
  for (const auto& rec : ckpt.records) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.name.size()));
    out.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
    const Shape& shape = rec.tensor.shape();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put_le<std::uint64_t>(out, d);
    for (double v : rec.tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw CheckpointError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  Reader r(in);
  std::array<char, 8> magic{};
  r.read(magic.data(), magic.size());
  if (magic != kMagic) throw CheckpointError("bad checkpoint magic");
  const auto version = r.get_le<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto header_len = r.get_le<std::uint64_t>();
  ckpt.header.resize(header_len);
  r.read(ckpt.header.data(), header_len);
  const auto count = r.get_le<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    const auto name_len = r.get_le<std::uint32_t>();
    rec.name.resize(name_len);
    r.read(rec.name.data(), name_len);
    const auto rank = r.get_le<std::uint32_t>();
    if (rank > kMaxRank) {
      throw CheckpointError("record '" + rec.name + "' has implausible rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& d : shape) d = r.get_le<std::uint64_t>();
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = std::bit_cast<double>(r.get_le<std::uint64_t>());
    rec.tensor = Tensor(std::move(shape), std::move(data));
    ckpt.records.push_back(std::move(rec));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  return read_checkpoint(in);
}

}  // namespace hicl
