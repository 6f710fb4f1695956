#include "dit/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dit {

namespace {

constexpr char kMagic[4] = {'D', 'I', 'T', 'C'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "DITC writer assumes a little-endian host");

template <typename T>
void put(std::vector<unsigned char>& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& b) : b_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.values.size() != shape_numel(t.shape))
      throw CheckpointError("tensor " + t.name + ": payload does not match shape " + shape_str(t.shape));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put<std::uint8_t>(out, 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    const auto* p = reinterpret_cast<const unsigned char*>(t.values.data());
    out.insert(out.end(), p, p + t.values.size() * sizeof(float));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("not a DITC checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw CheckpointError("unsupported DITC version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint32_t>();
    t.name.resize(len);
    r.bytes(t.name.data(), len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 0) throw CheckpointError("tensor " + t.name + ": unsupported dtype " + std::to_string(dtype));
    const auto ndim = r.get<std::uint8_t>();
    for (int d = 0; d < ndim; ++d) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    t.values.resize(shape_numel(t.shape));
    r.bytes(t.values.data(), t.values.size() * sizeof(float));
    out.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last tensor");
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::vector<NamedTensor> snapshot(const ParamStore& store, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& p : store.params()) out.push_back({prefix + p.name, p.tensor.shape(), p.tensor.values()});
  return out;
}

void restore(ParamStore& store, const std::vector<NamedTensor>& tensors, const std::string& prefix,
             bool allow_missing) {
  for (auto& p : store.params()) {
    const NamedTensor* hit = nullptr;
    for (const auto& t : tensors)
      if (t.name == prefix + p.name) hit = &t;
    if (!hit) {
      if (allow_missing) continue;
      throw CheckpointError("checkpoint lacks tensor " + prefix + p.name);
    }
    if (hit->shape != p.tensor.shape()) {
      if (allow_missing) continue;
      throw CheckpointError("tensor " + hit->name + ": checkpoint shape " + shape_str(hit->shape) +
                            " vs model " + shape_str(p.tensor.shape()));
    }
    std::copy(hit->values.begin(), hit->values.end(), p.tensor.data().begin());
  }
}

}  // namespace dit
