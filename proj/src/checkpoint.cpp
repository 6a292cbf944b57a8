#include "histoseg/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace histoseg {

namespace {

constexpr char kMagic[4] = {'H', 'S', 'E', 'G'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u32(out, bits);
}

// Sequential reader that turns a short read into a truncation error.
class Reader {
 public:
  Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("checkpoint: cannot open " + path);
  }

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) {
      throw std::runtime_error("checkpoint: truncated file " + path_);
    }
  }

  std::uint8_t u8() {
    std::uint8_t b;
    bytes(&b, 1);
    return b;
  }

  std::uint16_t u16() {
    std::uint8_t b[2];
    bytes(b, 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }

  std::uint32_t u32() {
    std::uint8_t b[4];
    bytes(b, 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }

  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::string& path, const ParameterStore& params) {
  std::string buf;
  buf.append(kMagic, sizeof kMagic);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(params.size()));
  for (const ParamEntry<float>& e : params.entries()) {
    if (e.name.size() > 0xffff) {
      throw std::runtime_error("checkpoint: tensor name too long: " + e.name);
    }
    put_u16(buf, static_cast<std::uint16_t>(e.name.size()));
    buf.append(e.name);
    buf.push_back(static_cast<char>(kDtypeF32));
    buf.push_back(static_cast<char>(e.tensor.ndim()));
    for (int d = 0; d < e.tensor.ndim(); ++d) {
      put_u32(buf, static_cast<std::uint32_t>(e.tensor.dim(d)));
    }
    const float* v = e.tensor.cptr();
    for (std::size_t i = 0; i < e.tensor.numel(); ++i) put_f32(buf, v[i]);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
}

void load_checkpoint(const std::string& path, ParameterStore& params) {
  Reader in(path);

  char magic[4];
  in.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint (bad magic)");
  }
  const std::uint32_t version = in.u32();
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  }

  const std::uint32_t count = in.u32();
  std::unordered_set<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = in.u16();
    std::string name(name_len, '\0');
    in.bytes(name.data(), name_len);

    const std::uint8_t dtype = in.u8();
    if (dtype != kDtypeF32) {
      throw std::runtime_error("checkpoint: unsupported dtype " + std::to_string(dtype) +
                               " for tensor " + name);
    }
    const std::uint8_t ndim = in.u8();
    Shape shape(ndim);
    for (std::uint8_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(in.u32());

    if (!params.contains(name)) {
      throw std::runtime_error("checkpoint: unknown tensor " + name +
                               " (not in the parameter store)");
    }
    ParamEntry<float>& e = params.at(name);
    if (e.tensor.shape() != shape) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file " +
                               shape_str(shape) + " vs store " + shape_str(e.tensor.shape()));
    }
    float* v = e.tensor.ptr();
    for (std::size_t i = 0; i < e.tensor.numel(); ++i) v[i] = in.f32();
    seen.insert(name);
  }

  for (const ParamEntry<float>& e : params.entries()) {
    if (!seen.count(e.name)) {
      throw std::runtime_error("checkpoint: store tensor " + e.name + " missing from file");
    }
  }
}

}  // namespace histoseg
