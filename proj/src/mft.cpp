#include "cmt/mft.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace cmt {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'T', '1'};

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("MFT1: truncated header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

template <typename T>
void write_impl(std::ostream& out, const Tensor<T>& t, uint8_t tag) {
  out.write(kMagic, 4);
  put_u32(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<uint32_t>(t.dim(i)));
  out.put(static_cast<char>(tag));
  // x86 is little-endian; values are written raw
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * static_cast<int64_t>(sizeof(T))));
  if (!out) throw DataError("MFT1: write failed");
}

template <typename T>
Tensor<T> read_impl(std::istream& in, bool* was_f64) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw DataError("MFT1: bad magic bytes");
  const uint32_t rank = get_u32(in);
  if (rank > 8) throw DataError("MFT1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(get_u32(in));
  const int tag = in.get();
  if (tag != 0 && tag != 1) throw DataError("MFT1: unknown dtype tag " + std::to_string(tag));
  if (was_f64) *was_f64 = (tag == 1);
  const int64_t n = shape_numel(shape);
  Tensor<T> t(shape);
  if ((tag == 0 && sizeof(T) == 4) || (tag == 1 && sizeof(T) == 8)) {
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(n * static_cast<int64_t>(sizeof(T))));
  } else if (tag == 0) {
    std::vector<float> buf(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    for (int64_t i = 0; i < n; ++i) t[i] = static_cast<T>(buf[static_cast<size_t>(i)]);
  } else {
    std::vector<double> buf(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
    for (int64_t i = 0; i < n; ++i) t[i] = static_cast<T>(buf[static_cast<size_t>(i)]);
  }
  if (!in) throw DataError("MFT1: truncated payload");
  return t;
}

template <typename T>
Tensor<T> load_impl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tensor file: " + path);
  try {
    return read_impl<T>(in, nullptr);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + " (" + path + ")");
  }
}

}  // namespace

void write_mft_f32(std::ostream& out, const TensorF& t) { write_impl(out, t, 0); }
void write_mft_f64(std::ostream& out, const TensorD& t) { write_impl(out, t, 1); }

void save_mft_f32(const std::string& path, const TensorF& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  write_mft_f32(out, t);
}

void save_mft_f64(const std::string& path, const TensorD& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for write: " + path);
  write_mft_f64(out, t);
}

TensorF read_mft_f32(std::istream& in, bool* was_f64) { return read_impl<float>(in, was_f64); }
TensorD read_mft_f64(std::istream& in, bool* was_f64) { return read_impl<double>(in, was_f64); }
TensorF load_mft_f32(const std::string& path) { return load_impl<float>(path); }
TensorD load_mft_f64(const std::string& path) { return load_impl<double>(path); }

}  // namespace cmt
