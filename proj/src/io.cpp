#include "repdet/io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace repdet {

namespace {

void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t((v >> 8) & 0xff));
  out.push_back(uint8_t((v >> 16) & 0xff));
  out.push_back(uint8_t((v >> 24) & 0xff));
}

uint32_t get_u32le(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

}  // namespace

std::vector<uint8_t> tensor_to_raw(const TensorF& t) {
  std::vector<uint8_t> out;
  out.reserve(16 + size_t(t.size()) * 4);
  put_u32le(out, uint32_t(t.shape.n));
  put_u32le(out, uint32_t(t.shape.c));
  put_u32le(out, uint32_t(t.shape.h));
  put_u32le(out, uint32_t(t.shape.w));
  for (float f : t.v) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32le(out, bits);
  }
  return out;
}

TensorF tensor_from_raw(const uint8_t* data, size_t size) {
  if (size < 16) throw Error(Errc::model, "raw tensor record shorter than 16-byte header");
  Shape s{int(get_u32le(data)), int(get_u32le(data + 4)), int(get_u32le(data + 8)),
          int(get_u32le(data + 12))};
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
    throw Error(Errc::model, "raw tensor header has non-positive dim " + s.str());
  const size_t need = 16 + size_t(s.total()) * 4;
  if (size < need) throw Error(Errc::model, "raw tensor payload truncated");
  TensorF t(s);
  for (int64_t i = 0; i < t.size(); ++i) {
    uint32_t bits = get_u32le(data + 16 + size_t(i) * 4);
    std::memcpy(&t.v[size_t(i)], &bits, 4);
  }
  return t;
}

void write_tensor_file(const std::string& path, const TensorF& t) {
  write_file_bytes(path, tensor_to_raw(t));
}

TensorF read_tensor_file(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return tensor_from_raw(bytes.data(), bytes.size());
}

size_t WeightBlob::append(const TensorF& t) {
  size_t off = bytes.size();
  auto rec = tensor_to_raw(t);
  bytes.insert(bytes.end(), rec.begin(), rec.end());
  return off;
}

TensorF WeightBlob::read_at(size_t offset) const {
  if (offset >= bytes.size()) throw Error(Errc::model, "weight-blob offset past end of blob");
  return tensor_from_raw(bytes.data() + offset, bytes.size() - offset);
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::io, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw Error(Errc::io, "short write to '" + path + "'");
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::io, "cannot open '" + path + "' for reading");
  f.seekg(0, std::ios::end);
  std::vector<uint8_t> bytes(size_t(f.tellg()));
  f.seekg(0);
  f.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw Error(Errc::io, "short read from '" + path + "'");
  return bytes;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::io, "cannot open '" + tmp.string() + "' for writing");
    f << content;
    if (!f) throw Error(Errc::io, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw Error(Errc::io, "rename '" + tmp.string() + "' -> '" + path + "': " + ec.message());
}

std::string read_file_text(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

namespace {

// skips whitespace and '#' comment lines between PPM header tokens
int next_ppm_int(std::istream& in) {
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
    } else if (!std::isspace(c)) {
      in.unget();
      break;
    }
  }
  int v;
  if (!(in >> v)) throw Error(Errc::io, "truncated PPM header");
  return v;
}

}  // namespace

TensorF read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::io, "cannot open '" + path + "' for reading");
  std::string magic;
  f >> magic;
  if (magic != "P6") throw Error(Errc::io, "'" + path + "' is not a binary P6 PPM");
  const int w = next_ppm_int(f);
  const int h = next_ppm_int(f);
  const int maxval = next_ppm_int(f);
  if (w < 1 || h < 1) throw Error(Errc::io, "PPM with non-positive dimensions");
  if (maxval != 255) throw Error(Errc::io, "only maxval 255 PPM supported");
  f.get();  // single whitespace after maxval
  std::vector<uint8_t> buf(size_t(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (!f) throw Error(Errc::io, "truncated PPM payload in '" + path + "'");
  TensorF img({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(0, c, y, x) = float(buf[(size_t(y) * w + x) * 3 + size_t(c)]);
  return img;
}

void write_ppm(const std::string& path, const TensorF& image) {
  if (image.shape.n != 1 || image.shape.c != 3)
    throw ShapeError("write_ppm expects a (1,3,H,W) tensor, got " + image.shape.str());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::io, "cannot open '" + path + "' for writing");
  f << "P6\n" << image.shape.w << " " << image.shape.h << "\n255\n";
  for (int y = 0; y < image.shape.h; ++y)
    for (int x = 0; x < image.shape.w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = image.at(0, c, y, x);
        int b = int(v < 0 ? 0 : (v > 255 ? 255 : v + 0.5f));
        f.put(char(uint8_t(b)));
      }
  if (!f) throw Error(Errc::io, "short write to '" + path + "'");
}

}  // namespace repdet
