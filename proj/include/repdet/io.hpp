#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "repdet/tensor.hpp"

namespace repdet {

// Raw tensor record: 16-byte header of 4 little-endian u32 dims (N,C,H,W)
// followed by the little-endian FP32 payload, row-major N,C,H,W.
std::vector<uint8_t> tensor_to_raw(const TensorF& t);
TensorF tensor_from_raw(const uint8_t* data, size_t size);

void write_tensor_file(const std::string& path, const TensorF& t);
TensorF read_tensor_file(const std::string& path);

// Append-only blob of concatenated raw tensor records.
struct WeightBlob {
  std::vector<uint8_t> bytes;
  // returns the record's byte offset
  size_t append(const TensorF& t);
  TensorF read_at(size_t offset) const;
};

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file_bytes(const std::string& path);

// Atomic text write: temp file in the same directory, then rename.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file_text(const std::string& path);

// Binary P6 PPM, maxval 255. Tensor layout (1,3,H,W), values in [0,255].
TensorF read_ppm(const std::string& path);
void write_ppm(const std::string& path, const TensorF& image);

}  // namespace repdet
