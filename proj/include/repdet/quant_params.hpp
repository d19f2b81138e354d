#pragma once

#include <cstdint>
#include <vector>

namespace repdet {

// Affine quantization parameters for one tensor. Symmetric INT8 is the only
// mode used by this project (zero_point == 0); the fields keep the general
// form so serialized reports stay self-describing.
struct QuantParams {
  double scale = 1.0;                  // per-tensor scale
  int zero_point = 0;                  // 0 in symmetric mode
  int bits = 8;
  bool symmetric = true;
  std::vector<double> channel_scales;  // nonempty => per-channel weight mode
  bool scale_floored = false;          // calibration hit the 1e-8 floor

  bool per_channel() const { return !channel_scales.empty(); }
  int qmin() const { return -(1 << (bits - 1)); }
  int qmax() const { return (1 << (bits - 1)) - 1; }
};

}  // namespace repdet
