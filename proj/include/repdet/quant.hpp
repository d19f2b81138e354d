#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "repdet/graph.hpp"
#include "repdet/pipeline.hpp"
#include "repdet/quant_params.hpp"

namespace repdet {

enum class CalibMethod { minmax, percentile };

const char* calib_method_name(CalibMethod m);
CalibMethod calib_method_from_name(const std::string& name);

// Symmetric per-tensor calibration over a sample stream:
// scale = max|x|/qmax (minmax) or percentile(|x|, pct)/qmax. An all-zero
// stream floors the scale at 1e-8 and flags it.
QuantParams calibrate_tensor(const std::vector<TensorF>& samples, CalibMethod method,
                             double pct = 99.99);

// Per-out-channel symmetric weight calibration (minmax).
QuantParams calibrate_weights(const TensorF& weight);

// y = clamp(round(x/scale), qmin, qmax) * scale, round-half-to-even.
template <typename T>
Tensor<T> fake_quantize(const Tensor<T>& x, const QuantParams& q);

// Per-out-channel variant for conv weights.
template <typename T>
Tensor<T> fake_quantize_weights(const Tensor<T>& w, const QuantParams& q);

double fake_quantize_scalar(double x, const QuantParams& q);

// Straight-through estimator: value path as fake_quantize, gradient mask 1
// inside the clip range and 0 outside.
struct SteResult {
  std::vector<double> value;
  std::vector<double> grad_mask;
};
SteResult fake_quantize_ste(const std::vector<double>& x, const QuantParams& q);

struct GraphQuantParams {
  std::map<std::string, QuantParams> weights;      // per quantizable layer
  std::map<std::string, QuantParams> activations;  // post-activation outputs
};

// conv-like nodes carrying weights, in topological order
std::vector<std::string> quantizable_layers(const ModelGraphF& g);

// Requires a fused graph (no repvgg_block nodes). Weight params come from
// the stored weights per-channel; activation params from the observed
// post-activation outputs over the calibration set.
GraphQuantParams calibrate_graph(const ModelGraphF& g, const std::vector<TensorF>& calib_inputs,
                                 CalibMethod method, double pct = 99.99);

// Fake-quantizes weights in place on each non-skipped conv (annotated on the
// node) and inserts an activation fake-quant node after its output.
ModelGraphF quantize_graph(const ModelGraphF& g, const GraphQuantParams& params,
                           const std::set<std::string>& skip = {});

enum class SensMetric { mse, snr, cosine, score };

const char* sens_metric_name(SensMetric m);
SensMetric sens_metric_from_name(const std::string& name);

struct SensitivityEntry {
  std::string layer;
  double mse = 0;
  double snr_db = 0;       // capped at kSnrCapDb when noise is zero
  double cosine = 1;
  double score_delta = 0;  // detection-score drop when only this layer is quantized
  int rank_mse = 0, rank_snr = 0, rank_cos = 0, rank_score = 0;  // 1 = most sensitive
};

constexpr double kSnrCapDb = 300.0;

struct SensitivityReport {
  std::vector<SensitivityEntry> entries;  // ordered by the scan's primary metric

  // layer ids, most sensitive first under the given metric
  std::vector<std::string> ranking(SensMetric metric) const;
  std::string to_csv() const;
};

// Labeled toy evaluation set for the score metric.
struct EvalSet {
  std::vector<TensorF> inputs;             // network inputs, one per image
  std::vector<std::vector<GtBox>> gts;     // per image
  double conf_thresh = 0.25;
  double nms_iou = 0.45;
};

// Quantizes one layer at a time. mse/snr/cosine compare the float and
// quantized post-activation feature map of that layer over the calibration
// set; score runs the full decode over the eval set and records the drop.
SensitivityReport sensitivity_scan(const ModelGraphF& g, const GraphQuantParams& params,
                                   const std::vector<TensorF>& calib_inputs,
                                   SensMetric primary = SensMetric::mse,
                                   const std::optional<EvalSet>& eval = std::nullopt);

struct PartialQuantResult {
  ModelGraphF graph;
  std::vector<std::string> skipped;
  bool all_float = false;  // k >= layer count collapsed to the float graph
};

// Skips the top-k most sensitive layers under the chosen metric.
PartialQuantResult partial_quantize(const ModelGraphF& g, const GraphQuantParams& params,
                                    const SensitivityReport& report, SensMetric metric,
                                    int float_top_k = 6);

// Channel-wise distillation: per channel, softmax over spatial positions at
// the given temperature for both maps, KL(teacher || student), summed over
// channels and batch, scaled by temperature^2. Returns the gradient with
// respect to the student map.
struct CwdResult {
  double loss = 0;
  TensorD grad;
};
CwdResult cwd_loss(const TensorD& teacher_fm, const TensorD& student_fm, double temperature);

struct Histogram {
  double lo = 0, hi = 0;
  std::vector<int64_t> counts;

  int64_t total() const;
};

// Fixed-bin histogram of one layer's post-activation values over the inputs.
Histogram activation_histogram(const ModelGraphF& g, const std::string& layer_id,
                               const std::vector<TensorF>& inputs, int bins);

}  // namespace repdet
