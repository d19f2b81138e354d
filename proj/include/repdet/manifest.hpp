#pragma once

#include <string>

#include "repdet/graph.hpp"
#include "repdet/io.hpp"

namespace repdet {

// Model-on-disk pair: a JSON manifest listing nodes (id, kind, hyper-params,
// input ids, weight-blob offsets/shapes) and a binary blob of concatenated
// raw tensor records. Weights are always stored FP32.
void save_model(const ModelGraphF& g, const std::string& manifest_path,
                const std::string& weights_path);

ModelGraphF load_model(const std::string& manifest_path, const std::string& weights_path);

// In-memory forms, used by the file functions and by tests.
std::string manifest_to_json(const ModelGraphF& g, WeightBlob& blob);
ModelGraphF model_from_json(const std::string& json_text, const WeightBlob& blob);

}  // namespace repdet
