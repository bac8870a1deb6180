#pragma once

#include "tlab/train.hpp"

#include <string>

namespace tlab {

// ---------------------------------------------------------------------------
// Model container: magic "TLABMDL1", little-endian u32 header length, a JSON
// header (arch id, train metadata, accuracy, tensor directory), then raw
// little-endian float64 tensor data in directory order.  save -> load -> save
// is byte-identical, including NaN payloads.  The provenance hash stored in
// the header is recomputed on load; a mismatch is a hard error.
// ---------------------------------------------------------------------------

void save_model(const ModelRecord& model, const std::string& path);
ModelRecord load_model(const std::string& path);

/// Writes dir/zoo.json plus one container per member.
void save_zoo(const Zoo& zoo, const std::string& dir);
Zoo load_zoo(const std::string& dir);

}  // namespace tlab
