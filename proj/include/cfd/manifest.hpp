#pragma once

// Dataset manifest: one CSV row per slice,
// patient,slice_index,label,split,volume_path,mask_path (paths relative to the manifest).

#include <string>
#include <vector>

#include "cfd/data.hpp"

namespace cfd {

struct ManifestRow {
    std::string patient;
    int slice_index = 0;
    int label = 1;
    std::string split;  // train, val or test
    std::string volume_path;
    std::string mask_path;  // may be empty
};

std::string manifest_csv(const std::vector<ManifestRow>& rows);
void write_manifest(const std::vector<ManifestRow>& rows, const std::string& path);
/// Throws FormatError naming the line on malformed input.
std::vector<ManifestRow> read_manifest(const std::string& path);

/// Slices of the rows in `split` (all rows when empty), loading each referenced volume once.
/// The stored label must agree with the mask; a disagreement is a FormatError.
std::vector<SliceRecord> load_slices(const std::string& manifest_path, const std::string& split = "");

}  // namespace cfd
