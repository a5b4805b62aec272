#pragma once

#include <filesystem>
#include <string>

#include "udaseg/volume.hpp"

namespace udaseg::io {

// Native format: little-endian "UDAV" magic, u32 version, u32 dtype,
// u64 dims[3], f64 spacing[3], f64 origin[3], f64 direction[9], payload.
// Geometry round-trips exactly.
//
// NIfTI-1 subset: single .nii file, 348-byte header + 4 extension bytes,
// datatype 4 (int16) or 16 (float32), no extensions or compression.
// World coordinates are written verbatim to the sform rows (no RAS/LPS flip).
enum class Format { Native, Nifti };

// Picks the format from the extension: ".nii" is NIfTI, anything else native.
Format format_for(const std::filesystem::path& path);

void save_volume(const Volume& v, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

// Label maps are stored as int16 in NIfTI and as u8 in the native format.
void save_labels(const LabelMap& m, const std::filesystem::path& path);
LabelMap load_labels(const std::filesystem::path& path);

// In-memory NIfTI encoding, exposed for fixtures.
std::string encode_nifti_float32(const Volume& v);
Volume decode_nifti(const std::string& bytes);

}  // namespace udaseg::io
