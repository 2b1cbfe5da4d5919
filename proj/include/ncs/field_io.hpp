#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>

#include "ncs/grid.hpp"

namespace ncs {

// On-disk layout (all integers little-endian uint32):
//   bytes 0..3   magic   "NCSF" (field) or "NCSM" (mask)
//   bytes 4..7   version (currently 1)
//   bytes 8..11  grid side G
//   bytes 12..15 scale tag (Scale enum; 0 for masks)
// followed by G*G row-major payload entries: little-endian IEEE-754 float64
// for fields, one byte 0/1 for masks.
inline constexpr std::uint32_t kFieldFormatVersion = 1;

struct FieldFile {
  int side = 0;
  Field field;
};

struct MaskFile {
  int side = 0;
  Mask mask;
};

void write_field(const std::filesystem::path& path, int side, const Field& f);
FieldFile read_field(const std::filesystem::path& path);

void write_mask(const std::filesystem::path& path, int side, const Mask& m);
MaskFile read_mask(const std::filesystem::path& path);

/// Multi-record files: back-to-back records of the single-record layout,
/// one per column. All records share the grid side and (for fields) scale.
struct FieldStream {
  int side = 0;
  Scale scale = Scale::Raw;
  Eigen::MatrixXd columns;
};
void write_field_stream(const std::filesystem::path& path, int side, const Eigen::MatrixXd& columns, Scale scale);
FieldStream read_field_stream(const std::filesystem::path& path);
void write_mask_stream(const std::filesystem::path& path, int side, const Eigen::MatrixXd& columns);
FieldStream read_mask_stream(const std::filesystem::path& path);

/// CSV with header `index,row,col,value`.
void write_field_csv(const std::filesystem::path& path, const GridSpec& g, const Field& f);

/// Writes `contents` to `path` via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace ncs
