#pragma once

// File formats: CSV (header row of labels, one sample per row), the FECGMAT1
// little-endian binary matrix, peak trains, JSON documents, and SHA-256.

#include "fecg/common.hpp"
#include "fecg/recording.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace fecg {

/// Shortest round-trip decimal form; "nan" / "inf" / "-inf" for non-finite values.
std::string format_double(double v);
double parse_double(std::string_view s);

/// Writes data transposed: header = labels, then one row per sample.
void write_recordings_csv(const RecordingSet& rec, std::ostream& out);
/// Sample rate is not part of the CSV; the caller supplies it.
RecordingSet read_recordings_csv(std::istream& in, double sample_rate);

// FECGMAT1 layout (all little-endian):
//   char[8] "FECGMAT1", u32 version (1), u32 reserved (0),
//   u64 rows, u64 cols, f64 sample_rate,
//   rows x { u32 length, bytes } labels,
//   rows * cols f64 values, row-major (one channel after another).
void write_recordings_binary(const RecordingSet& rec, std::ostream& out);
RecordingSet read_recordings_binary(std::istream& in);

/// Picks the format from the extension: ".bin" is binary, anything else CSV.
void save_recordings(const RecordingSet& rec, const std::filesystem::path& path);
RecordingSet load_recordings(const std::filesystem::path& path, double sample_rate);

/// Plain numeric matrix CSV, one row per matrix row, optional header line.
void write_matrix_csv(const Matrix& m, std::ostream& out, const std::vector<std::string>& header = {});
Matrix read_matrix_csv(std::istream& in, bool has_header);

/// Single column "sample" of indices.
void write_indices_csv(const std::vector<std::size_t>& idx, std::ostream& out);
std::vector<std::size_t> read_indices_csv(std::istream& in);

nlohmann::json read_json_file(const std::filesystem::path& path);

/// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace fecg
