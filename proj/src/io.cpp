#include "fecg/io.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

namespace fecg {

namespace {

static_assert(std::endian::native == std::endian::little, "binary format assumes a little-endian host");

constexpr char kMagic[8] = {'F', 'E', 'C', 'G', 'M', 'A', 'T', '1'};
constexpr std::uint32_t kBinaryVersion = 1;

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto p = line.find(',', start);
    out.push_back(line.substr(start, p == std::string_view::npos ? p : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("binary recording: truncated file");
  return v;
}

std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream f(path, mode);
  if (!f) throw Error("cannot open '" + path.string() + "' for reading");
  return f;
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

double parse_double(std::string_view s) {
  s = trim(s);
  if (s == "nan" || s == "NaN") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ValidationError("cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

void write_recordings_csv(const RecordingSet& rec, std::ostream& out) {
  rec.validate();
  const auto n = rec.data.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i) out << ',';
    out << (rec.labels.empty() ? "ch" + std::to_string(i) : rec.labels[static_cast<std::size_t>(i)]);
  }
  out << '\n';
  std::string line;
  for (Eigen::Index t = 0; t < rec.data.cols(); ++t) {
    line.clear();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (i) line += ',';
      line += format_double(rec.data(i, t));
    }
    line += '\n';
    out << line;
  }
  if (!out) throw Error("write_recordings_csv: write failed");
}

RecordingSet read_recordings_csv(std::istream& in, double sample_rate) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("recording CSV: empty file");
  RecordingSet rec;
  rec.sample_rate = sample_rate;
  for (auto f : split_csv(line)) rec.labels.emplace_back(trim(f));
  const std::size_t n = rec.labels.size();
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != n) {
      throw ValidationError("recording CSV: line " + std::to_string(rows + 2) + " has " +
                            std::to_string(fields.size()) + " fields, expected " + std::to_string(n));
    }
    for (auto f : fields) values.push_back(parse_double(f));
    ++rows;
  }
  rec.data = Eigen::Map<const RowMatrix>(values.data(), static_cast<Eigen::Index>(rows),
                                         static_cast<Eigen::Index>(n))
                 .transpose();
  rec.fill_defaults();
  rec.validate();
  return rec;
}

void write_recordings_binary(const RecordingSet& rec, std::ostream& out) {
  rec.validate();
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kBinaryVersion);
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(rec.data.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(rec.data.cols()));
  put<double>(out, rec.sample_rate);
  for (std::size_t i = 0; i < rec.channels(); ++i) {
    const std::string label = rec.labels.empty() ? "ch" + std::to_string(i) : rec.labels[i];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(label.size()));
    out.write(label.data(), static_cast<std::streamsize>(label.size()));
  }
  const RowMatrix rm = rec.data;
  out.write(reinterpret_cast<const char*>(rm.data()),
            static_cast<std::streamsize>(rm.size() * sizeof(double)));
  if (!out) throw Error("write_recordings_binary: write failed");
}

RecordingSet read_recordings_binary(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError("binary recording: bad magic (expected FECGMAT1)");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kBinaryVersion) {
    throw ValidationError("binary recording: unsupported version " + std::to_string(version));
  }
  (void)get<std::uint32_t>(in);
  const auto rows = get<std::uint64_t>(in);
  const auto cols = get<std::uint64_t>(in);
  RecordingSet rec;
  rec.sample_rate = get<double>(in);
  for (std::uint64_t i = 0; i < rows; ++i) {
    const auto len = get<std::uint32_t>(in);
    std::string label(len, '\0');
    in.read(label.data(), len);
    if (!in) throw Error("binary recording: truncated label");
    rec.labels.push_back(std::move(label));
  }
  RowMatrix rm(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  if (!in) throw Error("binary recording: truncated data");
  rec.data = rm;
  rec.fill_defaults();
  rec.validate();
  return rec;
}

void save_recordings(const RecordingSet& rec, const std::filesystem::path& path) {
  std::ostringstream os;
  if (path.extension() == ".bin") {
    write_recordings_binary(rec, os);
  } else {
    write_recordings_csv(rec, os);
  }
  write_file_atomic(path, os.str());
}

RecordingSet load_recordings(const std::filesystem::path& path, double sample_rate) {
  if (path.extension() == ".bin") {
    auto f = open_in(path, std::ios::binary);
    return read_recordings_binary(f);
  }
  auto f = open_in(path);
  return read_recordings_csv(f, sample_rate);
}

void write_matrix_csv(const Matrix& m, std::ostream& out, const std::vector<std::string>& header) {
  if (!header.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << '\n';
  }
  std::string line;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    line.clear();
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) line += ',';
      line += format_double(m(r, c));
    }
    line += '\n';
    out << line;
  }
}

Matrix read_matrix_csv(std::istream& in, bool has_header) {
  std::string line;
  if (has_header && !std::getline(in, line)) throw ValidationError("matrix CSV: empty file");
  std::vector<double> values;
  std::size_t cols = 0, rows = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty() || trim(line).front() == '#') continue;
    const auto fields = split_csv(line);
    if (rows == 0) cols = fields.size();
    if (fields.size() != cols) throw ValidationError("matrix CSV: ragged row " + std::to_string(rows + 1));
    for (auto f : fields) values.push_back(parse_double(f));
    ++rows;
  }
  return Eigen::Map<const RowMatrix>(values.data(), static_cast<Eigen::Index>(rows),
                                     static_cast<Eigen::Index>(cols));
}

void write_indices_csv(const std::vector<std::size_t>& idx, std::ostream& out) {
  out << "sample\n";
  for (auto i : idx) out << i << '\n';
}

std::vector<std::size_t> read_indices_csv(std::istream& in) {
  std::string line;
  std::vector<std::size_t> out;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto s = trim(line);
    if (s.empty()) continue;
    std::size_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw ValidationError("index CSV: bad entry '" + std::string(s) + "'");
    }
    out.push_back(v);
  }
  return out;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  auto f = open_in(path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("'" + path.string() + "': " + e.what());
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + tmp.string() + "' for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw Error("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) {
    throw Error("sha256: digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xf];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  auto f = open_in(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return sha256_hex(ss.str());
}

}  // namespace fecg
