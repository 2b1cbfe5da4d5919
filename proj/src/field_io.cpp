#include "ncs/field_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ncs/csv.hpp"
#include "ncs/error.hpp"

namespace ncs {

namespace {

constexpr char kFieldMagic[4] = {'N', 'C', 'S', 'F'};
constexpr char kMaskMagic[4] = {'N', 'C', 'S', 'M'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

double get_f64(const std::string& s, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return std::bit_cast<double>(v);
}

std::string header(const char (&magic)[4], int side, std::uint32_t tag) {
  std::string out(magic, 4);
  put_u32(out, kFieldFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(side));
  put_u32(out, tag);
  return out;
}

struct Header {
  int side;
  std::uint32_t tag;
};

Header check_header(const std::string& bytes, const char (&magic)[4], const std::filesystem::path& path,
                    std::size_t entry_size) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), magic, 4) != 0)
    throw io_error("not a valid " + std::string(magic, 4) + " file: " + path.string());
  const auto version = get_u32(bytes, 4);
  if (version != kFieldFormatVersion)
    throw io_error("unsupported format version " + std::to_string(version) + " in " + path.string());
  const auto side = get_u32(bytes, 8);
  if (side == 0 || side > 65535) throw io_error("invalid grid side in " + path.string());
  const std::size_t n = static_cast<std::size_t>(side) * side;
  if (bytes.size() != 16 + n * entry_size) throw io_error("truncated or oversized payload in " + path.string());
  return {static_cast<int>(side), get_u32(bytes, 12)};
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open for writing: " + tmp.string());
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw io_error("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw io_error("rename failed for " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open for reading: " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void write_field(const std::filesystem::path& path, int side, const Field& f) {
  if (f.size() != static_cast<std::size_t>(side) * side) throw invalid_argument("write_field: size mismatch");
  auto out = header(kFieldMagic, side, static_cast<std::uint32_t>(f.scale()));
  out.reserve(16 + 8 * f.size());
  for (double v : f.values()) put_f64(out, v);
  write_file_atomic(path, out);
}

FieldFile read_field(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto h = check_header(bytes, kFieldMagic, path, 8);
  if (h.tag > static_cast<std::uint32_t>(Scale::Gumbel)) throw io_error("unknown scale tag in " + path.string());
  const std::size_t n = static_cast<std::size_t>(h.side) * h.side;
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = get_f64(bytes, 16 + 8 * i);
  try {
    return {h.side, Field(std::move(v), static_cast<Scale>(h.tag))};
  } catch (const Error& e) {
    throw io_error(path.string() + ": " + e.what());
  }
}

void write_mask(const std::filesystem::path& path, int side, const Mask& m) {
  if (m.size() != static_cast<std::size_t>(side) * side) throw invalid_argument("write_mask: size mismatch");
  auto out = header(kMaskMagic, side, 0);
  for (auto b : m.bits()) out.push_back(static_cast<char>(b));
  write_file_atomic(path, out);
}

MaskFile read_mask(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto h = check_header(bytes, kMaskMagic, path, 1);
  const std::size_t n = static_cast<std::size_t>(h.side) * h.side;
  std::vector<std::uint8_t> bits(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = static_cast<std::uint8_t>(bytes[16 + i]);
    if (b > 1) throw io_error("mask byte other than 0/1 in " + path.string());
    bits[i] = b;
  }
  return {h.side, Mask(std::move(bits))};
}

void write_field_stream(const std::filesystem::path& path, int side, const Eigen::MatrixXd& columns, Scale scale) {
  const auto n = static_cast<Eigen::Index>(side) * side;
  if (columns.rows() != n) throw invalid_argument("write_field_stream: size mismatch");
  std::string out;
  out.reserve(static_cast<std::size_t>(columns.cols() * (16 + 8 * n)));
  for (Eigen::Index c = 0; c < columns.cols(); ++c) {
    std::vector<double> v(columns.col(c).data(), columns.col(c).data() + n);
    const Field f(std::move(v), scale);
    out += header(kFieldMagic, side, static_cast<std::uint32_t>(scale));
    for (double x : f.values()) put_f64(out, x);
  }
  write_file_atomic(path, out);
}

void write_mask_stream(const std::filesystem::path& path, int side, const Eigen::MatrixXd& columns) {
  const auto n = static_cast<Eigen::Index>(side) * side;
  if (columns.rows() != n) throw invalid_argument("write_mask_stream: size mismatch");
  std::string out;
  for (Eigen::Index c = 0; c < columns.cols(); ++c) {
    out += header(kMaskMagic, side, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double b = columns(i, c);
      if (b != 0.0 && b != 1.0) throw invalid_argument("write_mask_stream: entries must be 0 or 1");
      out.push_back(static_cast<char>(b == 1.0 ? 1 : 0));
    }
  }
  write_file_atomic(path, out);
}

namespace {

FieldStream read_stream(const std::filesystem::path& path, const char (&magic)[4], std::size_t entry_size) {
  const auto bytes = read_file(path);
  if (bytes.size() < 16) throw io_error("empty or truncated stream: " + path.string());
  const std::size_t side = get_u32(bytes, 8);
  if (side == 0 || side > 65535) throw io_error("invalid grid side in " + path.string());
  const std::size_t n = side * side;
  const std::size_t record = 16 + n * entry_size;
  if (bytes.size() % record != 0) throw io_error("truncated record in " + path.string());
  const std::size_t count = bytes.size() / record;
  FieldStream out;
  out.side = static_cast<int>(side);
  out.columns.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(count));
  for (std::size_t c = 0; c < count; ++c) {
    const auto h = check_header(bytes.substr(c * record, record), magic, path, entry_size);
    if (static_cast<std::size_t>(h.side) != side) throw io_error("mixed grid sides in " + path.string());
    if (c == 0) {
      if (h.tag > static_cast<std::uint32_t>(Scale::Gumbel)) throw io_error("unknown scale tag in " + path.string());
      out.scale = static_cast<Scale>(h.tag);
    } else if (h.tag != static_cast<std::uint32_t>(out.scale)) {
      throw io_error("mixed scale tags in " + path.string());
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t at = c * record + 16 + i * entry_size;
      double v;
      if (entry_size == 8) {
        v = get_f64(bytes, at);
        if (!std::isfinite(v)) throw io_error("non-finite value in " + path.string());
      } else {
        const auto b = static_cast<std::uint8_t>(bytes[at]);
        if (b > 1) throw io_error("mask byte other than 0/1 in " + path.string());
        v = b;
      }
      out.columns(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = v;
    }
  }
  return out;
}

}  // namespace

FieldStream read_field_stream(const std::filesystem::path& path) { return read_stream(path, kFieldMagic, 8); }
FieldStream read_mask_stream(const std::filesystem::path& path) { return read_stream(path, kMaskMagic, 1); }

void write_field_csv(const std::filesystem::path& path, const GridSpec& g, const Field& f) {
  if (f.size() != g.size()) throw invalid_argument("write_field_csv: size mismatch");
  CsvTable t({"index", "row", "col", "value"});
  for (std::size_t i = 0; i < f.size(); ++i)
    t.add_row({std::to_string(i), std::to_string(g.row(i)), std::to_string(g.col(i)), format_double(f[i])});
  t.write(path);
}

}  // namespace ncs
