#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ncs/csv.hpp"
#include "ncs/error.hpp"
#include "ncs/field_io.hpp"
#include "ncs/rng.hpp"

using namespace ncs;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "ncs_unit_io";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary);
  os << bytes;
}

}  // namespace

TEST_CASE("field file round trip is bit-exact") {
  RngStream rng(5, 5);
  for (Scale s : {Scale::Raw, Scale::Gumbel, Scale::Frechet}) {
    std::vector<double> v(36);
    for (auto& x : v) x = s == Scale::Frechet ? rng.exponential() + 1e-300 : rng.normal() * 1e10;
    v[0] = s == Scale::Frechet ? 5e-324 : -0.0;
    const Field f(v, s);
    const auto p = scratch("f.ncsf");
    write_field(p, 6, f);
    const auto back = read_field(p);
    CHECK(back.side == 6);
    CHECK(back.field == f);
    CHECK(std::signbit(back.field[0]) == std::signbit(f[0]));
    CHECK(fs::file_size(p) == 16 + 36 * 8);
  }
}

TEST_CASE("mask file round trip") {
  const Mask m(std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 0, 0, 1});
  const auto p = scratch("m.ncsm");
  write_mask(p, 3, m);
  const auto back = read_mask(p);
  CHECK(back.side == 3);
  CHECK(back.mask == m);
  CHECK(fs::file_size(p) == 16 + 9);
}

TEST_CASE("field header layout") {
  const auto p = scratch("h.ncsf");
  write_field(p, 2, Field({1, 2, 3, 4}, Scale::Gumbel));
  const std::string b = read_file(p);
  CHECK(b.substr(0, 4) == "NCSF");
  CHECK(static_cast<unsigned char>(b[4]) == 1);
  CHECK(static_cast<unsigned char>(b[8]) == 2);
  CHECK(static_cast<unsigned char>(b[12]) == 2);
  double first;
  std::memcpy(&first, b.data() + 16, 8);
  CHECK(first == 1.0);
}

TEST_CASE("corrupt files are rejected") {
  const auto good = scratch("g.ncsf");
  write_field(good, 2, Field({1, 2, 3, 4}, Scale::Raw));
  const std::string bytes = read_file(good);

  auto expect_io = [&](const std::string& b) {
    const auto p = scratch("bad.ncsf");
    write_bytes(p, b);
    try {
      read_field(p);
      FAIL("expected an I/O error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Io);
    }
  };
  std::string magic = bytes;
  magic[0] = 'X';
  expect_io(magic);
  std::string version = bytes;
  version[4] = 2;
  expect_io(version);
  expect_io(bytes.substr(0, bytes.size() - 1));
  expect_io(bytes + "x");
  std::string tag = bytes;
  tag[12] = 9;
  expect_io(tag);
  std::string nan = bytes;
  const double q = NAN;
  std::memcpy(nan.data() + 16, &q, 8);
  expect_io(nan);

  try {
    read_field(scratch("does_not_exist.ncsf"));
    FAIL("expected an I/O error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Io);
  }
  const auto mp = scratch("bad.ncsm");
  write_bytes(mp, std::string("NCSM\1\0\0\0\1\0\0\0\0\0\0\0", 16) + std::string(1, '\2'));
  CHECK_THROWS_AS(read_mask(mp), Error);
}

TEST_CASE("field streams") {
  RngStream rng(6, 6);
  Eigen::MatrixXd cols(9, 5);
  for (Eigen::Index i = 0; i < cols.size(); ++i) cols.data()[i] = rng.normal();
  const auto p = scratch("s.ncsf");
  write_field_stream(p, 3, cols, Scale::Gumbel);
  const auto back = read_field_stream(p);
  CHECK(back.side == 3);
  CHECK(back.scale == Scale::Gumbel);
  CHECK(back.columns == cols);

  // The first record of a stream is a valid single-field file.
  const std::string b = read_file(p);
  const auto single = scratch("first.ncsf");
  write_bytes(single, b.substr(0, 16 + 9 * 8));
  CHECK(read_field(single).field[4] == cols(4, 0));

  Eigen::MatrixXd masks = Eigen::MatrixXd::Zero(9, 3);
  masks(2, 0) = masks(8, 2) = 1;
  const auto mp = scratch("s.ncsm");
  write_mask_stream(mp, 3, masks);
  CHECK(read_mask_stream(mp).columns == masks);
  masks(0, 0) = 0.5;
  CHECK_THROWS_AS(write_mask_stream(mp, 3, masks), Error);
}

TEST_CASE("csv formatting") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(NAN) == "");
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
  CsvTable t({"a", "b"});
  t.add_row({"1", "2"});
  CHECK(t.str() == "a,b\n1,2\n");
  CHECK_THROWS_AS(t.add_row({"1"}), Error);

  const auto g = GridSpec::build(2, 0, 1);
  const auto p = scratch("f.csv");
  write_field_csv(p, g, Field({1, 2, 3, 4}, Scale::Raw));
  CHECK(read_file(p) == "index,row,col,value\n0,0,0,1\n1,0,1,2\n2,1,0,3\n3,1,1,4\n");
}
