#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "ncs/ncs.h"

namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  const fs::path dir = fs::temp_directory_path() / "ncs_capi_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const char* kTiny = R"(
[grid]
side = 4
[schedule]
steps = 20
[net]
base_width = 4
depth = 1
fourier_features = 8
embed_width = 8
[train]
counts = [2, 1, 2, 2]
val_counts = [2, 1, 1, 1]
draws = 1
epochs = 1
batch_size = 8
)";

}  // namespace

TEST_CASE("status codes and last error") {
  CHECK(std::string(ncs_version()) == "0.1.0");
  ncs_grid* g = nullptr;
  CHECK(ncs_grid_create(0, -1, 1, &g) == NCS_ERR_INVALID_ARGUMENT);
  CHECK(g == nullptr);
  CHECK(std::strlen(ncs_last_error()) > 0);
  CHECK(ncs_grid_create(4, -1, 1, nullptr) == NCS_ERR_INVALID_ARGUMENT);

  CHECK(ncs_exit_code(NCS_OK) == 0);
  CHECK(ncs_exit_code(NCS_ERR_INVALID_ARGUMENT) == 2);
  CHECK(ncs_exit_code(NCS_ERR_CONFIG) == 2);
  CHECK(ncs_exit_code(NCS_ERR_NUMERICAL) == 3);
  CHECK(ncs_exit_code(NCS_ERR_CONTRACT) == 3);
  CHECK(ncs_exit_code(NCS_ERR_IO) == 4);
  CHECK(ncs_exit_code(NCS_ERR_INTERNAL) == 1);

  ncs_experiment* e = nullptr;
  CHECK(ncs_experiment_parse("[mask]\nrho = 1.5\n", nullptr, &e) == NCS_ERR_CONFIG);
  CHECK(std::string(ncs_last_error()).find("mask.rho") != std::string::npos);
  CHECK(ncs_model_load("/nonexistent/model.ncsc", 0, nullptr) != NCS_OK);
  ncs_model* m = nullptr;
  CHECK(ncs_model_load("/nonexistent/model.ncsc", 0, &m) == NCS_ERR_IO);
}

TEST_CASE("grid, field and mask handles") {
  ncs_grid* g = nullptr;
  REQUIRE(ncs_grid_create(3, 0, 2, &g) == NCS_OK);
  CHECK(ncs_grid_size(g) == 9);
  double x = 0, y = 0;
  REQUIRE(ncs_grid_location(g, 5, &x, &y) == NCS_OK);
  CHECK(x == 2.0);
  CHECK(y == 1.0);
  CHECK(ncs_grid_location(g, 9, &x, &y) == NCS_ERR_INVALID_ARGUMENT);

  const fs::path dir = scratch();
  const double v[9] = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  ncs_field* f = nullptr;
  REQUIRE(ncs_field_create(v, 9, NCS_SCALE_GUMBEL, &f) == NCS_OK);
  CHECK(ncs_field_write((dir / "f.ncsf").c_str(), 3, f) == NCS_OK);
  ncs_field* back = nullptr;
  int side = 0;
  REQUIRE(ncs_field_read((dir / "f.ncsf").c_str(), &back, &side) == NCS_OK);
  CHECK(side == 3);
  CHECK(ncs_field_scale(back) == NCS_SCALE_GUMBEL);
  double out[9];
  REQUIRE(ncs_field_values(back, out, 9) == NCS_OK);
  CHECK(std::memcmp(out, v, sizeof v) == 0);
  CHECK(ncs_field_values(back, out, 8) == NCS_ERR_INVALID_ARGUMENT);
  const double bad[2] = {1, NAN};
  ncs_field* nf = nullptr;
  CHECK(ncs_field_create(bad, 2, NCS_SCALE_RAW, &nf) != NCS_OK);

  ncs_mask* mk = nullptr;
  REQUIRE(ncs_mask_sample_fixed_count(g, 4, 11, &mk) == NCS_OK);
  CHECK(ncs_mask_observed_count(mk) == 4);
  ncs_mask* mb = nullptr;
  CHECK(ncs_mask_sample_bernoulli(g, 1.5, 11, &mb) == NCS_ERR_INVALID_ARGUMENT);
  const uint8_t bits[3] = {0, 1, 2};
  REQUIRE(ncs_mask_create(bits, 3, &mb) == NCS_OK);
  CHECK(ncs_mask_observed_count(mb) == 2);
  ncs_mask_destroy(mb);

  ncs_field_destroy(f);
  ncs_field_destroy(back);
  ncs_mask_destroy(mk);
  ncs_grid_destroy(g);
  ncs_grid_destroy(nullptr);
}

TEST_CASE("train, load and sample through the C interface") {
  const fs::path dir = scratch();
  const std::string out = (dir / "run").string();
  ncs_overrides ov{1, 5, out.c_str(), 1};
  ncs_experiment* e = nullptr;
  REQUIRE(ncs_experiment_parse(kTiny, &ov, &e) == NCS_OK);
  CHECK(std::string(ncs_experiment_out_dir(e)) == out);
  CHECK(ncs_experiment_seed(e) == 5);
  ncs_set_verbosity(0);
  REQUIRE(ncs_cmd_train(e, nullptr) == NCS_OK);
  const std::string ckpt = out + "/checkpoint.ncsc";
  CHECK(fs::exists(ckpt));

  ncs_model* m = nullptr;
  CHECK(ncs_model_load(ckpt.c_str(), 8, &m) != NCS_OK);
  REQUIRE(ncs_model_load(ckpt.c_str(), 4, &m) == NCS_OK);
  CHECK(ncs_model_side(m) == 4);
  CHECK(ncs_model_parameter_count(m) > 0);

  std::vector<double> obs(16, 0.0);
  obs[3] = 1.25;
  std::vector<uint8_t> bits(16, 0);
  bits[3] = 1;
  ncs_field* f = nullptr;
  ncs_mask* mk = nullptr;
  REQUIRE(ncs_field_create(obs.data(), 16, NCS_SCALE_RAW, &f) == NCS_OK);
  REQUIRE(ncs_mask_create(bits.data(), 16, &mk) == NCS_OK);
  std::vector<double> a(3 * 16), b(3 * 16);
  REQUIRE(ncs_model_sample(m, f, mk, 3.0, 9, 3, 0, a.data()) == NCS_OK);
  REQUIRE(ncs_model_sample(m, f, mk, 3.0, 9, 3, 0, b.data()) == NCS_OK);
  CHECK(a == b);
  for (int i = 0; i < 3; ++i) CHECK(a[16 * i + 3] == 1.25);
  for (double v : a) CHECK(std::isfinite(v));

  ncs_field_destroy(f);
  ncs_mask_destroy(mk);
  ncs_model_destroy(m);
  ncs_experiment_destroy(e);
}
