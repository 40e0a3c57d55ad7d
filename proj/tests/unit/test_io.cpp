#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "fecg/io.hpp"

using namespace fecg;

namespace {

RecordingSet sample_set() {
  RecordingSet r;
  r.data.resize(3, 5);
  for (int i = 0; i < 3; ++i) {
    for (int t = 0; t < 5; ++t) r.data(i, t) = (i + 1) * 0.1 + t * 1e-7 - 1.0 / 3.0;
  }
  r.data(1, 2) = -0.0;
  r.sample_rate = 500.0;
  r.labels = {"r0c0", "r0c1", "r1c0"};
  r.fill_defaults();
  return r;
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("doubles round trip exactly") {
    for (double v : {0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0}) CHECK(parse_double(format_double(v)) == v);
    CHECK(std::isnan(parse_double(format_double(NAN))));
    CHECK_THROWS_AS(parse_double("1.5x"), ValidationError);
  }

  TEST_CASE("recording csv round trip") {
    const auto r = sample_set();
    std::stringstream s;
    write_recordings_csv(r, s);
    CHECK(s.str().rfind("r0c0,r0c1,r1c0\n", 0) == 0);
    const auto back = read_recordings_csv(s, 500.0);
    CHECK(back.data == r.data);
    CHECK(back.labels == r.labels);
  }

  TEST_CASE("binary layout and round trip") {
    const auto r = sample_set();
    std::stringstream s;
    write_recordings_binary(r, s);
    const std::string bytes = s.str();
    CHECK(bytes.substr(0, 8) == "FECGMAT1");
    std::uint64_t rows = 0, cols = 0;
    std::memcpy(&rows, bytes.data() + 16, 8);
    std::memcpy(&cols, bytes.data() + 24, 8);
    CHECK(rows == 3);
    CHECK(cols == 5);
    const auto back = read_recordings_binary(s);
    CHECK(back.data == r.data);
    CHECK(back.sample_rate == 500.0);
    CHECK(back.labels == r.labels);

    std::stringstream bad("NOTAMATRIX");
    CHECK_THROWS_AS(read_recordings_binary(bad), ValidationError);
  }

  TEST_CASE("file save and load by extension") {
    const auto dir = std::filesystem::temp_directory_path() / "fecg_io_test";
    std::filesystem::create_directories(dir);
    const auto r = sample_set();
    save_recordings(r, dir / "a.csv");
    save_recordings(r, dir / "a.bin");
    CHECK(load_recordings(dir / "a.csv", 500.0).data == r.data);
    CHECK(load_recordings(dir / "a.bin", 1.0).sample_rate == 500.0);
    CHECK_THROWS(load_recordings(dir / "missing.csv", 500.0));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("ragged csv is rejected") {
    std::stringstream s("a,b\n1,2\n3\n");
    CHECK_THROWS_AS(read_recordings_csv(s, 1000.0), ValidationError);
  }

  TEST_CASE("indices") {
    std::stringstream s;
    write_indices_csv({3, 17, 400}, s);
    CHECK(read_indices_csv(s) == std::vector<std::size_t>{3, 17, 400});
  }

  TEST_CASE("sha256 test vector") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }
}
