#include "doctest.h"
#include "helpers.hpp"
#include "lamatch/formats.hpp"
#include "lamatch/weights.hpp"

using namespace lamatch;

TEST_SUITE("formats") {
  TEST_CASE("kpds round trip") {
    const auto pair = generate_pair(2, 40, 320, 240, 12, {0.1, 0.5, 0.1, false, 0});
    const auto bytes = encode_kpds(pair.source);
    CHECK(bytes.size() == 24 + 40 * 2 * 4 + 40 * 12 * 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "KPDS");
    const auto back = decode_kpds(bytes);
    CHECK(back.keypoints == pair.source.keypoints);
    CHECK(back.descriptors == pair.source.descriptors);
    CHECK(back.width == 320);
    CHECK(back.height == 240);
    CHECK(encode_kpds(back) == bytes);
  }

  TEST_CASE("kpds rejects corrupt input") {
    const auto pair = generate_pair(2, 8, 64, 64, 4);
    auto bytes = encode_kpds(pair.source);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_kpds(truncated), DataError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_kpds(bad_magic), DataError);
    auto bad_version = bytes;
    bad_version[4] = 2;
    CHECK_THROWS_AS(decode_kpds(bad_version), DataError);
    CHECK_THROWS_AS(load_kpds("/nonexistent/file.kpds"), DataError);
  }

  TEST_CASE("ground truth and homography files") {
    testing::TempDir dir("formats");
    const auto pair = generate_pair(3, 50, 320, 240, 4, {0.0, 1.0, 0.2, false, 0});
    save_ground_truth(dir / "gt.csv", pair.ground_truth);
    const auto gt = load_ground_truth(dir / "gt.csv", pair.source.size(), pair.target.size());
    CHECK(gt.pairs == pair.ground_truth.pairs);
    CHECK(gt.unmatchable_source == pair.ground_truth.unmatchable_source);
    CHECK(gt.unmatchable_target == pair.ground_truth.unmatchable_target);
    CHECK_THROWS_AS(load_ground_truth(dir / "gt.csv", 1, 1), DataError);

    save_homography(dir / "h.txt", pair.homography);
    const auto h = load_homography(dir / "h.txt");
    CHECK((h.matrix() - pair.homography.matrix()).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("lawt round trip and errors") {
    NetworkConfig cfg{8, 4, 2, 1, 1};
    const auto w = init_weights(cfg, 4);
    const auto tensors = weights_to_tensors(w);
    const auto bytes = encode_lawt(tensors);
    const auto back = tensors_to_weights(decode_lawt(bytes), 2);
    CHECK(encode_lawt(weights_to_tensors(back)) == bytes);

    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    CHECK_THROWS_AS(decode_lawt(truncated), DataError);

    auto wrong = tensors;
    wrong[0].dims = {static_cast<std::uint32_t>(wrong[0].data.size()), 1};
    try {
      tensors_to_weights(wrong, 2);
      FAIL("expected a data error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(wrong[0].name) != std::string::npos);
    }
  }

  TEST_CASE("byte stream helpers are little endian") {
    ByteWriter w;
    w.u32(0x01020304u);
    w.f32(1.0f);
    const auto bytes = w.take();
    CHECK(bytes[0] == 0x04);
    CHECK(bytes[3] == 0x01);
    ByteReader r(bytes);
    CHECK(r.u32() == 0x01020304u);
    CHECK(r.f32() == 1.0f);
    CHECK(r.remaining() == 0);
    CHECK_THROWS_AS(r.u8(), DataError);
  }
}
