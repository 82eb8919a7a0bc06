#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "densipl/label_map.hpp"
#include "densipl/tensor.hpp"
#include "test_util.hpp"

using namespace densipl;

namespace {

std::uint32_t header_len(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(bytes[8]) | static_cast<std::uint32_t>(bytes[9]) << 8 |
         static_cast<std::uint32_t>(bytes[10]) << 16 | static_cast<std::uint32_t>(bytes[11]) << 24;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected densipl::Error";
  return ErrorKind::divergence;
}

}  // namespace

TEST(Dplt, ScalarShapedTensorLayout) {
  const Tensor t({1}, std::vector<float>{0.0f});
  const auto bytes = encode_tensor(t);
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::memcmp(bytes.data(), "DPLT0001", 8), 0);
  const std::uint32_t len = header_len(bytes);
  EXPECT_EQ(bytes.size(), 8u + 4u + len + 4u);
  EXPECT_EQ((12 + len) % 8, 0u);
  EXPECT_EQ(decode_tensor(bytes), t);
}

TEST(Dplt, HeaderIsJsonWithDtypeAndShape) {
  const Tensor t({2, 3}, std::vector<std::uint16_t>(6, 7));
  const auto bytes = encode_tensor(t);
  const std::string header(bytes.begin() + 12, bytes.begin() + 12 + header_len(bytes));
  const auto j = nlohmann::json::parse(header);
  EXPECT_EQ(j["dtype"], "uint16");
  EXPECT_EQ(j["shape"], nlohmann::json::array({2, 3}));
}

TEST(Dplt, ZeroPayload) {
  const Tensor t = Tensor::zeros(DType::float32, {2, 2});
  const auto payload = t.payload_bytes();
  ASSERT_EQ(payload.size(), 16u);
  for (auto b : payload) EXPECT_EQ(b, 0);
}

TEST(Dplt, PayloadIsLittleEndian) {
  const Tensor t({1}, std::vector<std::uint16_t>{0x0102});
  const auto bytes = encode_tensor(t);
  EXPECT_EQ(bytes[bytes.size() - 2], 0x02);
  EXPECT_EQ(bytes[bytes.size() - 1], 0x01);
}

TEST(Dplt, RandomRoundTripIsBitEqual) {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> normal(0.0f, 10.0f);
  const auto dir = testutil::temp_dir("tensor_roundtrip");
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 9);
    const Shape shape = trial == 0 ? Shape{7, 5, 3} : Shape{dim(rng), dim(rng), dim(rng)};
    std::vector<float> v(shape_product(shape));
    for (auto& x : v) x = normal(rng);
    const Tensor t(shape, v);
    EXPECT_EQ(decode_tensor(encode_tensor(t)), t);
    save_tensor(t, dir / "t.dplt");
    EXPECT_EQ(load_tensor(dir / "t.dplt"), t);
  }
  std::vector<std::uint8_t> u8(24);
  for (std::size_t i = 0; i < u8.size(); ++i) u8[i] = static_cast<std::uint8_t>(i * 11);
  const Tensor t8({2, 3, 4}, u8);
  EXPECT_EQ(decode_tensor(encode_tensor(t8)), t8);
}

TEST(Dplt, TruncatedPayloadIsSizeMismatch) {
  auto bytes = encode_tensor(Tensor({4}, std::vector<float>{1, 2, 3, 4}));
  bytes.pop_back();
  try {
    decode_tensor(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::input);
    EXPECT_NE(std::string(e.what()).find("size mismatch"), std::string::npos);
  }
}

TEST(Dplt, NonFinitePayloadRejected) {
  Tensor t({2}, std::vector<float>{1.0f, 0.0f});
  auto bytes = encode_tensor(t);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(bytes.data() + bytes.size() - 4, &nan, 4);
  EXPECT_EQ(kind_of([&] { decode_tensor(bytes); }), ErrorKind::input);
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(bytes.data() + bytes.size() - 4, &inf, 4);
  EXPECT_EQ(kind_of([&] { decode_tensor(bytes); }), ErrorKind::input);
}

TEST(Dplt, BadMagicRejected) {
  auto bytes = encode_tensor(Tensor({1}, std::vector<float>{1.0f}));
  bytes[0] = 'X';
  EXPECT_EQ(kind_of([&] { decode_tensor(bytes); }), ErrorKind::input);
}

TEST(Dplt, ShapeMismatchInConstructor) {
  EXPECT_EQ(kind_of([] { Tensor({2, 2}, std::vector<float>(3)); }), ErrorKind::invariant);
  EXPECT_EQ(kind_of([] { Tensor({0}, std::vector<float>{}); }), ErrorKind::invariant);
}

TEST(ProbabilityMapTest, ValidatesRangeAndSum) {
  auto make = [](float a, float b) {
    return validate_probability_map(Tensor({1, 1, 2}, std::vector<float>{a, b}));
  };
  EXPECT_NO_THROW(make(0.3f, 0.7f));
  EXPECT_EQ(kind_of([&] { make(0.3f, 0.3f); }), ErrorKind::invariant);
  EXPECT_EQ(kind_of([&] { make(-0.1f, 1.1f); }), ErrorKind::invariant);
}

TEST(ProbabilityMapTest, RankAndDtypeAreInputErrors) {
  EXPECT_EQ(kind_of([] { validate_probability_map(Tensor({2}, std::vector<float>{0.5f, 0.5f})); }),
            ErrorKind::input);
  EXPECT_EQ(kind_of([] { validate_probability_map(Tensor({1, 1, 2}, std::vector<std::uint8_t>{0, 1})); }),
            ErrorKind::input);
}

TEST(LabelMapTest, HardOnlyRoundTripsAsUint16) {
  std::mt19937_64 rng(3);
  const LabelMap y = testutil::random_hard_labels(rng, 6, 5, 4, 0.6);
  const Tensor t = label_map_to_tensor(y);
  EXPECT_EQ(t.dtype(), DType::uint16);
  EXPECT_EQ(t.rank(), 2u);
  for (std::size_t i = 0; i < y.pixels(); ++i) {
    EXPECT_EQ(t.values<std::uint16_t>()[i], y.is_unlabeled(i) ? 65535 : y.hard_class(i));
  }
  EXPECT_EQ(label_map_from_tensor(t, 4), y);
}

TEST(LabelMapTest, MixedRoundTripsAsFloat) {
  std::mt19937_64 rng(4);
  const auto dir = testutil::temp_dir("labelmap");
  for (int trial = 0; trial < 20; ++trial) {
    const LabelMap y = testutil::random_mixed_labels(rng, 4, 7, 3);
    save_label_map(y, dir / "y.dplt");
    const LabelMap back = load_label_map(dir / "y.dplt", 3);
    EXPECT_EQ(back, y);
    if (y.has_soft()) {
      EXPECT_EQ(load_tensor(dir / "y.dplt").dtype(), DType::float32);
    }
  }
}

TEST(LabelMapTest, ClassIdOutOfRange) {
  const Tensor t({1, 2}, std::vector<std::uint16_t>{0, 5});
  EXPECT_EQ(kind_of([&] { label_map_from_tensor(t, 3); }), ErrorKind::invariant);
  EXPECT_EQ(kind_of([&] { label_map_from_tensor(t, std::nullopt); }), ErrorKind::input);
}

TEST(AtomicWrite, LeavesNoTempFiles) {
  const auto dir = testutil::temp_dir("atomic");
  write_file_atomic(dir / "a.txt", std::string_view("first"));
  write_file_atomic(dir / "a.txt", std::string_view("second"));
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
  const auto bytes = read_file_bytes(dir / "a.txt");
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), "second");
}
