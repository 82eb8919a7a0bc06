#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "densipl/class_thresholds.hpp"
#include "densipl/thresholding.hpp"
#include "test_util.hpp"

using namespace densipl;

namespace {

// p = tenths / 10; count = ceil(tenths * n / 10) in integers.
float oracle_lambda(std::vector<float> values, int tenths) {
  if (values.empty()) return kLambdaCap;
  std::sort(values.begin(), values.end(), std::greater<>{});
  const std::size_t n = values.size();
  std::size_t count = (static_cast<std::size_t>(tenths) * n + 9) / 10;
  count = std::max<std::size_t>(count, 1);
  return std::min(values[count - 1], kLambdaCap);
}

ProbabilityMap map_from(std::size_t h, std::size_t w, std::size_t k, std::vector<float> v) {
  Grid<float> g(h, w, k);
  g.data = std::move(v);
  return ProbabilityMap(std::move(g));
}

}  // namespace

TEST(NormalizedScores, Examples) {
  const auto m = map_from(1, 1, 2, {0.5f, 0.5f});
  auto s = normalized_scores(m, ClassThresholds({1.0f, 1.0f}, 1.0));
  EXPECT_FLOAT_EQ(s.at(0, 0, 0), 0.5f);
  EXPECT_FLOAT_EQ(s.at(0, 0, 1), 0.5f);

  const auto m2 = map_from(1, 1, 2, {0.6f, 0.4f});
  s = normalized_scores(m2, ClassThresholds({0.5f, 0.8f}, 0.5));
  EXPECT_FLOAT_EQ(s.at(0, 0, 0), 1.2f);
  EXPECT_FLOAT_EQ(s.at(0, 0, 1), 0.5f);
}

TEST(NormalizedScores, MatchesElementwiseDivision) {
  std::mt19937_64 rng(11);
  const auto m = testutil::random_map(rng, 9, 8, 5);
  const auto lambda = compute_thresholds(collect_class_max_probs(std::vector{m}), 0.3);
  const auto s = normalized_scores(m, lambda);
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(s.at(y, x, k), m.at(y, x, k) / lambda[k]);
}

TEST(NormalizedScores, KMismatch) {
  const auto m = map_from(1, 1, 2, {0.5f, 0.5f});
  EXPECT_THROW(normalized_scores(m, ClassThresholds({1.0f, 1.0f, 1.0f}, 1.0)), Error);
}

TEST(Pool, DirectReading) {
  const auto m = map_from(1, 2, 2, {0.9f, 0.1f, 0.2f, 0.8f});
  const auto pool = collect_class_max_probs(std::vector{m});
  EXPECT_EQ(pool.values(0), std::vector<float>{0.9f});
  EXPECT_EQ(pool.values(1), std::vector<float>{0.8f});
}

TEST(Pool, EmptyStream) {
  const auto pool = collect_class_max_probs(std::vector<ProbabilityMap>{}, 3);
  EXPECT_EQ(pool.num_classes(), 3u);
  EXPECT_EQ(pool.total(), 0u);
}

TEST(Pool, SizesSumToPixelCount) {
  std::mt19937_64 rng(12);
  std::vector<ProbabilityMap> maps;
  std::size_t pixels = 0;
  std::uniform_int_distribution<std::size_t> dim(1, 12);
  for (int i = 0; i < 100; ++i) {
    maps.push_back(testutil::random_map(rng, dim(rng), dim(rng), 4));
    pixels += maps.back().pixels();
  }
  EXPECT_EQ(collect_class_max_probs(maps).total(), pixels);
}

TEST(Pool, InconsistentK) {
  std::mt19937_64 rng(13);
  std::vector maps{testutil::random_map(rng, 2, 2, 3), testutil::random_map(rng, 2, 2, 4)};
  EXPECT_THROW(collect_class_max_probs(maps), Error);
}

TEST(Thresholds, Examples) {
  ClassConfidencePool pool(2);
  pool.add(0, 0.9f);
  pool.add(0, 0.6f);
  EXPECT_FLOAT_EQ(compute_thresholds(pool, 0.5)[0], 0.9f);
  EXPECT_FLOAT_EQ(compute_thresholds(pool, 1.0)[0], 0.6f);
  EXPECT_FLOAT_EQ(compute_thresholds(pool, 0.5)[1], 0.999f);
}

TEST(Thresholds, CappedAt0999) {
  ClassConfidencePool pool(1);
  pool.add(0, 1.0f);
  EXPECT_FLOAT_EQ(compute_thresholds(pool, 0.2)[0], 0.999f);
}

TEST(Thresholds, RejectsBadPortion) {
  ClassConfidencePool pool(1);
  pool.add(0, 0.5f);
  EXPECT_THROW(compute_thresholds(pool, 0.0), Error);
  EXPECT_THROW(compute_thresholds(pool, 1.5), Error);
}

TEST(Thresholds, SelectionCountAbsorbsRepresentationError) {
  EXPECT_EQ(selection_count(0.3, 10), 3u);
  EXPECT_EQ(selection_count(0.7, 10), 7u);
  EXPECT_EQ(selection_count(0.1, 1), 1u);
  EXPECT_EQ(selection_count(0.2, 11), 3u);
}

TEST(Thresholds, MatchesSortAndIndexOracle) {
  std::mt19937_64 rng(14);
  std::uniform_int_distribution<std::size_t> size(0, 400);
  std::uniform_real_distribution<float> prob(0.25f, 1.0f);
  for (int trial = 0; trial < 30; ++trial) {
    ClassConfidencePool pool(4);
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t n = size(rng);
      for (std::size_t i = 0; i < n; ++i) pool.add(k, prob(rng));
    }
    for (int tenths = 1; tenths <= 10; ++tenths) {
      const auto lambda = compute_thresholds(pool, tenths / 10.0);
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(lambda[k], oracle_lambda(pool.values(k), tenths));
    }
  }
}

TEST(Thresholds, MonotoneInPortion) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ProbabilityMap> maps;
    for (int i = 0; i < 3; ++i) maps.push_back(testutil::random_map(rng, 10, 10, 3));
    const auto pool = collect_class_max_probs(maps);
    ClassThresholds prev = compute_thresholds(pool, 0.05);
    for (int step = 2; step <= 20; ++step) {
      const auto next = compute_thresholds(pool, step * 0.05);
      for (std::size_t k = 0; k < 3; ++k) EXPECT_LE(next[k], prev[k]);
      prev = next;
    }
  }
}

TEST(Thresholds, JsonRoundTrip) {
  const ClassThresholds t({0.9f, 0.123456789f, 0.999f}, 0.35);
  EXPECT_EQ(thresholds_from_json(to_json(t)), t);
  EXPECT_THROW(thresholds_from_json(nlohmann::json{{"p", 0.2}, {"lambdas", {0.5}}, {"extra", 1}}), Error);
  EXPECT_THROW(thresholds_from_json(nlohmann::json{{"p", 0.2}, {"lambdas", {0.0}}}), Error);
}

TEST(Schedule, Portion) {
  EXPECT_DOUBLE_EQ(schedule_portion(0), 0.2);
  EXPECT_DOUBLE_EQ(schedule_portion(3), 0.35);
  EXPECT_DOUBLE_EQ(schedule_portion(20), 0.5);
  for (std::size_t r = 0; r < 30; ++r) EXPECT_LE(schedule_portion(r), schedule_portion(r + 1));
}
