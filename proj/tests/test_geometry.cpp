#include <gtest/gtest.h>

#include "mdod/geometry.hpp"
#include "oracles.hpp"

using mdod::Box;

TEST(Iou, IdenticalBoxes) { EXPECT_DOUBLE_EQ(mdod::iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0); }

TEST(Iou, DisjointBoxes) { EXPECT_EQ(mdod::iou({0, 0, 1, 1}, {5, 5, 6, 6}), 0.0); }

TEST(Iou, PartialOverlapMatchesRaster) {
  const Box a{0, 0, 2, 2}, b{1, 1, 3, 3};
  const double raster = oracle::raster_iou(a, b, 1.0 / 512);
  EXPECT_NEAR(raster, 1.0 / 7.0, 1e-12);
  EXPECT_NEAR(mdod::iou(a, b), raster, 1e-12);
}

TEST(Iou, RandomBoxesAgreeWithRaster) {
  mdod::Rng rng(11);
  for (int i = 0; i < 30; ++i) {
    // Integer-aligned boxes so the grid count is exact.
    auto ib = [&] {
      const double l = static_cast<double>(mdod::uniform_int(rng, 0, 10));
      const double t = static_cast<double>(mdod::uniform_int(rng, 0, 10));
      return Box{l, t, l + static_cast<double>(mdod::uniform_int(rng, 1, 8)), t + static_cast<double>(mdod::uniform_int(rng, 1, 8))};
    };
    const Box a = ib(), b = ib();
    EXPECT_NEAR(mdod::iou(a, b), oracle::raster_iou(a, b, 0.25), 1e-12);
  }
}

TEST(Iou, DegenerateBoxesGiveZero) {
  EXPECT_EQ(mdod::iou({1, 1, 1, 1}, {1, 1, 1, 1}), 0.0);
  EXPECT_EQ(mdod::iou({0, 0, 0, 5}, {0, 0, 4, 5}), 0.0);
}

TEST(Iou, SymmetricAndSelfOne) {
  mdod::Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Box a = oracle::random_box(rng, 50, 0.5, 20), b = oracle::random_box(rng, 50, 0.5, 20);
    const double v = mdod::iou(a, b);
    EXPECT_EQ(v, mdod::iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(mdod::iou(a, a), 1.0, 1e-15);
  }
}

TEST(Transform, XywhToLtrb) {
  EXPECT_EQ(mdod::xywh_to_ltrb(5, 5, 0, 0), (std::array<double, 4>{5, 5, 5, 5}));
  EXPECT_EQ(mdod::xywh_to_ltrb(5, 5, 4, 2), (std::array<double, 4>{3, 4, 7, 6}));
}

TEST(Transform, LtrbToXywh) {
  EXPECT_EQ(mdod::ltrb_to_xywh(3, 4, 7, 6), (std::array<double, 4>{5, 5, 4, 2}));
  EXPECT_EQ(mdod::ltrb_to_xywh(0, 0, 0, 0), (std::array<double, 4>{0, 0, 0, 0}));
  const auto x = mdod::ltrb_to_xywh(Box{3, 4, 7, 6});
  EXPECT_EQ(x, (mdod::Xywh{5, 5, 4, 2}));
  EXPECT_EQ(mdod::xywh_to_ltrb(x), (Box{3, 4, 7, 6}));
}

TEST(Transform, RoundTripOnRandomInputs) {
  mdod::Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double cx = mdod::uniform(rng, -100, 100), cy = mdod::uniform(rng, -100, 100);
    const double w = mdod::uniform(rng, 0, 50), h = mdod::uniform(rng, 0, 50);
    const auto ltrb = mdod::xywh_to_ltrb(cx, cy, w, h);
    const auto back = mdod::ltrb_to_xywh(ltrb[0], ltrb[1], ltrb[2], ltrb[3]);
    const std::array<double, 4> in{cx, cy, w, h};
    for (int c = 0; c < 4; ++c) EXPECT_LE(std::abs(back[c] - in[c]), 1e-12 * std::max(1.0, std::abs(in[c])));
  }
}

namespace {
Box scored(Box b, int cls, double score) {
  b.class_id = cls;
  b.score = score;
  return b;
}
}  // namespace

TEST(Nms, IdenticalBoxesKeepHigherScore) {
  const std::vector<Box> dets{scored({0, 0, 10, 10}, 0, 0.8), scored({0, 0, 10, 10}, 0, 0.9)};
  const auto out = mdod::nms(dets, 0.5);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(*out[0].score, 0.9);
}

TEST(Nms, DisjointBoxesBothSurvive) {
  const std::vector<Box> dets{scored({0, 0, 1, 1}, 0, 0.5), scored({5, 5, 6, 6}, 0, 0.7)};
  for (double thr : {0.0, 0.3, 0.9}) EXPECT_EQ(mdod::nms(dets, thr).size(), 2u);
}

TEST(Nms, DifferentClassesNeverSuppress) {
  const std::vector<Box> dets{scored({0, 0, 10, 10}, 0, 0.9), scored({0, 0, 10, 10}, 1, 0.8)};
  EXPECT_EQ(mdod::nms(dets, 0.5).size(), 2u);
}

TEST(Nms, EqualScoresLowerIndexWins) {
  const std::vector<Box> dets{scored({0, 0, 10, 10}, 0, 0.5), scored({0, 0, 10, 9}, 0, 0.5)};
  const auto out = mdod::nms(dets, 0.5);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].b, 10.0);
}

TEST(Nms, EmptyInput) { EXPECT_TRUE(mdod::nms({}, 0.5).empty()); }

TEST(Nms, MatchesBruteForceOnRandomSets) {
  mdod::Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Box> dets;
    for (int i = 0; i < 50; ++i) {
      // Coarse scores so ties occur.
      dets.push_back(scored(oracle::random_box(rng, 40, 2, 15), static_cast<int>(mdod::uniform_int(rng, 0, 2)),
                            static_cast<double>(mdod::uniform_int(rng, 1, 20)) / 20));
    }
    const double thr = mdod::uniform(rng, 0.1, 0.9);
    const auto got = mdod::nms(dets, thr);
    EXPECT_EQ(got, oracle::brute_nms(dets, thr));
    for (std::size_t i = 1; i < got.size(); ++i) EXPECT_GE(*got[i - 1].score, *got[i].score);
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_NE(std::find(dets.begin(), dets.end(), got[i]), dets.end());
      for (std::size_t j = i + 1; j < got.size(); ++j) {
        if (got[i].class_id == got[j].class_id) {
          EXPECT_LE(mdod::iou(got[i], got[j]), thr);
        }
      }
    }
  }
}
