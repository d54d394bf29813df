#include <gtest/gtest.h>

#include "harness.hpp"
#include "temp_dir.hpp"

namespace grain {
namespace {

using harness::LossTerm;

class GradCheck : public ::testing::TestWithParam<LossTerm> {};

TEST_P(GradCheck, MatchesCentralDifferences) {
  testing::TempDir dir;
  auto setup = harness::grad_check_setup(dir.path(), 11);
  const auto r = harness::grad_check(setup, GetParam(), 20, 5);
  EXPECT_EQ(r.coords, 20);
  EXPECT_LT(r.max_rel_err, 1e-4) << harness::term_name(GetParam()) << " worst at " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Terms, GradCheck,
                         ::testing::Values(LossTerm::kImageCaption, LossTerm::kBox, LossTerm::kRegionDescription),
                         [](const auto& info) { return std::string(harness::term_name(info.param)); });

TEST(GradCheckSetup, RegionDescriptionTermIsActive) {
  testing::TempDir dir;
  auto setup = harness::grad_check_setup(dir.path(), 11);
  ad::NoGradGuard guard;
  const auto l = compute_batch_losses(*setup.model, setup.batch, setup.tokenizer.end_id(),
                                      LossOptions::from(TrainConfig{}), &setup.assignments);
  EXPECT_EQ(setup.batch.samples.size(), 4u);
  EXPECT_GT(l.l_rd.item(), 0.0);
  EXPECT_GT(l.l_box.item(), 0.0);
}

}  // namespace
}  // namespace grain
