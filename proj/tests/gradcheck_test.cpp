#include <gtest/gtest.h>

#include <cmath>

#include "nfres/gradcheck.hpp"
#include "nfres/gradcheck_suite.hpp"

using namespace nfres;

TEST(FiniteDifference, QuadraticIsExact) {
  Tensor<double> x(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
  Tensor<double> grad(Shape{3}, std::vector<double>{1.0, -2.0, 4.0});
  std::vector<Tensor<double>*> in{&x};
  auto r = finite_difference_check([&] {
    double s = 0;
    for (double v : x.data()) s += v * v;
    return s;
  }, in, {grad}, 1e-4);
  EXPECT_EQ(r.checked, 3u);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(FiniteDifference, WrongGradientIsCaught) {
  Tensor<double> x(Shape{1}, std::vector<double>{0.3});
  Tensor<double> grad(Shape{1}, std::vector<double>{std::cos(0.3) * 1.01});
  std::vector<Tensor<double>*> in{&x};
  auto r = finite_difference_check([&] { return std::sin(x[0]); }, in, {grad}, 1e-4);
  EXPECT_GT(r.max_rel_error, 1e-3);
}

TEST(FiniteDifference, KinkIsSkipped) {
  Tensor<double> x(Shape{1}, std::vector<double>{2e-5});
  Tensor<double> grad(Shape{1}, std::vector<double>{1.0});
  std::vector<Tensor<double>*> in{&x};
  auto r = finite_difference_check([&] { return std::max(0.0, x[0]); }, in, {grad}, 1e-4);
  EXPECT_EQ(r.kinks_skipped, 1u);
}

TEST(FiniteDifference, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
}

TEST(GradSuite, EveryCasePassesOnFiveInstances) {
  GradSuiteOptions opt;
  opt.instances = 5;
  opt.seed = 17;
  auto report = run_gradcheck_suite(opt);
  EXPECT_EQ(report.count("layer"), 10u);
  EXPECT_EQ(report.count("block"), 10u);
  for (const auto& c : report.cases) {
    EXPECT_TRUE(c.passed) << c.name << " max rel error " << c.max_rel_error;
    EXPECT_GT(c.checked, 0u) << c.name;
  }
}

TEST(GradSuite, InjectedConvFaultFails) {
  GradSuiteOptions opt;
  opt.instances = 3;
  opt.perturb_conv = true;
  auto report = run_gradcheck_suite(opt);
  EXPECT_FALSE(report.all_passed());
  for (const auto& c : report.cases) {
    const bool conv = c.name.rfind("conv2d", 0) == 0;
    if (conv) {
      EXPECT_FALSE(c.passed) << c.name;
    } else if (c.group == "layer") {
      EXPECT_TRUE(c.passed) << c.name;
    }
  }
}
