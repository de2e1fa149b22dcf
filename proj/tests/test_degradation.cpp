#include "test_support.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "amir/corpus.hpp"
#include "amir/degradation.hpp"
#include "amir/errors.hpp"

using namespace amir;

namespace {

torch::Tensor cosine_image(int64_t n, int k) {
  auto r = torch::arange(n, torch::kFloat64).unsqueeze(1).expand({n, n});
  return (0.5 + 0.3 * torch::cos(2.0 * std::numbers::pi * k * r / static_cast<double>(n))).to(torch::kFloat32);
}

double mse(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
}

double chi_square(const std::vector<int64_t>& counts) {
  double total = 0;
  for (auto c : counts) total += static_cast<double>(c);
  const double expect = total / static_cast<double>(counts.size());
  double chi = 0;
  for (auto c : counts) chi += (static_cast<double>(c) - expect) * (static_cast<double>(c) - expect) / expect;
  return chi;
}

}  // namespace

TEST_SUITE("degradation") {
  TEST_CASE("k-space crop keeps 6.25% of coefficients at factor 4") {
    auto mask = kspace_retention_mask(256, 256, 4);
    CHECK(mask.sum().item<int64_t>() == 4096);
    CHECK(static_cast<double>(mask.sum().item<int64_t>()) / (256.0 * 256.0) == 0.0625);
    CHECK(kspace_retention_mask(100, 60, 3).sum().item<int64_t>() == 33 * 20);
    CHECK(mask[128][128].item<bool>());
  }

  TEST_CASE("k-space crop is the identity on constant images") {
    auto img = torch::full({64, 48}, 0.37f);
    CHECK((degrade_kspace(img, 4) - img).abs().max().item<float>() < 1e-6f);
  }

  TEST_CASE("in-band cosine passes, out-of-band cosine collapses to the mean") {
    auto in = cosine_image(64, 5);
    CHECK((degrade_kspace(in, 4) - in).abs().max().item<float>() < 1e-5f);
    auto out = cosine_image(64, 12);
    CHECK((degrade_kspace(out, 4) - 0.5f).abs().max().item<float>() < 1e-5f);
  }

  TEST_CASE("k-space preconditions") {
    auto img = torch::rand({32, 32});
    auto kind = [&](auto&& fn) {
      try {
        fn();
      } catch (const Error& e) {
        return e.kind();
      }
      return ErrorKind::Invariant;
    };
    CHECK(kind([&] { degrade_kspace(img, 17); }) == ErrorKind::Parameter);
    CHECK(kind([&] { degrade_kspace(img, 1); }) == ErrorKind::Parameter);
    CHECK(kind([&] { degrade_kspace(torch::rand({33, 32}), 4); }) == ErrorKind::Shape);
    CHECK_NOTHROW(degrade_kspace(img, 16));
  }

  TEST_CASE("noise with sigma 0 and no Poisson term is the identity") {
    auto img = torch::rand({32, 32});
    CHECK(torch::equal(degrade_noise(img, 0.0, std::nullopt, 3), img));
  }

  TEST_CASE("Gaussian noise variance matches sigma^2 within 10%") {
    auto img = torch::full({256, 256}, 0.5f);
    auto lq = degrade_noise(img, 0.1, std::nullopt, 42).to(torch::kFloat64);
    const double var = lq.var(false).item<double>();
    CHECK(std::abs(var - 0.01) / 0.01 < 0.10);
  }

  TEST_CASE("noise is bit-identical for the same seed and differs otherwise") {
    auto img = torch::rand({48, 48});
    CHECK(torch::equal(degrade_noise(img, 0.04, 400.0, 9), degrade_noise(img, 0.04, 400.0, 9)));
    CHECK_FALSE(torch::equal(degrade_noise(img, 0.04, 400.0, 9), degrade_noise(img, 0.04, 400.0, 10)));
    CHECK(torch::equal(degrade_count_thinning(img, 12, 5), degrade_count_thinning(img, 12, 5)));
  }

  TEST_CASE("noise output stays in [0, 1]") {
    auto img = torch::rand({64, 64});
    auto lq = degrade_noise(img, 0.3, 50.0, 1);
    CHECK(lq.min().item<float>() >= 0.0f);
    CHECK(lq.max().item<float>() <= 1.0f);
  }

  TEST_CASE("count thinning is unbiased within 2%") {
    auto img = torch::full({256, 256}, 0.3f);
    const double mean = degrade_count_thinning(img, 12, 77).to(torch::kFloat64).mean().item<double>();
    CHECK(std::abs(mean - 0.3) / 0.3 < 0.02);
    auto ramp = torch::linspace(0.05, 0.5, 256).unsqueeze(0).expand({256, 256}).contiguous();
    const double m2 = degrade_count_thinning(ramp, 12, 78).to(torch::kFloat64).mean().item<double>();
    const double ref = ramp.to(torch::kFloat64).mean().item<double>();
    CHECK(std::abs(m2 - ref) / ref < 0.02);
  }

  TEST_CASE("thinning a zero image gives zero") {
    auto z = torch::zeros({32, 32});
    CHECK(torch::equal(degrade_count_thinning(z, 12, 1), z));
  }

  TEST_CASE("thinning noise grows with the dose reduction factor") {
    auto img = torch::full({128, 128}, 0.2f);
    const double v12 = degrade_count_thinning(img, 12, 3).var(false).item<double>();
    const double v2 = degrade_count_thinning(img, 2, 3).var(false).item<double>();
    CHECK(v12 > v2);
    CHECK_THROWS_AS(degrade_count_thinning(img, 1, 3), Error);
  }

  TEST_CASE("degradation error grows with severity") {
    auto hq = make_phantom(PhantomKind::Mri, 64, 5);
    double prev = 0.0;
    for (int f : {2, 4, 8}) {
      const double e = mse(degrade_kspace(hq, f), hq);
      CHECK(e > prev);
      prev = e;
    }
    prev = 0.0;
    for (double s : {0.01, 0.05, 0.1}) {
      const double e = mse(degrade_noise(hq, s, std::nullopt, 4), hq);
      CHECK(e > prev);
      prev = e;
    }
    prev = 0.0;
    for (int d : {2, 4, 12}) {
      const double e = mse(degrade_count_thinning(hq, d, 4), hq);
      CHECK(e > prev);
      prev = e;
    }
  }

  TEST_CASE("patch of full size returns the whole image") {
    TaskSample s{kDenoising, torch::rand({40, 40}), torch::rand({40, 40}), "x"};
    std::mt19937_64 rng(1);
    auto p = sample_patch(s, 40, rng);
    CHECK(torch::equal(p.lq, s.lq));
    CHECK(torch::equal(p.hq, s.hq));
    CHECK_THROWS_AS(sample_patch(s, 41, rng), Error);
  }

  TEST_CASE("patch offsets are uniform and lq/hq stay co-registered") {
    auto index = torch::arange(256 * 256, torch::kFloat32).reshape({256, 256});
    TaskSample s{kSuperResolution, index + 1.0, index, "grid"};
    std::mt19937_64 rng(2024);
    std::vector<int64_t> rows(129, 0), cols(129, 0);
    for (int i = 0; i < 129 * 400; ++i) {
      auto p = sample_patch(s, 128, rng);
      const auto v = static_cast<int64_t>(p.hq[0][0].item<float>());
      CHECK_MESSAGE(p.lq[0][0].item<float>() == static_cast<float>(v + 1), "misaligned crop");
      ++rows[static_cast<std::size_t>(v / 256)];
      ++cols[static_cast<std::size_t>(v % 256)];
    }
    // 128 degrees of freedom: the 0.1% critical value is about 186.7
    CHECK(chi_square(rows) < 186.7);
    CHECK(chi_square(cols) < 186.7);
  }

  TEST_CASE("task registry") {
    auto reg = TaskRegistry::with_defaults({});
    CHECK(reg.size() == 3);
    CHECK(reg.id("sr") == kSuperResolution);
    CHECK(reg.id("denoise") == kDenoising);
    CHECK(reg.id("synth") == kSynthesis);
    CHECK_THROWS_AS(reg.id("deblur"), Error);
    const auto extra = reg.add("invert", [](const torch::Tensor& hq, std::uint64_t) { return 1.0 - hq; });
    CHECK(extra.value == 3);
    CHECK(torch::equal(reg.degrade(extra, torch::zeros({2, 2}), 0), torch::ones({2, 2})));
    CHECK_THROWS_AS(reg.add("sr", {}), Error);
  }
}
