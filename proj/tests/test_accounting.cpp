#include "doctest.h"
#include "eva/accounting.hpp"
#include "eva/encoder.hpp"
#include "helpers.hpp"

using namespace eva;

TEST_SUITE("accounting") {
  TEST_CASE("closed-form counts equal the allocated tensors") {
    for (const auto& c : {EncoderConfig::dvs(), EncoderConfig::half_channel(), EncoderConfig::small(),
                          testing::tiny_config().encoder}) {
      CHECK(acct::count_params(c) == parameter_count(make_encoder<double>(c)));
      std::uint64_t mvhs = 0;
      const auto p = make_encoder<double>(c);
      mvhs::visit_mvhs([&](const std::string&, const Matrix<double>& m) { mvhs += m.size(); }, "mvhs", p.mvhs);
      CHECK(acct::count_output_layer_params(c) == mvhs);
    }
  }

  TEST_CASE("DVS profile counts") {
    const auto c = EncoderConfig::dvs();
    const double params = static_cast<double>(acct::count_params(c));
    const double macs = static_cast<double>(acct::count_macs_per_event(c));
    CHECK(params == 686464.0);
    CHECK(macs == 621568.0);
    CHECK(std::abs(params - 0.62e6) <= 0.20 * 0.62e6);
    CHECK(std::abs(macs - 0.60e6) <= 0.25 * 0.60e6);
  }

  TEST_CASE("vector-output variant has the same representation size") {
    const auto c = EncoderConfig::dvs();
    const auto v = acct::vector_output_variant(c);
    CHECK(v.mvhs_head_size == 1);
    CHECK(v.n_out * v.mvhs_head_size * v.mvhs_head_size == c.n_out * c.mvhs_head_size * c.mvhs_head_size);
    const double ratio = static_cast<double>(acct::count_output_layer_params(v)) /
                         static_cast<double>(acct::count_output_layer_params(c));
    CHECK(ratio > 1.0);
  }

  TEST_CASE("MACs grow with depth by one block") {
    auto c = EncoderConfig::dvs();
    const auto base = acct::count_macs_per_event(c);
    c.n_layer += 1;
    const auto deeper = acct::count_macs_per_event(c);
    const std::uint64_t d = 128, f = 256, r = 16, hs = 8;
    CHECK(deeper - base == 6 * (d * r + r * d) + 5 * d * d + 2 * d * hs + d * d + 2 * d * f);
  }
}
