#include <cmath>
#include <set>

#include "doctest.h"
#include "eva/token_embed.hpp"

using namespace eva;

TEST_SUITE("token_embed") {
  TEST_CASE("token layout is polarity, row, column") {
    CHECK(embed::tok(3, 2, 1, 16, 16) == 291);
    CHECK(embed::tok(0, 0, 0, 16, 16) == 0);
    CHECK(embed::tok(15, 15, 1, 16, 16) == 511);
    CHECK(embed::untok(291, 16, 16) == embed::Coordinates{3, 2, 1});
  }

  TEST_CASE("tokens are a bijection onto the vocabulary") {
    std::set<int> seen;
    for (int p = 0; p < 2; ++p)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          const int t = embed::tok(x, y, p, 16, 16);
          CHECK((t >= 0 && t < 512));
          CHECK(embed::untok(t, 16, 16) == embed::Coordinates{x, y, p});
          seen.insert(t);
        }
    CHECK(seen.size() == 512);
  }

  TEST_CASE("out-of-range coordinates are rejected") {
    CHECK_THROWS_AS(embed::tok(16, 0, 0, 16, 16), Error);
    CHECK_THROWS_AS(embed::tok(0, -1, 0, 16, 16), Error);
    CHECK_THROWS_AS(embed::tok(0, 0, 2, 16, 16), Error);
    CHECK_THROWS_AS(embed::untok(512, 16, 16), Error);
  }

  TEST_CASE("temporal encoding alternates sine and cosine") {
    const int d = 8;
    const double dt = 1234.0;
    const auto v = embed::embed_temporal<double>(dt, d);
    for (int k = 0; k < d; ++k) {
      const double angle = dt / std::pow(10000.0, 2.0 * k / d);
      CHECK(v[k] == doctest::Approx(k % 2 == 0 ? std::sin(angle) : std::cos(angle)).epsilon(1e-14));
    }
    const auto zero = embed::embed_temporal<double>(0.0, d);
    for (int k = 0; k < d; ++k) CHECK(zero[k] == (k % 2 == 0 ? 0.0 : 1.0));
  }

  TEST_CASE("sequence embedding uses patch-local intervals") {
    embed::EmbeddingTable<double> table;
    table.vocab = {4, 4};
    table.weights = Matrix<double>::Zero(32, 6);
    for (int i = 0; i < 32; ++i) table.weights(i, 0) = i;
    const std::vector<io::Event> ev{{100, 1, 0, 0}, {130, 2, 1, 1}, {130, 0, 0, 0}};
    const auto first = embed::embed_sequence<double>(ev, false, 0, table);
    const auto cont = embed::embed_sequence<double>(ev, true, 40, table);
    CHECK(first(0, 0) == doctest::Approx(1.0));
    CHECK(first(0, 1) == doctest::Approx(1.0));
    CHECK(first(1, 0) == doctest::Approx(22.0 + std::sin(30.0)));
    CHECK(cont(0, 0) == doctest::Approx(1.0 + std::sin(60.0)));
    CHECK(first.row(2) == embed::embed_event<double>(ev[2], 130, table));
  }
}
