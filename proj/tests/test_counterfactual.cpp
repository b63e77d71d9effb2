#include <cmath>
#include <random>

#include "doctest.h"
#include "fcca/counterfactual.hpp"
#include "fcca/data.hpp"
#include "oracles.hpp"

using namespace fcca;

namespace {

Ensemble one_stump() {
  Ensemble e;
  e.kind = EnsembleKind::GradientBoosting;
  e.n_features = 1;
  e.learning_rate = 1.0;
  e.trees.push_back(oracle::stump(0, 0.5, -2.0, 2.0));
  return e;
}

CEProblem stump_problem(double x0, int y0) {
  CEProblem p;
  p.x0 = {x0};
  p.y0 = y0;
  p.y_ce = 1 - y0;
  p.eps = {0.01};
  p.weights = {0.1, 1.0, 0.0};
  return p;
}

bool valid(const Ensemble& e, const CEProblem& p, const CESolution& s) {
  return predict(e, s.x_ce).label == p.y_ce && class_margin(e, s.x_ce, p.y0, p.y_ce) >= p.margin;
}

}  // namespace

TEST_SUITE("counterfactual") {
  TEST_CASE("candidate grid of a single stump") {
    const auto g = build_candidates(one_stump(), stump_problem(0.3, 0));
    REQUIRE(g.features.size() == 1);
    CHECK(g.features[0].values == std::vector<double>{0.3, 0.49, 0.51});
    CHECK(g.features[0].costs[g.features[0].origin] == 0.0);
  }

  TEST_CASE("immutable feature keeps only x0") {
    auto p = stump_problem(0.3, 0);
    p.immutable = {true};
    CHECK(build_candidates(one_stump(), p).features[0].values == std::vector<double>{0.3});
  }

  TEST_CASE("candidates outside the box are dropped") {
    Ensemble e;
    e.n_features = 1;
    e.trees.push_back(oracle::stump(0, 0.995, -1.0, 1.0));
    CEProblem p;
    p.x0 = {0.2};
    p.eps = {0.01};
    p.y0 = 0;
    p.y_ce = 1;
    const auto v = build_candidates(e, p).features[0].values;
    CHECK(v.size() == 2);
    CHECK(v[0] == 0.2);
    CHECK(v[1] == doctest::Approx(0.985).epsilon(1e-15));
  }

  TEST_CASE("stump counterfactual in both directions") {
    const auto e = one_stump();
    const auto up = solve_ensemble_ce(e, stump_problem(0.3, 0));
    REQUIRE(up.status == CEStatus::Optimal);
    CHECK(up.x_ce[0] == doctest::Approx(0.51).epsilon(1e-15));
    CHECK(up.cost == doctest::Approx(0.31).epsilon(1e-12));
    CHECK(up.changed == std::vector<std::size_t>{0});
    const auto down = solve_ensemble_ce(e, stump_problem(0.7, 1));
    REQUIRE(down.status == CEStatus::Optimal);
    CHECK(down.x_ce[0] == doctest::Approx(0.49).epsilon(1e-15));
    CHECK(down.cost == doctest::Approx(0.31).epsilon(1e-12));
    const auto orc = brute_force_oracle(e, stump_problem(0.3, 0));
    CHECK(orc.cost == doctest::Approx(0.31).epsilon(1e-12));
    CHECK(*oracle::ensemble_ce_cost(e, stump_problem(0.3, 0)) == doctest::Approx(0.31).epsilon(1e-12));
  }

  TEST_CASE("unreachable margin is infeasible for solver and oracle") {
    Ensemble e;
    e.n_features = 1;
    e.learning_rate = 1.0;
    e.trees.push_back(oracle::stump(0, 0.5, -2.0, -1.0));
    const auto p = stump_problem(0.3, 0);
    CHECK(solve_ensemble_ce(e, p).status == CEStatus::Infeasible);
    CHECK(brute_force_oracle(e, p).status == CEStatus::Infeasible);
    CHECK_FALSE(oracle::ensemble_ce_cost(e, p).has_value());
  }

  TEST_CASE("malformed queries are rejected") {
    auto p = stump_problem(0.3, 0);
    p.y_ce = 0;
    CHECK_THROWS(solve_ensemble_ce(one_stump(), p));
    p = stump_problem(0.3, 1);  // model says 0
    CHECK_THROWS(solve_ensemble_ce(one_stump(), p));
    p = stump_problem(0.3, 0);
    p.weights.l1 = -1.0;
    CHECK_THROWS(solve_ensemble_ce(one_stump(), p));
  }

  TEST_CASE("random stump ensembles match both oracles") {
    std::mt19937_64 rng(2024);
    for (int k = 0; k < 150; ++k) {
      const std::size_t m = 1 + rng() % 3;
      const auto e = oracle::random_stumps(rng, m, 1 + static_cast<int>(rng() % 10));
      const auto p = oracle::random_problem(rng, e);
      const auto s = solve_ensemble_ce(e, p);
      const auto lib = brute_force_oracle(e, p);
      const auto ref = oracle::ensemble_ce_cost(e, p);
      CHECK(s.status == lib.status);
      CHECK((s.status == CEStatus::Optimal) == ref.has_value());
      if (s.status != CEStatus::Optimal || !ref) continue;
      CHECK(std::abs(s.cost - *ref) <= 1e-9);
      CHECK(s.x_ce == lib.x_ce);  // same tie-breaking
      CHECK(valid(e, p, s));
    }
  }

  TEST_CASE("random depth-2 forests match both oracles") {
    std::mt19937_64 rng(77);
    for (int k = 0; k < 150; ++k) {
      const std::size_t m = 1 + rng() % 3;
      const auto e = oracle::random_forest(rng, m, 1 + static_cast<int>(rng() % 3));
      const auto p = oracle::random_problem(rng, e);
      const auto s = solve_ensemble_ce(e, p);
      const auto lib = brute_force_oracle(e, p);
      const auto ref = oracle::ensemble_ce_cost(e, p);
      CHECK(s.status == lib.status);
      CHECK((s.status == CEStatus::Optimal) == ref.has_value());
      if (s.status != CEStatus::Optimal || !ref) continue;
      CHECK(std::abs(s.cost - *ref) <= 1e-9);
      CHECK(s.x_ce == lib.x_ce);
      CHECK(valid(e, p, s));
    }
  }

  TEST_CASE("solution properties: validity, immutability, changed set, not x0") {
    std::mt19937_64 rng(5);
    for (int k = 0; k < 200; ++k) {
      const auto e = k % 2 ? oracle::random_stumps(rng, 3, 8) : oracle::random_forest(rng, 3, 3);
      const auto p = oracle::random_problem(rng, e);
      const auto s = solve_ensemble_ce(e, p);
      if (s.status != CEStatus::Optimal) continue;
      CHECK(valid(e, p, s));
      CHECK(s.x_ce != p.x0);
      for (std::size_t j = 0; j < p.dim(); ++j) {
        if (p.is_immutable(j)) CHECK(s.x_ce[j] == p.x0[j]);
        CHECK(s.x_ce[j] >= p.lo(j));
        CHECK(s.x_ce[j] <= p.hi(j));
        const bool changed = std::abs(s.x_ce[j] - p.x0[j]) > p.eps[j];
        CHECK(changed == std::binary_search(s.changed.begin(), s.changed.end(), j));
      }
      CHECK(s.cost == doctest::Approx(oracle::cost(p, s.x_ce)).epsilon(1e-12));
    }
  }

  TEST_CASE("raising lambda0 never increases the number of moved features") {
    std::mt19937_64 rng(13);
    for (int k = 0; k < 60; ++k) {
      const auto e = oracle::random_stumps(rng, 3, 10);
      auto p = oracle::random_problem(rng, e);
      p.lower.clear();
      p.upper.clear();
      p.immutable.clear();
      p.weights = {0.0, 1.0, 0.0};
      std::size_t prev = 1000;
      for (const double l0 : {0.0, 0.05, 0.2, 1.0, 5.0}) {
        p.weights.l0 = l0;
        const auto s = solve_ensemble_ce(e, p);
        if (s.status != CEStatus::Optimal) break;
        std::size_t moved = 0;
        for (std::size_t j = 0; j < p.dim(); ++j) moved += s.x_ce[j] != p.x0[j] ? 1 : 0;
        CHECK(moved <= prev);
        prev = moved;
      }
    }
  }

  TEST_CASE("solutions are deterministic and batch order-independent") {
    const auto ds = scale_minmax(make_synthetic(SyntheticKind::Boxes, 300, 4));
    TargetParams tp;
    tp.gb.n_estimators = 40;
    const auto model = fit_target(ds, tp);
    const auto eps = compute_feature_eps(ds);
    std::vector<CEProblem> probs;
    for (std::size_t i = 0; i < 60; ++i) probs.push_back(make_problem(model, ds.row(i), eps, {}));
    const auto a = solve_batch(model, probs, 1);
    const auto b = solve_batch(model, probs, 4);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].x_ce == b[i].x_ce);
      CHECK(a[i].cost == b[i].cost);
    }
  }

  TEST_CASE("linear counterfactual examples") {
    LinearModel w{{2.0, 0.0}, -1.0};
    CEProblem p;
    p.x0 = {0.1, 0.9};
    p.eps = {0.01, 0.01};
    p.y0 = 0;
    p.y_ce = 1;
    const auto s = solve_linear_ce(w, p);
    REQUIRE(s.status == CEStatus::Optimal);
    CHECK(s.x_ce[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.x_ce[1] == 0.9);
    CHECK(s.cost == doctest::Approx(1.0).epsilon(1e-12));

    LinearModel w2{{2.0, 0.0}, 0.0};
    CEProblem q = p;
    q.y0 = 1;
    q.y_ce = 0;
    CHECK(solve_linear_ce(w2, q).status == CEStatus::Infeasible);

    CEProblem r = p;
    r.immutable = {true, false};
    CHECK(solve_linear_ce(w, r).status == CEStatus::Infeasible);
  }

  TEST_CASE("linear solver with quadratic cost matches a dense search") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::uniform_real_distribution<double> v(0.0, 1.0);
    int compared = 0;
    for (int k = 0; k < 150; ++k) {
      LinearModel w{{u(rng), u(rng)}, u(rng) * 0.5};
      CEProblem p;
      p.x0 = {oracle::round2(v(rng)), oracle::round2(v(rng))};
      p.eps = {0.01, 0.01};
      p.weights = {0.1, 0.5, 1.0 + 2.0 * v(rng)};
      p.y0 = predict(w, p.x0).label;
      p.y_ce = 1 - p.y0;
      const auto s = solve_linear_ce(w, p);
      const auto ref = oracle::linear_ce_cost_2d(w, p, 1e-4);
      CHECK((s.status == CEStatus::Optimal) == ref.has_value());
      if (!ref || s.status != CEStatus::Optimal) continue;
      ++compared;
      CHECK(s.cost <= *ref + 1e-9);
      CHECK(s.cost >= *ref - 2e-3);
      CHECK(class_margin(w, s.x_ce, p.y_ce) >= 1.0 - 1e-9);
    }
    CHECK(compared > 20);
  }

  TEST_CASE("linear solver matches the grid oracle with l1 cost") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::uniform_real_distribution<double> v(0.0, 1.0);
    for (int k = 0; k < 30; ++k) {
      LinearModel w{{u(rng), u(rng)}, u(rng) * 0.5};
      CEProblem p;
      p.x0 = {v(rng), v(rng)};
      p.eps = {0.01, 0.01};
      p.y0 = predict(w, p.x0).label;
      p.y_ce = 1 - p.y0;
      const auto s = solve_linear_ce(w, p);
      const auto o = brute_force_oracle(w, p, 1e-3);
      CHECK(s.status == o.status);
      if (s.status != CEStatus::Optimal) continue;
      CHECK(s.cost <= o.cost + 2e-3);
      CHECK(s.cost >= o.cost - 1e-9);
    }
  }
}
