#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "pond/errors.hpp"
#include "pond/eval.hpp"
#include "tiny.hpp"

using namespace pond;
using namespace pond::testing;
using ng::Tensor;
using V = std::vector<std::size_t>;

TEST_CASE("accuracy") {
  CHECK(accuracy(V{0, 1, 2}, V{0, 1, 2}) == 1.0);
  CHECK(accuracy(V{1, 2, 0}, V{0, 1, 2}) == 0.0);
  CHECK(accuracy(V{0, 1, 1, 1}, V{0, 1, 1, 0}) == 0.75);
  CHECK_THROWS_AS(accuracy(V{0, 1}, V{0}), InvalidArgument);
  CHECK_THROWS_AS(accuracy(V{}, V{}), InvalidArgument);
}

TEST_CASE("macro F1") {
  CHECK(macro_f1(V{0, 1, 2, 1}, V{0, 1, 2, 1}, 3) == 1.0);
  CHECK(macro_f1(V{0, 1, 1, 1}, V{0, 0, 1, 1}, 2) == doctest::Approx(11.0 / 15.0).epsilon(1e-15));
  // Class 2 never occurs and scores 0.
  CHECK(macro_f1(V{0, 1}, V{0, 1}, 3) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(macro_f1(V{0, 1}, V{0}, 2), InvalidArgument);
  CHECK_THROWS_AS(macro_f1(V{0, 3}, V{0, 1}, 2), InvalidArgument);

  const auto r = evaluate(V{0, 1, 1, 1}, V{0, 0, 1, 1}, 2, "hand", 5);
  CHECK(r.per_class[0].precision == 1.0);
  CHECK(r.per_class[0].recall == 0.5);
  CHECK(r.per_class[0].f1 == doctest::Approx(2.0 / 3.0));
  CHECK(r.per_class[1].precision == doctest::Approx(2.0 / 3.0));
  CHECK(r.per_class[1].recall == 1.0);
  CHECK(r.per_class[1].f1 == doctest::Approx(0.8));
  CHECK(r.confusion == std::vector<V>{{1, 1}, {0, 2}});
  const Json j = r.to_json();
  for (const char* key : {"scenario", "seed", "accuracy", "macro_f1", "per_class", "confusion", "losses"})
    CHECK(j.contains(key));
  CHECK(j.at("scenario") == "hand");
  CHECK(j.at("seed") == 5);
}

TEST_CASE("metrics agree with a direct recount") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t K = 2 + rng.index(5);
    const std::size_t n = 1 + rng.index(40);
    V pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) pred[i] = rng.index(K), truth[i] = rng.index(K);

    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += pred[i] == truth[i];
    double f1_sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (pred[i] == k && truth[i] == k) ++tp;
        if (pred[i] == k && truth[i] != k) ++fp;
        if (pred[i] != k && truth[i] == k) ++fn;
      }
      const double denom = double(2 * tp + fp + fn);
      f1_sum += denom > 0 ? 2.0 * double(tp) / denom : 0.0;
    }
    CHECK(accuracy(pred, truth) == double(hits) / double(n));
    CHECK(macro_f1(pred, truth, K) == doctest::Approx(f1_sum / double(K)).epsilon(1e-15));

    const auto r = evaluate(pred, truth, K);
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t row = 0;
      for (auto c : r.confusion[k]) row += c;
      CHECK(row == std::size_t(std::count(truth.begin(), truth.end(), k)));
      CHECK(r.per_class[k].f1 >= 0.0);
      CHECK(r.per_class[k].f1 <= 1.0);
    }
    CHECK(r.macro_f1 >= 0.0);
    CHECK(r.macro_f1 <= 1.0);
  }
}

TEST_CASE("summaries and rank correlation") {
  const auto s = summarize(std::vector<double>{1, 2, 3});
  CHECK(s.mean == 2.0);
  CHECK(s.std == doctest::Approx(std::sqrt(2.0 / 3.0)));
  CHECK_THROWS_AS(summarize(std::vector<double>{}), InvalidArgument);

  using D = std::vector<double>;
  CHECK(spearman(D{2, 4, 6, 8}, D{0.1, 0.2, 0.5, 0.9}) == doctest::Approx(1.0));
  CHECK(spearman(D{2, 4, 6, 8}, D{0.9, 0.5, 0.2, 0.1}) == doctest::Approx(-1.0));
  CHECK(spearman(D{1, 2, 3, 4}, D{1, 3, 2, 4}) == doctest::Approx(0.8));
  // Ties take average ranks: y ranks are 1, 2.5, 2.5, 4.
  CHECK(spearman(D{1, 2, 3, 4}, D{1, 2, 2, 3}) == doctest::Approx(4.5 / std::sqrt(5.0 * 4.5)));
  CHECK(spearman(D{1, 2, 3}, D{5, 5, 5}) == 0.0);
  CHECK_THROWS_AS(spearman(D{1}, D{1}), InvalidArgument);
}

TEST_CASE("ablation rows") {
  const auto rows = ablation_rows();
  REQUIRE(rows.size() == 6);
  std::set<std::string> labels;
  for (const auto& r : rows) {
    CHECK((r.use_common_prompt || r.use_generator));
    labels.insert(ablation_label(r));
  }
  CHECK(labels.size() == 6);
  CHECK(rows.back() == AblationFlags{});
  CHECK(ablation_label(rows.back()) == "moe+common+generator");
}

TEST_CASE("ablation grid and source sweep") {
  const RunConfig run = tiny_run(0);
  const auto scenarios = synthetic_scenarios(tiny_spec(0));
  const std::vector<std::uint64_t> seeds{3};

  SUBCASE("grid") {
    const auto table = ablation_grid(run, scenarios, seeds);
    REQUIRE(table.rows.size() == 6);
    const auto sc = scenarios(3);
    RunConfig c = run;
    c.seed = 3;
    const auto direct = evaluate(run_pipeline(sc.sources, sc.target, c), 2, "ablation:moe+common+generator", 3);
    CHECK(table.rows.back().runs.at(0).to_json() == direct.to_json());
    CHECK(ablation_grid(run, scenarios, seeds).to_json() == table.to_json());
    CHECK(table.to_csv().rfind("use_moe,use_common_prompt,use_generator,", 0) == 0);

    c.flags.use_moe = false;
    CHECK(run_pipeline(sc.sources, sc.target, c).state.model.experts.size() == 1);
    CHECK_THROWS_AS(ablation_grid(run, scenarios, std::vector<std::uint64_t>{}), InvalidArgument);
  }

  SUBCASE("sweep") {
    const std::vector<std::size_t> one{2};
    const auto t = source_count_sweep(run, scenarios, one, seeds);
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0].sources == 2);
    CHECK(t.spearman == 0.0);
    const std::vector<std::size_t> two{2, 4};
    const auto a = source_count_sweep(run, scenarios, two, seeds);
    CHECK(a.to_json() == source_count_sweep(run, scenarios, two, seeds).to_json());
    CHECK(a.rows.size() == 2);
    CHECK_THROWS_AS(source_count_sweep(run, scenarios, std::vector<std::size_t>{4, 2}, seeds), InvalidArgument);
    CHECK_THROWS_AS(source_count_sweep(run, scenarios, std::vector<std::size_t>{2, 5}, seeds), InvalidArgument);
  }
}

TEST_CASE("discrimination heatmap") {
  TrainedState s;
  s.source_ids = {"a", "b", "c"};

  SUBCASE("equal prompts give ones") {
    s.domain_prompts.assign(3, Tensor({1, 2}, {0.3, -0.4}));
    const auto h = discrimination_heatmap(s);
    CHECK_FALSE(h.fallback);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        if (a == b)
          CHECK(std::isnan(h.values[a][b]));
        else
          CHECK(h.values[a][b] == 1.0);
      }
  }

  SUBCASE("symmetric, positive and round-trips through CSV") {
    s.source_ids.push_back("d");
    Rng rng(4);
    for (int i = 0; i < 4; ++i) s.domain_prompts.push_back(Tensor({2, 2}, {rng.normal(), rng.normal(), rng.normal(), rng.normal()}));
    const auto h = discrimination_heatmap(s);
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b)
        if (a != b) {
          CHECK(h.values[a][b] == h.values[b][a]);
          CHECK(h.values[a][b] > 0.0);
        }
    const auto csv = h.to_csv();
    CHECK(csv.rfind(",a,b,c,d\n", 0) == 0);
    const auto back = Heatmap::from_csv(csv);
    CHECK(back.domain_ids == h.domain_ids);
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b)
        if (a != b) CHECK(std::abs(back.values[a][b] - h.values[a][b]) <= 1e-12);

    const auto dir = std::filesystem::temp_directory_path() / "pond_test_eval";
    std::filesystem::create_directories(dir);
    h.write(dir / "heat.csv");
    CHECK(std::filesystem::exists(dir / "heat.csv.json"));
    std::ifstream in(dir / "heat.csv.json");
    const Json side = Json::parse(in);
    CHECK(side.at("domain_ids") == Json(h.domain_ids));
    CHECK(side.at("fallback") == false);
    std::filesystem::remove_all(dir);
  }

  SUBCASE("two domains use the fallback") {
    s.source_ids = {"a", "b"};
    s.domain_prompts = {Tensor({1, 2}, {1.0, 2.0}), Tensor({1, 2}, {3.0, -1.0})};
    const auto h = discrimination_heatmap(s);
    CHECK(h.fallback);
    CHECK(h.values[0][1] == doctest::Approx(std::exp(1.0)));
    CHECK(h.sidecar().at("fallback") == true);
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(discrimination_heatmap(s), StateError);
    CHECK_THROWS_AS(Heatmap::from_csv(""), InvalidArgument);
    CHECK_THROWS_AS(Heatmap::from_csv(",a,b\na,,x\nb,1,\n"), InvalidArgument);
    CHECK_THROWS_AS(Heatmap::from_csv(",a,b\na,,1\n"), InvalidArgument);
  }
}
