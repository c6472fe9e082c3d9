#include <algorithm>
#include <filesystem>

#include "doctest.h"
#include "pond/checkpoint.hpp"
#include "pond/errors.hpp"
#include "pond/grad_check.hpp"
#include "pond/model.hpp"

using namespace pond;
using ng::Tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.channels = 2;
  c.length = 16;
  c.prompt_len = 3;
  c.classes = 3;
  c.experts = 3;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.encoder_blocks = 1;
  c.router_hidden = 4;
  c.patch = {4, 2};
  return c;
}

Tensor random_batch(std::size_t B, const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({B, c.channels, c.total_len()});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("patch plans") {
  PatchConfig p{16, 8};
  CHECK(plan_patches(128, p).count == 15);
  CHECK(plan_patches(16, p).count == 1);
  auto plan = plan_patches(130, p);
  CHECK(plan.padded_len == 136);
  CHECK(plan.count == 16);
  CHECK_THROWS_AS(plan_patches(15, p), InvalidArgument);
  CHECK_THROWS_AS(plan_patches(20, PatchConfig{4, 5}), ConfigError);
}

TEST_CASE("patchify pads by repeating the last step") {
  // One channel, values 0..9, patch 4 stride 3: (10-4)%3 == 0, no padding.
  Tensor s({1, 10});
  for (std::size_t t = 0; t < 10; ++t) s[t] = double(t);
  auto p = patchify(s, {4, 3});
  CHECK(p.shape() == ng::Shape{3, 4});
  CHECK(p.at(2, 0) == 6.0);
  // Length 11 pads to 13 with copies of 10.
  Tensor s2({1, 11});
  for (std::size_t t = 0; t < 11; ++t) s2[t] = double(t);
  auto p2 = patchify(s2, {4, 3});
  CHECK(p2.shape() == ng::Shape{4, 4});
  CHECK(p2.at(3, 0) == 9.0);
  CHECK(p2.at(3, 1) == 10.0);
  CHECK(p2.at(3, 2) == 10.0);
  CHECK(p2.at(3, 3) == 10.0);

  // The graph construction agrees with the eager one, channel-major rows.
  Rng rng(2);
  Tensor x({2, 3, 19});
  for (auto& v : x.values()) v = rng.uniform();
  ng::Graph g;
  auto tokens = build_patch_tokens(g, {4, 2}, g.constant(x));
  const Tensor& out = g.forward(tokens);
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor one({3, 19}, std::vector<double>(x.data().begin() + b * 57, x.data().begin() + (b + 1) * 57));
    auto eager = patchify(one, {4, 2});
    for (std::size_t i = 0; i < eager.size(); ++i) CHECK(out[b * eager.size() + i] == eager[i]);
  }
}

TEST_CASE("expert forward") {
  const auto c = tiny_config();
  auto model = init_model(c, 0);
  auto x = random_batch(4, c, 1);

  SUBCASE("zero head gives a uniform distribution") {
    find_param(model.experts[0], "head.w").values()[0] = 0;
    for (auto& v : find_param(model.experts[0], "head.w").values()) v = 0;
    auto p = expert_forward(model, 0, x);
    for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("expert order does not affect an expert's output") {
    auto before = expert_forward(model, 2, x);
    std::swap(model.experts[0], model.experts[2]);
    CHECK(expert_forward(model, 0, x) == before);
  }
  SUBCASE("reproducible bit-exactly from seed 0") {
    auto again = init_model(c, 0);
    CHECK(expert_forward(model, 1, x) == expert_forward(again, 1, x));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(expert_forward(model, 0, Tensor({1, 2, 18})), ShapeError);
  }
}

TEST_CASE("mixture of experts") {
  const auto c = tiny_config();
  auto model = init_model(c, 3);
  auto x = random_batch(5, c, 4);

  SUBCASE("one expert is the mixture") {
    auto one = c;
    one.experts = 1;
    auto m1 = init_model(one, 5);
    CHECK(moe_forward(m1, x) == expert_forward(m1, 0, x));
  }
  SUBCASE("router fixed one-hot on expert 2") {
    auto out = moe_forward(model, x, std::vector<double>{0, 0, 1});
    auto e2 = expert_forward(model, 2, x);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(e2[i]).epsilon(1e-15));
  }
  SUBCASE("hand-set router weights give the convex combination") {
    auto out = moe_forward(model, x, std::vector<double>{0.2, 0.3, 0.5});
    auto e0 = expert_forward(model, 0, x), e1 = expert_forward(model, 1, x), e2 = expert_forward(model, 2, x);
    for (std::size_t i = 0; i < out.size(); ++i)
      CHECK(out[i] == doctest::Approx(0.2 * e0[i] + 0.3 * e1[i] + 0.5 * e2[i]).epsilon(1e-14));
  }
  SUBCASE("learned routing is a distribution over experts") {
    auto r = router_forward(model, x);
    CHECK(r.shape() == ng::Shape{5, 3});
    for (std::size_t b = 0; b < 5; ++b) CHECK(r.at(b, 0) + r.at(b, 1) + r.at(b, 2) == doctest::Approx(1.0));
  }
}

TEST_CASE("mixture output is a probability vector inside the experts' hull") {
  const auto c = tiny_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = init_model(c, seed);
    auto x = random_batch(3, c, 100 + seed);
    for (auto& v : x.values()) v *= 1.0 + double(seed);
    auto out = moe_forward(model, x);
    std::vector<Tensor> experts;
    for (std::size_t e = 0; e < c.experts; ++e) experts.push_back(expert_forward(model, e, x));
    for (std::size_t b = 0; b < 3; ++b) {
      double s = 0;
      for (std::size_t k = 0; k < c.classes; ++k) {
        const std::size_t i = b * c.classes + k;
        s += out[i];
        CHECK(out[i] >= 0.0);
        double lo = 1, hi = 0;
        for (auto& e : experts) lo = std::min(lo, e[i]), hi = std::max(hi, e[i]);
        CHECK(out[i] >= lo - 1e-15);
        CHECK(out[i] <= hi + 1e-15);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("cross-entropy through the mixture passes grad_check") {
  const auto c = tiny_config();
  auto model = init_model(c, 7);
  ng::Graph g;
  auto bound = bind_model(g, model, true);
  auto x = g.constant(random_batch(2, c, 8));
  Tensor y({2, 3});
  y.at(0, 1) = 1;
  y.at(1, 2) = 1;
  auto root = g.cross_entropy(build_moe(g, model, bound, x), g.constant(y));
  auto report = ng::grad_check(g, root, {}, 1e-5, 1e-4);
  INFO("max rel err " << report.max_rel_error << " over " << report.entries_checked);
  CHECK(report.passed);
  CHECK(report.entries_checked == model.parameter_count());
}

TEST_CASE("model checkpoint") {
  const auto dir = std::filesystem::temp_directory_path() / "pond_test_model";
  std::filesystem::create_directories(dir);
  auto model = init_model(tiny_config(), 11);
  save_model(model, dir / "m.pondck");
  auto back = load_model(dir / "m.pondck");
  CHECK(back.config == model.config);
  CHECK(back.experts == model.experts);
  CHECK(back.router == model.router);
  Archive a;
  a.kind = "model";
  append_model(a, back);
  CHECK(encode_archive(a) == read_file(dir / "m.pondck"));

  auto bytes = read_file(dir / "m.pondck");
  std::string head(bytes.begin(), bytes.begin() + 8);
  CHECK(head == std::string("PONDCK1\0", 8));
  bytes[bytes.size() - 20] ^= 0x40;
  CHECK_THROWS_AS(decode_archive(bytes), ChecksumError);
  std::filesystem::remove_all(dir);
}
