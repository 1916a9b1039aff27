// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "hdrdiff/nets.hpp"
#include "test_util.hpp"

using namespace hdrdiff;
using namespace hdrdiff::nets;
using Catch::Approx;
using nn::constant;
using nn::Shape;
using nn::Tensor;
using testutil::random_tensor;

namespace {

NetConfig tiny(int res = 16, std::vector<int> mult = {1, 2, 2}) {
  NetConfig c;
  c.base_resolution = res;
  c.base_channels = 4;
  c.channel_multipliers = std::move(mult);
  c.z_dim = 8;
  c.time_embed_dim = 8;
  c.norm_groups = 2;
  c.attention_levels = {};
  for (int i = 0; i + 1 < c.depth(); ++i) c.attention_levels.insert(i);
  return c;
}

std::size_t conv3_params(const ModelBundle<double>& m) {
  std::size_t n = 0;
  for (const auto& [name, v] : m.params.all())
    if (v->shape().h == 3 && v->shape().w == 3) n += v->value.size();
  return n;
}

}  // namespace

TEST_CASE("NetConfig validation") {
  CHECK_NOTHROW(NetConfig{}.validate());
  auto c = tiny();
  c.base_resolution = 24;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny();
  c.base_resolution = 8;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny();
  c.recurrent_steps = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny();
  c.z_dim = 4;
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny(16, {1, 1, 1, 1, 1, 1});
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny();
  c.attention_levels = {2};
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny();
  c.channel_multipliers = {};
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("shape contracts over resolutions and depths") {
  for (int res : {16, 32}) {
    for (const std::vector<int>& mult : {std::vector<int>{1}, {1, 2}, {1, 2, 2}, {1, 2, 2, 4}, {1, 1, 2, 2, 4}}) {
      auto c = tiny(res, mult);
      ModelBundle<double> m(c, Conditioner::Encoder, true);
      const auto ldr = constant(random_tensor<double>({2, 3, res, res}, 1, 0.0, 1.0));
      const auto z = m.encode(ldr);
      CHECK(z->shape() == Shape{2, c.z_dim, 1, 1});
      const auto dec = m.decode(z);
      CHECK(dec->shape() == ldr->shape());
      for (double v : dec->value.data) REQUIRE((v >= 0.0 && v <= 1.0));
      const auto xt = constant(random_tensor<double>({2, 3, res, res}, 2));
      CHECK(m.denoise(xt, {1, 1000}, z)->shape() == xt->shape());
    }
  }
}

TEST_CASE("encoder and conv stem are deterministic and reject wrong sizes") {
  for (auto cond : {Conditioner::Encoder, Conditioner::ConvStem}) {
    ModelBundle<double> m(tiny(), cond, false);
    const auto ldr = random_tensor<double>({2, 3, 16, 16}, 3, 0.0, 1.0);
    const auto a = m.encode(constant(ldr)), b = m.encode(constant(ldr));
    CHECK(a->value.data == b->value.data);
    CHECK(a->shape() == Shape{2, 8, 1, 1});
    CHECK_THROWS_AS(m.encode(constant(Tensor<double>({1, 3, 32, 32}))), Error);
    CHECK_THROWS_AS(m.decode(a), Error);  // no decoder in this bundle
  }
  ModelBundle<double> m(tiny(), Conditioner::Encoder, true);
  CHECK_THROWS_AS(m.decode(constant(Tensor<double>({1, 9, 1, 1}))), Error);
}

TEST_CASE("denoiser argument checks") {
  ModelBundle<double> m(tiny(), Conditioner::Encoder, true);
  const auto xt = constant(Tensor<double>({2, 3, 16, 16}));
  const auto z = constant(Tensor<double>({2, 8, 1, 1}));
  CHECK_THROWS_AS(m.denoise(xt, {1}, z), Error);
  CHECK_THROWS_AS(m.denoise(xt, {0, 1}, z), Error);
  CHECK_THROWS_AS(m.denoise(xt, {1, 1}, constant(Tensor<double>({2, 4, 1, 1}))), Error);
  CHECK_THROWS_AS(m.denoise(constant(Tensor<double>({2, 3, 32, 32})), {1, 1}, z), Error);

  auto c = tiny();
  c.spatial_condition = true;
  ModelBundle<double> sp(c, Conditioner::Encoder, true);
  CHECK_THROWS_AS(sp.denoise(xt, {1, 1}, z), Error);
  const auto ldr = constant(random_tensor<double>({2, 3, 16, 16}, 4));
  CHECK(sp.denoise(xt, {1, 1}, z, ldr)->shape() == xt->shape());
  const auto other = constant(random_tensor<double>({2, 3, 16, 16}, 5));
  CHECK_FALSE(sp.denoise(xt, {1, 1}, z, ldr)->value.data == sp.denoise(xt, {1, 1}, z, other)->value.data);
}

TEST_CASE("denoiser gradients match finite differences") {
  ModelBundle<double> m(tiny(), Conditioner::Encoder, true);
  auto xt = nn::parameter(random_tensor<double>({1, 3, 16, 16}, 6));
  auto z = nn::parameter(random_tensor<double>({1, 8, 1, 1}, 7));
  const auto f = [&] { return testutil::contract(m.denoise(xt, {37}, z), 8); };
  CHECK(testutil::gradcheck({xt, z}, f, 1e-6, 120) < 1e-5);

  xt->zero_grad();
  z->zero_grad();
  nn::backward(f());
  double gx = 0.0, gz = 0.0;
  for (double v : xt->grad.data) gx += std::abs(v);
  for (double v : z->grad.data) gz += std::abs(v);
  CHECK(std::isfinite(gx));
  CHECK(gx > 0.0);
  CHECK(gz > 0.0);  // conditioning reaches the output at initialization
}

TEST_CASE("encoder and decoder gradients match finite differences") {
  ModelBundle<double> m(tiny(), Conditioner::Encoder, true);
  auto ldr = nn::parameter(random_tensor<double>({1, 3, 16, 16}, 9, 0.0, 1.0));
  CHECK(testutil::gradcheck({ldr}, [&] { return testutil::contract(m.decode(m.encode(ldr)), 10); }, 1e-6, 100) <
        1e-5);
  const auto w = m.params.find("encoder.block1.conv.w");
  REQUIRE(w);
  CHECK(testutil::gradcheck({w}, [&] { return testutil::contract(m.encode(ldr), 11); }, 1e-6, 60) < 1e-5);
}

TEST_CASE("single-step recurrent block is a plain residual block") {
  ParamRegistry<double> reg(3);
  R2Block<double> blk(reg, "b", 4, 6, 1, 2, 5);
  const auto x = constant(random_tensor<double>({2, 4, 8, 8}, 12));
  const auto e = constant(random_tensor<double>({2, 5, 1, 1}, 13));
  const auto y = blk(x, e);
  // reference: h = proj(x); h + silu(norm(conv(h)) + dense(e))
  const auto h = (*blk.proj)(x);
  const auto emb = nn::reshape((*blk.emb)(e), Shape{2, 6, 1, 1});
  const auto ref = nn::add(h, nn::silu(nn::add_channel(blk.norm(blk.conv(h)), emb)));
  for (std::size_t i = 0; i < ref->value.size(); ++i) REQUIRE(y->value[i] == Approx(ref->value[i]).margin(1e-14));

  R2Block<double> two(reg, "c", 6, 6, 2, 2, 0);
  CHECK_FALSE(two.proj.has_value());
  const auto z = constant(random_tensor<double>({1, 6, 4, 4}, 14));
  const auto r1 = nn::silu(two.norm(two.conv(z)));
  const auto r2 = nn::silu(two.norm(two.conv(nn::add(z, r1))));
  const auto want = nn::add(z, r2);
  const auto got = two(z, nullptr);
  for (std::size_t i = 0; i < want->value.size(); ++i) REQUIRE(got->value[i] == Approx(want->value[i]).margin(1e-14));
}

TEST_CASE("timestep embedding") {
  const auto e = timestep_embedding<double>({0, 5}, 8);
  for (int k = 0; k < 4; ++k) {
    CHECK(e[k] == 0.0);
    CHECK(e[4 + k] == 1.0);
    const double f = std::exp(-std::log(10000.0) * k / 4);
    CHECK(e[8 + k] == Approx(std::sin(5 * f)));
    CHECK(e[12 + k] == Approx(std::cos(5 * f)));
  }
}

TEST_CASE("parameter counts") {
  auto c = tiny(32, {1, 2, 2, 4});
  c.base_channels = 8;
  ModelBundle<double> a(c, Conditioner::Encoder, true), b(c, Conditioner::Encoder, true);
  CHECK(a.count_parameters() > 0);
  CHECK(count_parameters(a) == count_parameters(b));
  REQUIRE(a.params.all().size() == b.params.all().size());
  for (std::size_t i = 0; i < a.params.all().size(); ++i)
    REQUIRE(a.params.all()[i].second->value.data == b.params.all()[i].second->value.data);

  auto d = c;
  d.base_channels = 16;
  d.norm_groups = 2;
  ModelBundle<double> wide(d, Conditioner::Encoder, true);
  const double ratio = static_cast<double>(conv3_params(wide)) / conv3_params(a);
  CHECK(ratio == Approx(4.0).epsilon(0.1));

  // exact count for a hand-sized layer set
  ParamRegistry<double> reg(1);
  Conv<double>(reg, "c", 3, 5, 3);
  Dense<double>(reg, "d", 7, 2);
  GroupNorm<double>(reg, "g", 6, 2);
  CHECK(reg.count() == (5 * 3 * 9 + 5) + (2 * 7 + 2) + 12);
  CHECK_THROWS_AS(reg.filled("c.w", {1, 1, 1, 1}, 0.0), Error);
  CHECK(groups_for(12, 8) == 6);
  CHECK(groups_for(7, 8) == 7);
  CHECK(groups_for(5, 4) == 1);
}

TEST_CASE("variant bundles differ only in conditioning and decoder") {
  const auto c = tiny();
  ModelBundle<double> full(c, Conditioner::Encoder, true), enc(c, Conditioner::Encoder, false),
      stem(c, Conditioner::ConvStem, false);
  CHECK(full.decoder.has_value());
  CHECK_FALSE(enc.decoder.has_value());
  CHECK(stem.conv_stem.has_value());
  CHECK(full.count_parameters() > enc.count_parameters());
  CHECK(enc.count_parameters() > stem.count_parameters());
}
