#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "sfda/error.hpp"
#include "sfda/ops.hpp"
#include "sfda/tns_io.hpp"
#include "test_util.hpp"

using namespace sfda;
using sfda::testing::grad_check;
using sfda::testing::naive_conv;
using sfda::testing::random_tensor;

TEST_CASE("tensor construction and item") {
  CHECK_THROWS_AS(Tensor(Shape{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
  Tensor t(Shape{1, 1, 1, 1}, 2.5f);
  CHECK(t.item() == 2.5f);
  Tensor u(Shape{1, 2, 1, 1});
  CHECK_THROWS_AS(u.item(), ContractError);
  CHECK_FALSE(u.has_grad());
  CHECK(u.grad_mut().size() == 2);
  CHECK(u.has_grad());
}

TEST_CASE("tape rejects non-scalar loss and a second backward") {
  CounterRng rng(1, 1);
  auto x = random_tensor<double>(Shape{1, 2, 2, 2}, rng);
  Tape<double> tape;
  auto y = relu(tape, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
  auto s = sum(tape, y);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), ContractError);
}

TEST_CASE("conv2d matches a nested-loop oracle") {
  CounterRng rng(7, 1);
  struct Case {
    Shape x, k;
    std::size_t stride, pad;
  };
  const Case cases[] = {{{2, 3, 7, 6}, {4, 3, 3, 3}, 1, 1},
                        {{1, 2, 9, 9}, {3, 2, 3, 3}, 2, 1},
                        {{2, 5, 4, 4}, {2, 5, 1, 1}, 1, 0},
                        {{1, 1, 8, 5}, {2, 1, 5, 3}, 1, 2}};
  for (const auto& c : cases) {
    auto x = random_tensor<float>(c.x, rng);
    auto k = random_tensor<float>(c.k, rng);
    auto b = random_tensor<float>(Shape{1, c.k.n, 1, 1}, rng);
    Tape<float> tape(false);
    auto y = conv2d(tape, x, k, b, c.stride, c.pad);
    Shape os;
    const auto ref = naive_conv(*x, *k, b.get(), c.stride, c.pad, &os);
    REQUIRE(y->shape() == os);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(y->data()[i] - ref[i]) <= 1e-5 * std::max(1.0, std::abs(ref[i])));
    }
  }
}

TEST_CASE("conv2d shape errors") {
  Tape<float> tape(false);
  auto x = make_tensor<float>(Shape{1, 2, 4, 4});
  CHECK_THROWS_AS(conv2d(tape, x, make_tensor<float>(Shape{1, 3, 3, 3}), {}, 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, x, make_tensor<float>(Shape{1, 2, 2, 2}), {}, 1, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, x, make_tensor<float>(Shape{1, 2, 3, 3}), {}, 0, 1), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, x, make_tensor<float>(Shape{1, 2, 3, 3}),
                         make_tensor<float>(Shape{1, 2, 1, 1}), 1, 1),
                  ShapeError);
}

TEST_CASE("pooling, upsampling, concat and softmax values") {
  Tape<float> tape(false);
  auto x = make_tensor<float>(Shape{1, 1, 2, 4}, std::vector<float>{1, 3, 2, 2, 0, -1, 5, 2});
  auto p = maxpool2x(tape, x);
  REQUIRE(p->shape() == Shape{1, 1, 1, 2});
  CHECK(p->data()[0] == 3.0f);
  CHECK(p->data()[1] == 5.0f);
  CHECK_THROWS_AS(maxpool2x(tape, make_tensor<float>(Shape{1, 1, 3, 4})), ShapeError);

  auto u = upsample_nearest2x(tape, p);
  REQUIRE(u->shape() == Shape{1, 1, 2, 4});
  CHECK(u->at(0, 0, 1, 1) == 3.0f);
  CHECK(u->at(0, 0, 0, 2) == 5.0f);

  auto c = concat_channels(tape, x, u);
  REQUIRE(c->shape() == Shape{1, 2, 2, 4});
  CHECK(c->at(0, 1, 1, 3) == 5.0f);
  CHECK(c->at(0, 0, 1, 2) == 5.0f);

  auto logits = make_tensor<float>(Shape{1, 3, 1, 1}, std::vector<float>{1, 2, 3});
  auto s = softmax_channel(tape, logits);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(s->data()[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-6));
}

TEST_CASE("relu lets NaN through") {
  Tape<float> tape(false);
  auto x = make_tensor<float>(Shape{1, 1, 1, 3}, std::vector<float>{-1.0f, NAN, 2.0f});
  auto y = relu(tape, x);
  CHECK(y->data()[0] == 0.0f);
  CHECK(std::isnan(y->data()[1]));
  CHECK(y->data()[2] == 2.0f);
}

TEST_CASE("max pooling sends the gradient to the first maximum") {
  auto x = make_parameter<double>(Shape{1, 1, 2, 2}, {2, 2, 1, 2});
  Tape<double> tape;
  auto l = sum(tape, maxpool2x(tape, x));
  tape.backward(l);
  CHECK(x->grad()[0] == 1.0);
  CHECK(x->grad()[1] == 0.0);
  CHECK(x->grad()[3] == 0.0);
}

TEST_CASE("cross entropy value and label checks") {
  Tape<double> tape(false);
  auto logits = make_tensor<double>(Shape{1, 2, 1, 2}, std::vector<double>{0, 1, 0, -1});
  const std::uint8_t labels[] = {0, 1};
  const double l = cross_entropy_pixelwise(tape, logits, labels)->item();
  const double expect = 0.5 * (std::log(2.0) + (std::log(1 + std::exp(2.0))));
  CHECK(l == doctest::Approx(expect).epsilon(1e-12));
  const std::uint8_t bad[] = {0, 2};
  CHECK_THROWS_AS(cross_entropy_pixelwise(tape, logits, bad), DataError);
}

TEST_CASE("gradients of every op match central differences") {
  CounterRng rng(11, 3);
  SUBCASE("conv2d input, kernel and bias") {
    auto x = random_tensor<double>(Shape{2, 2, 5, 4}, rng);
    auto k = random_tensor<double>(Shape{3, 2, 3, 3}, rng);
    auto b = random_tensor<double>(Shape{1, 3, 1, 1}, rng);
    auto r = random_tensor<double>(Shape{2, 3, 5, 4}, rng, -1, 1, false);
    auto f = [&](Tape<double>& t) { return sum(t, mul(t, conv2d(t, x, k, b, 1, 1), r)); };
    CHECK(grad_check(f, {x, k, b}).max_rel < 1e-4);
  }
  SUBCASE("strided conv") {
    auto x = random_tensor<double>(Shape{1, 2, 7, 7}, rng);
    auto k = random_tensor<double>(Shape{2, 2, 3, 3}, rng);
    auto r = random_tensor<double>(Shape{1, 2, 4, 4}, rng, -1, 1, false);
    auto f = [&](Tape<double>& t) { return sum(t, mul(t, conv2d(t, x, k, {}, 2, 1), r)); };
    CHECK(grad_check(f, {x, k}).max_rel < 1e-4);
  }
  SUBCASE("relu away from the kink") {
    std::vector<double> v(24);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % 2 ? 1.0 : -1.0) * (0.1 + 0.05 * i);
    auto x = make_parameter<double>(Shape{1, 2, 3, 4}, v);
    auto r = random_tensor<double>(Shape{1, 2, 3, 4}, rng, -1, 1, false);
    auto f = [&](Tape<double>& t) { return sum(t, mul(t, relu(t, x), r)); };
    CHECK(grad_check(f, {x}).max_rel < 1e-4);
  }
  SUBCASE("softmax") {
    auto x = random_tensor<double>(Shape{2, 4, 3, 3}, rng, -2, 2);
    auto r = random_tensor<double>(Shape{2, 4, 3, 3}, rng, -1, 1, false);
    auto f = [&](Tape<double>& t) { return sum(t, mul(t, softmax_channel(t, x), r)); };
    CHECK(grad_check(f, {x}).max_rel < 1e-4);
  }
  SUBCASE("maxpool with distinct window values") {
    std::vector<double> v(32);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(1.7 * i) * 2.0;
    auto x = make_parameter<double>(Shape{1, 2, 4, 4}, v);
    auto r = random_tensor<double>(Shape{1, 2, 2, 2}, rng, -1, 1, false);
    auto f = [&](Tape<double>& t) { return sum(t, mul(t, maxpool2x(t, x), r)); };
    CHECK(grad_check(f, {x}).max_rel < 1e-4);
  }
  SUBCASE("upsample and concat") {
    auto a = random_tensor<double>(Shape{1, 2, 2, 3}, rng);
    auto b = random_tensor<double>(Shape{1, 1, 4, 6}, rng);
    auto r = random_tensor<double>(Shape{1, 3, 4, 6}, rng, -1, 1, false);
    auto f = [&](Tape<double>& t) {
      return sum(t, mul(t, concat_channels(t, upsample_nearest2x(t, a), b), r));
    };
    CHECK(grad_check(f, {a, b}).max_rel < 1e-4);
  }
  SUBCASE("cross entropy") {
    auto x = random_tensor<double>(Shape{2, 3, 2, 3}, rng, -2, 2);
    std::vector<std::uint8_t> labels(12);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i % 3);
    auto f = [&](Tape<double>& t) { return cross_entropy_pixelwise(t, x, labels); };
    CHECK(grad_check(f, {x}).max_rel < 1e-4);
  }
  SUBCASE("scalar arithmetic") {
    auto a = random_tensor<double>(Shape{1, 1, 2, 2}, rng);
    auto b = random_tensor<double>(Shape{1, 1, 2, 2}, rng);
    auto f = [&](Tape<double>& t) {
      return add(t, scale(t, mean(t, mul(t, a, b)), 3.0), sum(t, a));
    };
    CHECK(grad_check(f, {a, b}).max_rel < 1e-4);
  }
}

TEST_CASE("tns records round-trip and stay little-endian") {
  Tensor t(Shape{1, 2, 1, 2}, std::vector<float>{1.0f, -2.5f, 0.0f, 3.25f});
  const auto rec = TnsRecord::from_tensor(t);
  std::stringstream ss;
  write_tns(ss, rec);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "TNS1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 0);
  CHECK(static_cast<unsigned char>(bytes[5]) == 4);
  // dims[1] = 2 as u64 LE at offset 6 + 8
  CHECK(static_cast<unsigned char>(bytes[14]) == 2);
  CHECK(bytes.size() == 6 + 4 * 8 + 4 * 4);
  std::stringstream in(bytes);
  CHECK(read_tns(in) == rec);

  const auto u = TnsRecord::from_bytes({1, 1, 1, 3}, {0, 1, 2});
  std::stringstream su;
  write_tns(su, u);
  std::stringstream su_in(su.str());
  CHECK(read_tns(su_in) == u);
}
