#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "sfda/checkpoint.hpp"
#include "sfda/error.hpp"
#include "sfda/ops.hpp"
#include "sfda/segnet.hpp"
#include "test_util.hpp"

using namespace sfda;
using sfda::testing::network_grad_check;
using sfda::testing::random_tensor;

namespace {

// Sets the live gammas of every BN layer, in order, then snapshots.
void set_source_gammas(Segmentor<float>& net, const std::vector<float>& gammas) {
  std::size_t k = 0;
  for (auto& bn : net.bn_layers())
    for (std::size_t c = 0; c < bn.channels(); ++c) bn.gamma()->data()[c] = gammas.at(k++);
  net.snapshot_source();
}

bool same_bytes(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

}  // namespace

TEST_CASE("forward shapes and input checks") {
  Segmentor<float> net(SegmentorSpec{1, 3, 3, 4}, 1);
  CHECK(net.bn_layers().size() == 7);
  CHECK(net.total_bn_channels() == 4 + 8 + 16 + 32 + 16 + 8 + 4);
  CounterRng rng(1, 5);
  auto x = random_tensor<float>(Shape{2, 1, 16, 24}, rng, 0, 1, false);
  Tape<float> tape(false);
  auto out = net.forward(tape, x, ForwardOptions{});
  CHECK(out.logits->shape() == Shape{2, 3, 16, 24});
  CHECK(out.probs->shape() == Shape{2, 3, 16, 24});
  CHECK(out.bottleneck->shape() == Shape{2, 32, 2, 3});
  CHECK_THROWS_AS(net.forward(tape, make_tensor<float>(Shape{1, 1, 12, 16}), {}), ShapeError);
  CHECK_THROWS_AS(net.forward(tape, make_tensor<float>(Shape{1, 2, 16, 16}), {}), ShapeError);
  CHECK_THROWS_AS(Segmentor<float>(SegmentorSpec{1, 1, 2, 2}, 0), ContractError);
}

TEST_CASE("zero weights give a uniform softmax") {
  Segmentor<float> net(SegmentorSpec{1, 4, 2, 3}, 2);
  for (auto& c : net.convs()) {
    std::fill(c.kernel->data().begin(), c.kernel->data().end(), 0.0f);
    std::fill(c.bias->data().begin(), c.bias->data().end(), 0.0f);
  }
  for (auto& bn : net.bn_layers())
    std::fill(bn.beta()->data().begin(), bn.beta()->data().end(), 0.0f);
  CounterRng rng(2, 5);
  auto x = random_tensor<float>(Shape{1, 1, 8, 8}, rng, 0, 1, false);
  Tape<float> tape(false);
  auto out = net.forward(tape, x, {});
  for (float v : out.probs->data()) CHECK(v == 0.25f);
}

TEST_CASE("fixed seed and input give bit-identical logits") {
  CounterRng rng(3, 5);
  auto x = random_tensor<float>(Shape{2, 1, 16, 16}, rng, 0, 1, false);
  Segmentor<float> a(SegmentorSpec{}, 42), b(SegmentorSpec{}, 42), c(SegmentorSpec{}, 43);
  Tape<float> tape(false);
  auto la = a.forward(tape, x, {}).logits;
  auto lb = b.forward(tape, x, {}).logits;
  auto lc = c.forward(tape, x, {}).logits;
  CHECK(same_bytes(la->data(), lb->data()));
  CHECK_FALSE(same_bytes(la->data(), lc->data()));
}

TEST_CASE("full network gradient matches central differences") {
  const auto r = network_grad_check(5);
  MESSAGE("max rel " << r.result.max_rel << " over " << r.result.checked
                     << " entries; relu margin " << r.relu_margin << ", pool margin "
                     << r.pool_margin);
  CHECK(r.result.max_rel < 1e-3);
}

TEST_CASE("pruning by source gamma") {
  // levels 1, width 1: BN widths 1, 2, 1.
  Segmentor<float> net(SegmentorSpec{1, 2, 1, 1}, 9);
  set_source_gammas(net, {2.0f, 0.1f, -1.0f, 5.0f});

  SUBCASE("fraction 0 is a no-op") {
    auto res = prune_channels(net, 0.0, PruneOrder::kSmallestGamma);
    CHECK(res.pruned.empty());
    CHECK(res.warning.empty());
    for (std::size_t l = 0; l < 3; ++l)
      CHECK(same_bytes(res.network.bn_layers()[l].gamma()->data(),
                       net.bn_layers()[l].gamma()->data()));
  }
  SUBCASE("smallest and largest, ranked by magnitude") {
    auto small = prune_channels(net, 34.0, PruneOrder::kSmallestGamma);
    REQUIRE(small.pruned.size() == 1);
    CHECK(small.pruned[0] == ChannelRef{1, 0});
    auto two = prune_channels(net, 50.0, PruneOrder::kSmallestGamma);
    CHECK(two.pruned == std::vector<ChannelRef>{{1, 0}, {1, 1}});
    auto large = prune_channels(net, 34.0, PruneOrder::kLargestGamma);
    CHECK(large.pruned == std::vector<ChannelRef>{{2, 0}});
    // The input network is left alone.
    CHECK(net.bn_layers()[1].gamma()->data()[0] == 0.1f);
  }
  SUBCASE("rounding to zero channels warns") {
    auto res = prune_channels(net, 20.0, PruneOrder::kSmallestGamma);
    CHECK(res.pruned.empty());
    CHECK_FALSE(res.warning.empty());
  }
  SUBCASE("pruned channels emit exactly zero after BN") {
    auto res = prune_channels(net, 34.0, PruneOrder::kSmallestGamma);
    auto& bn = res.network.bn_layers()[1];
    CounterRng rng(4, 5);
    auto x = random_tensor<float>(Shape{2, 2, 4, 4}, rng, -3, 3, false);
    Tape<float> tape(false);
    auto y = bn_forward_adapt(tape, x, bn, 0.5);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(y->at(n, 0, i, j) == 0.0f);
  }
  CHECK_THROWS_AS(prune_channels(net, 100.0, PruneOrder::kSmallestGamma), ContractError);
  Segmentor<float> fresh(SegmentorSpec{1, 2, 1, 1}, 9);
  CHECK_THROWS_AS(prune_channels(fresh, 10.0, PruneOrder::kSmallestGamma), ContractError);
}

TEST_CASE("pruned channels are the rank-and-floor selection") {
  Segmentor<float> net(SegmentorSpec{1, 3, 2, 3}, 10);
  CounterRng rng(10, 5);
  std::vector<float> g(net.total_bn_channels());
  for (auto& v : g) v = static_cast<float>(rng.uniform(-2, 2));
  set_source_gammas(net, g);
  for (double fraction : {5.0, 10.0, 33.3, 90.0}) {
    auto res = prune_channels(net, fraction, PruneOrder::kSmallestGamma);
    const auto count = static_cast<std::size_t>(std::floor(fraction * g.size() / 100.0));
    REQUIRE(res.pruned.size() == count);
    std::vector<float> mags;
    for (float v : g) mags.push_back(std::abs(v));
    std::sort(mags.begin(), mags.end());
    for (const auto& ref : res.pruned) {
      const float m = std::abs(net.bn_layers()[ref.layer].gamma_src()[ref.channel]);
      CHECK(m <= mags[count - 1]);
      CHECK(res.network.bn_layers()[ref.layer].gamma()->data()[ref.channel] == 0.0f);
      CHECK(res.network.bn_layers()[ref.layer].beta()->data()[ref.channel] == 0.0f);
    }
  }
}

TEST_CASE("checkpoint round trip") {
  Segmentor<float> net(SegmentorSpec{1, 3, 2, 4}, 11);
  CounterRng rng(11, 5);
  auto x = random_tensor<float>(Shape{2, 1, 8, 8}, rng, 0, 1, false);
  Tape<float> tape(false);
  net.forward(tape, x, ForwardOptions{NormPass::kSourceTrain});
  net.snapshot_source();
  net.bn_layers()[0].gamma()->data()[1] = 0.25f;
  net.advance();

  const auto bytes = serialize_checkpoint(net);
  auto back = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.spec() == net.spec());
  CHECK(back.has_snapshot());
  CHECK(back.bn_layers()[0].t() == 0);  // the adaptation counter is not saved
  CHECK(back.bn_layers()[0].gamma()->data()[1] == 0.25f);
  auto la = net.forward(tape, x, ForwardOptions{NormPass::kAdapt, 0.3}).logits;
  auto lb = back.forward(tape, x, ForwardOptions{NormPass::kAdapt, 0.3}).logits;
  CHECK(same_bytes(la->data(), lb->data()));

  const auto path = std::filesystem::temp_directory_path() / "sfda_test_roundtrip.ckpt";
  save_checkpoint(path, net);
  CHECK(serialize_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("checkpoint corruption, version and missing entries") {
  Segmentor<float> net(SegmentorSpec{1, 2, 1, 2}, 12);
  auto bytes = serialize_checkpoint(net);

  auto flipped = bytes;
  flipped[40] ^= 0x01;
  CHECK_THROWS_AS(deserialize_checkpoint(flipped), IoError);
  CHECK_THROWS_AS(deserialize_checkpoint({1, 2, 3}), IoError);

  auto entries = checkpoint_entries(net);
  entries[0].second = TnsRecord::from_bytes({1}, {2});
  try {
    deserialize_checkpoint(encode_archive(entries));
    FAIL("expected a version error");
  } catch (const VersionError& e) {
    CHECK(std::string(e.what()).find("version 2") != std::string::npos);
  }

  auto missing = checkpoint_entries(net);
  missing.erase(std::find_if(missing.begin(), missing.end(),
                             [](auto& e) { return e.first == "bn1.gamma_src"; }));
  try {
    deserialize_checkpoint(encode_archive(missing));
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("bn1.gamma_src") != std::string::npos);
  }
}
