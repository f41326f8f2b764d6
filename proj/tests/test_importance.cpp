// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "ofad/csv.hpp"
#include "ofad/errors.hpp"
#include "ofad/eval.hpp"
#include "ofad/importance.hpp"
#include "ofad/ofatrain.hpp"

using namespace ofad;

namespace {

NetworkSpec toy_spec(int blocks, int layers, int width) {
  NetworkSpec s;
  s.time_embed_dim = 8;
  for (int b = 0; b < blocks; ++b) s.blocks.push_back(BlockSpec{layers, width, {}});
  return s;
}

ScoreNetwork trained_net(const NetworkSpec& spec, long long steps, std::uint64_t seed) {
  auto net = build_network(spec, seed);
  auto opt = OptimizerState::for_network(net);
  TrainRunConfig cfg;
  cfg.steps = steps;
  cfg.batch_size = 64;
  cfg.learning_rate = 3e-3;
  cfg.ema_decay = 0.99;
  cfg.seed = seed;
  pretrain(net, opt, cfg, make_ring_mixture(8, 2.0, 0.1));
  net.promote_ema();
  return net;
}

void set_channel(ScoreNetwork& net, int layer, int channel, double value) {
  for (auto i : channel_param_indices(net.layout(), layer, channel)) net.weights()[i] = value;
}

TaylorOptions opts(int n_pairs, SigmaInterval iv = {}) {
  TaylorOptions o;
  o.n_pairs = n_pairs;
  o.interval = iv;
  return o;
}

}  // namespace

TEST_CASE("channel parameter indices follow removal semantics") {
  const auto spec = toy_spec(1, 2, 4);
  const ParamLayout L(spec);
  const auto idx = channel_param_indices(L, 1, 2);
  const auto& ls = L.layers()[1];
  // in.weight row (stream_in entries) + in.bias entry + out.weight column (stream_out entries)
  CHECK(idx.size() == static_cast<std::size_t>(ls.info.stream_in + 1 + ls.info.stream_out));
  const auto& in_w = L.tensor(ls.in_w);
  const auto& out_w = L.tensor(ls.out_w);
  CHECK(idx[0] == in_w.offset + 2 * static_cast<std::size_t>(in_w.cols));
  CHECK(idx[static_cast<std::size_t>(ls.info.stream_in)] == L.tensor(ls.in_b).offset + 2);
  CHECK(idx.back() == out_w.offset + static_cast<std::size_t>((out_w.rows - 1) * out_w.cols + 2));
}

TEST_CASE("taylor importance basics") {
  const auto mix = make_ring_mixture(8, 2.0, 0.1);
  auto net = build_network(toy_spec(2, 2, 6), 3);
  set_channel(net, 1, 4, 0.0);
  Rng rng(1);
  const auto t = taylor_importance(net, mix, opts(64), rng);
  t.validate(net.spec());
  CHECK(t.method == ImportanceMethod::taylor);
  CHECK(t.n_pairs == 64);
  CHECK(t.channel[1][4] == 0.0);
  for (std::size_t l = 0; l < t.channel.size(); ++l) {
    CHECK(t.layer[l] == doctest::Approx(std::accumulate(t.channel[l].begin(), t.channel[l].end(), 0.0)).epsilon(1e-12));
    for (double s : t.channel[l]) {
      CHECK(s >= 0.0);
      CHECK(std::isfinite(s));
    }
  }
  CHECK(TaylorOptions{}.n_pairs == 1024);
  CHECK(kDefaultImportancePairs == 1024);
  Rng again(1);
  CHECK(taylor_importance(net, mix, opts(64), again).channel == t.channel);
  CHECK_THROWS_AS(taylor_importance(net, mix, opts(0), rng), DomainError);
}

TEST_CASE("duplicated channels get equal taylor scores") {
  NetworkSpec spec;
  spec.time_embed_dim = 4;
  spec.blocks = {BlockSpec{1, 2, {}}};
  auto net = build_network(spec, 5);
  const auto& L = net.layout();
  const auto& ls = L.layers()[0];
  const auto& in_w = L.tensor(ls.in_w);
  const auto& out_w = L.tensor(ls.out_w);
  auto& w = net.weights();
  for (int j = 0; j < in_w.cols; ++j) w[in_w.offset + static_cast<std::size_t>(in_w.cols + j)] = w[in_w.offset + static_cast<std::size_t>(j)];
  w[L.tensor(ls.in_b).offset + 1] = w[L.tensor(ls.in_b).offset];
  for (int r = 0; r < out_w.rows; ++r) {
    w[out_w.offset + static_cast<std::size_t>(r * out_w.cols + 1)] = w[out_w.offset + static_cast<std::size_t>(r * out_w.cols)];
  }
  Rng rng(2);
  const auto t = taylor_importance(net, make_ring_mixture(8, 2.0, 0.1), opts(2000), rng);
  CHECK(t.channel[0][0] > 0.0);
  CHECK(t.channel[0][1] == doctest::Approx(t.channel[0][0]).epsilon(0.05));
}

TEST_CASE("abs placement modes") {
  const auto mix = make_ring_mixture(8, 2.0, 0.1);
  const auto net = build_network(toy_spec(1, 2, 4), 9);
  Rng a(4), b(4);
  auto per_pair = opts(200);
  auto after = opts(200);
  after.abs_mode = AbsMode::after_mean;
  const auto tp = taylor_importance(net, mix, per_pair, a);
  const auto ta = taylor_importance(net, mix, after, b);
  // |mean| <= mean |.| on the same pairs
  for (std::size_t l = 0; l < tp.channel.size(); ++l) {
    for (std::size_t c = 0; c < tp.channel[l].size(); ++c) CHECK(ta.channel[l][c] <= tp.channel[l][c] + 1e-15);
  }
}

TEST_CASE("magnitude importance") {
  const auto spec = toy_spec(1, 1, 3);
  ScoreNetwork net(spec);
  const auto idx = channel_param_indices(net.layout(), 0, 1);
  net.weights()[idx[0]] = 1.0;
  net.weights()[idx[3]] = -2.0;
  net.weights()[idx.back()] = 0.5;
  auto t = magnitude_importance(net);
  CHECK(t.channel[0][0] == 0.0);
  CHECK(t.channel[0][1] == 3.5);
  CHECK(t.channel[0][2] == 0.0);
  CHECK(t.method == ImportanceMethod::magnitude);

  auto big = build_network(toy_spec(2, 2, 5), 1);
  const auto t1 = magnitude_importance(big);
  for (auto& v : big.weights()) v *= 2.0;
  const auto t2 = magnitude_importance(big);
  for (std::size_t l = 0; l < t1.channel.size(); ++l) {
    for (std::size_t c = 0; c < t1.channel[l].size(); ++c) CHECK(t2.channel[l][c] == 2.0 * t1.channel[l][c]);
    std::vector<int> r1(t1.channel[l].size()), r2(r1.size());
    std::iota(r1.begin(), r1.end(), 0);
    std::iota(r2.begin(), r2.end(), 0);
    std::stable_sort(r1.begin(), r1.end(), [&](int a, int b) { return t1.channel[l][a] > t1.channel[l][b]; });
    std::stable_sort(r2.begin(), r2.end(), [&](int a, int b) { return t2.channel[l][a] > t2.channel[l][b]; });
    CHECK(r1 == r2);
  }
}

TEST_CASE("random importance") {
  const auto spec = toy_spec(2, 3, 8);
  const auto a = random_importance(spec, 3);
  CHECK(a.channel == random_importance(spec, 3).channel);
  CHECK(a.channel != random_importance(spec, 4).channel);
  for (const auto& l : a.channel) {
    for (double s : l) {
      CHECK(s > 0.0);
      CHECK(s < 1.0);
    }
  }
  CHECK(a.method == ImportanceMethod::random);
}

TEST_CASE("time-split importance") {
  CHECK(kTimeSplitIntervals[0] == SigmaInterval{0.002, 0.1});
  CHECK(kTimeSplitIntervals[1] == SigmaInterval{0.1, 1.0});
  CHECK(kTimeSplitIntervals[2] == SigmaInterval{1.0, 80.0});

  const auto mix = make_ring_mixture(8, 2.0, 0.1);
  const auto net = trained_net(toy_spec(1, 2, 6), 300, 7);
  const int n = 6000;
  Rng rng(11);
  const auto split = timesplit_importance(net, mix, n, rng);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(split[k].interval == kTimeSplitIntervals[k]);
    CHECK(split[k].n_pairs == n);
  }
  // Log-uniform sigma over the whole range is the log-length weighted mixture of
  // the three sub-intervals, so the stratified combination estimates the same mean.
  const double total = std::log(80.0 / 0.002);
  const double w[3] = {std::log(0.1 / 0.002) / total, std::log(10.0) / total, std::log(80.0) / total};
  Rng whole_rng(12);
  const auto whole = taylor_importance(net, mix, opts(3 * n), whole_rng);
  for (std::size_t l = 0; l < whole.layer.size(); ++l) {
    const double combined = w[0] * split[0].layer[l] + w[1] * split[1].layer[l] + w[2] * split[2].layer[l];
    CHECK(combined == doctest::Approx(whole.layer[l]).epsilon(0.1));
  }
}

TEST_CASE("refresh importance") {
  const auto mix = make_ring_mixture(8, 2.0, 0.1);
  const auto net = build_network(toy_spec(1, 2, 4), 2);
  Rng rng(1);
  auto t = taylor_importance(net, mix, opts(32, SigmaInterval{0.1, 1.0}), rng);
  Rng r1(9), r2(9);
  const auto a = refresh_importance(net, t, mix, 32, r1);
  const auto b = refresh_importance(net, t, mix, 32, r2);
  CHECK(a.channel == b.channel);
  CHECK(a.interval == t.interval);
  CHECK(a.step > t.step);
  const auto c = refresh_importance(net, a, mix, 32, r1, 5000);
  CHECK(c.step == 5000);
  const auto d = refresh_importance(net, c, mix, 32, r1, 10);
  CHECK(d.step == 5001);
  CHECK_THROWS_AS(refresh_importance(net, magnitude_importance(net), mix, 32, r1), ValidationError);
}

TEST_CASE("taylor scores track exact single-channel ablation") {
  const auto spec = toy_spec(2, 3, 16);
  const auto mix = make_ring_mixture(8, 2.0, 0.1);
  const auto net = trained_net(spec, 3000, 21);
  Rng rng(5);
  const auto t = taylor_importance(net, mix, opts(1024), rng);

  Rng eval_rng(6);
  const auto batch = draw_dsm_batch(mix, 4096, SigmaInterval{}, eval_rng);
  const auto full = ChannelMask::full(spec);
  const double base = loss_only(spec, net.layout(), net.weights(), full, batch);
  std::vector<double> scores, ablation;
  for (std::size_t l = 0; l < t.channel.size(); ++l) {
    for (int c = 0; c < 16; ++c) {
      auto w = net.weights();
      for (auto i : channel_param_indices(net.layout(), static_cast<int>(l), c)) w[i] = 0.0;
      ablation.push_back(std::abs(loss_only(spec, net.layout(), w, full, batch) - base));
      scores.push_back(t.channel[l][static_cast<std::size_t>(c)]);
    }
  }
  const double rho = spearman(scores, ablation);
  MESSAGE("spearman(I^C, ablation) = " << rho);
  CHECK(rho >= 0.3);
}

TEST_CASE("importance csv round trip") {
  const auto spec = toy_spec(2, 2, 5);
  const auto net = build_network(spec, 3);
  Rng rng(1);
  auto t1 = taylor_importance(net, make_ring_mixture(8, 2.0, 0.1), opts(16, SigmaInterval{0.1, 1.0}), rng);
  t1.step = 42;
  auto t2 = magnitude_importance(net);
  const auto path = std::filesystem::temp_directory_path() / "ofad_importance_test.csv";
  const auto text = importance_to_csv(spec, {t1, t2});
  csv::write_text(path, text);
  const auto back = importance_from_csv(spec, path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].channel == t1.channel);
  CHECK(back[0].layer == t1.layer);
  CHECK(back[0].interval == t1.interval);
  CHECK(back[0].step == 42);
  CHECK(back[0].n_pairs == 16);
  CHECK(back[1].method == ImportanceMethod::magnitude);
  CHECK(back[1].channel == t2.channel);
  CHECK(importance_to_csv(spec, back) == text);
  CHECK(text.rfind("block,layer,channel,score,method,sigma_lo,sigma_hi,n_pairs,step\n", 0) == 0);
  // one row per channel per table
  CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 2 * 4 * 5);

  csv::write_text(path, "block,layer,channel,score\n0,0,0,1\n");
  CHECK_THROWS_AS(importance_from_csv(spec, path), ValidationError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(importance_from_csv(spec, path), IoError);
}

TEST_CASE("table validation") {
  const auto spec = toy_spec(1, 2, 3);
  auto t = random_importance(spec, 1);
  t.channel[0][0] = -1.0;
  CHECK_THROWS_AS(t.validate(spec), ValidationError);
  t = random_importance(spec, 1);
  t.channel[1].pop_back();
  CHECK_THROWS_AS(t.validate(spec), ValidationError);
  t = random_importance(spec, 1);
  t.channel[0][1] = std::nan("");
  CHECK_THROWS_AS(t.validate(spec), ValidationError);
  CHECK(parse_importance_method("taylor") == ImportanceMethod::taylor);
  CHECK_THROWS_AS(parse_importance_method("hessian"), ValidationError);
}
