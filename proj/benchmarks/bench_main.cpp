#include <benchmark/benchmark.h>

#include <vector>

#include "deepmts/losses.hpp"
#include "deepmts/metrics.hpp"
#include "deepmts/model.hpp"
#include "deepmts/ops.hpp"

using namespace deepmts;

namespace {

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  return t;
}

void BM_Conv3dForward(benchmark::State& state) {
  const auto cin = static_cast<std::size_t>(state.range(0));
  const auto cout = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  auto x = random_tensor<float>({8, cin, 32, 32, 16}, rng);
  auto w = random_tensor<float>({cout, cin, 3, 3, 3}, rng);
  Tensor<float> b({cout});
  const auto spec = nn::LayerSpec::conv(cout, 3);
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv3d_forward(x, w, b, spec));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(8 * 32 * 32 * 16 * cin * cout * 27));
}
BENCHMARK(BM_Conv3dForward)->Args({2, 4})->Args({12, 4})->Args({24, 8})->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  Rng rng(2);
  nn::Tape<float> tape;
  nn::ParamStore<float> store;
  auto& w = store.add("w", random_tensor<float>({4, 12, 3, 3, 3}, rng));
  auto& b = store.add("b", Tensor<float>({4}));
  const auto x = random_tensor<float>({8, 12, 32, 32, 16}, rng);
  for (auto _ : state) {
    tape.clear();
    nn::Var xv = tape.input(x, true);
    nn::Var y = nn::conv3d(tape, xv, tape.parameter(w), tape.parameter(b), nn::LayerSpec::conv(4, 3));
    tape.backward(nn::sum(tape, y));
  }
}
BENCHMARK(BM_Conv3dBackward)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  auto spec = model::ArchSpec::for_variant(static_cast<model::Variant>(state.range(0)));
  model::Model net(spec, 3);
  Rng rng(4);
  const std::size_t n = 8;
  auto images = random_tensor<float>({n, 2, 32, 32, 16}, rng);
  Tensor<float> clinical({n, 1});
  std::vector<std::uint8_t> mask(n * 32 * 32 * 16, 0);
  for (std::size_t i = 0; i < mask.size(); i += 7) mask[i] = 1;
  std::vector<SurvivalLabel> labels;
  for (std::size_t i = 0; i < n; ++i) labels.push_back({1.0 + static_cast<double>(i), i % 2 == 0});
  nn::Tape<float> tape;
  for (auto _ : state) {
    tape.clear();
    net.params().zero_grad();
    auto out = net.forward(tape, images, clinical, nn::Mode::train, rng);
    std::vector<nn::Var> terms{nn::scale(tape, out.l2, 0.1f)};
    if (out.prob_map) terms.push_back(dice_loss(tape, nn::slice_channels(tape, *out.prob_map, 1, 1), mask));
    if (out.risk) terms.push_back(cox_ph_loss(tape, *out.risk, labels));
    nn::Var loss = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) loss = nn::add(tape, loss, terms[i]);
    tape.backward(loss);
  }
  state.SetLabel(model::to_string(spec.variant));
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 5)->Unit(benchmark::kMillisecond);

void BM_CIndex(benchmark::State& state) {
  Rng rng(5);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<double> h(n);
  std::vector<SurvivalLabel> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    h[i] = rng.normal();
    labels[i] = {rng.uniform(0.1, 10.0), rng.bernoulli(0.4)};
  }
  for (auto _ : state) benchmark::DoNotOptimize(c_index(h, labels));
}
BENCHMARK(BM_CIndex)->Arg(200)->Arg(5000);

}  // namespace

BENCHMARK_MAIN();
