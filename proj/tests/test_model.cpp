// Model runtime: KV-cache consistency against dense re-forward, the
// attention tap against a brute-force oracle, causality, determinism, and
// the error paths.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "rpf/model.hpp"
#include "rpf/toy_task.hpp"
#include "rpf/weights_io.hpp"
#include "support/dense_oracle.hpp"
#include "support/random_model.hpp"

using namespace rpf;

namespace {

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1.0});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace

TEST_CASE("prefill fills every layer to the sequence length") {
  Model m = testutil::make_random_model(1, 3, 2, 16, 40, 64);
  SegmentedSequence seq = testutil::make_random_seq(2, 40, 4, 16, 5);
  PrefillResult res = m.forward_prefill(seq);
  CHECK(res.cache.size() == 25);
  CHECK(res.trace.step == 0);
  CHECK(res.trace.per_layer.size() == 3);
  CHECK(res.hidden.layer_in.size() == 4);
  // blocks cover S, V, T for all layers
  CHECK(res.hidden.layer_in[0].rows == 25);
}

TEST_CASE("decode_step extends the cache by one and matches dense re-forward") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 8; ++trial) {
    const int layers = 1 + (int)(rng() % 4);
    const int heads = 1 + (int)(rng() % 2);
    const int dim = heads * (4 + 2 * (int)(rng() % 6));
    const int vocab = 30 + (int)(rng() % 30);
    Model m = testutil::make_random_model(rng(), layers, heads, dim, vocab, 96);
    SegmentedSequence seq = testutil::make_random_seq(rng(), vocab, 3, 9, 4);

    PrefillResult pf = m.forward_prefill(seq);
    KVCache cache = pf.cache;
    std::vector<int> tokens = seq.flat();

    int next = argmax(pf.query_logits);
    for (int step = 1; step <= 3; ++step) {
      tokens.push_back(next);
      DecodeResult dec = m.decode_step(next, cache, step,
                                       {seq.visual_begin(), seq.visual_end()});
      CHECK(cache.size() == seq.size() + step);

      const oracle::DenseTrace dense = oracle::dense_forward(m, tokens, 0);
      CHECK(max_rel_err(dec.logits, dense.last_logits) < 1e-6);
      next = dec.next_token;
    }
  }
}

TEST_CASE("two decode steps produce trace rows t=1 and t=2") {
  Model m = testutil::make_random_model(5, 2, 2, 12, 32, 64);
  SegmentedSequence seq = testutil::make_random_seq(6, 32, 2, 8, 3);
  PrefillResult pf = m.forward_prefill(seq);
  KVCache cache = pf.cache;
  TapSpan span{seq.visual_begin(), seq.visual_end()};
  DecodeResult d1 = m.decode_step(argmax(pf.query_logits), cache, 1, span);
  DecodeResult d2 = m.decode_step(d1.next_token, cache, 2, span);
  CHECK(d1.trace.step == 1);
  CHECK(d2.trace.step == 2);
}

TEST_CASE("attention tap: one-hot and head-averaging examples") {
  // one head fully on visual column 3 (span begins at column 2)
  std::vector<std::vector<std::vector<double>>> rows(1);
  rows[0].push_back({0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0});
  TraceRow one = attention_tap(rows, {2, 8}, 0);
  CHECK(one.layer_avg[3] == 1.0);

  // two heads, one-hot at visual 3 and at visual 5
  rows[0].push_back({0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0});
  TraceRow two = attention_tap(rows, {2, 8}, 0);
  CHECK(two.layer_avg[3] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(two.layer_avg[5] == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS(attention_tap(rows, {4, 4}, 0));
}

TEST_CASE("attention tap matches double-loop averaging oracle") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    const int layers = 1 + (int)(rng() % 4);
    const int heads = 1 + (int)(rng() % 4);
    const std::size_t len = 6 + rng() % 20;
    const std::size_t begin = rng() % 3;
    const std::size_t end = begin + 2 + rng() % (len - begin - 2);

    std::vector<std::vector<std::vector<double>>> rows(layers);
    for (auto& layer : rows) {
      layer.resize(heads);
      for (auto& head : layer) {
        head.resize(len);
        double sum = 0.0;
        for (double& v : head) {
          v = uni(rng);
          sum += v;
        }
        for (double& v : head) v /= sum;
      }
    }

    TraceRow got = attention_tap(rows, {begin, end}, 0);

    // brute force: average heads, restrict, renormalize, then average layers
    const std::size_t width = end - begin;
    std::vector<double> avg(width, 0.0);
    for (int l = 0; l < layers; ++l) {
      std::vector<double> layer(width, 0.0);
      for (int h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < width; ++i)
          layer[i] += rows[l][h][begin + i] / heads;
      double sum = 0.0;
      for (double v : layer) sum += v;
      for (std::size_t i = 0; i < width; ++i) {
        layer[i] /= sum;
        avg[i] += layer[i] / layers;
        CHECK(std::abs(got.per_layer[l][i] - layer[i]) < 1e-9);
      }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      CHECK(std::abs(got.layer_avg[i] - avg[i]) < 1e-9);
      total += got.layer_avg[i];
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("causality: perturbing token j leaves earlier hidden states bit-identical") {
  Model m = testutil::make_random_model(21, 3, 2, 16, 50, 64);
  SegmentedSequence seq = testutil::make_random_seq(22, 50, 3, 10, 4);
  PrefillResult a = m.forward_prefill(seq);

  SegmentedSequence perturbed = seq;
  const std::size_t j = 9;  // inside the visual block
  perturbed.visual[j - seq.visual_begin()] =
      (perturbed.visual[j - seq.visual_begin()] + 1) % 50;
  PrefillResult b = m.forward_prefill(perturbed);

  for (std::size_t l = 0; l < a.hidden.layer_in.size(); ++l)
    for (std::size_t p = 0; p < j; ++p)
      for (std::size_t c = 0; c < (std::size_t)m.config().model_dim; ++c)
        REQUIRE(a.hidden.layer_in[l].at(p, c) == b.hidden.layer_in[l].at(p, c));
}

TEST_CASE("determinism: identical weights and inputs give bit-identical runs") {
  Model m1 = testutil::make_random_model(5, 2, 2, 16, 40, 64);
  Model m2 = testutil::make_random_model(5, 2, 2, 16, 40, 64);
  SegmentedSequence seq = testutil::make_random_seq(8, 40, 3, 9, 4);

  PrefillResult r1 = m1.forward_prefill(seq);
  PrefillResult r2 = m2.forward_prefill(seq);
  CHECK(r1.query_logits == r2.query_logits);
  CHECK(r1.cache == r2.cache);
}

TEST_CASE("error paths: bad config, long sequence, bad token, layer mismatch") {
  CHECK_THROWS(ModelConfig{0, 1, 8, 10, 32}.validate());
  CHECK_THROWS(ModelConfig{1, 3, 8, 10, 32}.validate());  // 8 % 3 != 0

  Model m = testutil::make_random_model(31, 2, 2, 12, 20, 16);
  SegmentedSequence long_seq = testutil::make_random_seq(1, 20, 4, 10, 4);
  CHECK_THROWS(m.forward_prefill(long_seq));

  SegmentedSequence bad = testutil::make_random_seq(2, 20, 2, 6, 2);
  bad.visual[0] = 20;  // out of vocab
  CHECK_THROWS(m.forward_prefill(bad));

  SegmentedSequence ok = testutil::make_random_seq(3, 20, 2, 6, 2);
  PrefillResult pf = m.forward_prefill(ok);
  KVCache cache = pf.cache;
  cache.append(0, pf.hidden.last.row(0), pf.hidden.last.row(0));
  CHECK_THROWS(cache.size());

  KVCache empty(2, 12);
  CHECK_THROWS(m.decode_step(0, empty, 1, {0, 4}));
}

TEST_CASE("weight files round-trip bit-exactly") {
  Model m = testutil::make_random_model(77, 2, 2, 10, 25, 48, 20);
  const std::string path = "test_weights_roundtrip.json";
  save_model(m, path);
  Model loaded = load_model(path);
  CHECK(loaded.config().num_layers == 2);
  CHECK(loaded.ffn_dim() == 20);
  CHECK(loaded.weights().embedding == m.weights().embedding);
  CHECK(loaded.weights().head == m.weights().head);
  for (int l = 0; l < 2; ++l) {
    CHECK(loaded.weights().layers[l].wq == m.weights().layers[l].wq);
    CHECK(loaded.weights().layers[l].w2 == m.weights().layers[l].w2);
  }
  std::remove(path.c_str());
}

TEST_CASE("planted model routes prefill attention to the matching patch") {
  PlantedModelSpec spec;
  spec.grid_size = 4;  // 16 visual tokens, match at index 7
  Model m = make_planted_model(spec);
  const PlantedVocab vocab = spec.vocab();

  ToySample s = generate_sample(5, 4, 1, spec.feature_vocab, spec.cell_size);
  // Move the single matching cell to index 7.
  std::swap(s.cells[s.target_index], s.cells[7]);
  s.target_index = 7;
  s.gt_box = s.grid().cell_box(7 / 4, 7 % 4);

  PrefillResult pf = m.forward_prefill(to_sequence(s, vocab));
  CHECK(argmax(pf.trace.layer_avg) == 7);
}
