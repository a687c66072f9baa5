// Corpus generation, planted-model construction, zoom-in refinement and
// evaluation.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "rpf/toy_task.hpp"
#include "rpf/weights_io.hpp"

using namespace rpf;

TEST_CASE("generate_sample: construction and determinism") {
  const ToySample a = generate_sample(1, 4, 1, 6);
  int matches = 0;
  for (const auto& c : a.cells)
    if (c.primary == a.query_primary) ++matches;
  CHECK(matches == 1);
  CHECK(a.query_secondary == a.feature_vocab);  // none
  CHECK(a.gt_box.x1 - a.gt_box.x0 == a.cell_size);

  const ToySample b = generate_sample(1, 4, 1, 6);
  CHECK(a.cells.size() == b.cells.size());
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    CHECK(a.cells[i].primary == b.cells[i].primary);
    CHECK(a.cells[i].secondary == b.cells[i].secondary);
    CHECK(a.cells[i].salient == b.cells[i].salient);
  }
  CHECK(a.target_index == b.target_index);
}

TEST_CASE("1000 two-candidate samples all have one disambiguated target") {
  for (int i = 0; i < 1000; ++i) {
    const ToySample s = generate_sample(5000 + i, 8, 2, 6);
    int primaries = 0, disambiguated = 0, salient = 0;
    for (const auto& c : s.cells) {
      if (c.primary == s.query_primary) {
        ++primaries;
        if (c.secondary == s.query_secondary) ++disambiguated;
      }
      if (c.salient) ++salient;
    }
    REQUIRE(primaries == 2);
    REQUIRE(disambiguated == 1);
    REQUIRE(salient == 1);
    // no non-target cell carries the disambiguator
    for (std::size_t c = 0; c < s.cells.size(); ++c)
      if ((int)c != s.target_index)
        REQUIRE(s.cells[c].secondary != s.query_secondary);
  }
}

TEST_CASE("generator rejects bad parameters") {
  CHECK_THROWS(generate_sample(1, 1, 1, 6));
  CHECK_THROWS(generate_sample(1, 4, 0, 6));
  CHECK_THROWS(generate_sample(1, 4, 17, 6));  // > G*G
  CHECK_THROWS(generate_sample(1, 4, 3, 3));   // F <= ambiguity
}

TEST_CASE("corpus files round-trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "rpf_corpus_test";
  fs::create_directories(dir);
  const std::string path = (dir / "c.jsonl").string();

  const auto corpus = generate_corpus(9, 25, 8, 2, 6);
  write_corpus_jsonl(path, corpus);
  const auto loaded = read_corpus_jsonl(path);
  REQUIRE(loaded.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(loaded[i].target_index == corpus[i].target_index);
    CHECK(loaded[i].query_primary == corpus[i].query_primary);
    CHECK(loaded[i].gt_box.x0 == corpus[i].gt_box.x0);
    for (std::size_t c = 0; c < corpus[i].cells.size(); ++c)
      CHECK(loaded[i].cells[c].primary == corpus[i].cells[c].primary);
  }
  fs::remove_all(dir);
}

TEST_CASE("planted construction is deterministic and spec files round-trip") {
  PlantedModelSpec spec;
  spec.grid_size = 4;
  const Model a = make_planted_model(spec);
  const Model b = make_planted_model(spec);
  CHECK(a.weights().embedding == b.weights().embedding);
  CHECK(a.weights().head == b.weights().head);
  for (int l = 0; l < a.config().num_layers; ++l) {
    CHECK(a.weights().layers[l].wq == b.weights().layers[l].wq);
    CHECK(a.weights().layers[l].w1 == b.weights().layers[l].w1);
  }

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "rpf_spec_test";
  fs::create_directories(dir);
  const std::string path = (dir / "spec.kv").string();
  spec.prim_match_logit = 13.5;
  write_planted_spec(path, spec);
  const PlantedModelSpec loaded = read_planted_spec(path);
  CHECK(loaded.grid_size == 4);
  CHECK(loaded.prim_match_logit == 13.5);
  CHECK(loaded.unit == spec.unit);
  fs::remove_all(dir);
}

TEST_CASE("planted single-match behavior under both pipelines") {
  PlantedModelSpec spec;
  Model model = make_planted_model(spec);
  const PlantedVocab vocab = spec.vocab();
  RePrefillConfig cfg;

  for (int i = 0; i < 10; ++i) {
    const ToySample s = generate_sample(200 + i, spec.grid_size, 1,
                                        spec.feature_vocab, spec.cell_size);
    const SegmentedSequence seq = to_sequence(s, vocab);
    const RunResult base = run_reprefill(model, seq, s.grid(), s.gt_box,
                                         spec.coords(), cfg, Variant::kBaseline);
    const RunResult re = run_reprefill(model, seq, s.grid(), s.gt_box,
                                       spec.coords(), cfg, Variant::kReprefill);
    CHECK(base.record.correct);
    CHECK(re.record.correct);

    const PrefillResult pf = model.forward_prefill(seq);
    CHECK(argmax(pf.trace.layer_avg) == s.target_index);
  }
}

TEST_CASE("zoom crop: centered, corner-clipped, and the inverse mapping") {
  VisualGrid grid{8, 8, 8.0};  // 64 x 64 image

  const PixelBox centered = zoom_crop(grid, {32.0, 32.0});
  CHECK(centered.x0 == 16.0);
  CHECK(centered.y0 == 16.0);
  CHECK(centered.x1 == 48.0);
  CHECK(centered.y1 == 48.0);

  const PixelBox corner = zoom_crop(grid, {0.0, 0.0});
  CHECK(corner.x0 == 0.0);
  CHECK(corner.y0 == 0.0);
  CHECK(corner.x1 == 32.0);
  CHECK(corner.y1 == 32.0);

  const Vec2 mapped = zoom_map_back({16.0, 16.0}, {10.0, 20.0});
  CHECK(mapped.x == 21.0);
  CHECK(mapped.y == 26.0);

  CHECK_THROWS(zoom_crop(grid, {-1.0, 5.0}));
  CHECK_THROWS(zoom_crop(grid, {64.0, 5.0}));
}

TEST_CASE("zoomed samples replicate cells 2x2 and keep grid dimensions") {
  const ToySample s = generate_sample(77, 8, 1, 6);
  const PixelBox crop = zoom_crop(s.grid(), {32.0, 32.0});
  const ToySample z = zoom_sample(s, crop);
  CHECK(z.grid_size == 8);
  CHECK(z.cells.size() == 64);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      const auto& src = s.cells[(2 + r / 2) * 8 + (2 + c / 2)];
      const auto& dst = z.cells[r * 8 + c];
      CHECK(dst.primary == src.primary);
      CHECK(dst.secondary == src.secondary);
      CHECK(dst.salient == src.salient);
    }
  // gt box maps into crop coordinates at doubled scale
  CHECK(z.gt_box.x1 - z.gt_box.x0 == 2.0 * s.cell_size);
}

TEST_CASE("zoom-in refinement stays on target for single-match samples") {
  PlantedModelSpec spec;
  Model model = make_planted_model(spec);
  const PlantedVocab vocab = spec.vocab();
  RePrefillConfig cfg;

  int correct = 0;
  const auto corpus = generate_corpus(300, 20, spec.grid_size, 1,
                                      spec.feature_vocab, spec.cell_size);
  const EvalResult ev = evaluate(corpus, model, vocab, cfg, Variant::kBaseline,
                                 /*zoom_in=*/true, 2, false);
  for (const auto& run : ev.runs)
    if (run.record.correct) ++correct;
  CHECK(correct == 20);

  // idempotence on hits: a second zoom pass lands in the same cell
  const ToySample& s = corpus[0];
  const Vec2 pred = ev.runs[0].record.predicted;
  const Vec2 again = zoom_in_refine(s, pred, model, vocab, cfg,
                                    Variant::kBaseline);
  CHECK(inside_box(pred, s.gt_box));
  CHECK(inside_box(again, s.gt_box));
}

TEST_CASE("evaluate: all-correct, all-wrong and mixed accuracies") {
  PlantedModelSpec spec;
  Model model = make_planted_model(spec);
  const PlantedVocab vocab = spec.vocab();
  RePrefillConfig cfg;

  const auto singles = generate_corpus(400, 10, spec.grid_size, 1,
                                       spec.feature_vocab, spec.cell_size);
  CHECK(evaluate(singles, model, vocab, cfg, Variant::kBaseline).accuracy ==
        1.0);

  const auto ambiguous = generate_corpus(500, 10, spec.grid_size, 2,
                                         spec.feature_vocab, spec.cell_size);
  CHECK(evaluate(ambiguous, model, vocab, cfg, Variant::kBaseline).accuracy ==
        0.0);

  std::vector<ToySample> mixed;
  mixed.insert(mixed.end(), singles.begin(), singles.begin() + 6);
  mixed.insert(mixed.end(), ambiguous.begin(), ambiguous.begin() + 4);
  CHECK(evaluate(mixed, model, vocab, cfg, Variant::kBaseline).accuracy ==
        doctest::Approx(0.6));

  CHECK_THROWS(evaluate({}, model, vocab, cfg, Variant::kBaseline));
}

TEST_CASE("evaluation is independent of the worker count") {
  PlantedModelSpec spec;
  Model model = make_planted_model(spec);
  const PlantedVocab vocab = spec.vocab();
  RePrefillConfig cfg;
  const auto corpus = generate_corpus(600, 12, spec.grid_size, 2,
                                      spec.feature_vocab, spec.cell_size);

  const EvalResult one = evaluate(corpus, model, vocab, cfg,
                                  Variant::kReprefill, false, 1);
  const EvalResult four = evaluate(corpus, model, vocab, cfg,
                                   Variant::kReprefill, false, 4);
  CHECK(one.accuracy == four.accuracy);
  REQUIRE(one.runs.size() == four.runs.size());
  for (std::size_t i = 0; i < one.runs.size(); ++i) {
    CHECK(one.runs[i].decoded_tokens == four.runs[i].decoded_tokens);
    CHECK(one.runs[i].record.series[0].sigma2 ==
          four.runs[i].record.series[0].sigma2);
  }
}
