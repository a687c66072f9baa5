#include "rpf/reprefill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace rpf {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kReprefill: return "reprefill";
    case Variant::kEmbeddingAddition: return "embedding_addition";
    case Variant::kBlind: return "blind";
    case Variant::kRandom: return "random";
  }
  return "?";
}

std::optional<Variant> variant_from_name(const std::string& name) {
  if (name == "baseline") return Variant::kBaseline;
  if (name == "reprefill") return Variant::kReprefill;
  if (name == "embedding_addition") return Variant::kEmbeddingAddition;
  if (name == "blind") return Variant::kBlind;
  if (name == "random") return Variant::kRandom;
  return std::nullopt;
}

void RePrefillConfig::validate(int num_layers) const {
  if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("rho must be in [0,1]");
  if (gamma < 0.0 || gamma > 1.0)
    throw std::invalid_argument("gamma must be in [0,1]");
  if (continuity_layers < 0 || continuity_layers > num_layers)
    throw std::invalid_argument("continuity_layers must be in [0, L]");
  if (fallback_top_k < 1)
    throw std::invalid_argument("fallback_top_k must be positive");
}

KeyTokenSelection select_key_tokens(
    const std::vector<std::vector<double>>& per_layer_rows,
    const RePrefillConfig& cfg) {
  if (per_layer_rows.empty())
    throw std::invalid_argument("need at least one layer row");
  const std::size_t num_layers = per_layer_rows.size();
  const std::size_t n_v = per_layer_rows[0].size();
  if (n_v == 0) throw std::invalid_argument("empty attention rows");

  std::vector<double> pool;
  pool.reserve(num_layers * n_v);
  for (const auto& row : per_layer_rows) {
    if (row.size() != n_v)
      throw std::invalid_argument("ragged per-layer attention rows");
    pool.insert(pool.end(), row.begin(), row.end());
  }
  std::sort(pool.begin(), pool.end());

  // Nearest-rank quantile: tau = pool[ceil(rho*M)] with 1-based indexing,
  // rho = 0 selecting the minimum.
  const std::size_t m = pool.size();
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(cfg.rho * static_cast<double>(m)));
  if (rank < 1) rank = 1;
  if (rank > m) rank = m;

  KeyTokenSelection sel;
  sel.tau = pool[rank - 1];
  sel.ratios.assign(n_v, 0.0);
  for (std::size_t i = 0; i < n_v; ++i) {
    int count = 0;
    for (const auto& row : per_layer_rows)
      if (row[i] > sel.tau) ++count;
    sel.ratios[i] = static_cast<double>(count) / static_cast<double>(num_layers);
  }
  for (std::size_t i = 0; i < n_v; ++i)
    if (sel.ratios[i] >= cfg.gamma) sel.selected_indices.push_back(static_cast<int>(i));

  if (sel.selected_indices.empty()) {
    sel.fallback_used = true;
    std::vector<double> mean(n_v, 0.0);
    for (const auto& row : per_layer_rows)
      for (std::size_t i = 0; i < n_v; ++i) mean[i] += row[i];
    std::vector<int> order(n_v);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return mean[a] > mean[b]; });
    const std::size_t k = std::min<std::size_t>(cfg.fallback_top_k, n_v);
    sel.selected_indices.assign(order.begin(), order.begin() + k);
    std::sort(sel.selected_indices.begin(), sel.selected_indices.end());
  }
  return sel;
}

SecondPrefillResult second_prefill(const Model& model,
                                   const SegmentedSequence& seq,
                                   const KVCache& first_cache,
                                   const std::vector<int>& selected_indices,
                                   const RePrefillConfig& cfg,
                                   PrefixMode mode) {
  const ModelConfig& c = model.config();
  cfg.validate(c.num_layers);
  const std::size_t n = seq.size();
  if (first_cache.size() != n)
    throw std::invalid_argument("first cache does not cover the sequence");
  const std::size_t n_v = seq.visual.size();
  for (int idx : selected_indices)
    if (idx < 0 || static_cast<std::size_t>(idx) >= n_v)
      throw std::out_of_range("selected visual index out of range");
  if (mode == PrefixMode::kLayered && selected_indices.empty())
    throw std::invalid_argument("selection must be nonempty");

  SecondPrefillResult res;
  res.copy_origin = mode == PrefixMode::kEmpty ? 0 : n;
  res.visual_begin = seq.visual_begin();
  res.visual_end = seq.visual_end();
  if (res.copy_origin + n > static_cast<std::size_t>(c.max_positions))
    throw std::invalid_argument("sequence too long for second prefill");

  std::vector<std::size_t> full_rows(n);
  std::iota(full_rows.begin(), full_rows.end(), 0);
  std::vector<std::size_t> reduced_rows;
  reduced_rows.reserve(selected_indices.size() + seq.instruction.size());
  for (int idx : selected_indices)
    reduced_rows.push_back(seq.visual_begin() + static_cast<std::size_t>(idx));
  for (std::size_t p = seq.visual_end(); p < n; ++p) reduced_rows.push_back(p);

  const int d = c.model_dim;
  const std::vector<int> tokens = seq.flat();
  Mat hidden(n, d);
  for (std::size_t p = 0; p < n; ++p) {
    const std::vector<double> x = model.embed(tokens[p], res.copy_origin + p);
    std::copy(x.begin(), x.end(), hidden.row(p));
  }

  res.cache = KVCache(c.num_layers, d);
  res.hidden.layer_in.reserve(c.num_layers + 1);
  for (int l = 0; l < c.num_layers; ++l) {
    const std::vector<std::size_t>* prefix = nullptr;
    switch (mode) {
      case PrefixMode::kEmpty: break;
      case PrefixMode::kFullAlways: prefix = &full_rows; break;
      case PrefixMode::kLayered:
        prefix = l < cfg.continuity_layers ? &full_rows : &reduced_rows;
        break;
    }
    res.hidden.layer_in.push_back(hidden);
    model.run_layer(l, hidden, res.cache, 0,
                    prefix != nullptr ? &first_cache : nullptr, prefix,
                    nullptr);
  }
  res.hidden.layer_in.push_back(hidden);

  res.hidden.last = Mat(n, d);
  for (std::size_t p = 0; p < n; ++p)
    rms_normalize(hidden.row(p), model.weights().final_norm.data(),
                  res.hidden.last.row(p), d);
  return res;
}

std::size_t DecodingContext::length() const {
  std::size_t total = 0;
  for (const ContextSpan& s : spans) total += s.length;
  return total;
}

namespace {

void append_rows(KVCache& dst, const KVCache& src, std::size_t begin,
                 std::size_t end) {
  for (int l = 0; l < dst.layers(); ++l)
    for (std::size_t p = begin; p < end; ++p)
      dst.append(l, src.key(l, p), src.value(l, p));
}

}  // namespace

DecodingContext compose_context(const SegmentedSequence& seq,
                                const KVCache& first_cache,
                                const SecondPrefillResult* second,
                                Variant variant) {
  const std::size_t n = seq.size();
  if (first_cache.size() != n)
    throw std::invalid_argument("first cache does not cover the sequence");

  DecodingContext ctx;
  ctx.cache = KVCache(first_cache.layers(), first_cache.dim());
  append_rows(ctx.cache, first_cache, 0, n);
  ctx.spans = {{"S", seq.system.size()},
               {"V", seq.visual.size()},
               {"T", seq.instruction.size()}};

  switch (variant) {
    case Variant::kBaseline:
      break;
    case Variant::kEmbeddingAddition:
      append_rows(ctx.cache, first_cache, seq.visual_begin(), seq.visual_end());
      ctx.spans.push_back({"V", seq.visual.size()});
      break;
    case Variant::kReprefill:
    case Variant::kBlind:
    case Variant::kRandom:
      if (second == nullptr)
        throw std::invalid_argument("variant requires a second prefill");
      append_rows(ctx.cache, second->cache, second->visual_begin,
                  second->visual_end);
      ctx.spans.push_back(
          {"Vhat", second->visual_end - second->visual_begin});
      break;
  }
  return ctx;
}

std::optional<std::pair<int, int>> CoordSpec::decode(int row_tok,
                                                     int col_tok) const {
  const int r = row_tok - row_token_base;
  const int c = col_tok - col_token_base;
  if (r < 0 || r >= grid_size || c < 0 || c >= grid_size) return std::nullopt;
  return std::make_pair(r, c);
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

StepStat make_stat(Stage stage, const TraceRow& trace, const VisualGrid& grid,
                   Vec2 gt_center, bool keep_attn) {
  StepStat s;
  s.stage = stage;
  s.step = trace.step;
  const CentroidResult cv = centroid_and_variance(trace.layer_avg, grid);
  s.sigma2 = cv.sigma2;
  s.mu = cv.mu;
  s.d = centroid_deviation(cv.mu, gt_center, grid.diagonal());
  if (keep_attn) s.attn = trace.layer_avg;
  return s;
}

}  // namespace

RunResult run_reprefill(const Model& model, const SegmentedSequence& seq,
                        const VisualGrid& grid, const PixelBox& gt_box,
                        const CoordSpec& coords, const RePrefillConfig& cfg,
                        Variant variant, int sample_id, PrefixMode mode,
                        bool keep_attn) {
  cfg.validate(model.config().num_layers);
  const Vec2 gt_center = gt_box.center();
  const std::size_t n_v = seq.visual.size();

  RunResult out;
  out.record.sample_id = sample_id;
  out.record.variant = variant_name(variant);
  out.record.gt_box = gt_box;
  out.accounting.first_prefill_positions = seq.size();
  out.accounting.continuity_layers = cfg.continuity_layers;

  auto t0 = Clock::now();
  PrefillResult first = model.forward_prefill(seq);
  out.timings.prefill_ms = ms_since(t0);
  out.record.series.push_back(
      make_stat(Stage::kPrefill, first.trace, grid, gt_center, keep_attn));

  // Step 2: key token selection. The attention-based selection always runs
  // so the random variant can match its size.
  t0 = Clock::now();
  out.selection = select_key_tokens(first.trace.per_layer, cfg);
  out.timings.selection_ms = ms_since(t0);

  std::vector<int> effective = out.selection.selected_indices;
  if (variant == Variant::kBlind) {
    effective.resize(n_v);
    std::iota(effective.begin(), effective.end(), 0);
  } else if (variant == Variant::kRandom) {
    std::vector<int> all(n_v);
    std::iota(all.begin(), all.end(), 0);
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(all.begin(), all.end(), rng);
    effective.assign(all.begin(),
                     all.begin() + out.selection.selected_indices.size());
    std::sort(effective.begin(), effective.end());
  }

  const bool wants_second = variant == Variant::kReprefill ||
                            variant == Variant::kBlind ||
                            variant == Variant::kRandom;

  std::optional<SecondPrefillResult> second;
  if (wants_second) {
    t0 = Clock::now();
    second = second_prefill(model, seq, first.cache, effective, cfg, mode);
    out.timings.second_prefill_ms = ms_since(t0);
    out.accounting.second_prefill_positions = seq.size();
    out.accounting.prefix_full_len = seq.size();
    out.accounting.prefix_reduced_len =
        effective.size() + seq.instruction.size();
  }

  t0 = Clock::now();
  int y1 = 0;
  KVCache ctx_cache;
  std::size_t next_pos = 0;
  TapSpan decode_span{seq.visual_begin(), seq.visual_end()};

  if (variant == Variant::kBaseline) {
    out.layout = {{"S", seq.system.size()},
                  {"V", seq.visual.size()},
                  {"T", seq.instruction.size()}};
    ctx_cache = std::move(first.cache);
    next_pos = seq.size();
    y1 = argmax(first.query_logits);
  } else {
    DecodingContext ctx = compose_context(
        seq, first.cache, second ? &*second : nullptr, variant);
    out.layout = ctx.spans;
    ctx_cache = std::move(ctx.cache);
    const std::size_t ctx_len = seq.size() + n_v;
    if (cfg.analysis_block == AnalysisBlock::kSecondVisual)
      decode_span = {seq.size(), seq.size() + n_v};

    // Query-position pass over the composed context: re-feed the final
    // instruction token, trace its attention, take its logits for y1.
    const int query_token = seq.instruction.back();
    DecodeResult requery =
        model.decode_step_at(query_token, ctx_cache, ctx_len, 0, decode_span);
    out.record.series.push_back(make_stat(Stage::kReprefill, requery.trace,
                                          grid, gt_center, keep_attn));
    out.accounting.requery_positions = 1;
    next_pos = ctx_len + 1;
    y1 = requery.next_token;
  }

  DecodeResult d1 = model.decode_step_at(y1, ctx_cache, next_pos, 1, decode_span);
  out.record.series.push_back(
      make_stat(Stage::kDecode, d1.trace, grid, gt_center, keep_attn));
  const int y2 = d1.next_token;
  DecodeResult d2 =
      model.decode_step_at(y2, ctx_cache, next_pos + 1, 2, decode_span);
  out.record.series.push_back(
      make_stat(Stage::kDecode, d2.trace, grid, gt_center, keep_attn));
  out.timings.decode_ms = ms_since(t0);

  out.decoded_tokens = {y1, y2};
  out.accounting.decode_positions = 2;

  const auto cell = coords.decode(y1, y2);
  if (cell) {
    out.record.predicted = grid.cell_center(cell->first * grid.cols + cell->second);
  } else {
    out.record.predicted = {-1.0, -1.0};
  }
  out.record.correct = inside_box(out.record.predicted, gt_box);
  return out;
}

}  // namespace rpf
