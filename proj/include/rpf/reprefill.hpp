// Attention-guided second prefill: key visual-token selection from the
// first prefill's per-layer query attention, a layer-wise second prefill
// whose read-only prefix switches from the full first-pass context to the
// selected tokens after the continuity layers, and composition of the
// decoding context, plus the ablation variants.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rpf/analysis.hpp"
#include "rpf/model.hpp"

namespace rpf {

enum class Variant : std::uint8_t {
  kBaseline,
  kReprefill,
  kEmbeddingAddition,
  kBlind,
  kRandom,
};
const char* variant_name(Variant v);
std::optional<Variant> variant_from_name(const std::string& name);

enum class AnalysisBlock : std::uint8_t { kFirstVisual, kSecondVisual };

struct RePrefillConfig {
  double rho = 0.8;
  double gamma = 0.1;
  int continuity_layers = 1;  // L_c, in [0, L]
  int fallback_top_k = 4;
  AnalysisBlock analysis_block = AnalysisBlock::kFirstVisual;
  std::uint64_t seed = 0;

  void validate(int num_layers) const;
};

struct KeyTokenSelection {
  double tau = 0.0;
  std::vector<double> ratios;        // r(i), length N_v
  std::vector<int> selected_indices; // strictly increasing, nonempty
  bool fallback_used = false;
};

// tau is the nearest-rank rho-quantile over all L*N_v attention values;
// r(i) counts layers with a^(l)(i) strictly above tau. Tokens with
// r(i) >= gamma are selected; if none qualify, the top fallback_top_k by
// layer-mean attention are taken instead.
KeyTokenSelection select_key_tokens(
    const std::vector<std::vector<double>>& per_layer_rows,
    const RePrefillConfig& cfg);

enum class PrefixMode : std::uint8_t {
  kLayered,     // full prefix through L_c layers, then [selected visual; T]
  kFullAlways,  // diagnostic: the layer switch never fires
  kEmpty,       // diagnostic: no prefix, copy placed at the original positions
};

struct SecondPrefillResult {
  HiddenStates hidden;      // trajectory of the re-encoded copy
  KVCache cache;            // per-layer k/v of the copy
  std::size_t copy_origin;  // position index of the first copy token
  std::size_t visual_begin; // visual span within the copy
  std::size_t visual_end;
};

// Re-encodes a fresh copy of the uncontextualized input behind a read-only
// per-layer prefix drawn from the first prefill's cache. The first cache is
// never modified.
SecondPrefillResult second_prefill(const Model& model,
                                   const SegmentedSequence& seq,
                                   const KVCache& first_cache,
                                   const std::vector<int>& selected_indices,
                                   const RePrefillConfig& cfg,
                                   PrefixMode mode = PrefixMode::kLayered);

struct ContextSpan {
  std::string label;
  std::size_t length;
};

struct DecodingContext {
  KVCache cache;
  std::vector<ContextSpan> spans;
  std::size_t length() const;
};

// Assembles the decoding context for a variant:
//   baseline            [S;V;T]
//   reprefill/blind/random  [S;V;T;Vhat]
//   embedding_addition  [S;V;T;V]
// `second` may be null only for baseline and embedding_addition.
DecodingContext compose_context(const SegmentedSequence& seq,
                                const KVCache& first_cache,
                                const SecondPrefillResult* second,
                                Variant variant);

// Maps greedily decoded (row token, column token) pairs to a grid cell.
struct CoordSpec {
  int row_token_base = 0;
  int col_token_base = 0;
  int grid_size = 0;

  // (-1,-1) when a token falls outside the coordinate vocabulary.
  std::optional<std::pair<int, int>> decode(int row_tok, int col_tok) const;
};

struct StageTimings {
  double prefill_ms = 0.0;
  double selection_ms = 0.0;
  double second_prefill_ms = 0.0;
  double decode_ms = 0.0;
};

// Closed-form token-position accounting for one sample.
struct TokenAccounting {
  std::size_t first_prefill_positions = 0;   // |x|
  std::size_t second_prefill_positions = 0;  // |x| when a second pass runs
  std::size_t prefix_full_len = 0;           // memory size for layers <= L_c
  std::size_t prefix_reduced_len = 0;        // memory size for layers > L_c
  int continuity_layers = 0;
  std::size_t requery_positions = 0;  // 1 for composed-context variants
  std::size_t decode_positions = 0;
};

struct RunResult {
  GroundingRecord record;
  KeyTokenSelection selection;
  std::vector<ContextSpan> layout;
  std::vector<int> decoded_tokens;  // [row token, col token]
  TokenAccounting accounting;
  StageTimings timings;
};

// Executes the full pipeline for one sample under the given variant:
// prefill, selection, second prefill, context composition, a query-position
// pass over the composed context, then two greedy coordinate decode steps.
RunResult run_reprefill(const Model& model, const SegmentedSequence& seq,
                        const VisualGrid& grid, const PixelBox& gt_box,
                        const CoordSpec& coords, const RePrefillConfig& cfg,
                        Variant variant, int sample_id = 0,
                        PrefixMode mode = PrefixMode::kLayered,
                        bool keep_attn = true);

}  // namespace rpf
