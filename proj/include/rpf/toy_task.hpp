// Synthetic GUI-grounding task: seeded sample generation over a patch grid,
// an analytically constructed ("planted") model whose attention routing and
// coordinate decoding are known in closed form, zoom-in refinement, and
// corpus evaluation.
//
// Task shape: each grid cell carries a primary feature, an optional
// secondary feature and a salience flag. The instruction names a primary
// feature and, for ambiguous samples, a secondary feature that only the
// target cell carries. Distractor candidates are salient, which biases the
// planted model's first-pass attention toward them; resolving the ambiguity
// requires the visual tokens to see the instruction, which the causal mask
// forbids in the first pass and the second prefill's prefix enables.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rpf/analysis.hpp"
#include "rpf/model.hpp"
#include "rpf/reprefill.hpp"

namespace rpf {

struct ToySample {
  int grid_size = 0;       // G, cells per side
  double cell_size = 8.0;  // pixels
  struct Cell {
    int primary = 0;
    int secondary = 0;  // == feature_vocab means "none"
    bool salient = false;
  };
  std::vector<Cell> cells;  // row-major G*G
  int feature_vocab = 0;
  int query_primary = 0;
  int query_secondary = 0;  // == feature_vocab means "none"
  int target_index = 0;     // row-major cell index, -1 if out of frame
  PixelBox gt_box;
  int ambiguity_count = 1;
  std::uint64_t seed = 0;

  VisualGrid grid() const {
    return {grid_size, grid_size, cell_size};
  }
};

// Deterministic for a fixed seed. Candidate cells occupy pairwise distinct
// rows and columns; distractor candidates are salient and carry a secondary
// feature different from the query's; non-candidate cells draw their
// primary feature uniformly from the non-target features.
ToySample generate_sample(std::uint64_t seed, int grid_size,
                          int ambiguity_count, int feature_vocab,
                          double cell_size = 8.0);

std::vector<ToySample> generate_corpus(std::uint64_t seed, int count,
                                       int grid_size, int ambiguity_count,
                                       int feature_vocab,
                                       double cell_size = 8.0);

void write_corpus_jsonl(const std::string& path,
                        const std::vector<ToySample>& corpus);
std::vector<ToySample> read_corpus_jsonl(const std::string& path);

// Token-id layout shared by the planted model and the sequence builder.
// Visual ids encode (primary, secondary, salient, row, col) so a cell's
// identity is recoverable from its token alone.
struct PlantedVocab {
  int feature_vocab = 0;  // F
  int grid_size = 0;      // G

  int sys() const { return 0; }
  int tmark() const { return 1; }
  int row_token(int r) const { return 2 + r; }
  int col_token(int c) const { return 2 + grid_size + c; }
  int query_token(int primary, int secondary) const;
  int visual_token(int primary, int secondary, bool salient, int row,
                   int col) const;
  int size() const;
};

SegmentedSequence to_sequence(const ToySample& sample, const PlantedVocab& vocab);

struct PlantedModelSpec {
  int feature_vocab = 6;
  int grid_size = 8;
  int num_layers = 6;
  double cell_size = 8.0;

  // Embedding magnitude of content channels after the sqrt(d) scale. Large
  // relative to the unit-bounded positional wave so routing margins hold.
  double unit = 64.0;

  // Attention routing targets, in logit units.
  double prim_match_logit = 12.0;   // query primary vs. cell primary
  double salient_gap_logit = 1.0;   // net first-pass bias toward salient cells
  double probe_logit = 30.0;        // visual tokens -> query token
  double probe_decode_logit = 18.0; // coordinate tokens -> query token; kept
                                    // below the winner cell's total pull
  double coord_match_logit = 12.0;  // row/col token vs. cell row/col
  double salient_decode_gap = 10.0; // extra salience bias for coordinate tokens
  double conf_read_logit = 24.0;    // at nominal confirmation, all queries
  double conf_decode_extra = 20.0;  // extra for coordinate tokens

  // Value-path and head scales.
  double marginal_write = 8.0;   // attended cell mass -> AROW/ACOL per layer
  double received_write = 32.0;  // query features -> RP/RS on a full probe
  double forward_write = 3.0;    // AROW/ACOL forwarding on a probe
  double confirm_write = 8.0;    // CONF per fired gate
  double phase_boost = 10.0;     // readout row/col turn discriminator

  PlantedVocab vocab() const { return {feature_vocab, grid_size}; }
  CoordSpec coords() const;
  void validate() const;
};

// Writes/reads the spec as a key-value text document (one `key = value`
// per line).
void write_planted_spec(const std::string& path, const PlantedModelSpec& spec);
PlantedModelSpec read_planted_spec(const std::string& path);

// Deterministic analytic construction; no randomness involved.
Model make_planted_model(const PlantedModelSpec& spec);

// Square crop of side min(W,H)/2 centered on the prediction, snapped down
// to the cell lattice and clipped to the image.
PixelBox zoom_crop(const VisualGrid& grid, Vec2 prediction);

// final = crop_origin + refined / 2
Vec2 zoom_map_back(Vec2 crop_origin, Vec2 refined);

// The cropped sub-grid with every cell replicated into a 2x2 block, so the
// zoomed sample has the same grid dimensions as the original. gt_box is
// mapped into crop coordinates (and may land outside the frame).
ToySample zoom_sample(const ToySample& sample, const PixelBox& crop);

// One full pipeline pass over the zoomed crop; returns the prediction
// mapped back to original image coordinates.
Vec2 zoom_in_refine(const ToySample& sample, Vec2 prediction,
                    const Model& model, const PlantedVocab& vocab,
                    const RePrefillConfig& cfg, Variant variant);

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::vector<RunResult> runs;  // ordered by sample index
};

// Runs the pipeline over a corpus. Samples may be processed by `threads`
// workers; results are collected in sample order either way.
EvalResult evaluate(const std::vector<ToySample>& corpus, const Model& model,
                    const PlantedVocab& vocab, const RePrefillConfig& cfg,
                    Variant variant, bool zoom_in = false, int threads = 1,
                    bool keep_attn = true);

}  // namespace rpf
