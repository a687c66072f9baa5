// Minimal decoder-only transformer with KV caching, greedy decoding and a
// per-layer attention tap at the query position.
//
// Architecture (fixed): token embedding scaled by sqrt(d) plus sinusoidal
// absolute positions, pre-norm blocks with RMS normalization, multi-head
// causal self-attention, a single ReLU feed-forward per layer, final RMS
// norm, linear head. No biases anywhere; all math in double precision.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rpf/mat.hpp"

namespace rpf {

struct ModelConfig {
  int num_layers = 0;     // L
  int num_heads = 0;      // H
  int model_dim = 0;      // d, divisible by H
  int vocab_size = 0;
  int max_positions = 0;

  int head_dim() const { return model_dim / num_heads; }
  void validate() const;  // throws std::invalid_argument on a bad config
};

// Token ids partitioned into contiguous system / visual / instruction
// segments, in that order.
struct SegmentedSequence {
  std::vector<int> system;
  std::vector<int> visual;
  std::vector<int> instruction;

  std::size_t size() const {
    return system.size() + visual.size() + instruction.size();
  }
  std::size_t visual_begin() const { return system.size(); }
  std::size_t visual_end() const { return system.size() + visual.size(); }
  std::vector<int> flat() const;
};

// Per-layer key/value memory. Layout per layer: row-major [len][d] with the
// head h sub-vector occupying columns [h*dh, (h+1)*dh).
class KVCache {
 public:
  KVCache() = default;
  KVCache(int num_layers, int model_dim);

  void append(int layer, const double* k, const double* v);
  std::size_t size() const;  // common length; throws if layers disagree
  int layers() const { return static_cast<int>(keys_.size()); }
  int dim() const { return dim_; }

  const double* key(int layer, std::size_t pos) const;
  const double* value(int layer, std::size_t pos) const;

  bool operator==(const KVCache& other) const = default;

 private:
  int dim_ = 0;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> vals_;
  std::vector<std::size_t> len_;
};

// One tap result: the query-position attention over a visual span at a
// single generation step. per_layer[l] is head-averaged, restricted to the
// span and renormalized to sum 1; layer_avg is the mean over layers.
struct TraceRow {
  int step = 0;
  std::vector<std::vector<double>> per_layer;
  std::vector<double> layer_avg;
};

// Hidden-state trajectory of one forward pass: layer_in[l] holds the vectors
// entering layer l for l in [0, L), with layer_in[0] the scaled embeddings
// plus positions and layer_in[L] the vectors leaving the last block; last
// holds the post-final-norm output.
struct HiddenStates {
  std::vector<Mat> layer_in;
  Mat last;
};

struct PrefillResult {
  std::vector<double> query_hidden;  // final-position, post-final-norm
  std::vector<double> query_logits;
  KVCache cache;
  TraceRow trace;          // step 0
  HiddenStates hidden;     // all positions, all layers
};

struct DecodeResult {
  int next_token = 0;
  std::vector<double> logits;
  TraceRow trace;
};

// Column range of the cache that the attention tap is measured over.
struct TapSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
};

struct Weights {
  Mat embedding;  // [vocab][d]
  struct Layer {
    std::vector<double> attn_norm;  // [d]
    Mat wq, wk, wv, wo;             // [d][d]
    std::vector<double> ffn_norm;   // [d]
    Mat w1;                         // [d_ff][d]
    Mat w2;                         // [d][d_ff]
  };
  std::vector<Layer> layers;
  std::vector<double> final_norm;  // [d]
  Mat head;                        // [vocab][d]
};

// Head-averages the raw per-head post-softmax rows, restricts them to the
// span and renormalizes each layer to sum 1. rows[l][h] has one entry per
// cache position. Throws on an empty span.
TraceRow attention_tap(const std::vector<std::vector<std::vector<double>>>& rows,
                       TapSpan span, int step);

// out = x .* w / sqrt(mean(x^2) + eps)
void rms_normalize(const double* x, const double* w, double* out, int d);

// Sinusoidal absolute position encoding, written into out[0..d).
void positional_encoding(std::size_t pos, int d, double* out);

class Model {
 public:
  Model(ModelConfig config, Weights weights);

  const ModelConfig& config() const { return config_; }
  const Weights& weights() const { return weights_; }
  int ffn_dim() const { return static_cast<int>(weights_.layers[0].w1.rows); }

  // Single forward pass over the full sequence. The tap is taken at the
  // final position over the sequence's visual span.
  PrefillResult forward_prefill(const SegmentedSequence& seq) const;

  // Appends one token at position cache.size() and returns greedy argmax
  // logits plus the tap row over `span`.
  DecodeResult decode_step(int prev_token, KVCache& cache, int step,
                           TapSpan span) const;

  // decode_step with an explicit position index, for contexts whose cache
  // length and positional indexing are managed by the caller.
  DecodeResult decode_step_at(int prev_token, KVCache& cache, std::size_t pos,
                              int step, TapSpan span) const;

  // Embedding + position vector for one token at one position.
  std::vector<double> embed(int token, std::size_t pos) const;

  void project_qkv(int layer, const double* normed, double* q, double* k,
                   double* v) const;

  // Runs decoder layer `l` over the rows of `hidden`, appending their k/v
  // to `own` (which already holds `base` earlier rows of this stream).
  // Attention for row p covers, in order, `prefix_rows` of `prefix_cache`
  // (read-only memory, may be null) followed by rows 0..base+p of `own`.
  // When tap != nullptr the last row's post-softmax rows are stored per head.
  void run_layer(int l, Mat& hidden, KVCache& own, std::size_t base,
                 const KVCache* prefix_cache,
                 const std::vector<std::size_t>* prefix_rows,
                 std::vector<std::vector<double>>* tap) const;

 private:
  ModelConfig config_;
  Weights weights_;
};

int argmax(const std::vector<double>& v);

}  // namespace rpf
