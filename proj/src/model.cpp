#include "rpf/model.hpp"

#include <cmath>
#include <stdexcept>

#include "rpf/kernels.hpp"

namespace rpf {

namespace {
constexpr double kNormEps = 1e-8;
}

void rms_normalize(const double* x, const double* w, double* out, int d) {
  const double ms = kern::sumsq(x, d) / d;
  const double inv = 1.0 / std::sqrt(ms + kNormEps);
  for (int i = 0; i < d; ++i) out[i] = x[i] * w[i] * inv;
}

void ModelConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("num_layers must be >= 1");
  if (num_heads < 1) throw std::invalid_argument("num_heads must be >= 1");
  if (model_dim < 1 || model_dim % num_heads != 0)
    throw std::invalid_argument("model_dim must be positive and divisible by num_heads");
  if (vocab_size < 1) throw std::invalid_argument("vocab_size must be >= 1");
  if (max_positions < 1) throw std::invalid_argument("max_positions must be >= 1");
}

std::vector<int> SegmentedSequence::flat() const {
  std::vector<int> out;
  out.reserve(size());
  out.insert(out.end(), system.begin(), system.end());
  out.insert(out.end(), visual.begin(), visual.end());
  out.insert(out.end(), instruction.begin(), instruction.end());
  return out;
}

KVCache::KVCache(int num_layers, int model_dim)
    : dim_(model_dim),
      keys_(num_layers),
      vals_(num_layers),
      len_(num_layers, 0) {}

void KVCache::append(int layer, const double* k, const double* v) {
  keys_[layer].insert(keys_[layer].end(), k, k + dim_);
  vals_[layer].insert(vals_[layer].end(), v, v + dim_);
  ++len_[layer];
}

std::size_t KVCache::size() const {
  if (len_.empty()) return 0;
  for (std::size_t l = 1; l < len_.size(); ++l)
    if (len_[l] != len_[0])
      throw std::runtime_error("KV cache length mismatch across layers");
  return len_[0];
}

const double* KVCache::key(int layer, std::size_t pos) const {
  return keys_[layer].data() + pos * dim_;
}

const double* KVCache::value(int layer, std::size_t pos) const {
  return vals_[layer].data() + pos * dim_;
}

void positional_encoding(std::size_t pos, int d, double* out) {
  for (int i = 0; i < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
    out[i] = std::sin(static_cast<double>(pos) * freq);
    if (i + 1 < d) out[i + 1] = std::cos(static_cast<double>(pos) * freq);
  }
}

TraceRow attention_tap(const std::vector<std::vector<std::vector<double>>>& rows,
                       TapSpan span, int step) {
  if (span.end <= span.begin) throw std::invalid_argument("empty visual span");
  const std::size_t width = span.end - span.begin;

  TraceRow out;
  out.step = step;
  out.per_layer.reserve(rows.size());
  out.layer_avg.assign(width, 0.0);

  for (const auto& heads : rows) {
    std::vector<double> layer(width, 0.0);
    for (const auto& head : heads) {
      if (span.end > head.size())
        throw std::invalid_argument("tap span exceeds attention row");
      for (std::size_t i = 0; i < width; ++i) layer[i] += head[span.begin + i];
    }
    const double inv_h = 1.0 / static_cast<double>(heads.size());
    for (double& v : layer) v *= inv_h;

    const double s = kern::reduce_sum(layer.data(), width);
    if (s > 0.0) {
      kern::scal(1.0 / s, layer.data(), width);
    } else {
      // All mass underflowed outside the span; fall back to uniform.
      for (double& v : layer) v = 1.0 / static_cast<double>(width);
    }
    for (std::size_t i = 0; i < width; ++i) out.layer_avg[i] += layer[i];
    out.per_layer.push_back(std::move(layer));
  }
  const double inv_l = 1.0 / static_cast<double>(rows.size());
  kern::scal(inv_l, out.layer_avg.data(), width);
  return out;
}

Model::Model(ModelConfig config, Weights weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
}

std::vector<double> Model::embed(int token, std::size_t pos) const {
  if (token < 0 || token >= config_.vocab_size)
    throw std::out_of_range("token id out of range");
  const int d = config_.model_dim;
  std::vector<double> x(d);
  positional_encoding(pos, d, x.data());
  const double scale = std::sqrt(static_cast<double>(d));
  kern::axpy(scale, weights_.embedding.row(token), x.data(), d);
  return x;
}

void Model::project_qkv(int layer, const double* normed, double* q, double* k,
                        double* v) const {
  const int d = config_.model_dim;
  const Weights::Layer& wl = weights_.layers[layer];
  kern::matvec(wl.wq.a.data(), normed, q, d, d);
  kern::matvec(wl.wk.a.data(), normed, k, d, d);
  kern::matvec(wl.wv.a.data(), normed, v, d, d);
}

void Model::run_layer(int l, Mat& hidden, KVCache& own, std::size_t base,
                      const KVCache* prefix_cache,
                      const std::vector<std::size_t>* prefix_rows,
                      std::vector<std::vector<double>>* tap) const {
  const Weights::Layer& wl = weights_.layers[l];
  const int d = config_.model_dim;
  const int heads = config_.num_heads;
  const int dh = config_.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t n = hidden.rows;
  const int d_ff = static_cast<int>(wl.w1.rows);
  const std::size_t npre =
      prefix_rows != nullptr ? prefix_rows->size() : std::size_t{0};

  std::vector<double> normed(d), k(d), v(d), ctx(d), attn_out(d);
  std::vector<double> scores;
  std::vector<double> ffn_hidden(d_ff), ffn_out(d);

  // Projections first so every position's keys are in place before any
  // query runs; queries stay causal by bounding the score range.
  std::vector<double> qs(n * d);
  for (std::size_t p = 0; p < n; ++p) {
    rms_normalize(hidden.row(p), wl.attn_norm.data(), normed.data(), d);
    project_qkv(l, normed.data(), qs.data() + p * d, k.data(), v.data());
    own.append(l, k.data(), v.data());
  }

  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t own_len = base + p + 1;
    scores.resize(npre + own_len);
    std::fill(ctx.begin(), ctx.end(), 0.0);
    const bool want_tap = tap != nullptr && p == n - 1;
    if (want_tap) tap->assign(heads, {});

    for (int h = 0; h < heads; ++h) {
      const double* qh = qs.data() + p * d + h * dh;
      for (std::size_t j = 0; j < npre; ++j)
        scores[j] =
            kern::dot(qh, prefix_cache->key(l, (*prefix_rows)[j]) + h * dh,
                      dh) *
            inv_sqrt_dh;
      for (std::size_t j = 0; j < own_len; ++j)
        scores[npre + j] =
            kern::dot(qh, own.key(l, j) + h * dh, dh) * inv_sqrt_dh;
      kern::softmax_inplace(scores.data(), scores.size());
      if (want_tap) (*tap)[h] = scores;
      for (std::size_t j = 0; j < npre; ++j)
        kern::axpy(scores[j],
                   prefix_cache->value(l, (*prefix_rows)[j]) + h * dh,
                   ctx.data() + h * dh, dh);
      for (std::size_t j = 0; j < own_len; ++j)
        kern::axpy(scores[npre + j], own.value(l, j) + h * dh,
                   ctx.data() + h * dh, dh);
    }
    kern::matvec(wl.wo.a.data(), ctx.data(), attn_out.data(), d, d);
    kern::axpy(1.0, attn_out.data(), hidden.row(p), d);

    rms_normalize(hidden.row(p), wl.ffn_norm.data(), normed.data(), d);
    kern::matvec(wl.w1.a.data(), normed.data(), ffn_hidden.data(), d_ff, d);
    for (int i = 0; i < d_ff; ++i)
      if (ffn_hidden[i] < 0.0) ffn_hidden[i] = 0.0;
    kern::matvec(wl.w2.a.data(), ffn_hidden.data(), ffn_out.data(), d, d_ff);
    kern::axpy(1.0, ffn_out.data(), hidden.row(p), d);
  }
}

PrefillResult Model::forward_prefill(const SegmentedSequence& seq) const {
  const std::size_t n = seq.size();
  if (n == 0) throw std::invalid_argument("empty sequence");
  if (n > static_cast<std::size_t>(config_.max_positions))
    throw std::invalid_argument("sequence too long");
  const int d = config_.model_dim;
  const int L = config_.num_layers;
  const std::vector<int> tokens = seq.flat();

  PrefillResult res;
  res.cache = KVCache(L, d);
  res.hidden.layer_in.reserve(L + 1);

  Mat hidden(n, d);
  for (std::size_t p = 0; p < n; ++p) {
    std::vector<double> x = embed(tokens[p], p);
    std::copy(x.begin(), x.end(), hidden.row(p));
  }

  std::vector<std::vector<std::vector<double>>> raw(L);
  for (int l = 0; l < L; ++l) {
    res.hidden.layer_in.push_back(hidden);
    run_layer(l, hidden, res.cache, 0, nullptr, nullptr, &raw[l]);
  }
  res.hidden.layer_in.push_back(hidden);  // leaving the last block

  res.hidden.last = Mat(n, d);
  for (std::size_t p = 0; p < n; ++p)
    rms_normalize(hidden.row(p), weights_.final_norm.data(),
            res.hidden.last.row(p), d);

  res.query_hidden.assign(res.hidden.last.row(n - 1),
                          res.hidden.last.row(n - 1) + d);
  res.query_logits.resize(config_.vocab_size);
  kern::matvec(weights_.head.a.data(), res.query_hidden.data(),
               res.query_logits.data(), config_.vocab_size, d);

  res.trace = attention_tap(raw, {seq.visual_begin(), seq.visual_end()}, 0);
  return res;
}

DecodeResult Model::decode_step(int prev_token, KVCache& cache, int step,
                                TapSpan span) const {
  return decode_step_at(prev_token, cache, cache.size(), step, span);
}

DecodeResult Model::decode_step_at(int prev_token, KVCache& cache,
                                   std::size_t pos, int step,
                                   TapSpan span) const {
  const std::size_t base = cache.size();
  if (base == 0) throw std::invalid_argument("decode on empty cache");
  if (pos + 1 > static_cast<std::size_t>(config_.max_positions))
    throw std::invalid_argument("sequence too long");
  const int d = config_.model_dim;
  const int L = config_.num_layers;

  Mat hidden(1, d);
  std::vector<double> x = embed(prev_token, pos);
  std::copy(x.begin(), x.end(), hidden.row(0));

  std::vector<std::vector<std::vector<double>>> raw(L);
  for (int l = 0; l < L; ++l)
    run_layer(l, hidden, cache, base, nullptr, nullptr, &raw[l]);

  std::vector<double> out(d);
  rms_normalize(hidden.row(0), weights_.final_norm.data(), out.data(), d);

  DecodeResult res;
  res.logits.resize(config_.vocab_size);
  kern::matvec(weights_.head.a.data(), out.data(), res.logits.data(),
               config_.vocab_size, d);
  res.next_token = argmax(res.logits);
  res.trace = attention_tap(raw, span, step);
  return res;
}

int argmax(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

}  // namespace rpf
