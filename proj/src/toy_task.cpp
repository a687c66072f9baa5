#include "rpf/toy_task.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace rpf {

namespace {
using nlohmann::json;
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

ToySample generate_sample(std::uint64_t seed, int grid_size,
                          int ambiguity_count, int feature_vocab,
                          double cell_size) {
  if (grid_size < 2) throw std::invalid_argument("grid_size must be >= 2");
  if (ambiguity_count < 1 || ambiguity_count > grid_size * grid_size)
    throw std::invalid_argument("ambiguity_count out of range");
  if (feature_vocab <= ambiguity_count)
    throw std::invalid_argument("feature_vocab must exceed ambiguity_count");

  std::mt19937_64 rng(seed);
  const int g = grid_size;
  const int f = feature_vocab;
  const int none = f;

  ToySample s;
  s.grid_size = g;
  s.cell_size = cell_size;
  s.feature_vocab = f;
  s.ambiguity_count = ambiguity_count;
  s.seed = seed;
  s.cells.assign(g * g, {});

  std::uniform_int_distribution<int> feat(0, f - 1);
  s.query_primary = feat(rng);
  s.query_secondary = ambiguity_count > 1 ? feat(rng) : none;

  // Candidate placement. Distinct rows and columns keep the decoded row/col
  // marginals unambiguous; past G candidates only distinct cells are
  // guaranteed.
  std::vector<int> cand_cells;
  if (ambiguity_count <= g) {
    std::vector<int> rows(g), cols(g);
    std::iota(rows.begin(), rows.end(), 0);
    std::iota(cols.begin(), cols.end(), 0);
    std::shuffle(rows.begin(), rows.end(), rng);
    std::shuffle(cols.begin(), cols.end(), rng);
    for (int i = 0; i < ambiguity_count; ++i)
      cand_cells.push_back(rows[i] * g + cols[i]);
  } else {
    std::vector<int> cells(g * g);
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng);
    cand_cells.assign(cells.begin(), cells.begin() + ambiguity_count);
  }
  s.target_index = cand_cells[0];

  // Secondary features never collide with the query's disambiguator except
  // on the target itself.
  auto off_secondary = [&]() {
    int v = feat(rng);
    while (v == s.query_secondary) v = feat(rng);
    return v;
  };
  auto off_primary = [&]() {
    int v = feat(rng);
    while (v == s.query_primary) v = feat(rng);
    return v;
  };

  for (int i = 0; i < g * g; ++i) {
    s.cells[i].primary = off_primary();
    s.cells[i].secondary = off_secondary();
    s.cells[i].salient = false;
  }
  for (std::size_t c = 0; c < cand_cells.size(); ++c) {
    ToySample::Cell& cell = s.cells[cand_cells[c]];
    cell.primary = s.query_primary;
    if (c == 0) {
      cell.secondary = ambiguity_count > 1 ? s.query_secondary : none;
      cell.salient = false;
    } else {
      cell.secondary = off_secondary();
      cell.salient = true;
    }
  }

  const int tr = s.target_index / g;
  const int tc = s.target_index % g;
  s.gt_box = s.grid().cell_box(tr, tc);
  return s;
}

std::vector<ToySample> generate_corpus(std::uint64_t seed, int count,
                                       int grid_size, int ambiguity_count,
                                       int feature_vocab, double cell_size) {
  std::vector<ToySample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i)
    out.push_back(generate_sample(seed + static_cast<std::uint64_t>(i),
                                  grid_size, ambiguity_count, feature_vocab,
                                  cell_size));
  return out;
}

void write_corpus_jsonl(const std::string& path,
                        const std::vector<ToySample>& corpus) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const ToySample& s : corpus) {
    json j;
    j["seed"] = s.seed;
    j["grid"] = s.grid_size;
    j["cell_size"] = s.cell_size;
    j["features"] = s.feature_vocab;
    j["ambiguity"] = s.ambiguity_count;
    json cells = json::array();
    for (const auto& c : s.cells)
      cells.push_back({c.primary, c.secondary, c.salient ? 1 : 0});
    j["cells"] = std::move(cells);
    j["query"] = {s.query_primary, s.query_secondary};
    j["target"] = s.target_index;
    j["gt_box"] = {s.gt_box.x0, s.gt_box.y0, s.gt_box.x1, s.gt_box.y1};
    out << j.dump() << "\n";
  }
}

std::vector<ToySample> read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<ToySample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    ToySample s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.grid_size = j.at("grid").get<int>();
    s.cell_size = j.at("cell_size").get<double>();
    s.feature_vocab = j.at("features").get<int>();
    s.ambiguity_count = j.at("ambiguity").get<int>();
    for (const auto& c : j.at("cells")) {
      ToySample::Cell cell;
      cell.primary = c.at(0).get<int>();
      cell.secondary = c.at(1).get<int>();
      cell.salient = c.at(2).get<int>() != 0;
      s.cells.push_back(cell);
    }
    s.query_primary = j.at("query").at(0).get<int>();
    s.query_secondary = j.at("query").at(1).get<int>();
    s.target_index = j.at("target").get<int>();
    const auto b = j.at("gt_box").get<std::vector<double>>();
    s.gt_box = {b[0], b[1], b[2], b[3]};
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary and sequences
// ---------------------------------------------------------------------------

int PlantedVocab::query_token(int primary, int secondary) const {
  return 2 + 2 * grid_size + primary * (feature_vocab + 1) + secondary;
}

int PlantedVocab::visual_token(int primary, int secondary, bool salient,
                               int row, int col) const {
  const int f = feature_vocab;
  const int g = grid_size;
  const int vbase = 2 + 2 * g + f * (f + 1);
  const int feat = primary * (f + 1) + secondary;
  const int cell = row * g + col;
  return vbase + (feat * 2 + (salient ? 1 : 0)) * (g * g) + cell;
}

int PlantedVocab::size() const {
  const int f = feature_vocab;
  const int g = grid_size;
  return 2 + 2 * g + f * (f + 1) + 2 * f * (f + 1) * g * g;
}

SegmentedSequence to_sequence(const ToySample& sample,
                              const PlantedVocab& vocab) {
  if (sample.grid_size != vocab.grid_size ||
      sample.feature_vocab != vocab.feature_vocab)
    throw std::invalid_argument("sample does not match the vocabulary");

  SegmentedSequence seq;
  seq.system = {vocab.sys(), vocab.sys()};
  const int g = sample.grid_size;
  seq.visual.reserve(g * g);
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      const ToySample::Cell& cell = sample.cells[r * g + c];
      seq.visual.push_back(
          vocab.visual_token(cell.primary, cell.secondary, cell.salient, r, c));
    }
  seq.instruction = {vocab.tmark(),
                     vocab.query_token(sample.query_primary,
                                       sample.query_secondary)};
  return seq;
}

// ---------------------------------------------------------------------------
// Planted model
// ---------------------------------------------------------------------------

CoordSpec PlantedModelSpec::coords() const {
  return {2, 2 + grid_size, grid_size};
}

void PlantedModelSpec::validate() const {
  if (feature_vocab < 2) throw std::invalid_argument("feature_vocab too small");
  if (grid_size < 2 || grid_size % 2 != 0)
    throw std::invalid_argument("grid_size must be even and >= 2");
  if (num_layers < 2) throw std::invalid_argument("num_layers must be >= 2");
  if (unit <= 0.0 || received_write <= 0.0 || confirm_write <= 0.0)
    throw std::invalid_argument("scales must be positive");
}

namespace {

// Channel layout of the planted residual stream. The first group carries
// token content; the accumulator group is written by attention values and
// the confirmation gate.
struct Channels {
  int f, g;
  int ones, prim, sec, sal, row, col, vmark;
  int qprim, qsec, qmark, rmark, cmark;
  int rp, rs, conf, arow, acol;
  int d;

  explicit Channels(int feature_vocab, int grid)
      : f(feature_vocab), g(grid) {
    int at = 0;
    ones = at++;
    prim = at; at += f;
    sec = at; at += f + 1;
    sal = at++;
    row = at; at += g;
    col = at; at += g;
    vmark = at++;
    qprim = at; at += f;
    qsec = at; at += f + 1;
    qmark = at++;
    rmark = at++;
    cmark = at++;
    rp = at; at += f;
    rs = at; at += f + 1;
    conf = at++;
    arow = at; at += g;
    acol = at; at += g;
    d = at;
  }
};

double nominal_rms(double content_ss, int d) {
  // Sinusoidal pairs contribute exactly 1 per pair, d/2 in total.
  return std::sqrt((content_ss + d / 2.0) / d);
}

}  // namespace

Model make_planted_model(const PlantedModelSpec& spec) {
  spec.validate();
  const Channels ch(spec.feature_vocab, spec.grid_size);
  const PlantedVocab vocab = spec.vocab();
  const int d = ch.d;
  const int f = spec.feature_vocab;
  const int g = spec.grid_size;
  const double u = spec.unit;

  ModelConfig cfg;
  cfg.num_layers = spec.num_layers;
  cfg.num_heads = 1;
  cfg.model_dim = d;
  cfg.vocab_size = vocab.size();
  const int seq_len = 2 + g * g + 2;
  cfg.max_positions = 2 * seq_len + g * g + 8;

  // Nominal post-norm magnitudes per token archetype, used to convert logit
  // targets into projection gains. u2 = u*u per populated content channel.
  const double u2 = u * u;
  const double rms_vis = nominal_rms(6 * u2, d);
  const double rms_sal = nominal_rms(7 * u2, d);
  const double rms_query = nominal_rms(4 * u2, d);
  const double rms_coord = nominal_rms(3 * u2, d);
  const double rms_vhat = nominal_rms(
      7 * u2 + 2 * spec.received_write * spec.received_write +
          spec.confirm_write * spec.confirm_write,
      d);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(d));

  const double xq = u / rms_query;    // query-token content channel
  const double xv = u / rms_vis;      // visual content channel
  const double xvs = u / rms_sal;     // salient visual content channel
  const double xc = u / rms_coord;    // coordinate-token content channel
  const double xconf = spec.confirm_write / rms_vhat;

  // Attention read gains. Salience targets are corrected for the salient
  // token's larger norm so the intended net logit gap survives.
  const double rho = rms_vis / rms_sal;
  const double g_prim = spec.prim_match_logit / (xq * xv * inv_sqrt_dh);
  const double sal_target =
      spec.salient_gap_logit + spec.prim_match_logit * (1.0 - rho);
  const double g_sal_ones = sal_target / ((u / rms_query) * xvs * inv_sqrt_dh);
  const double g_probe_vis = spec.probe_logit / (xv * xq * inv_sqrt_dh);
  const double g_probe_coord =
      spec.probe_decode_logit / (xc * xq * inv_sqrt_dh);
  const double g_coord = spec.coord_match_logit / (xc * xv * inv_sqrt_dh);
  const double sal_dec_target =
      spec.salient_decode_gap + spec.coord_match_logit * (1.0 - rho);
  const double g_sal_coord = sal_dec_target / (xc * xvs * inv_sqrt_dh);
  const double g_conf = spec.conf_read_logit / (xq * xconf * inv_sqrt_dh);
  const double g_conf_coord =
      spec.conf_decode_extra / (xc * xconf * inv_sqrt_dh);

  // Value-path gains.
  const double g_vr = spec.marginal_write / xv;
  const double g_vp = spec.received_write / xq;
  const double g_vf = spec.forward_write;

  Weights w;

  // Embeddings: content channels at u after the sqrt(d) forward scale.
  const double e = u / std::sqrt(static_cast<double>(d));
  w.embedding = Mat(cfg.vocab_size, d);
  auto fill_ones = [&](int tok) { w.embedding.at(tok, ch.ones) = e; };
  fill_ones(vocab.sys());
  fill_ones(vocab.tmark());
  for (int r = 0; r < g; ++r) {
    const int tok = vocab.row_token(r);
    fill_ones(tok);
    w.embedding.at(tok, ch.rmark) = e;
    w.embedding.at(tok, ch.row + r) = e;
  }
  for (int c = 0; c < g; ++c) {
    const int tok = vocab.col_token(c);
    fill_ones(tok);
    w.embedding.at(tok, ch.cmark) = e;
    w.embedding.at(tok, ch.col + c) = e;
  }
  for (int p = 0; p < f; ++p)
    for (int s = 0; s <= f; ++s) {
      const int tok = vocab.query_token(p, s);
      fill_ones(tok);
      w.embedding.at(tok, ch.qmark) = e;
      w.embedding.at(tok, ch.qprim + p) = e;
      w.embedding.at(tok, ch.qsec + s) = e;
    }
  for (int p = 0; p < f; ++p)
    for (int s = 0; s <= f; ++s)
      for (int sal = 0; sal < 2; ++sal)
        for (int r = 0; r < g; ++r)
          for (int c = 0; c < g; ++c) {
            const int tok = vocab.visual_token(p, s, sal != 0, r, c);
            fill_ones(tok);
            w.embedding.at(tok, ch.vmark) = e;
            w.embedding.at(tok, ch.prim + p) = e;
            w.embedding.at(tok, ch.sec + s) = e;
            w.embedding.at(tok, ch.row + r) = e;
            w.embedding.at(tok, ch.col + c) = e;
            if (sal != 0) w.embedding.at(tok, ch.sal) = e;
          }

  // One layer template; the layer-wise confirmation gate differs below.
  const int d_ff = f + 1;
  Weights::Layer base;
  base.attn_norm.assign(d, 1.0);
  base.ffn_norm.assign(d, 1.0);
  base.wq = Mat(d, d);
  base.wk = Mat(d, d);
  base.wv = Mat(d, d);
  base.wo = Mat(d, d);
  base.w1 = Mat(d_ff, d);
  base.w2 = Mat(d, d_ff);

  // Keys expose designated channels unchanged.
  for (int p = 0; p < f; ++p) base.wk.at(ch.prim + p, ch.prim + p) = 1.0;
  base.wk.at(ch.sal, ch.sal) = 1.0;
  base.wk.at(ch.qmark, ch.qmark) = 1.0;
  for (int r = 0; r < g; ++r) base.wk.at(ch.row + r, ch.row + r) = 1.0;
  for (int c = 0; c < g; ++c) base.wk.at(ch.col + c, ch.col + c) = 1.0;
  base.wk.at(ch.conf, ch.conf) = 1.0;

  // Queries: feature match, salience and confirmation reads, the query-token
  // probe for visual and coordinate tokens, and row/col matching.
  for (int p = 0; p < f; ++p) base.wq.at(ch.prim + p, ch.qprim + p) = g_prim;
  base.wq.at(ch.sal, ch.ones) = g_sal_ones;
  base.wq.at(ch.sal, ch.rmark) = g_sal_coord;
  base.wq.at(ch.sal, ch.cmark) = g_sal_coord;
  base.wq.at(ch.qmark, ch.vmark) = g_probe_vis;
  base.wq.at(ch.qmark, ch.rmark) = g_probe_coord;
  base.wq.at(ch.qmark, ch.cmark) = g_probe_coord;
  for (int r = 0; r < g; ++r) base.wq.at(ch.row + r, ch.row + r) = g_coord;
  for (int c = 0; c < g; ++c) base.wq.at(ch.col + c, ch.col + c) = g_coord;
  base.wq.at(ch.conf, ch.ones) = g_conf;
  base.wq.at(ch.conf, ch.rmark) = g_conf_coord;
  base.wq.at(ch.conf, ch.cmark) = g_conf_coord;

  // Values: attended cells deposit row/col marginals, the query token
  // deposits its features, and accumulated marginals are forwarded.
  for (int r = 0; r < g; ++r) {
    base.wv.at(ch.arow + r, ch.row + r) = g_vr;
    base.wv.at(ch.arow + r, ch.arow + r) = g_vf;
  }
  for (int c = 0; c < g; ++c) {
    base.wv.at(ch.acol + c, ch.col + c) = g_vr;
    base.wv.at(ch.acol + c, ch.acol + c) = g_vf;
  }
  for (int p = 0; p < f; ++p) base.wv.at(ch.rp + p, ch.qprim + p) = g_vp;
  for (int s = 0; s <= f; ++s) base.wv.at(ch.rs + s, ch.qsec + s) = g_vp;

  // The output projection admits only accumulator writes.
  for (int p = 0; p < f; ++p) base.wo.at(ch.rp + p, ch.rp + p) = 1.0;
  for (int s = 0; s <= f; ++s) base.wo.at(ch.rs + s, ch.rs + s) = 1.0;
  for (int r = 0; r < g; ++r) base.wo.at(ch.arow + r, ch.arow + r) = 1.0;
  for (int c = 0; c < g; ++c) base.wo.at(ch.acol + c, ch.acol + c) = 1.0;

  w.layers.assign(cfg.num_layers, base);

  // Confirmation gate, first layer only: for each secondary feature s,
  // ReLU(own SEC[s]/u + received RS[s]/rw - 1.5) fires exactly when the
  // token carries s and the instruction asked for s. The positional wave is
  // bounded by 1, so with u and rw large the comparison has hard margins.
  // The gate reads the normalized stream, which scales its output by the
  // token's 1/rms; the write scale folds the nominal rms back in.
  {
    const double rms_ffn = nominal_rms(
        7 * u2 + 2 * spec.received_write * spec.received_write, d);
    Weights::Layer& l0 = w.layers[0];
    for (int s = 0; s <= f; ++s) {
      l0.w1.at(s, ch.sec + s) = 1.0 / u;
      l0.w1.at(s, ch.rs + s) = 1.0 / spec.received_write;
      l0.w1.at(s, ch.ones) = -1.5 / u;
      l0.w2.at(ch.conf, s) = spec.confirm_write / 0.5 * rms_ffn;
    }
  }

  w.final_norm.assign(d, 1.0);
  w.head = Mat(cfg.vocab_size, d);
  for (int r = 0; r < g; ++r) {
    w.head.at(vocab.row_token(r), ch.arow + r) = 1.0;
    w.head.at(vocab.row_token(r), ch.qmark) = spec.phase_boost;
  }
  for (int c = 0; c < g; ++c) {
    w.head.at(vocab.col_token(c), ch.acol + c) = 1.0;
    w.head.at(vocab.col_token(c), ch.rmark) = spec.phase_boost;
  }

  return Model(cfg, std::move(w));
}

// ---------------------------------------------------------------------------
// Planted spec key-value document
// ---------------------------------------------------------------------------

void write_planted_spec(const std::string& path, const PlantedModelSpec& spec) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "feature_vocab = " << spec.feature_vocab << "\n";
  out << "grid_size = " << spec.grid_size << "\n";
  out << "num_layers = " << spec.num_layers << "\n";
  out << "cell_size = " << spec.cell_size << "\n";
  out << "unit = " << spec.unit << "\n";
  out << "prim_match_logit = " << spec.prim_match_logit << "\n";
  out << "salient_gap_logit = " << spec.salient_gap_logit << "\n";
  out << "probe_logit = " << spec.probe_logit << "\n";
  out << "probe_decode_logit = " << spec.probe_decode_logit << "\n";
  out << "coord_match_logit = " << spec.coord_match_logit << "\n";
  out << "salient_decode_gap = " << spec.salient_decode_gap << "\n";
  out << "conf_read_logit = " << spec.conf_read_logit << "\n";
  out << "conf_decode_extra = " << spec.conf_decode_extra << "\n";
  out << "marginal_write = " << spec.marginal_write << "\n";
  out << "received_write = " << spec.received_write << "\n";
  out << "forward_write = " << spec.forward_write << "\n";
  out << "confirm_write = " << spec.confirm_write << "\n";
  out << "phase_boost = " << spec.phase_boost << "\n";
}

PlantedModelSpec read_planted_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  PlantedModelSpec spec;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
    };
    trim(key);
    trim(val);
    if (key.empty() || val.empty()) continue;
    try {
      if (key == "feature_vocab") spec.feature_vocab = std::stoi(val);
      else if (key == "grid_size") spec.grid_size = std::stoi(val);
      else if (key == "num_layers") spec.num_layers = std::stoi(val);
      else if (key == "cell_size") spec.cell_size = std::stod(val);
      else if (key == "unit") spec.unit = std::stod(val);
      else if (key == "prim_match_logit") spec.prim_match_logit = std::stod(val);
      else if (key == "salient_gap_logit") spec.salient_gap_logit = std::stod(val);
      else if (key == "probe_logit") spec.probe_logit = std::stod(val);
      else if (key == "probe_decode_logit") spec.probe_decode_logit = std::stod(val);
      else if (key == "coord_match_logit") spec.coord_match_logit = std::stod(val);
      else if (key == "salient_decode_gap") spec.salient_decode_gap = std::stod(val);
      else if (key == "conf_read_logit") spec.conf_read_logit = std::stod(val);
      else if (key == "conf_decode_extra") spec.conf_decode_extra = std::stod(val);
      else if (key == "marginal_write") spec.marginal_write = std::stod(val);
      else if (key == "received_write") spec.received_write = std::stod(val);
      else if (key == "forward_write") spec.forward_write = std::stod(val);
      else if (key == "confirm_write") spec.confirm_write = std::stod(val);
      else if (key == "phase_boost") spec.phase_boost = std::stod(val);
      else throw std::runtime_error("unknown key '" + key + "'");
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Zoom-in refinement
// ---------------------------------------------------------------------------

PixelBox zoom_crop(const VisualGrid& grid, Vec2 prediction) {
  const double w = grid.width();
  const double h = grid.height();
  if (prediction.x < 0 || prediction.x >= w || prediction.y < 0 ||
      prediction.y >= h)
    throw std::invalid_argument("prediction out of image bounds");
  const double side = std::min(w, h) / 2.0;

  auto place = [&](double center, double limit) {
    double origin = center - side / 2.0;
    origin = std::floor(origin / grid.cell_size) * grid.cell_size;
    if (origin < 0.0) origin = 0.0;
    if (origin > limit - side) origin = limit - side;
    return origin;
  };
  const double ox = place(prediction.x, w);
  const double oy = place(prediction.y, h);
  return {ox, oy, ox + side, oy + side};
}

Vec2 zoom_map_back(Vec2 crop_origin, Vec2 refined) {
  return {crop_origin.x + refined.x / 2.0, crop_origin.y + refined.y / 2.0};
}

ToySample zoom_sample(const ToySample& sample, const PixelBox& crop) {
  const int g = sample.grid_size;
  if (g % 2 != 0) throw std::invalid_argument("zoom needs an even grid");
  const double cell = sample.cell_size;
  const int c0 = static_cast<int>(crop.x0 / cell);
  const int r0 = static_cast<int>(crop.y0 / cell);

  ToySample out = sample;
  out.cells.assign(g * g, {});
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c)
      out.cells[r * g + c] = sample.cells[(r0 + r / 2) * g + (c0 + c / 2)];

  out.gt_box = {(sample.gt_box.x0 - crop.x0) * 2.0,
                (sample.gt_box.y0 - crop.y0) * 2.0,
                (sample.gt_box.x1 - crop.x0) * 2.0,
                (sample.gt_box.y1 - crop.y0) * 2.0};

  const int tr = sample.target_index / g;
  const int tc = sample.target_index % g;
  const bool inside = sample.target_index >= 0 && tr >= r0 &&
                      tr < r0 + g / 2 && tc >= c0 && tc < c0 + g / 2;
  out.target_index = inside ? ((tr - r0) * 2) * g + (tc - c0) * 2 : -1;

  out.ambiguity_count = 0;
  for (const auto& c : out.cells)
    if (c.primary == sample.query_primary) ++out.ambiguity_count;
  return out;
}

Vec2 zoom_in_refine(const ToySample& sample, Vec2 prediction,
                    const Model& model, const PlantedVocab& vocab,
                    const RePrefillConfig& cfg, Variant variant) {
  const PixelBox crop = zoom_crop(sample.grid(), prediction);
  const ToySample zoomed = zoom_sample(sample, crop);
  const SegmentedSequence seq = to_sequence(zoomed, vocab);
  CoordSpec coords{2, 2 + vocab.grid_size, vocab.grid_size};
  const RunResult run =
      run_reprefill(model, seq, zoomed.grid(), zoomed.gt_box, coords, cfg,
                    variant, 0, PrefixMode::kLayered, false);
  if (run.record.predicted.x < 0)  // undecodable tokens; keep the first pass
    return prediction;
  return zoom_map_back({crop.x0, crop.y0}, run.record.predicted);
}

// ---------------------------------------------------------------------------
// Corpus evaluation
// ---------------------------------------------------------------------------

EvalResult evaluate(const std::vector<ToySample>& corpus, const Model& model,
                    const PlantedVocab& vocab, const RePrefillConfig& cfg,
                    Variant variant, bool zoom_in, int threads,
                    bool keep_attn) {
  if (corpus.empty()) throw std::invalid_argument("empty corpus");

  EvalResult out;
  out.runs.resize(corpus.size());

  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < corpus.size(); i += stride) {
      const ToySample& sample = corpus[i];
      const SegmentedSequence seq = to_sequence(sample, vocab);
      RunResult run = run_reprefill(
          model, seq, sample.grid(), sample.gt_box,
          {2, 2 + vocab.grid_size, vocab.grid_size}, cfg, variant,
          static_cast<int>(i), PrefixMode::kLayered, keep_attn);
      if (zoom_in && run.record.predicted.x >= 0) {
        const Vec2 refined = zoom_in_refine(sample, run.record.predicted,
                                            model, vocab, cfg, variant);
        run.record.predicted = refined;
        run.record.correct = inside_box(refined, sample.gt_box);
      }
      out.runs[i] = std::move(run);
    }
  };

  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t)
      pool.emplace_back(work, static_cast<std::size_t>(t),
                        static_cast<std::size_t>(threads));
    for (auto& th : pool) th.join();
  }

  for (const RunResult& run : out.runs)
    if (run.record.correct) ++out.correct;
  out.accuracy =
      static_cast<double>(out.correct) / static_cast<double>(corpus.size());
  return out;
}

}  // namespace rpf
