#include "rpf/weights_io.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace rpf {

namespace {

using nlohmann::json;

json dump_mat(const Mat& m) { return json(m.a); }

Mat parse_mat(const json& j, std::size_t rows, std::size_t cols,
              const std::string& name) {
  Mat m(rows, cols);
  const auto flat = j.get<std::vector<double>>();
  if (flat.size() != rows * cols)
    throw std::runtime_error("weight '" + name + "' has " +
                             std::to_string(flat.size()) + " values, expected " +
                             std::to_string(rows * cols));
  m.a = flat;
  return m;
}

std::vector<double> parse_vec(const json& j, std::size_t n,
                              const std::string& name) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != n)
    throw std::runtime_error("weight '" + name + "' has wrong length");
  return v;
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
  const ModelConfig& c = model.config();
  const Weights& w = model.weights();

  json params;
  params["embedding"] = dump_mat(w.embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    params[p + "attn_norm"] = w.layers[l].attn_norm;
    params[p + "wq"] = dump_mat(w.layers[l].wq);
    params[p + "wk"] = dump_mat(w.layers[l].wk);
    params[p + "wv"] = dump_mat(w.layers[l].wv);
    params[p + "wo"] = dump_mat(w.layers[l].wo);
    params[p + "ffn_norm"] = w.layers[l].ffn_norm;
    params[p + "w1"] = dump_mat(w.layers[l].w1);
    params[p + "w2"] = dump_mat(w.layers[l].w2);
  }
  params["final_norm"] = w.final_norm;
  params["head"] = dump_mat(w.head);

  json doc;
  doc["format"] = "rpf-weights-v1";
  doc["config"] = {{"num_layers", c.num_layers},
                   {"num_heads", c.num_heads},
                   {"model_dim", c.model_dim},
                   {"vocab_size", c.vocab_size},
                   {"max_positions", c.max_positions}};
  doc["ffn_dim"] = model.ffn_dim();
  doc["params"] = std::move(params);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << doc.dump() << "\n";
}

Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  json doc = json::parse(in);
  if (doc.value("format", "") != std::string("rpf-weights-v1"))
    throw std::runtime_error("unrecognized weight file format");

  const json& jc = doc.at("config");
  ModelConfig c;
  c.num_layers = jc.at("num_layers").get<int>();
  c.num_heads = jc.at("num_heads").get<int>();
  c.model_dim = jc.at("model_dim").get<int>();
  c.vocab_size = jc.at("vocab_size").get<int>();
  c.max_positions = jc.at("max_positions").get<int>();
  c.validate();
  const std::size_t d = c.model_dim;
  const std::size_t d_ff = doc.at("ffn_dim").get<std::size_t>();

  const json& params = doc.at("params");
  Weights w;
  w.embedding = parse_mat(params.at("embedding"), c.vocab_size, d, "embedding");
  w.layers.resize(c.num_layers);
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Weights::Layer& wl = w.layers[l];
    wl.attn_norm = parse_vec(params.at(p + "attn_norm"), d, p + "attn_norm");
    wl.wq = parse_mat(params.at(p + "wq"), d, d, p + "wq");
    wl.wk = parse_mat(params.at(p + "wk"), d, d, p + "wk");
    wl.wv = parse_mat(params.at(p + "wv"), d, d, p + "wv");
    wl.wo = parse_mat(params.at(p + "wo"), d, d, p + "wo");
    wl.ffn_norm = parse_vec(params.at(p + "ffn_norm"), d, p + "ffn_norm");
    wl.w1 = parse_mat(params.at(p + "w1"), d_ff, d, p + "w1");
    wl.w2 = parse_mat(params.at(p + "w2"), d, d_ff, p + "w2");
  }
  w.final_norm = parse_vec(params.at("final_norm"), d, "final_norm");
  w.head = parse_mat(params.at("head"), c.vocab_size, d, "head");

  return Model(c, std::move(w));
}

}  // namespace rpf
