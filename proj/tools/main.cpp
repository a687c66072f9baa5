// Experiment driver. Subcommands:
//
//   run        one variant over a corpus; writes summary.json, traces.jsonl
//              and efficiency.json into --out
//   sweep      grid of (rho, gamma) cells or an l_c range; writes sweep.csv
//   analyze    grouped series CSV and heatmaps from trace files
//   gen-corpus seeded synthetic corpus as JSON Lines
//   make-model planted model weights from a key-value spec
//
// Configuration keys (rho, gamma, l_c, fallback_top_k, variant,
// analysis_block, seed) may come from a key-value --config file; a CLI flag
// of the same name overrides the file.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rpf/analysis.hpp"
#include "rpf/reprefill.hpp"
#include "rpf/toy_task.hpp"
#include "rpf/weights_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rpf;

namespace {

[[noreturn]] void fail(const std::string& msg) {
  json err;
  err["error"] = msg;
  std::cerr << err.dump() << "\n";
  std::exit(1);
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot read config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (!key.empty() && !val.empty()) kv[key] = val;
  }
  return kv;
}

struct RunOptions {
  std::string corpus_path;
  std::string model_path;
  std::string out_dir;
  std::string config_path;
  std::string manifest_path;
  std::string variant = "baseline";
  std::string analysis_block = "first_visual";
  std::string prefix_mode = "layered";
  double rho = 0.8;
  double gamma = 0.1;
  int l_c = 1;
  int fallback_top_k = 4;
  std::uint64_t seed = 0;
  bool zoom_in = false;
  bool dump_attn = true;
  int threads = 1;
};

void apply_kv(RunOptions& opt, const std::map<std::string, std::string>& kv) {
  for (const auto& [key, val] : kv) {
    if (key == "rho") opt.rho = std::stod(val);
    else if (key == "gamma") opt.gamma = std::stod(val);
    else if (key == "l_c") opt.l_c = std::stoi(val);
    else if (key == "fallback_top_k") opt.fallback_top_k = std::stoi(val);
    else if (key == "variant") opt.variant = val;
    else if (key == "analysis_block") opt.analysis_block = val;
    else if (key == "seed") opt.seed = std::stoull(val);
    else fail("unknown configuration key '" + key + "'");
  }
}

void apply_manifest(RunOptions& opt, const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot read manifest " + path);
  json m = json::parse(in, nullptr, false);
  if (m.is_discarded()) fail("manifest is not valid JSON: " + path);
  if (m.contains("corpus")) opt.corpus_path = m["corpus"].get<std::string>();
  if (m.contains("model")) opt.model_path = m["model"].get<std::string>();
  if (m.contains("out")) opt.out_dir = m["out"].get<std::string>();
  if (m.contains("variant")) opt.variant = m["variant"].get<std::string>();
  if (m.contains("zoom_in")) opt.zoom_in = m["zoom_in"].get<bool>();
  if (m.contains("seed")) opt.seed = m["seed"].get<std::uint64_t>();
  if (m.contains("config")) {
    std::map<std::string, std::string> kv;
    for (const auto& [k, v] : m["config"].items())
      kv[k] = v.is_string() ? v.get<std::string>() : v.dump();
    apply_kv(opt, kv);
  }
}

RePrefillConfig to_config(const RunOptions& opt) {
  RePrefillConfig cfg;
  cfg.rho = opt.rho;
  cfg.gamma = opt.gamma;
  cfg.continuity_layers = opt.l_c;
  cfg.fallback_top_k = opt.fallback_top_k;
  cfg.seed = opt.seed;
  if (opt.analysis_block == "first_visual")
    cfg.analysis_block = AnalysisBlock::kFirstVisual;
  else if (opt.analysis_block == "second_visual")
    cfg.analysis_block = AnalysisBlock::kSecondVisual;
  else
    fail("unknown analysis_block '" + opt.analysis_block + "'");
  return cfg;
}

Variant to_variant(const std::string& name) {
  const auto v = variant_from_name(name);
  if (!v) fail("unknown variant '" + name + "'");
  return *v;
}

PrefixMode to_prefix_mode(const std::string& name) {
  if (name == "layered") return PrefixMode::kLayered;
  if (name == "full") return PrefixMode::kFullAlways;
  if (name == "empty") return PrefixMode::kEmpty;
  fail("unknown prefix mode '" + name + "'");
}

// Planted vocab parameters recovered from the corpus so the sequence builder
// and coordinate decoder line up with the loaded model.
PlantedVocab vocab_for(const std::vector<ToySample>& corpus) {
  if (corpus.empty()) fail("corpus is empty");
  return {corpus[0].feature_vocab, corpus[0].grid_size};
}

json group_to_json(const GroupSeries& g) {
  json out;
  out["count"] = g.count;
  json pts = json::array();
  for (const auto& p : g.points) {
    json jp;
    jp["stage"] = stage_name(p.stage);
    jp["t"] = p.step;
    jp["mean_sigma2"] = p.mean_sigma2;
    jp["mean_d"] = p.mean_d;
    pts.push_back(std::move(jp));
  }
  out["series"] = std::move(pts);
  return out;
}

struct RunArtifacts {
  double accuracy = 0.0;
  json summary;
};

RunArtifacts do_run(const RunOptions& opt, const std::vector<ToySample>& corpus,
                    const Model& model, bool write_files) {
  const PlantedVocab vocab = vocab_for(corpus);
  const RePrefillConfig cfg = to_config(opt);
  const Variant variant = to_variant(opt.variant);

  EvalResult eval = evaluate(corpus, model, vocab, cfg, variant, opt.zoom_in,
                             opt.threads, opt.dump_attn);

  std::vector<GroundingRecord> records;
  records.reserve(eval.runs.size());
  for (const RunResult& run : eval.runs) records.push_back(run.record);
  const GroupedSeries grouped = group_by_correctness(records);

  json summary;
  summary["samples"] = corpus.size();
  summary["correct"] = eval.correct;
  summary["accuracy"] = eval.accuracy;
  summary["variant"] = opt.variant;
  summary["zoom_in"] = opt.zoom_in;
  summary["config"] = {{"rho", opt.rho},
                       {"gamma", opt.gamma},
                       {"l_c", opt.l_c},
                       {"fallback_top_k", opt.fallback_top_k},
                       {"analysis_block", opt.analysis_block},
                       {"seed", opt.seed}};
  std::size_t fallbacks = 0;
  for (const RunResult& run : eval.runs)
    if (run.selection.fallback_used) ++fallbacks;
  summary["fallback_used"] = fallbacks;
  summary["groups"] = {{"correct", group_to_json(grouped.correct)},
                       {"wrong", group_to_json(grouped.wrong)}};

  if (write_files) {
    fs::create_directories(opt.out_dir);
    {
      std::ofstream out(fs::path(opt.out_dir) / "summary.json");
      out << summary.dump(2) << "\n";
    }
    write_trace_jsonl((fs::path(opt.out_dir) / "traces.jsonl").string(),
                      records);
    // Efficiency report: token-position accounting is exact; wall times are
    // informational and live only in this file.
    json eff;
    json per = json::array();
    StageTimings total{};
    for (const RunResult& run : eval.runs) {
      json e;
      e["sample_id"] = run.record.sample_id;
      e["first_prefill_positions"] = run.accounting.first_prefill_positions;
      e["second_prefill_positions"] = run.accounting.second_prefill_positions;
      e["prefix_full_len"] = run.accounting.prefix_full_len;
      e["prefix_reduced_len"] = run.accounting.prefix_reduced_len;
      e["continuity_layers"] = run.accounting.continuity_layers;
      e["requery_positions"] = run.accounting.requery_positions;
      e["decode_positions"] = run.accounting.decode_positions;
      e["prefill_ms"] = run.timings.prefill_ms;
      e["selection_ms"] = run.timings.selection_ms;
      e["second_prefill_ms"] = run.timings.second_prefill_ms;
      e["decode_ms"] = run.timings.decode_ms;
      per.push_back(std::move(e));
      total.prefill_ms += run.timings.prefill_ms;
      total.selection_ms += run.timings.selection_ms;
      total.second_prefill_ms += run.timings.second_prefill_ms;
      total.decode_ms += run.timings.decode_ms;
    }
    eff["per_sample"] = std::move(per);
    const double n = static_cast<double>(eval.runs.size());
    eff["mean_ms"] = {{"prefill", total.prefill_ms / n},
                      {"selection", total.selection_ms / n},
                      {"second_prefill", total.second_prefill_ms / n},
                      {"decode", total.decode_ms / n}};
    std::ofstream out(fs::path(opt.out_dir) / "efficiency.json");
    out << eff.dump(2) << "\n";
  }
  return {eval.accuracy, std::move(summary)};
}

std::vector<double> parse_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-guided second-prefill grounding experiments"};
  app.require_subcommand(1);

  RunOptions opt;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--corpus", opt.corpus_path, "corpus JSONL");
    cmd->add_option("--model", opt.model_path, "model weight JSON");
    cmd->add_option("--config", opt.config_path, "key-value config file");
    cmd->add_option("--out", opt.out_dir, "output directory");
    cmd->add_option("--variant", opt.variant,
                    "baseline|reprefill|embedding_addition|blind|random");
    cmd->add_option("--rho", opt.rho, "quantile threshold");
    cmd->add_option("--gamma", opt.gamma, "activation-ratio threshold");
    cmd->add_option("--l_c", opt.l_c, "continuity layers");
    cmd->add_option("--fallback_top_k", opt.fallback_top_k,
                    "fallback selection size");
    cmd->add_option("--analysis_block", opt.analysis_block,
                    "first_visual|second_visual");
    cmd->add_option("--seed", opt.seed, "run seed");
    cmd->add_option("--threads", opt.threads, "worker threads");
    cmd->add_flag("--zoom-in,!--no-zoom-in", opt.zoom_in, "zoom-in refinement");
    cmd->add_flag("--dump-attn,!--no-dump-attn", opt.dump_attn,
                  "embed attention vectors in traces");
  };

  // ---- run ----
  CLI::App* run_cmd = app.add_subcommand("run", "run one variant over a corpus");
  add_common(run_cmd);
  run_cmd->add_option("--manifest", opt.manifest_path, "manifest JSON");
  run_cmd->add_option("--prefix-mode", opt.prefix_mode,
                      "layered|full|empty (diagnostic)");

  // ---- sweep ----
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "accuracy over a hyperparameter grid");
  add_common(sweep_cmd);
  std::string rho_list, gamma_list, lc_range, preset;
  sweep_cmd->add_option("--rho-list", rho_list, "comma-separated rho values");
  sweep_cmd->add_option("--gamma-list", gamma_list,
                        "comma-separated gamma values");
  sweep_cmd->add_option("--lc-range", lc_range, "l_c range as lo:hi");
  sweep_cmd->add_option("--preset", preset, "named grid, e.g. rho-gamma");

  // ---- analyze ----
  CLI::App* an_cmd =
      app.add_subcommand("analyze", "grouped series and heatmaps from traces");
  std::vector<std::string> trace_files;
  std::vector<int> heatmap_ids;
  std::string stages = "prefill";
  int an_grid = 0;
  double an_cell = 8.0;
  an_cmd->add_option("--traces", trace_files, "trace JSONL files")->required();
  an_cmd->add_option("--out", opt.out_dir, "output directory")->required();
  an_cmd->add_option("--heatmap", heatmap_ids, "sample ids to render");
  an_cmd->add_option("--stages", stages, "comma-separated stages for heatmaps");
  an_cmd->add_option("--grid", an_grid, "grid side (default: square inferred)");
  an_cmd->add_option("--cell-size", an_cell, "cell size in pixels");

  // ---- gen-corpus ----
  CLI::App* gen_cmd = app.add_subcommand("gen-corpus", "generate a corpus");
  std::uint64_t gen_seed = 1;
  int gen_count = 100, gen_grid = 8, gen_amb = 1, gen_feat = 6;
  double gen_cell = 8.0;
  std::string gen_out;
  gen_cmd->add_option("--seed", gen_seed, "base seed");
  gen_cmd->add_option("--count", gen_count, "number of samples");
  gen_cmd->add_option("--grid", gen_grid, "grid side G");
  gen_cmd->add_option("--ambiguity", gen_amb, "cells sharing the primary feature");
  gen_cmd->add_option("--features", gen_feat, "feature vocabulary size");
  gen_cmd->add_option("--cell-size", gen_cell, "cell size in pixels");
  gen_cmd->add_option("--out", gen_out, "output JSONL")->required();

  // ---- make-model ----
  CLI::App* mk_cmd = app.add_subcommand("make-model", "construct planted weights");
  std::string mk_spec, mk_out;
  int mk_feat = -1, mk_grid = -1, mk_layers = -1;
  mk_cmd->add_option("--spec", mk_spec, "key-value spec file");
  mk_cmd->add_option("--features", mk_feat, "feature vocabulary size");
  mk_cmd->add_option("--grid", mk_grid, "grid side G");
  mk_cmd->add_option("--layers", mk_layers, "decoder layers");
  mk_cmd->add_option("--out", mk_out, "output weight JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      const auto corpus = generate_corpus(gen_seed, gen_count, gen_grid,
                                          gen_amb, gen_feat, gen_cell);
      write_corpus_jsonl(gen_out, corpus);
      std::cout << "wrote " << corpus.size() << " samples to " << gen_out
                << "\n";
      return 0;
    }

    if (*mk_cmd) {
      PlantedModelSpec spec;
      if (!mk_spec.empty()) spec = read_planted_spec(mk_spec);
      if (mk_feat > 0) spec.feature_vocab = mk_feat;
      if (mk_grid > 0) spec.grid_size = mk_grid;
      if (mk_layers > 0) spec.num_layers = mk_layers;
      const Model model = make_planted_model(spec);
      save_model(model, mk_out);
      std::cout << "wrote planted model (L=" << model.config().num_layers
                << ", d=" << model.config().model_dim
                << ", vocab=" << model.config().vocab_size << ") to " << mk_out
                << "\n";
      return 0;
    }

    if (*an_cmd) {
      fs::create_directories(opt.out_dir);
      std::vector<GroundingRecord> all;
      std::map<std::string, std::vector<GroundingRecord>> by_variant;
      for (const std::string& path : trace_files) {
        TraceReadResult res = read_trace_jsonl(path);
        for (const std::string& err : res.errors)
          std::cerr << path << ": " << err << "\n";
        for (GroundingRecord& rec : res.records) {
          by_variant[rec.variant].push_back(rec);
          all.push_back(std::move(rec));
        }
      }

      std::ofstream csv(fs::path(opt.out_dir) / "series.csv");
      csv << "variant,group,stage,t,mean_sigma2,mean_d,count\n";
      char buf[64];
      for (const auto& [variant, records] : by_variant) {
        const GroupedSeries grouped = group_by_correctness(records);
        const std::pair<const char*, const GroupSeries*> groups[] = {
            {"correct", &grouped.correct}, {"wrong", &grouped.wrong}};
        for (const auto& [name, series] : groups) {
          if (series->count == 0) {
            csv << variant << "," << name << ",,,,," << 0 << "\n";
            continue;
          }
          for (const auto& p : series->points) {
            csv << variant << "," << name << "," << stage_name(p.stage) << ","
                << p.step << ",";
            std::snprintf(buf, sizeof(buf), "%.17g,%.17g", p.mean_sigma2,
                          p.mean_d);
            csv << buf << "," << series->count << "\n";
          }
        }
      }

      // Heatmaps for the requested sample ids and stages (step 0 rows).
      std::vector<std::string> stage_names;
      {
        std::stringstream ss(stages);
        std::string item;
        while (std::getline(ss, item, ',')) stage_names.push_back(item);
      }
      for (int id : heatmap_ids) {
        for (const std::string& sname : stage_names) {
          const auto stage = stage_from_name(sname);
          if (!stage) fail("unknown stage '" + sname + "'");
          for (const GroundingRecord& rec : all) {
            if (rec.sample_id != id) continue;
            for (const StepStat& s : rec.series) {
              if (s.stage != *stage || s.attn.empty()) continue;
              int side = an_grid;
              if (side <= 0)
                side = static_cast<int>(std::lround(std::sqrt(
                    static_cast<double>(s.attn.size()))));
              VisualGrid grid{side, static_cast<int>(s.attn.size()) / side,
                              an_cell};
              const std::string base =
                  (fs::path(opt.out_dir) /
                   ("heatmap_" + std::to_string(id) + "_" + sname))
                      .string();
              export_heatmap(s.attn, grid, base + ".csv", base + ".pgm");
              goto next_stage;
            }
          }
        next_stage:;
        }
      }
      std::cout << "wrote " << (fs::path(opt.out_dir) / "series.csv").string()
                << "\n";
      return 0;
    }

    // run and sweep share corpus/model loading.
    if (!opt.manifest_path.empty()) apply_manifest(opt, opt.manifest_path);
    if (!opt.config_path.empty()) {
      RunOptions file_opt = opt;
      apply_kv(file_opt, read_kv_file(opt.config_path));
      // CLI flags win over the file: reapply explicitly-set flag values.
      CLI::App* active = *run_cmd ? run_cmd : sweep_cmd;
      auto keep = [&](const char* flag, auto member) {
        if (active->count(flag) == 0) return;
        file_opt.*member = opt.*member;
      };
      keep("--rho", &RunOptions::rho);
      keep("--gamma", &RunOptions::gamma);
      keep("--l_c", &RunOptions::l_c);
      keep("--fallback_top_k", &RunOptions::fallback_top_k);
      keep("--variant", &RunOptions::variant);
      keep("--analysis_block", &RunOptions::analysis_block);
      keep("--seed", &RunOptions::seed);
      opt = file_opt;
    }
    if (opt.corpus_path.empty() || opt.model_path.empty())
      fail("--corpus and --model are required");
    const bool diagnostic = *run_cmd && opt.prefix_mode != "layered";
    if (opt.out_dir.empty() && !diagnostic) fail("--out is required");
    if (!fs::exists(opt.corpus_path)) fail("corpus not found: " + opt.corpus_path);
    if (!fs::exists(opt.model_path)) fail("model not found: " + opt.model_path);

    const std::vector<ToySample> corpus = read_corpus_jsonl(opt.corpus_path);
    const Model model = load_model(opt.model_path);

    if (*run_cmd) {
      if (opt.prefix_mode != "layered") {
        // Diagnostic paths run the pipeline directly, without artifacts.
        const PlantedVocab vocab = vocab_for(corpus);
        const RePrefillConfig cfg = to_config(opt);
        const Variant variant = to_variant(opt.variant);
        const PrefixMode mode = to_prefix_mode(opt.prefix_mode);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
          const SegmentedSequence seq = to_sequence(corpus[i], vocab);
          const RunResult r = run_reprefill(
              model, seq, corpus[i].grid(), corpus[i].gt_box,
              {2, 2 + vocab.grid_size, vocab.grid_size}, cfg, variant,
              static_cast<int>(i), mode, false);
          if (r.record.correct) ++correct;
        }
        std::cout << "accuracy "
                  << static_cast<double>(correct) / corpus.size() << "\n";
        return 0;
      }
      const RunArtifacts art = do_run(opt, corpus, model, true);
      std::cout << "accuracy " << art.accuracy << " -> " << opt.out_dir << "\n";
      return 0;
    }

    if (*sweep_cmd) {
      fs::create_directories(opt.out_dir);
      std::ofstream csv(fs::path(opt.out_dir) / "sweep.csv");
      char buf[64];

      if (preset == "rho-gamma") {
        rho_list = "0.70,0.80,0.90,0.95";
        gamma_list = "0.1,0.2,0.3,0.4,0.5";
      } else if (!preset.empty()) {
        fail("unknown preset '" + preset + "'");
      }

      auto cell_accuracy = [&](RunOptions cell) -> double {
        // A failing cell reports NaN and never aborts the sweep.
        try {
          return do_run(cell, corpus, model, false).accuracy;
        } catch (const std::exception& e) {
          std::cerr << "cell failed (rho=" << cell.rho
                    << " gamma=" << cell.gamma << " l_c=" << cell.l_c
                    << "): " << e.what() << "\n";
          return std::numeric_limits<double>::quiet_NaN();
        }
      };

      if (!lc_range.empty()) {
        const auto colon = lc_range.find(':');
        if (colon == std::string::npos) fail("--lc-range expects lo:hi");
        const int lo = std::stoi(lc_range.substr(0, colon));
        const int hi = std::stoi(lc_range.substr(colon + 1));
        csv << "l_c,accuracy\n";
        for (int lc = lo; lc <= hi; ++lc) {
          RunOptions cell = opt;
          cell.l_c = lc;
          std::snprintf(buf, sizeof(buf), "%.17g", cell_accuracy(cell));
          csv << lc << "," << buf << "\n";
        }
      } else {
        if (rho_list.empty() || gamma_list.empty())
          fail("sweep needs --rho-list and --gamma-list, --lc-range, or --preset");
        const std::vector<double> rhos = parse_list(rho_list);
        const std::vector<double> gammas = parse_list(gamma_list);
        csv << "rho\\gamma";
        for (double g : gammas) {
          std::snprintf(buf, sizeof(buf), "%g", g);
          csv << "," << buf;
        }
        csv << "\n";
        for (double r : rhos) {
          std::snprintf(buf, sizeof(buf), "%g", r);
          csv << buf;
          for (double g : gammas) {
            RunOptions cell = opt;
            cell.rho = r;
            cell.gamma = g;
            std::snprintf(buf, sizeof(buf), "%.17g", cell_accuracy(cell));
            csv << "," << buf;
          }
          csv << "\n";
        }
      }
      std::cout << "wrote " << (fs::path(opt.out_dir) / "sweep.csv").string()
                << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    fail(e.what());
  }
  return 0;
}
