#include "rpf/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace rpf {

namespace {
using nlohmann::json;
}

bool inside_box(Vec2 p, const PixelBox& box) {
  return p.x >= box.x0 && p.x < box.x1 && p.y >= box.y0 && p.y < box.y1;
}

double VisualGrid::diagonal() const {
  return std::sqrt(width() * width() + height() * height());
}

Vec2 VisualGrid::cell_center(int i) const {
  const int r = i / cols;
  const int c = i % cols;
  return {(c + 0.5) * cell_size, (r + 0.5) * cell_size};
}

PixelBox VisualGrid::cell_box(int row, int col) const {
  return {col * cell_size, row * cell_size, (col + 1) * cell_size,
          (row + 1) * cell_size};
}

CentroidResult centroid_and_variance(const std::vector<double>& a,
                                     const VisualGrid& grid) {
  if (static_cast<int>(a.size()) != grid.cell_count())
    throw std::invalid_argument("attention length does not match grid");
  double sum = 0.0;
  for (double v : a) sum += v;
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("attention vector is not normalized");

  CentroidResult res;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vec2 p = grid.cell_center(static_cast<int>(i));
    res.mu.x += a[i] * p.x;
    res.mu.y += a[i] * p.y;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vec2 p = grid.cell_center(static_cast<int>(i));
    const double dx = p.x - res.mu.x;
    const double dy = p.y - res.mu.y;
    res.sigma2 += a[i] * (dx * dx + dy * dy);
  }
  return res;
}

double centroid_deviation(Vec2 mu, Vec2 g, double diagonal) {
  if (diagonal <= 0.0) throw std::invalid_argument("diagonal must be positive");
  const double dx = mu.x - g.x;
  const double dy = mu.y - g.y;
  return std::sqrt(dx * dx + dy * dy) / diagonal;
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kPrefill: return "prefill";
    case Stage::kReprefill: return "reprefill";
    case Stage::kDecode: return "decode";
  }
  return "?";
}

std::optional<Stage> stage_from_name(const std::string& name) {
  if (name == "prefill") return Stage::kPrefill;
  if (name == "reprefill") return Stage::kReprefill;
  if (name == "decode") return Stage::kDecode;
  return std::nullopt;
}

namespace {

GroupSeries summarize(const std::vector<const GroundingRecord*>& group) {
  GroupSeries out;
  out.count = group.size();
  if (group.empty()) return out;

  // key: (stage, step) in encounter order of stages then step
  std::map<std::pair<int, int>, std::pair<double, double>> acc;
  std::map<std::pair<int, int>, std::size_t> n;
  for (const GroundingRecord* rec : group) {
    for (const StepStat& s : rec->series) {
      const auto key = std::make_pair(static_cast<int>(s.stage), s.step);
      acc[key].first += s.sigma2;
      acc[key].second += s.d;
      n[key] += 1;
    }
  }
  for (const auto& [key, sums] : acc) {
    const double cnt = static_cast<double>(n[key]);
    out.points.push_back({static_cast<Stage>(key.first), key.second,
                          sums.first / cnt, sums.second / cnt});
  }
  return out;
}

}  // namespace

GroupedSeries group_by_correctness(const std::vector<GroundingRecord>& records) {
  std::vector<const GroundingRecord*> correct, wrong;
  for (const GroundingRecord& r : records) {
    if (inside_box(r.predicted, r.gt_box))
      correct.push_back(&r);
    else
      wrong.push_back(&r);
  }
  return {summarize(correct), summarize(wrong)};
}

void export_heatmap(const std::vector<double>& a, const VisualGrid& grid,
                    const std::string& csv_path, const std::string& pgm_path) {
  if (static_cast<int>(a.size()) != grid.cell_count())
    throw std::invalid_argument("attention length does not match grid");

  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot write " + csv_path);
  char buf[64];
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", a[r * grid.cols + c]);
      csv << (c > 0 ? "," : "") << buf;
    }
    csv << "\n";
  }

  const double lo = *std::min_element(a.begin(), a.end());
  const double hi = *std::max_element(a.begin(), a.end());
  const double span = hi - lo;

  std::ofstream pgm(pgm_path);
  if (!pgm) throw std::runtime_error("cannot write " + pgm_path);
  pgm << "P2\n" << grid.cols << " " << grid.rows << "\n255\n";
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      int level = 0;
      if (span > 0.0)
        level = static_cast<int>(
            std::lround((a[r * grid.cols + c] - lo) / span * 255.0));
      pgm << (c > 0 ? " " : "") << level;
    }
    pgm << "\n";
  }
}

std::vector<std::vector<double>> read_heatmap_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::vector<double>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) comma = line.size();
      row.push_back(std::stod(line.substr(start, comma - start)));
      start = comma + 1;
    }
    out.push_back(std::move(row));
  }
  return out;
}

namespace {

json stat_to_json(const GroundingRecord& rec, const StepStat& s) {
  json j;
  j["sample_id"] = rec.sample_id;
  j["variant"] = rec.variant;
  j["stage"] = stage_name(s.stage);
  j["t"] = s.step;
  j["sigma2"] = s.sigma2;
  j["mu_x"] = s.mu.x;
  j["mu_y"] = s.mu.y;
  j["d"] = s.d;
  j["correct"] = rec.correct;
  if (!s.attn.empty()) j["attn"] = s.attn;
  j["pred_x"] = rec.predicted.x;
  j["pred_y"] = rec.predicted.y;
  j["box"] = {rec.gt_box.x0, rec.gt_box.y0, rec.gt_box.x1, rec.gt_box.y1};
  return j;
}

}  // namespace

void write_trace_jsonl(const std::string& path,
                       const std::vector<GroundingRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const GroundingRecord& rec : records)
    for (const StepStat& s : rec.series) out << stat_to_json(rec, s).dump() << "\n";
}

TraceReadResult read_trace_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);

  TraceReadResult res;
  std::map<std::pair<int, std::string>, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      StepStat s;
      const std::string stage_str = j.at("stage").get<std::string>();
      const auto stage = stage_from_name(stage_str);
      if (!stage) throw std::runtime_error("unknown stage '" + stage_str + "'");
      s.stage = *stage;
      s.step = j.at("t").get<int>();
      s.sigma2 = j.at("sigma2").get<double>();
      s.mu = {j.at("mu_x").get<double>(), j.at("mu_y").get<double>()};
      s.d = j.at("d").get<double>();
      if (j.contains("attn")) s.attn = j["attn"].get<std::vector<double>>();

      const int sample_id = j.at("sample_id").get<int>();
      const std::string variant = j.at("variant").get<std::string>();
      const auto key = std::make_pair(sample_id, variant);
      auto it = index.find(key);
      if (it == index.end()) {
        GroundingRecord rec;
        rec.sample_id = sample_id;
        rec.variant = variant;
        rec.correct = j.at("correct").get<bool>();
        rec.predicted = {j.value("pred_x", 0.0), j.value("pred_y", 0.0)};
        if (j.contains("box")) {
          const auto b = j["box"].get<std::vector<double>>();
          if (b.size() == 4) rec.gt_box = {b[0], b[1], b[2], b[3]};
        }
        index[key] = res.records.size();
        res.records.push_back(std::move(rec));
        it = index.find(key);
      }
      res.records[it->second].series.push_back(std::move(s));
    } catch (const std::exception& e) {
      res.errors.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return res;
}

}  // namespace rpf
