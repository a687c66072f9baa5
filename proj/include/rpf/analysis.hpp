// Attention-dynamics diagnostics: spatial variance and centroid of a
// query-position attention vector over a patch grid, centroid deviation from
// the ground truth, correctness grouping, and trace/heatmap export.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rpf {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

// Half-open pixel rectangle: [x0, x1) x [y0, y1).
struct PixelBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  Vec2 center() const { return {(x0 + x1) / 2.0, (y0 + y1) / 2.0}; }
};

// Closed on low edges, open on high edges.
bool inside_box(Vec2 p, const PixelBox& box);

// Patch grid in pixel units. Token index i maps row-major to the cell
// center p_i.
struct VisualGrid {
  int rows = 0;
  int cols = 0;
  double cell_size = 0.0;

  int cell_count() const { return rows * cols; }
  double width() const { return cols * cell_size; }
  double height() const { return rows * cell_size; }
  double diagonal() const;
  Vec2 cell_center(int i) const;
  PixelBox cell_box(int row, int col) const;
};

// mu = sum a(i) p_i, sigma2 = sum a(i) |p_i - mu|^2. The input must be a
// probability vector over the grid's cells (sum 1 within 1e-9).
struct CentroidResult {
  Vec2 mu;
  double sigma2 = 0.0;
};
CentroidResult centroid_and_variance(const std::vector<double>& a,
                                     const VisualGrid& grid);

// d = |mu - g| / D with D > 0.
double centroid_deviation(Vec2 mu, Vec2 g, double diagonal);

enum class Stage : std::uint8_t { kPrefill, kReprefill, kDecode };
const char* stage_name(Stage s);
std::optional<Stage> stage_from_name(const std::string& name);

// One diagnostics row of a sample: the (stage, step) attention statistics.
struct StepStat {
  Stage stage = Stage::kPrefill;
  int step = 0;
  double sigma2 = 0.0;
  Vec2 mu;
  double d = 0.0;
  std::vector<double> attn;  // optional layer-averaged vector for heatmaps
};

struct GroundingRecord {
  int sample_id = 0;
  std::string variant;
  Vec2 predicted;
  PixelBox gt_box;
  bool correct = false;
  std::vector<StepStat> series;
};

// Mean sigma2/d per (stage, step) over one correctness group. An empty
// group keeps an empty series rather than zeros.
struct GroupSeries {
  std::size_t count = 0;
  struct Point {
    Stage stage;
    int step;
    double mean_sigma2;
    double mean_d;
  };
  std::vector<Point> points;
};

struct GroupedSeries {
  GroupSeries correct;
  GroupSeries wrong;
};

// Correctness is recomputed from each record's prediction and box.
GroupedSeries group_by_correctness(const std::vector<GroundingRecord>& records);

// rows x cols matrix from a normalized attention vector, written as CSV and
// as an 8-bit plain PGM with linear min-max scaling.
void export_heatmap(const std::vector<double>& a, const VisualGrid& grid,
                    const std::string& csv_path, const std::string& pgm_path);
std::vector<std::vector<double>> read_heatmap_csv(const std::string& path);

// Trace files: JSON Lines, one object per (sample, stage, step).
void write_trace_jsonl(const std::string& path,
                       const std::vector<GroundingRecord>& records);

struct TraceReadResult {
  std::vector<GroundingRecord> records;
  std::vector<std::string> errors;  // "line N: message" per malformed line
};
TraceReadResult read_trace_jsonl(const std::string& path);

}  // namespace rpf
