#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace hmeta {

/// Per-checkpoint success rates of one method over a fixed task set.
struct MethodCurve {
  std::string method;
  std::vector<std::int64_t> env_steps;             // strictly increasing
  std::vector<std::vector<double>> task_success;   // [checkpoint][task]
};

/// Exact attention-score entry counts for one decision point, plus the
/// stack parameter counts under the d_ff = 2 * d_model block layout.
struct AttentionCost {
  std::int64_t intra = 0;            // first stage: l1 * k * h * s^2
  std::int64_t inter = 0;            // second stage: l2 * h * k^2
  std::int64_t hierarchical = 0;     // intra + inter
  std::int64_t flat_total = 0;       // (l1 + l2) blocks over k*s slots
  std::int64_t flat_same_depth = 0;  // l1 blocks over k*s slots
  /// flat_same_depth / hierarchical; equals k^2 s^2 / (k s^2 + k^2) when
  /// both stages run the same number of blocks.
  double ratio = 0.0;
  std::int64_t t1_params = 0;
  std::int64_t t2_params = 0;
  std::int64_t flat_params = 0;      // at l1 + l2 blocks
};

/// Fraction of successful episodes. Throws ContractError when empty.
double success_rate(const std::vector<bool>& flags);

/// Sample standard error of the mean; zero for fewer than two values.
double standard_error(const std::vector<double>& values);

/// Mean rank per method (1 = best) at one checkpoint index, averaged over
/// tasks. Ties share the mean of their positions. All curves must agree on
/// the checkpoint grid and task count.
std::vector<double> average_rank(const std::vector<MethodCurve>& curves,
                                 std::int64_t checkpoint);

AttentionCost count_attention(std::int64_t k, std::int64_t s,
                              std::int64_t d_model, std::int64_t h,
                              std::int64_t l1, std::int64_t l2);

struct EmbeddingRow {
  std::string label;
  std::vector<double> vec;
};

struct Projection {
  std::vector<std::array<double, 2>> coords;  // one per input row
  double silhouette = 0.0;  // on the full vectors, euclidean
  bool degenerate = false;  // data had no spread; coords are zeros
};

/// Centers the rows, projects onto the top two principal components
/// (power iteration, tolerance 1e-9) and scores label separation with the
/// silhouette on the original vectors. Needs at least two labels and two
/// rows per label.
Projection project_embeddings(const std::vector<EmbeddingRow>& rows);

// CSV emitters. Numbers only; plots are presentation copies of these.
void write_curves_csv(std::ostream& os,
                      const std::vector<MethodCurve>& curves);
void write_ranks_csv(std::ostream& os, const std::vector<MethodCurve>& curves,
                     std::int64_t checkpoint);

struct LineSeries {
  std::string name;
  std::vector<double> x, y;
};

void svg_lines(std::ostream& os, const std::vector<LineSeries>& series,
               const std::string& title);

struct ScatterPoint {
  double x = 0.0, y = 0.0;
  std::int32_t group = 0;
};

void svg_scatter(std::ostream& os, const std::vector<ScatterPoint>& points,
                 const std::vector<std::string>& group_names,
                 const std::string& title);

}  // namespace hmeta
