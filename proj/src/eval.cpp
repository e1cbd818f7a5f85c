#include "hmeta/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>

#include "hmeta/errors.hpp"

namespace hmeta {

double success_rate(const std::vector<bool>& flags) {
  if (flags.empty()) throw ContractError("success rate over zero episodes");
  double s = 0.0;
  for (bool f : flags) s += f ? 1.0 : 0.0;
  return s / static_cast<double>(flags.size());
}

double standard_error(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  return std::sqrt(var / static_cast<double>(n));
}

std::vector<double> average_rank(const std::vector<MethodCurve>& curves,
                                 std::int64_t checkpoint) {
  if (curves.empty()) throw ContractError("ranking needs at least one method");
  const auto& grid = curves[0].env_steps;
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i] <= grid[i - 1])
      throw ContractError("checkpoint grid must increase strictly");
  if (checkpoint < 0 || checkpoint >= static_cast<std::int64_t>(grid.size()))
    throw ContractError("checkpoint index out of range");

  const std::size_t n_tasks =
      curves[0].task_success[static_cast<std::size_t>(checkpoint)].size();
  for (const auto& c : curves) {
    if (c.env_steps != grid)
      throw ContractError("method " + c.method +
                          " has a different checkpoint grid");
    if (c.task_success.size() != grid.size() ||
        c.task_success[static_cast<std::size_t>(checkpoint)].size() != n_tasks)
      throw ContractError("method " + c.method +
                          " has a different task set");
  }

  const std::size_t m = curves.size();
  std::vector<double> ranks(m, 0.0);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto rate = [&](std::size_t i) {
      return curves[i].task_success[static_cast<std::size_t>(checkpoint)][t];
    };
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return rate(a) > rate(b);
                     });
    // ties take the mean of the positions they straddle
    std::size_t i = 0;
    while (i < m) {
      std::size_t j = i;
      while (j + 1 < m && rate(order[j + 1]) == rate(order[i])) ++j;
      const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t p = i; p <= j; ++p) ranks[order[p]] += shared;
      i = j + 1;
    }
  }
  for (double& r : ranks) r /= static_cast<double>(n_tasks);
  return ranks;
}

namespace {

std::int64_t block_params(std::int64_t d) {
  const std::int64_t ff = 2 * d;
  return 4 * d * d + 4 * d      // attention projections
         + 4 * d                // two layer norms
         + 2 * d * ff + ff + d; // feed-forward
}

}  // namespace

AttentionCost count_attention(std::int64_t k, std::int64_t s,
                              std::int64_t d_model, std::int64_t h,
                              std::int64_t l1, std::int64_t l2) {
  if (k < 1 || s < 1 || d_model < 1 || h < 1 || l1 < 1 || l2 < 1)
    throw ContractError("attention counting needs positive arguments");
  AttentionCost c;
  c.intra = l1 * k * h * s * s;
  c.inter = l2 * h * k * k;
  c.hierarchical = c.intra + c.inter;
  c.flat_total = (l1 + l2) * h * (k * s) * (k * s);
  c.flat_same_depth = l1 * h * (k * s) * (k * s);
  c.ratio = static_cast<double>(c.flat_same_depth) /
            static_cast<double>(c.hierarchical);
  c.t1_params = l1 * block_params(d_model);
  c.t2_params = l2 * block_params(d_model);
  c.flat_params = (l1 + l2) * block_params(d_model);
  return c;
}

namespace {

struct Centered {
  std::vector<std::vector<double>> rows;
  std::size_t d = 0;
};

Centered center_rows(const std::vector<EmbeddingRow>& rows) {
  Centered c;
  c.d = rows[0].vec.size();
  std::vector<double> mean(c.d, 0.0);
  for (const auto& r : rows) {
    if (r.vec.size() != c.d)
      throw ContractError("embedding rows have mixed widths");
    for (std::size_t j = 0; j < c.d; ++j) mean[j] += r.vec[j];
  }
  for (double& m : mean) m /= static_cast<double>(rows.size());
  c.rows.reserve(rows.size());
  for (const auto& r : rows) {
    std::vector<double> v(c.d);
    for (std::size_t j = 0; j < c.d; ++j) v[j] = r.vec[j] - mean[j];
    c.rows.push_back(std::move(v));
  }
  return c;
}

/// Dominant eigenvector of the symmetric matrix `cov` by power iteration.
/// Returns false when the matrix is numerically zero.
bool power_iterate(const std::vector<double>& cov, std::size_t d,
                   std::vector<double>* vec) {
  double scale = 0.0;
  for (double v : cov) scale = std::max(scale, std::abs(v));
  if (scale < 1e-300) return false;

  // deterministic start with all symmetries mildly broken
  std::vector<double> v(d);
  for (std::size_t j = 0; j < d; ++j)
    v[j] = 1.0 + 1e-3 * static_cast<double>(j);
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;

  std::vector<double> next(d);
  for (int it = 0; it < 100000; ++it) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += cov[i * d + j] * v[j];
      next[i] = s;
    }
    norm = 0.0;
    for (double x : next) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-300 * scale) return false;
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += next[j] * v[j];
    const double sign = dot < 0.0 ? -1.0 : 1.0;
    double delta = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      next[j] = sign * next[j] / norm;
      delta = std::max(delta, std::abs(next[j] - v[j]));
    }
    v.swap(next);
    if (delta < 1e-9) break;
  }
  *vec = std::move(v);
  return true;
}

double silhouette_full(const std::vector<EmbeddingRow>& rows) {
  const std::size_t n = rows.size();
  std::vector<std::string> labels;
  for (const auto& r : rows)
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end())
      labels.push_back(r.label);

  const auto dist = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t j = 0; j < rows[a].vec.size(); ++j) {
      const double d = rows[a].vec[j] - rows[b].vec[j];
      s += d * d;
    }
    return std::sqrt(s);
  };

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double a = 0.0;
    std::size_t a_n = 0;
    double b = std::numeric_limits<double>::infinity();
    for (const auto& lab : labels) {
      if (lab == rows[i].label) continue;
      double s = 0.0;
      std::size_t c = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (rows[j].label == lab) {
          s += dist(i, j);
          ++c;
        }
      b = std::min(b, s / static_cast<double>(c));
    }
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && rows[j].label == rows[i].label) {
        a += dist(i, j);
        ++a_n;
      }
    a /= static_cast<double>(a_n);
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

}  // namespace

Projection project_embeddings(const std::vector<EmbeddingRow>& rows) {
  std::vector<std::string> labels;
  for (const auto& r : rows)
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end())
      labels.push_back(r.label);
  if (labels.size() < 2)
    throw ContractError("projection needs at least two labels");
  for (const auto& lab : labels) {
    std::size_t c = 0;
    for (const auto& r : rows) c += r.label == lab ? 1 : 0;
    if (c < 2)
      throw ContractError("label " + lab + " has fewer than two rows");
  }

  Projection out;
  out.coords.assign(rows.size(), {0.0, 0.0});

  const Centered c = center_rows(rows);
  const std::size_t d = c.d, n = c.rows.size();
  std::vector<double> cov(d * d, 0.0);
  for (const auto& r : c.rows)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i * d + j] += r[i] * r[j];
  for (double& v : cov) v /= static_cast<double>(n);

  std::vector<double> v1;
  if (!power_iterate(cov, d, &v1)) {
    out.degenerate = true;
    return out;
  }
  // deflate the first component, then repeat for the second
  double lam1 = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += cov[i * d + j] * v1[j];
    lam1 += v1[i] * s;
  }
  std::vector<double> cov2 = cov;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) cov2[i * d + j] -= lam1 * v1[i] * v1[j];
  std::vector<double> v2(d, 0.0);
  power_iterate(cov2, d, &v2);  // rank-1 data leaves the y axis at zero

  for (std::size_t r = 0; r < n; ++r) {
    double x = 0.0, y = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      x += c.rows[r][j] * v1[j];
      y += c.rows[r][j] * v2[j];
    }
    out.coords[r] = {x, y};
  }
  out.silhouette = silhouette_full(rows);
  return out;
}

namespace {

void put_num(std::ostream& os, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  os << buf;
}

void put_coord(std::ostream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  os << buf;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                    "#ff7f0e", "#9467bd", "#8c564b"};
constexpr int kPaletteN = 6;
constexpr double kW = 640.0, kH = 480.0, kPad = 56.0;

struct Box {
  double xlo = 0.0, xhi = 1.0, ylo = 0.0, yhi = 1.0;
  void grow(double x, double y) {
    xlo = std::min(xlo, x);
    xhi = std::max(xhi, x);
    ylo = std::min(ylo, y);
    yhi = std::max(yhi, y);
  }
  double px(double x) const {
    return kPad + (x - xlo) / (xhi - xlo) * (kW - 2 * kPad);
  }
  double py(double y) const {
    return kH - kPad - (y - ylo) / (yhi - ylo) * (kH - 2 * kPad);
  }
  void pad() {
    if (xhi == xlo) {
      xlo -= 1.0;
      xhi += 1.0;
    }
    if (yhi == ylo) {
      ylo -= 1.0;
      yhi += 1.0;
    }
  }
};

void svg_open(std::ostream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" "
        "height=\"480\" viewBox=\"0 0 640 480\">\n"
     << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n"
     << "<text x=\"320\" y=\"24\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"14\">"
     << title << "</text>\n"
     << "<rect x=\"56\" y=\"56\" width=\"528\" height=\"368\" fill=\"none\" "
        "stroke=\"#999\"/>\n";
}

}  // namespace

void svg_lines(std::ostream& os, const std::vector<LineSeries>& series,
               const std::string& title) {
  Box box;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        box = Box{s.x[i], s.x[i], s.y[i], s.y[i]};
        first = false;
      } else {
        box.grow(s.x[i], s.y[i]);
      }
    }
  box.pad();
  svg_open(os, title);
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % kPaletteN];
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (i) os << ' ';
      put_coord(os, box.px(s.x[i]));
      os << ',';
      put_coord(os, box.py(s.y[i]));
    }
    os << "\"/>\n";
    os << "<text x=\"64\" y=\"" << 72 + 16 * static_cast<int>(si)
       << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color
       << "\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
}

void svg_scatter(std::ostream& os, const std::vector<ScatterPoint>& points,
                 const std::vector<std::string>& group_names,
                 const std::string& title) {
  Box box;
  bool first = true;
  for (const auto& p : points) {
    if (first) {
      box = Box{p.x, p.x, p.y, p.y};
      first = false;
    } else {
      box.grow(p.x, p.y);
    }
  }
  box.pad();
  svg_open(os, title);
  for (const auto& p : points) {
    const char* color = kPalette[p.group % kPaletteN];
    os << "<circle cx=\"";
    put_coord(os, box.px(p.x));
    os << "\" cy=\"";
    put_coord(os, box.py(p.y));
    os << "\" r=\"3\" fill=\"" << color << "\" fill-opacity=\"0.7\"/>\n";
  }
  for (std::size_t gi = 0; gi < group_names.size(); ++gi) {
    os << "<text x=\"64\" y=\"" << 72 + 16 * static_cast<int>(gi)
       << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
       << kPalette[gi % kPaletteN] << "\">" << group_names[gi] << "</text>\n";
  }
  os << "</svg>\n";
}

void write_curves_csv(std::ostream& os,
                      const std::vector<MethodCurve>& curves) {
  os << "method,env_steps,task,success_rate\n";
  for (const auto& c : curves)
    for (std::size_t cp = 0; cp < c.env_steps.size(); ++cp)
      for (std::size_t t = 0; t < c.task_success[cp].size(); ++t) {
        os << c.method << ',' << c.env_steps[cp] << ',' << t << ',';
        put_num(os, c.task_success[cp][t]);
        os << '\n';
      }
}

void write_ranks_csv(std::ostream& os, const std::vector<MethodCurve>& curves,
                     std::int64_t checkpoint) {
  const std::vector<double> ranks = average_rank(curves, checkpoint);
  os << "method,avg_rank\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    os << curves[i].method << ',';
    put_num(os, ranks[i]);
    os << '\n';
  }
}

}  // namespace hmeta
