#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "kmi/frame.hpp"

namespace kmi {

struct Group {
  std::size_t variable;   // frame column index
  std::size_t col_begin;  // first design column
  std::size_t width;      // K-1 for categoricals, 1 otherwise
  bool degenerate = false;  // constant column, encoded all-zero
};

// Dense design with variable->column-range bookkeeping. A K-category variable
// expands to K-1 dummies against a baseline category; continuous/binary
// columns are standardized singletons (population moments).
struct GroupedDesign {
  Eigen::MatrixXd matrix;
  std::vector<Group> groups;
  std::vector<int> baseline;          // per group: omitted category (1-based), 0 for singletons
  std::vector<double> center, scale;  // per design column (identity for dummies)

  std::size_t n_rows() const { return static_cast<std::size_t>(matrix.rows()); }
  std::size_t n_cols() const { return static_cast<std::size_t>(matrix.cols()); }

  const Group* group_for_variable(std::size_t variable) const {
    for (const auto& g : groups)
      if (g.variable == variable) return &g;
    return nullptr;
  }
};

struct EncodeOptions {
  bool standardize_singletons = true;  // continuous/binary -> mean 0, sd 1
  int baseline_category = 1;           // omitted category for dummy blocks
};

// Dummy/standardized encoding of the given frame columns (in ascending index
// order). Requires the included columns to be fully observed.
inline GroupedDesign encode_grouped(const MixedFrame& frame,
                                    const std::vector<std::size_t>& include,
                                    const EncodeOptions& opt = {}) {
  const std::size_t n = frame.n_rows();
  std::size_t q = 0;
  for (std::size_t j : include) {
    if (!frame.column_complete(j))
      throw std::invalid_argument("encode_grouped: column '" +
                                  frame.spec(j).name +
                                  "' has missing cells; impute first");
    q += static_cast<std::size_t>(frame.spec(j).encoded_width());
  }

  GroupedDesign d;
  d.matrix.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(q));
  d.center.assign(q, 0.0);
  d.scale.assign(q, 1.0);

  std::size_t col = 0;
  for (std::size_t j : include) {
    const auto& spec = frame.spec(j);
    const auto& x = frame.column(j);
    Group g;
    g.variable = j;
    g.col_begin = col;
    if (is_categorical(spec.scale) && spec.scale != Scale::binary) {
      const int K = spec.levels;
      int base = opt.baseline_category;
      g.width = static_cast<std::size_t>(K - 1);
      for (std::size_t i = 0; i < n; ++i) {
        int cat = static_cast<int>(std::llround(x[i]));
        int slot = 0;
        for (int k = 1; k <= K; ++k) {
          if (k == base) continue;
          if (cat == k) d.matrix(static_cast<Eigen::Index>(i),
                                 static_cast<Eigen::Index>(col + slot)) = 1.0;
          ++slot;
        }
      }
      d.baseline.push_back(base);
    } else {
      g.width = 1;
      double m = 0.0;
      for (double v : x) m += v;
      m /= static_cast<double>(n);
      double ss = 0.0;
      for (double v : x) ss += (v - m) * (v - m);
      double s = std::sqrt(ss / static_cast<double>(n));
      if (s <= 0.0) {
        g.degenerate = true;  // constant column -> all-zero singleton
        for (std::size_t i = 0; i < n; ++i)
          d.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col)) = 0.0;
      } else if (opt.standardize_singletons) {
        for (std::size_t i = 0; i < n; ++i)
          d.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col)) =
              (x[i] - m) / s;
        d.center[col] = m;
        d.scale[col] = s;
      } else {
        for (std::size_t i = 0; i < n; ++i)
          d.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col)) = x[i];
      }
      d.baseline.push_back(0);
    }
    col += g.width;
    d.groups.push_back(g);
  }
  return d;
}

// Recovers category codes from one dummy block (argmax; all-zero -> baseline).
inline std::vector<double> decode_dummy_block(const GroupedDesign& d,
                                              std::size_t group_index) {
  const Group& g = d.groups.at(group_index);
  const int base = d.baseline.at(group_index);
  const std::size_t n = d.n_rows();
  std::vector<double> codes(n, static_cast<double>(base));
  if (g.width == 1 && base == 0)
    throw std::logic_error("decode_dummy_block: group is not a dummy block");
  // Map slot -> category (categories 1..K skipping the baseline).
  const int K = static_cast<int>(g.width) + 1;
  std::vector<int> slot_cat;
  for (int k = 1; k <= K; ++k)
    if (k != base) slot_cat.push_back(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < g.width; ++s) {
      if (d.matrix(static_cast<Eigen::Index>(i),
                   static_cast<Eigen::Index>(g.col_begin + s)) == 1.0) {
        codes[i] = static_cast<double>(slot_cat[s]);
        break;
      }
    }
  }
  return codes;
}

}  // namespace kmi
