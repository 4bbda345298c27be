#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace kmi {

enum class Scale { continuous, binary, ordinal, nominal };
enum class Role { predictor, outcome, cluster_id, stratum };
enum class Truth { null_var, nonnull_var };

inline bool is_categorical(Scale s) {
  return s == Scale::binary || s == Scale::ordinal || s == Scale::nominal;
}

inline const char* scale_name(Scale s) {
  switch (s) {
    case Scale::continuous: return "continuous";
    case Scale::binary: return "binary";
    case Scale::ordinal: return "ordinal";
    case Scale::nominal: return "nominal";
  }
  return "?";
}

inline const char* role_name(Role r) {
  switch (r) {
    case Role::predictor: return "predictor";
    case Role::outcome: return "outcome";
    case Role::cluster_id: return "cluster_id";
    case Role::stratum: return "stratum";
  }
  return "?";
}

struct VariableSpec {
  std::string name;
  Scale scale = Scale::continuous;
  int levels = 0;  // K for ordinal/nominal (>= 3); ignored otherwise
  Role role = Role::predictor;
  std::optional<Truth> truth;  // simulation ground truth only

  // Number of design columns this variable contributes when dummy-encoded.
  int encoded_width() const {
    if (scale == Scale::ordinal || scale == Scale::nominal) return levels - 1;
    return 1;
  }

  void validate() const {
    if ((scale == Scale::ordinal || scale == Scale::nominal) && levels < 3)
      throw std::invalid_argument("variable '" + name +
                                  "': ordinal/nominal requires K >= 3");
  }

  // Whether v is inside the column's value domain.
  bool in_domain(double v) const {
    if (!std::isfinite(v)) return false;
    switch (scale) {
      case Scale::continuous: return true;
      case Scale::binary: return v == 0.0 || v == 1.0;
      case Scale::ordinal:
      case Scale::nominal: {
        double r = std::round(v);
        return r == v && r >= 1.0 && r <= levels;
      }
    }
    return false;
  }
};

// Column-typed tabular dataset with a per-cell missingness mask. Values in
// masked cells carry no meaning. Immutable by convention once built: the
// pipeline only ever constructs new frames.
class MixedFrame {
 public:
  MixedFrame() = default;

  MixedFrame(std::vector<VariableSpec> specs, std::size_t n_rows)
      : specs_(std::move(specs)), n_rows_(n_rows) {
    for (const auto& s : specs_) s.validate();
    values_.assign(specs_.size(), std::vector<double>(n_rows, 0.0));
    mask_.assign(specs_.size(), std::vector<std::uint8_t>(n_rows, 0));
  }

  std::size_t n_rows() const { return n_rows_; }
  std::size_t n_cols() const { return specs_.size(); }
  const std::vector<VariableSpec>& specs() const { return specs_; }
  const VariableSpec& spec(std::size_t j) const { return specs_.at(j); }

  const std::vector<double>& column(std::size_t j) const { return values_.at(j); }
  std::vector<double>& column(std::size_t j) { return values_.at(j); }

  double value(std::size_t i, std::size_t j) const { return values_[j][i]; }
  void set_value(std::size_t i, std::size_t j, double v) { values_[j][i] = v; }

  bool missing(std::size_t i, std::size_t j) const { return mask_[j][i] != 0; }
  void set_missing(std::size_t i, std::size_t j, bool m) { mask_[j][i] = m ? 1 : 0; }

  std::size_t column_index(const std::string& name) const {
    for (std::size_t j = 0; j < specs_.size(); ++j)
      if (specs_[j].name == name) return j;
    throw std::out_of_range("no column named '" + name + "'");
  }

  std::optional<std::size_t> find_column(const std::string& name) const {
    for (std::size_t j = 0; j < specs_.size(); ++j)
      if (specs_[j].name == name) return j;
    return std::nullopt;
  }

  std::vector<std::size_t> columns_with_role(Role r) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < specs_.size(); ++j)
      if (specs_[j].role == r) out.push_back(j);
    return out;
  }

  std::vector<std::size_t> predictor_indices() const {
    return columns_with_role(Role::predictor);
  }

  std::size_t outcome_index() const {
    auto v = columns_with_role(Role::outcome);
    if (v.size() != 1)
      throw std::logic_error("frame must have exactly one outcome column, has " +
                             std::to_string(v.size()));
    return v[0];
  }

  std::size_t missing_count(std::size_t j) const {
    std::size_t c = 0;
    for (auto m : mask_[j]) c += m;
    return c;
  }

  bool any_missing() const {
    for (std::size_t j = 0; j < n_cols(); ++j)
      if (missing_count(j) > 0) return true;
    return false;
  }

  bool column_complete(std::size_t j) const { return missing_count(j) == 0; }

 private:
  std::vector<VariableSpec> specs_;
  std::size_t n_rows_ = 0;
  std::vector<std::vector<double>> values_;      // column-major
  std::vector<std::vector<std::uint8_t>> mask_;  // 1 = missing
};

struct MissingRates {
  std::vector<double> per_column;  // every column, frame order
  double overall = 0.0;            // masked predictor cells / (n * #predictors)
};

inline MissingRates missing_rates(const MixedFrame& f) {
  MissingRates out;
  out.per_column.resize(f.n_cols(), 0.0);
  std::size_t pred_cells = 0, pred_missing = 0;
  for (std::size_t j = 0; j < f.n_cols(); ++j) {
    std::size_t c = f.missing_count(j);
    out.per_column[j] =
        f.n_rows() == 0 ? 0.0 : static_cast<double>(c) / static_cast<double>(f.n_rows());
    if (f.spec(j).role == Role::predictor) {
      pred_cells += f.n_rows();
      pred_missing += c;
    }
  }
  out.overall = pred_cells == 0
                    ? 0.0
                    : static_cast<double>(pred_missing) / static_cast<double>(pred_cells);
  return out;
}

}  // namespace kmi
