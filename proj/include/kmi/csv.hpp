#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kmi/frame.hpp"

namespace kmi {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(field);
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

// Shortest text that round-trips the double exactly.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

}  // namespace detail

// Reads a UTF-8, comma-separated, header-first CSV against the given specs.
// Cells equal to missing_token or empty are masked. Frame columns follow the
// declared order; the header may permute columns but must cover all of them
// exactly once with no extras.
inline MixedFrame read_csv(const std::filesystem::path& path,
                           const std::vector<VariableSpec>& specs,
                           const std::string& missing_token = "NA") {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line))
    throw ParseError("'" + path.string() + "': empty file, expected header");
  auto header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);

  std::vector<std::size_t> header_to_spec(header.size());
  std::vector<bool> seen(specs.size(), false);
  for (std::size_t c = 0; c < header.size(); ++c) {
    bool found = false;
    for (std::size_t j = 0; j < specs.size(); ++j) {
      if (specs[j].name == header[c]) {
        if (seen[j])
          throw ParseError("duplicate column '" + header[c] + "' in header");
        header_to_spec[c] = j;
        seen[j] = true;
        found = true;
        break;
      }
    }
    if (!found) throw ParseError("unknown column '" + header[c] + "' in header");
  }
  for (std::size_t j = 0; j < specs.size(); ++j)
    if (!seen[j])
      throw ParseError("column '" + specs[j].name + "' missing from header");

  std::vector<std::vector<double>> values(specs.size());
  std::vector<std::vector<std::uint8_t>> mask(specs.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() && in.eof()) break;
    ++row;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw ParseError("row " + std::to_string(row) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    for (std::size_t c = 0; c < fields.size(); ++c) {
      std::size_t j = header_to_spec[c];
      std::string cell = detail::trim(fields[c]);
      if (cell.empty() || cell == missing_token) {
        values[j].push_back(0.0);
        mask[j].push_back(1);
        continue;
      }
      char* end = nullptr;
      double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0')
        throw ParseError("row " + std::to_string(row) + ", column '" +
                         specs[j].name + "': cannot parse '" + cell + "'");
      if (!specs[j].in_domain(v))
        throw ParseError("row " + std::to_string(row) + ", column '" +
                         specs[j].name + "': value '" + cell +
                         "' outside the " + scale_name(specs[j].scale) +
                         " domain");
      values[j].push_back(v);
      mask[j].push_back(0);
    }
  }

  MixedFrame f(specs, row);
  for (std::size_t j = 0; j < specs.size(); ++j)
    for (std::size_t i = 0; i < row; ++i) {
      f.set_value(i, j, values[j][i]);
      f.set_missing(i, j, mask[j][i] != 0);
    }
  return f;
}

inline void write_csv(const MixedFrame& f, const std::filesystem::path& path,
                      const std::string& missing_token = "NA") {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path.string() + "'");
  for (std::size_t j = 0; j < f.n_cols(); ++j)
    out << (j ? "," : "") << f.spec(j).name;
  out << "\n";
  for (std::size_t i = 0; i < f.n_rows(); ++i) {
    for (std::size_t j = 0; j < f.n_cols(); ++j) {
      if (j) out << ",";
      if (f.missing(i, j)) {
        out << missing_token;
      } else if (is_categorical(f.spec(j).scale)) {
        out << static_cast<long long>(std::llround(f.value(i, j)));
      } else {
        out << detail::format_double(f.value(i, j));
      }
    }
    out << "\n";
  }
}

// JSON sidecar: [{"name":..., "scale":..., "K":..., "role":..., "truth":...}].
inline nlohmann::ordered_json specs_to_json(const std::vector<VariableSpec>& specs) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& s : specs) {
    nlohmann::ordered_json o;
    o["name"] = s.name;
    o["scale"] = scale_name(s.scale);
    if (s.scale == Scale::ordinal || s.scale == Scale::nominal) o["K"] = s.levels;
    o["role"] = role_name(s.role);
    if (s.truth) o["truth"] = *s.truth == Truth::nonnull_var ? "nonnull" : "null";
    arr.push_back(std::move(o));
  }
  return arr;
}

inline std::vector<VariableSpec> specs_from_json(const nlohmann::json& arr) {
  std::vector<VariableSpec> specs;
  for (const auto& o : arr) {
    VariableSpec s;
    s.name = o.at("name").get<std::string>();
    std::string sc = o.at("scale").get<std::string>();
    if (sc == "continuous") s.scale = Scale::continuous;
    else if (sc == "binary") s.scale = Scale::binary;
    else if (sc == "ordinal") s.scale = Scale::ordinal;
    else if (sc == "nominal") s.scale = Scale::nominal;
    else throw ParseError("unknown scale '" + sc + "'");
    if (o.contains("K")) s.levels = o.at("K").get<int>();
    std::string role = o.value("role", std::string("predictor"));
    if (role == "predictor") s.role = Role::predictor;
    else if (role == "outcome") s.role = Role::outcome;
    else if (role == "cluster_id") s.role = Role::cluster_id;
    else if (role == "stratum") s.role = Role::stratum;
    else throw ParseError("unknown role '" + role + "'");
    if (o.contains("truth"))
      s.truth = o.at("truth").get<std::string>() == "nonnull" ? Truth::nonnull_var
                                                              : Truth::null_var;
    s.validate();
    specs.push_back(std::move(s));
  }
  return specs;
}

inline std::vector<VariableSpec> load_specs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open specs file '" + path.string() + "'");
  nlohmann::json j;
  in >> j;
  return specs_from_json(j);
}

inline void save_specs(const std::vector<VariableSpec>& specs,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  out << specs_to_json(specs).dump(2) << "\n";
}

}  // namespace kmi
