#pragma once

// File formats: dataset and latent-state CSV, model JSON, matrix CSV, SVG
// heatmaps and aligned text tables.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "minitx/error.hpp"
#include "minitx/eval.hpp"
#include "minitx/model.hpp"
#include "minitx/simgen.hpp"
#include "minitx/trainer.hpp"

namespace minitx {

/// Shortest decimal text that parses back to exactly the same double.
inline std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      return out;
    }
    out.emplace_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_real(const std::string& cell, const std::string& where) {
  const std::string s = trim(cell);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw FormatError(where + ": cannot parse '" + cell + "' as a finite number");
  }
  return v;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  return out;
}

inline void finish(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Datasets

struct LoadOptions {
  std::optional<double> binarize;  // value >= threshold becomes 1, else 0
};

/// Header id,time,v1..vp; rows grouped by id, strictly increasing time within
/// each id. Row numbers in errors are 1-based file lines.
inline std::vector<Sequence> read_dataset(std::istream& in, const LoadOptions& opt = {},
                                          const std::string& name = "dataset") {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(name + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || trim(header[0]) != "id" || trim(header[1]) != "time") {
    throw FormatError(name + ": header must be id,time,v1,...,vp");
  }
  const std::size_t p = header.size() - 2;
  std::vector<Sequence> out;
  std::set<std::string> closed;
  std::vector<double> vars(p);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = name + " row " + std::to_string(row);
    if (cells.size() != header.size()) {
      throw FormatError(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                        std::to_string(cells.size()));
    }
    const std::string id = trim(cells[0]);
    if (id.empty()) throw FormatError(where + ": empty id");
    const double t = parse_real(cells[1], where);
    for (std::size_t j = 0; j < p; ++j) {
      double v = parse_real(cells[j + 2], where);
      if (opt.binarize) v = v >= *opt.binarize ? 1.0 : 0.0;
      vars[j] = v;
    }
    if (out.empty() || out.back().id != id) {
      if (closed.count(id) != 0) throw FormatError(where + ": rows of id " + id + " are not contiguous");
      if (!out.empty()) closed.insert(out.back().id);
      out.push_back(Sequence{id, {}});
    }
    auto& seq = out.back();
    if (!seq.obs.empty() && !(t > seq.obs.back().t)) {
      throw FormatError(where + ": time of id " + id + " is not strictly increasing (" + fmt(t) +
                        " after " + fmt(seq.obs.back().t) + ")");
    }
    seq.obs.push_back(make_observation(vars, t));
  }
  if (out.empty()) throw FormatError(name + ": no observations");
  return out;
}

inline std::vector<Sequence> load_dataset(const std::string& path, const LoadOptions& opt = {}) {
  auto in = open_in(path);
  return read_dataset(in, opt, path);
}

inline void write_dataset(std::ostream& out, std::span<const Sequence> data) {
  if (data.empty()) throw Error("write_dataset: empty dataset");
  const std::size_t p = data.front().p();
  out << "id,time";
  for (std::size_t j = 1; j <= p; ++j) out << ",v" << j;
  out << '\n';
  for (const auto& s : data) {
    if (s.p() != p) throw Error("write_dataset: sequences disagree on p");
    for (const auto& o : s.obs) {
      out << s.id << ',' << fmt(o.t);
      for (double v : o.variables()) out << ',' << fmt(v);
      out << '\n';
    }
  }
}

inline void save_dataset(const std::string& path, std::span<const Sequence> data) {
  auto out = open_out(path);
  write_dataset(out, data);
  finish(out, path);
}

inline void save_latent(const std::string& path, const std::vector<LabeledSequence>& data) {
  auto out = open_out(path);
  out << "id,time,z\n";
  for (const auto& l : data) {
    for (std::size_t i = 0; i < l.seq.size(); ++i) out << l.seq.id << ',' << fmt(l.seq.obs[i].t) << ',' << l.z[i] << '\n';
  }
  finish(out, path);
}

/// Attaches latent states from an id,time,z file to loaded sequences.
inline std::vector<LabeledSequence> load_latent(const std::string& path, const std::vector<Sequence>& data) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line).size() != 3) throw FormatError(path + ": header must be id,time,z");
  std::map<std::string, std::vector<int>> z;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 3) throw FormatError(path + " row " + std::to_string(row) + ": expected 3 fields");
    z[trim(cells[0])].push_back(static_cast<int>(parse_real(cells[2], path + " row " + std::to_string(row))));
  }
  std::vector<LabeledSequence> out;
  for (const auto& s : data) {
    auto it = z.find(s.id);
    if (it == z.end() || it->second.size() != s.size()) {
      throw FormatError(path + ": latent states for id " + s.id + " missing or of wrong length");
    }
    out.push_back({s, it->second});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model files

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"heads", c.heads},
          {"cumulants", c.cumulants},
          {"gamma", c.gamma},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"individuals_per_batch", c.individuals_per_batch},
          {"min_prefix", c.min_prefix},
          {"seed", c.seed},
          {"init_scale", c.init_scale},
          {"init_dist", c.init_dist},
          {"init_horizon", c.init_horizon}};
}

inline nlohmann::json to_json(const ModelParams& m, std::uint64_t train_seed = 0,
                              const std::optional<TrainConfig>& cfg = std::nullopt) {
  nlohmann::json j;
  j["format_version"] = kModelFormatVersion;
  j["p"] = m.p();
  j["q"] = m.q();
  j["H"] = m.n_heads();
  j["C"] = m.n_cumulants();
  j["gamma"] = m.gamma;
  auto heads = nlohmann::json::array();
  for (const auto& h : m.heads) heads.push_back({{"query", h.query}, {"key", h.key}, {"value", h.value}});
  j["heads"] = heads;
  j["w_cum"] = m.w_cum;
  j["w_dist"] = m.w_dist;
  j["w_horizon"] = m.w_horizon;
  j["beta0"] = m.beta0;
  j["beta"] = m.beta;
  j["train_seed"] = train_seed;
  j["train_config"] = cfg ? to_json(*cfg) : nlohmann::json(nullptr);
  return j;
}

/// Throws FormatError on a version or shape mismatch; unknown top-level
/// fields are reported through `warnings`.
inline ModelParams model_from_json(const nlohmann::json& j, std::vector<std::string>* warnings = nullptr) {
  static const std::set<std::string> known{"format_version", "p", "q", "H", "C", "gamma", "heads", "w_cum",
                                           "w_dist", "w_horizon", "beta0", "beta", "train_seed", "train_config"};
  try {
    if (!j.is_object()) throw FormatError("model file: top level must be an object");
    const int version = j.at("format_version").get<int>();
    if (version != kModelFormatVersion) {
      throw FormatError("model file: unsupported format_version " + std::to_string(version) + " (expected " +
                        std::to_string(kModelFormatVersion) + ")");
    }
    for (const auto& [key, _] : j.items()) {
      if (known.count(key) == 0 && warnings != nullptr) warnings->push_back("model file: ignoring unknown field '" + key + "'");
    }
    const auto p = j.at("p").get<std::size_t>();
    const auto q = j.at("q").get<std::size_t>();
    const auto H = j.at("H").get<std::size_t>();
    const auto C = j.at("C").get<std::size_t>();
    ModelParams m;
    m.gamma = j.at("gamma").get<double>();
    for (const auto& h : j.at("heads")) {
      m.heads.push_back({h.at("query").get<std::vector<double>>(), h.at("key").get<std::vector<double>>(),
                         h.at("value").get<std::vector<double>>()});
    }
    m.w_cum = j.at("w_cum").get<std::vector<std::vector<double>>>();
    m.w_dist = j.at("w_dist").get<double>();
    m.w_horizon = j.at("w_horizon").get<double>();
    m.beta0 = j.at("beta0").get<std::vector<double>>();
    m.beta = j.at("beta").get<std::vector<std::vector<double>>>();
    const Dims d = dims_of(m);
    if (d.p != p || d.heads != H || d.cumulants != C || d.q != q) {
      throw FormatError("model file: parameter arrays do not match declared shape p=" + std::to_string(p) +
                        " q=" + std::to_string(q) + " H=" + std::to_string(H) + " C=" + std::to_string(C));
    }
    try {
      validate(m);
    } catch (const Error& e) {
      throw FormatError(std::string("model file: ") + e.what());
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }
}

inline void save_model(const std::string& path, const ModelParams& m, std::uint64_t train_seed = 0,
                       const std::optional<TrainConfig>& cfg = std::nullopt) {
  auto out = open_out(path);
  out << to_json(m, train_seed, cfg).dump(2) << '\n';
  finish(out, path);
}

/// The whole file is parsed before any parameter is read, so a truncated or
/// malformed file yields an error and no model.
inline ModelParams load_model(const std::string& path, std::vector<std::string>* warnings = nullptr) {
  auto in = open_in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  std::vector<std::string> local;
  auto m = model_from_json(j, &local);
  for (const auto& w : local) {
    if (warnings != nullptr) {
      warnings->push_back(w);
    } else {
      std::clog << "warning: " << w << '\n';
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Matrices

struct LabeledMatrix {
  std::string corner = "variable";
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Eigen::MatrixXd values;
};

inline void save_matrix_csv(const std::string& path, const LabeledMatrix& m) {
  if (static_cast<Eigen::Index>(m.row_labels.size()) != m.values.rows() ||
      static_cast<Eigen::Index>(m.col_labels.size()) != m.values.cols()) {
    throw Error("save_matrix_csv: labels do not match matrix shape");
  }
  auto out = open_out(path);
  out << m.corner;
  for (const auto& c : m.col_labels) out << ',' << c;
  out << '\n';
  for (Eigen::Index i = 0; i < m.values.rows(); ++i) {
    out << m.row_labels[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.values.cols(); ++j) out << ',' << fmt(m.values(i, j));
    out << '\n';
  }
  finish(out, path);
}

inline LabeledMatrix load_matrix_csv(const std::string& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file");
  LabeledMatrix m;
  auto header = split_csv_line(line);
  m.corner = header.front();
  m.col_labels.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path + " row " + std::to_string(row);
    if (cells.size() != header.size()) throw FormatError(where + ": ragged row");
    m.row_labels.push_back(cells[0]);
    std::vector<double> r;
    for (std::size_t j = 1; j < cells.size(); ++j) r.push_back(parse_real(cells[j], where));
    rows.push_back(std::move(r));
  }
  m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.col_labels.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Heatmap

struct Rgb {
  int r, g, b;
};

/// Diverging palette: dark blue at 0, white at 0.5, dark red at 1.
inline Rgb diverging(double u) {
  u = std::clamp(std::isfinite(u) ? u : 0.5, 0.0, 1.0);
  const Rgb lo{33, 102, 172}, mid{247, 247, 247}, hi{178, 24, 43};
  auto mix = [](const Rgb& a, const Rgb& b, double s) {
    return Rgb{static_cast<int>(std::lround(a.r + (b.r - a.r) * s)), static_cast<int>(std::lround(a.g + (b.g - a.g) * s)),
               static_cast<int>(std::lround(a.b + (b.b - a.b) * s))};
  };
  return u < 0.5 ? mix(lo, mid, u * 2.0) : mix(mid, hi, (u - 0.5) * 2.0);
}

inline std::string hex(const Rgb& c) {
  std::ostringstream s;
  s << '#' << std::hex << std::setfill('0') << std::setw(2) << c.r << std::setw(2) << c.g << std::setw(2) << c.b;
  return s.str();
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

/// SVG 1.1 heatmap, rows are context variables and columns targets. Values
/// map linearly from the matrix minimum (dark blue) to maximum (dark red).
inline std::string heatmap_svg(const LabeledMatrix& m, const std::string& title = "") {
  const double cell = 36.0, left = 90.0, top = title.empty() ? 50.0 : 70.0, legend_w = 16.0;
  const auto rows = m.values.rows(), cols = m.values.cols();
  const double lo = rows * cols > 0 ? m.values.minCoeff() : 0.0;
  const double hi = rows * cols > 0 ? m.values.maxCoeff() : 0.0;
  const double span = hi > lo ? hi - lo : 1.0;
  const double grid_w = cell * static_cast<double>(cols), grid_h = cell * static_cast<double>(rows);
  const double width = left + grid_w + 40.0 + legend_w + 90.0;
  const double height = top + std::max(grid_h, 120.0) + 20.0;

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) s << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  for (Eigen::Index j = 0; j < cols; ++j) {
    s << "<text x=\"" << left + cell * (static_cast<double>(j) + 0.5) << "\" y=\"" << top - 8
      << "\" text-anchor=\"middle\">" << xml_escape(m.col_labels[static_cast<std::size_t>(j)]) << "</text>\n";
  }
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double y = top + cell * static_cast<double>(i);
    s << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
      << xml_escape(m.row_labels[static_cast<std::size_t>(i)]) << "</text>\n";
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double v = m.values(i, j);
      s << "<rect x=\"" << left + cell * static_cast<double>(j) << "\" y=\"" << y << "\" width=\"" << cell
        << "\" height=\"" << cell << "\" fill=\"" << hex(diverging((v - lo) / span))
        << "\" stroke=\"#999999\" stroke-width=\"0.5\"><title>" << fmt(v) << "</title></rect>\n";
    }
  }
  const double lx = left + grid_w + 40.0, lh = std::max(grid_h, 120.0);
  s << "<defs><linearGradient id=\"legend\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">"
    << "<stop offset=\"0\" stop-color=\"" << hex(diverging(0.0)) << "\"/>"
    << "<stop offset=\"0.5\" stop-color=\"" << hex(diverging(0.5)) << "\"/>"
    << "<stop offset=\"1\" stop-color=\"" << hex(diverging(1.0)) << "\"/>"
    << "</linearGradient></defs>\n"
    << "<rect x=\"" << lx << "\" y=\"" << top << "\" width=\"" << legend_w << "\" height=\"" << lh
    << "\" fill=\"url(#legend)\" stroke=\"#999999\"/>\n"
    << "<text x=\"" << lx + legend_w + 4 << "\" y=\"" << top + 10 << "\">max " << fmt(hi) << "</text>\n"
    << "<text x=\"" << lx + legend_w + 4 << "\" y=\"" << top + lh << "\">min " << fmt(lo) << "</text>\n"
    << "</svg>\n";
  return s.str();
}

inline void save_heatmap(const std::string& path, const LabeledMatrix& m, const std::string& title = "") {
  auto out = open_out(path);
  out << heatmap_svg(m, title);
  finish(out, path);
}

// ---------------------------------------------------------------------------
// Tables

inline std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t j = 0; j < header.size(); ++j) width[j] = header[j].size();
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.size() && j < width.size(); ++j) width[j] = std::max(width[j], r[j].size());
  }
  std::ostringstream s;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t j = 0; j < width.size(); ++j) {
      const std::string cell = j < r.size() ? r[j] : "";
      if (j == 0) {
        s << cell << std::string(width[j] - cell.size(), ' ');
      } else {
        s << "  " << std::string(width[j] - cell.size(), ' ') << cell;
      }
    }
    s << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  s << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) line(r);
  return s.str();
}

inline std::string fixed(double v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

inline std::string pm(double mean, double sd, int digits = 3) { return fixed(mean, digits) + " ± " + fixed(sd, digits); }

inline std::string metric_table(const std::vector<MetricRow>& rows, std::size_t target) {
  std::vector<std::vector<std::string>> body;
  for (const auto& r : rows) {
    body.push_back({r.approach, std::to_string(r.n_train), pm(r.mse_mean, r.mse_sd),
                    pm(r.target_mse_mean, r.target_mse_sd)});
  }
  return format_table({"approach", "n_train", "MSE", "MSE_v" + std::to_string(target)}, body);
}

inline void save_metric_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  auto out = open_out(path);
  out << "approach,n_train,mse_mean,mse_sd,target_mse_mean,target_mse_sd\n";
  for (const auto& r : rows) {
    out << r.approach << ',' << r.n_train << ',' << fmt(r.mse_mean) << ',' << fmt(r.mse_sd) << ','
        << fmt(r.target_mse_mean) << ',' << fmt(r.target_mse_sd) << '\n';
  }
  finish(out, path);
}

inline std::string cv_table(const CVReport& rep) {
  std::vector<std::vector<std::string>> body;
  for (const auto& a : rep.approaches) {
    body.push_back({a.approach, pm(a.mse_mean, a.mse_sd), pm(a.target_mse_mean, a.target_mse_sd)});
  }
  return format_table({"approach", "MSE", "MSE_v" + std::to_string(rep.target)}, body);
}

/// One row per (approach, fold) followed by one "mean" and one "sd" row per
/// approach.
inline void save_cv_csv(const std::string& path, const CVReport& rep) {
  auto out = open_out(path);
  out << "approach,fold,mse,target_mse\n";
  for (const auto& a : rep.approaches) {
    for (std::size_t f = 0; f < a.fold_mse.size(); ++f) {
      out << a.approach << ',' << f + 1 << ',' << fmt(a.fold_mse[f]) << ',' << fmt(a.fold_target_mse[f]) << '\n';
    }
    out << a.approach << ",mean," << fmt(a.mse_mean) << ',' << fmt(a.target_mse_mean) << '\n';
    out << a.approach << ",sd," << fmt(a.mse_sd) << ',' << fmt(a.target_mse_sd) << '\n';
  }
  finish(out, path);
}

inline void save_loss_history(const std::string& path, const std::vector<double>& history) {
  auto out = open_out(path);
  out << "epoch,mean_loss\n";
  for (std::size_t e = 0; e < history.size(); ++e) out << e + 1 << ',' << fmt(history[e]) << '\n';
  finish(out, path);
}

}  // namespace minitx
