#include "autogpc/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "autogpc/error.hpp"

namespace autogpc {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const std::string& path, std::size_t line, std::size_t col) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || !std::isfinite(v))
    throw DataError(path + ":" + std::to_string(line) + ": column " + std::to_string(col + 1) +
                    " is not a finite number: '" + s + "'");
  return v;
}

}  // namespace

Standardizer Standardizer::fit(const Eigen::MatrixXd& X, std::vector<std::string>* warnings,
                               const std::vector<std::string>& names) {
  Standardizer s;
  const auto d = static_cast<std::size_t>(X.cols());
  s.mean.assign(d, 0.0);
  s.scale.assign(d, 1.0);
  if (X.rows() == 0) return s;
  for (std::size_t j = 0; j < d; ++j) {
    const auto col = X.col(static_cast<Eigen::Index>(j));
    const double mu = col.mean();
    const double sd = std::sqrt((col.array() - mu).square().mean());
    s.mean[j] = mu;
    if (sd > 1e-12 * std::max(1.0, std::abs(mu))) {
      s.scale[j] = sd;
    } else if (warnings != nullptr) {
      const std::string name = j < names.size() ? names[j] : "column " + std::to_string(j + 1);
      warnings->push_back("feature '" + name + "' is constant; using scale 1");
    }
  }
  return s;
}

Standardizer Standardizer::identity(std::size_t dim) {
  return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& X) const {
  if (static_cast<std::size_t>(X.cols()) != mean.size())
    throw DataError("standardizer fitted on " + std::to_string(mean.size()) + " features, got " +
                    std::to_string(X.cols()));
  Eigen::MatrixXd Z = X;
  for (Eigen::Index j = 0; j < X.cols(); ++j)
    Z.col(j) = (X.col(j).array() - mean[static_cast<std::size_t>(j)]) / scale[static_cast<std::size_t>(j)];
  return Z;
}

Dataset Standardizer::apply(const Dataset& d) const {
  Dataset out = d;
  out.X = apply(d.X);
  return out;
}

Dataset read_csv(const std::string& path, bool require_label) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_fields(line);
  const bool has_label = !header.empty() && header.back() == "label";
  if (require_label && !has_label) throw DataError(path + ": last column must be named 'label'");
  const std::size_t d = header.size() - (has_label ? 1 : 0);
  if (d == 0) throw DataError(path + ": no feature columns");

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(fields.size()));
    for (std::size_t j = 0; j < d; ++j) values.push_back(parse_number(fields[j], path, line_no, j));
    if (has_label) {
      const double lab = parse_number(fields[d], path, line_no, d);
      if (lab != 0.0 && lab != 1.0)
        throw DataError(path + ":" + std::to_string(line_no) + ": label must be 0 or 1, got '" + fields[d] + "'");
      labels.push_back(static_cast<int>(lab));
    }
    ++rows;
  }

  Dataset out;
  out.X = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d));
  out.y = std::move(labels);
  out.feature_names.assign(header.begin(), header.begin() + static_cast<std::ptrdiff_t>(d));
  if (has_label) out.validate();
  return out;
}

LoadedCsv load_csv(const std::string& path, bool standardize) {
  LoadedCsv r;
  r.data = read_csv(path, true);
  r.standardizer = standardize ? Standardizer::fit(r.data.X, &r.warnings, r.data.feature_names)
                               : Standardizer::identity(r.data.dim());
  r.data = r.standardizer.apply(r.data);
  return r;
}

void write_csv(const std::string& path, const Dataset& d) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t j = 0; j < d.dim(); ++j)
    out << (j < d.feature_names.size() ? d.feature_names[j] : "x" + std::to_string(j + 1)) << ',';
  out << "label\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.dim(); ++j)
      out << d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) << ',';
    out << d.y[i] << '\n';
  }
  atomic_write(path, out.str());
}

void atomic_write(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::string to_string(ToyKind kind) {
  switch (kind) {
    case ToyKind::BlobsLinear: return "blobs_linear";
    case ToyKind::Moons: return "moons";
    case ToyKind::Circles: return "circles";
  }
  return "?";
}

ToyKind toy_kind_from_string(const std::string& s) {
  if (s == "blobs_linear") return ToyKind::BlobsLinear;
  if (s == "moons") return ToyKind::Moons;
  if (s == "circles") return ToyKind::Circles;
  throw ConfigError("unknown toy kind '" + s + "' (expected blobs_linear, moons or circles)");
}

void ToySpec::validate() const {
  if (n < 4) throw ConfigError("toy data needs n >= 4");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("toy noise must be a finite non-negative number");
}

Dataset gen_toy(const ToySpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> jitter(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const std::size_t n0 = spec.n / 2;
  const std::size_t n1 = spec.n - n0;
  const double pi = std::numbers::pi;

  Eigen::MatrixXd X(static_cast<Eigen::Index>(spec.n), 2);
  std::vector<int> y(spec.n);
  const auto put = [&](std::size_t i, double a, double b, int label) {
    X(static_cast<Eigen::Index>(i), 0) = a;
    X(static_cast<Eigen::Index>(i), 1) = b;
    y[i] = label;
  };

  switch (spec.kind) {
    case ToyKind::Moons:
      for (std::size_t i = 0; i < n0; ++i) {
        const double t = n0 == 1 ? 0.0 : pi * static_cast<double>(i) / static_cast<double>(n0 - 1);
        put(i, std::cos(t), std::sin(t), 0);
      }
      for (std::size_t i = 0; i < n1; ++i) {
        const double t = n1 == 1 ? 0.0 : pi * static_cast<double>(i) / static_cast<double>(n1 - 1);
        put(n0 + i, 1.0 - std::cos(t), 0.5 - std::sin(t), 1);
      }
      break;
    case ToyKind::Circles:
      // Inner radius 0.82 keeps every linear separator at or below 60% at zero noise.
      for (std::size_t i = 0; i < n0; ++i) {
        const double t = 2.0 * pi * static_cast<double>(i) / static_cast<double>(n0);
        put(i, std::cos(t), std::sin(t), 0);
      }
      for (std::size_t i = 0; i < n1; ++i) {
        const double t = 2.0 * pi * static_cast<double>(i) / static_cast<double>(n1);
        put(n0 + i, 0.82 * std::cos(t), 0.82 * std::sin(t), 1);
      }
      break;
    case ToyKind::BlobsLinear:
      for (std::size_t i = 0; i < spec.n; ++i) {
        const int label = i < n0 ? 0 : 1;
        const double c = label == 1 ? 1.0 : -1.0;
        const double r = 0.8 * std::sqrt(unif(rng));
        const double t = 2.0 * pi * unif(rng);
        put(i, c + r * std::cos(t), c + r * std::sin(t), label);
      }
      break;
  }
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = 0; j < 2; ++j) X(i, j) += spec.noise * jitter(rng);

  std::vector<std::size_t> order(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  Dataset d{X, y, {"x1", "x2"}};
  return d.subset(order);
}

Split stratified_split(const Dataset& d, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  std::mt19937_64 rng(seed);
  Split s;
  for (int label : {0, 1}) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.y[i] == label) rows.push_back(i);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(rows.size())));
    s.train_rows.insert(s.train_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test_rows.insert(s.test_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_train), rows.end());
  }
  // Interleave the classes so that natural-order streaming sees both.
  std::shuffle(s.train_rows.begin(), s.train_rows.end(), rng);
  std::shuffle(s.test_rows.begin(), s.test_rows.end(), rng);
  s.train = d.subset(s.train_rows);
  s.test = d.subset(s.test_rows);
  return s;
}

}  // namespace autogpc
