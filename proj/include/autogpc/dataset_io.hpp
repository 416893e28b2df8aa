#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "autogpc/gpc_model.hpp"

namespace autogpc {

/// Per-column affine map fitted on training rows only.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  /// Population statistics. A constant column gets scale 1 and a warning.
  static Standardizer fit(const Eigen::MatrixXd& X, std::vector<std::string>* warnings = nullptr,
                          const std::vector<std::string>& names = {});
  static Standardizer identity(std::size_t dim);

  [[nodiscard]] Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const;
  [[nodiscard]] Dataset apply(const Dataset& d) const;
  /// Maps a standardized value in column j back to raw units.
  [[nodiscard]] double invert(std::size_t j, double z) const { return z * scale.at(j) + mean.at(j); }
};

/// Reads a header + numeric rows CSV. When `require_label` is set the last
/// column must be named "label" with values in {0,1}; otherwise a trailing
/// "label" column is used if present and y is left empty if not.
Dataset read_csv(const std::string& path, bool require_label = true);

struct LoadedCsv {
  Dataset data;
  Standardizer standardizer;
  std::vector<std::string> warnings;
};

/// read_csv followed by standardization fitted on the file itself (or the
/// identity map when `standardize` is false).
LoadedCsv load_csv(const std::string& path, bool standardize = true);

void write_csv(const std::string& path, const Dataset& d);

/// Writes to a sibling temp file and renames it into place.
void atomic_write(const std::string& path, const std::string& content);

enum class ToyKind : std::uint8_t { BlobsLinear, Moons, Circles };

std::string to_string(ToyKind kind);
ToyKind toy_kind_from_string(const std::string& s);

struct ToySpec {
  ToyKind kind = ToyKind::Moons;
  std::size_t n = 100;
  double noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Rows come out shuffled. Classes are balanced to within one point.
Dataset gen_toy(const ToySpec& spec);

struct Split {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> test_rows;
};

/// Per-class shuffle, then the first round(train_fraction * n_c) rows of each
/// class go to train. Row order within each side follows the shuffle.
Split stratified_split(const Dataset& d, double train_fraction, std::uint64_t seed);

}  // namespace autogpc
