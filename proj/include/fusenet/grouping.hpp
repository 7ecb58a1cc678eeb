#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace fusenet {

/// One raster band flattened to raw digital numbers, aligned pixel-for-pixel
/// with every other band it is compared against.
struct BandChannel {
  std::string name;
  std::vector<double> pixels;
  std::vector<std::string> source_tiles;
};

/// Pairwise band-diversity matrix. values(i, j) holds H(band i, band j);
/// the diagonal is unused and excluded from every downstream computation.
struct CrossEntropyMatrix {
  std::vector<std::string> band_names;
  Eigen::MatrixXd values;
  double log_base = 2.718281828459045;  // natural log by default
  std::int64_t pixel_count = 0;
  std::uint64_t seed = 0;
};

struct TripleScore {
  std::array<std::string, 3> bands;
  double score = 0.0;
};

struct GroupingResult {
  std::vector<std::vector<std::string>> outlier_groups;   // singletons
  std::vector<std::vector<std::string>> spectral_groups;  // ascending score
  std::vector<TripleScore> triple_scores;                 // every candidate, ascending
  double log_base = 2.718281828459045;
  std::int64_t pixel_count = 0;
  std::uint64_t seed = 0;

  /// Pipeline order: spectral groups first, then outlier singletons.
  std::vector<std::vector<std::string>> ordered_groups() const;
  std::vector<std::string> all_bands() const;
};

/// H(p, q) = sum_x p(x) * ln(1 / max(q(x), 1)). Asymmetric in general.
double pairwise_cross_entropy(std::span<const double> p, std::span<const double> q);

/// Builds all K*(K-1) ordered off-diagonal entries over a shared pixel
/// subsample (seeded, identical positions for every pair).
CrossEntropyMatrix cross_entropy_matrix(const std::vector<BandChannel>& bands,
                                        std::int64_t sample_budget, std::uint64_t seed,
                                        double log_base = 2.718281828459045);

/// Flags bands whose mean absolute row entry sits at a different order of
/// magnitude than the rest: ratio to the median below `ratio_threshold` or
/// above its reciprocal.
std::set<std::string> detect_outlier_bands(const CrossEntropyMatrix& matrix,
                                           double ratio_threshold = 0.6);

/// Isolates outliers as singleton groups, scores every 3-subset of the
/// remaining bands by the sum of its six ordered pairwise entries, and keeps
/// the `n_spectral_groups` smallest.
GroupingResult form_groups(const CrossEntropyMatrix& matrix, int n_spectral_groups = 2,
                           double ratio_threshold = 0.6);

void write_matrix_csv(const std::filesystem::path& path, const CrossEntropyMatrix& matrix);
void write_groups_json(const std::filesystem::path& path, const GroupingResult& grouping);
GroupingResult read_groups_json(const std::filesystem::path& path);

}  // namespace fusenet
