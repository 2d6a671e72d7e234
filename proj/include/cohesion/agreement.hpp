#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cohesion/errors.hpp"

#include "json.hpp"

namespace cohesion {

/// Integer annotation labels: one row per rated item, one column per rater,
/// each label on an ordinal scale [0, num_levels).
class AnnotationMatrix {
  public:
    AnnotationMatrix(std::vector<std::vector<int>> rows, std::vector<std::string> rater_ids,
                     int num_levels = 4);

    std::size_t items() const { return rows_.size(); }
    std::size_t raters() const { return rater_ids_.size(); }
    int num_levels() const { return num_levels_; }
    const std::vector<std::string>& rater_ids() const { return rater_ids_; }
    const std::vector<std::vector<int>>& rows() const { return rows_; }
    int label(std::size_t item, std::size_t rater) const { return rows_[item][rater]; }

    /// Labels of one rater across all items.
    std::vector<int> rater_column(std::size_t rater) const;

  private:
    std::vector<std::vector<int>> rows_;
    std::vector<std::string> rater_ids_;
    int num_levels_;
};

/// Reads the delimited-text annotation layout: a header row of
/// whitespace-separated rater ids, then one row of integer labels per item.
/// Lines starting with '#' and blank lines are ignored. Parse errors name
/// the offending line.
AnnotationMatrix read_annotation_matrix(const std::string& path, int num_levels = 4);
AnnotationMatrix parse_annotation_matrix(const std::string& text, const std::string& origin,
                                         int num_levels = 4);

struct VarianceStats {
    double average_variance = 0.0;  // population variance across raters, averaged over items
    double average_std = 0.0;       // per-item standard deviation, averaged over items
};

VarianceStats rater_variance_stats(const AnnotationMatrix& m);

struct EigenSpectrum {
    std::vector<double> shares;       // descending, nonnegative, sum 1
    std::vector<double> eigenvalues;  // descending, same order as shares
    double total_variance = 0.0;
    bool degenerate = false;  // zero total variance: shares defined as (1, 0, ...)
};

/// Eigenvalue shares of the rater-by-rater covariance matrix (items are
/// observations, raters are variables).
EigenSpectrum pca_eigenspectrum(const AnnotationMatrix& m);

enum class KappaWeighting { Linear, Quadratic };

/// Weighted Cohen's kappa between two label sequences on an ordinal scale.
/// Linear weights are 1 − |i−j|/(L−1); quadratic weights square the distance
/// term. Throws UndefinedKappaError when chance agreement is exactly 1
/// (both sequences constant at the same level).
double weighted_kappa(const std::vector<int>& rater_a, const std::vector<int>& rater_b,
                      int num_levels, KappaWeighting weighting = KappaWeighting::Linear);

struct PairwiseKappa {
    std::size_t rater_a = 0;
    std::size_t rater_b = 0;
    double kappa = 0.0;
};

struct AgreementReport {
    VarianceStats variance;
    EigenSpectrum spectrum;
    std::vector<PairwiseKappa> pairwise_kappas;
    double mean_kappa = 0.0;

    nlohmann::json to_json(const AnnotationMatrix& m) const;
};

/// Full agreement analysis: variance stats, covariance eigen-spectrum, and
/// the mean over all pairwise weighted kappas.
AgreementReport agreement_report(const AnnotationMatrix& m,
                                 KappaWeighting weighting = KappaWeighting::Linear);

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, returned in
/// descending order.
std::vector<double> symmetric_eigenvalues(std::vector<std::vector<double>> matrix);

}  // namespace cohesion
