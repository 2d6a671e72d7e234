#include "cohesion/agreement.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cohesion {

AnnotationMatrix::AnnotationMatrix(std::vector<std::vector<int>> rows,
                                   std::vector<std::string> rater_ids, int num_levels)
    : rows_(std::move(rows)), rater_ids_(std::move(rater_ids)), num_levels_(num_levels) {
    if (num_levels_ < 2)
        throw ConfigError("annotation matrix: need at least 2 label levels, got " +
                          std::to_string(num_levels_));
    if (rater_ids_.size() < 2)
        throw ConfigError("annotation matrix: need at least 2 raters, got " +
                          std::to_string(rater_ids_.size()));
    if (rows_.size() < 2)
        throw ConfigError("annotation matrix: need at least 2 items, got " +
                          std::to_string(rows_.size()));
    for (std::size_t i = 0; i < rows_.size(); ++i) {
        if (rows_[i].size() != rater_ids_.size())
            throw DimensionError("annotation matrix: item " + std::to_string(i) + " has " +
                                 std::to_string(rows_[i].size()) + " labels for " +
                                 std::to_string(rater_ids_.size()) + " raters");
        for (std::size_t r = 0; r < rows_[i].size(); ++r)
            if (rows_[i][r] < 0 || rows_[i][r] >= num_levels_)
                throw IndexError("annotation matrix: label " + std::to_string(rows_[i][r]) +
                                 " at item " + std::to_string(i) + ", rater " + std::to_string(r) +
                                 " outside [0, " + std::to_string(num_levels_) + ")");
    }
}

std::vector<int> AnnotationMatrix::rater_column(std::size_t rater) const {
    if (rater >= rater_ids_.size())
        throw IndexError("annotation matrix: rater index " + std::to_string(rater) +
                         " out of range for " + std::to_string(rater_ids_.size()) + " raters");
    std::vector<int> column;
    column.reserve(rows_.size());
    for (const auto& row : rows_) column.push_back(row[rater]);
    return column;
}

AnnotationMatrix parse_annotation_matrix(const std::string& text, const std::string& origin,
                                         int num_levels) {
    std::istringstream stream(text);
    std::string line;
    std::size_t line_number = 0;
    std::vector<std::string> rater_ids;
    std::vector<std::vector<int>> rows;
    while (std::getline(stream, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream fields(line);
        std::vector<std::string> tokens;
        for (std::string tok; fields >> tok;) tokens.push_back(tok);
        if (tokens.empty() || tokens.front().front() == '#') continue;
        if (rater_ids.empty()) {
            rater_ids = tokens;
            continue;
        }
        if (tokens.size() != rater_ids.size())
            throw IoError(origin + ":" + std::to_string(line_number) + ": expected " +
                          std::to_string(rater_ids.size()) + " labels, found " +
                          std::to_string(tokens.size()));
        std::vector<int> row;
        row.reserve(tokens.size());
        for (const auto& tok : tokens) {
            std::size_t used = 0;
            int value = 0;
            try {
                value = std::stoi(tok, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != tok.size())
                throw IoError(origin + ":" + std::to_string(line_number) + ": '" + tok +
                              "' is not an integer label");
            if (value < 0 || value >= num_levels)
                throw IoError(origin + ":" + std::to_string(line_number) + ": label " +
                              std::to_string(value) + " outside [0, " +
                              std::to_string(num_levels) + ")");
            row.push_back(value);
        }
        rows.push_back(std::move(row));
    }
    if (rater_ids.empty()) throw IoError(origin + ": missing header row of rater ids");
    try {
        return AnnotationMatrix(std::move(rows), std::move(rater_ids), num_levels);
    } catch (const Error& e) {
        throw IoError(origin + ": " + e.what());
    }
}

AnnotationMatrix read_annotation_matrix(const std::string& path, int num_levels) {
    std::ifstream file(path);
    if (!file) throw IoError("cannot open '" + path + "' for reading");
    std::string text((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    return parse_annotation_matrix(text, path, num_levels);
}

VarianceStats rater_variance_stats(const AnnotationMatrix& m) {
    VarianceStats stats;
    const auto raters = static_cast<double>(m.raters());
    for (const auto& row : m.rows()) {
        double mean = 0.0;
        for (const int v : row) mean += v;
        mean /= raters;
        double variance = 0.0;
        for (const int v : row) variance += (v - mean) * (v - mean);
        variance /= raters;
        stats.average_variance += variance;
        stats.average_std += std::sqrt(variance);
    }
    const auto items = static_cast<double>(m.items());
    stats.average_variance /= items;
    stats.average_std /= items;
    return stats;
}

std::vector<double> symmetric_eigenvalues(std::vector<std::vector<double>> matrix) {
    const std::size_t n = matrix.size();
    for (const auto& row : matrix)
        if (row.size() != n) throw DimensionError("symmetric_eigenvalues: matrix is not square");
    if (n == 0) return {};

    double scale = 0.0;
    for (const auto& row : matrix)
        for (const double v : row) scale = std::max(scale, std::abs(v));
    if (scale == 0.0) return std::vector<double>(n, 0.0);

    // Cyclic Jacobi: rotate away each off-diagonal entry in sweeps until the
    // off-diagonal mass is negligible.
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += matrix[i][j] * matrix[i][j];
        if (off <= 1e-30 * scale * scale) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = matrix[p][q];
                if (std::abs(apq) <= 1e-18 * scale) continue;
                const double theta = (matrix[q][q] - matrix[p][p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = matrix[k][p], akq = matrix[k][q];
                    matrix[k][p] = c * akp - s * akq;
                    matrix[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = matrix[p][k], aqk = matrix[q][k];
                    matrix[p][k] = c * apk - s * aqk;
                    matrix[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eigenvalues(n);
    for (std::size_t i = 0; i < n; ++i) eigenvalues[i] = matrix[i][i];
    std::sort(eigenvalues.begin(), eigenvalues.end(), std::greater<>());
    return eigenvalues;
}

EigenSpectrum pca_eigenspectrum(const AnnotationMatrix& m) {
    const std::size_t r = m.raters();
    const auto items = static_cast<double>(m.items());
    std::vector<double> means(r, 0.0);
    for (const auto& row : m.rows())
        for (std::size_t j = 0; j < r; ++j) means[j] += row[j];
    for (auto& v : means) v /= items;

    std::vector<std::vector<double>> cov(r, std::vector<double>(r, 0.0));
    for (const auto& row : m.rows())
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < r; ++j)
                cov[i][j] += (row[i] - means[i]) * (row[j] - means[j]);
    for (auto& covrow : cov)
        for (auto& v : covrow) v /= items - 1.0;

    EigenSpectrum spectrum;
    for (std::size_t i = 0; i < r; ++i) spectrum.total_variance += cov[i][i];
    if (spectrum.total_variance <= 0.0) {
        spectrum.degenerate = true;
        spectrum.eigenvalues.assign(r, 0.0);
        spectrum.shares.assign(r, 0.0);
        spectrum.shares[0] = 1.0;
        return spectrum;
    }
    spectrum.eigenvalues = symmetric_eigenvalues(std::move(cov));
    spectrum.shares.reserve(r);
    for (const double ev : spectrum.eigenvalues)
        spectrum.shares.push_back(std::max(ev, 0.0) / spectrum.total_variance);
    return spectrum;
}

double weighted_kappa(const std::vector<int>& rater_a, const std::vector<int>& rater_b,
                      int num_levels, KappaWeighting weighting) {
    if (rater_a.size() != rater_b.size())
        throw DimensionError("weighted_kappa: sequences differ in length (" +
                             std::to_string(rater_a.size()) + " vs " +
                             std::to_string(rater_b.size()) + ")");
    if (rater_a.size() < 2)
        throw ConfigError("weighted_kappa: need at least 2 items, got " +
                          std::to_string(rater_a.size()));
    if (num_levels < 2) throw ConfigError("weighted_kappa: need at least 2 label levels");

    const auto levels = static_cast<std::size_t>(num_levels);
    auto check = [&](int v) {
        if (v < 0 || v >= num_levels)
            throw IndexError("weighted_kappa: label " + std::to_string(v) + " outside [0, " +
                             std::to_string(num_levels) + ")");
    };
    auto weight = [&](std::size_t i, std::size_t j) {
        const double d = std::abs(static_cast<double>(i) - static_cast<double>(j)) /
                         static_cast<double>(num_levels - 1);
        return weighting == KappaWeighting::Linear ? 1.0 - d : 1.0 - d * d;
    };

    const auto n = static_cast<double>(rater_a.size());
    std::vector<double> marginal_a(levels, 0.0), marginal_b(levels, 0.0);
    double observed = 0.0;
    for (std::size_t i = 0; i < rater_a.size(); ++i) {
        check(rater_a[i]);
        check(rater_b[i]);
        observed += weight(static_cast<std::size_t>(rater_a[i]),
                           static_cast<std::size_t>(rater_b[i]));
        marginal_a[static_cast<std::size_t>(rater_a[i])] += 1.0;
        marginal_b[static_cast<std::size_t>(rater_b[i])] += 1.0;
    }
    observed /= n;
    // Chance agreement accumulated over unordered level pairs: the two cross
    // terms of a pair are added inside one expression, so swapping the raters
    // permutes commutative IEEE operands only and kappa stays symmetric to
    // the last bit.
    double expected = 0.0;
    for (std::size_t i = 0; i < levels; ++i) {
        expected += (marginal_a[i] / n) * (marginal_b[i] / n) * weight(i, i);
        for (std::size_t j = i + 1; j < levels; ++j)
            expected += ((marginal_a[i] / n) * (marginal_b[j] / n) +
                         (marginal_a[j] / n) * (marginal_b[i] / n)) *
                        weight(i, j);
    }

    if (expected >= 1.0 - 1e-15)
        throw UndefinedKappaError(
            "weighted_kappa: chance agreement is 1 (both raters constant at the same level)");
    return (observed - expected) / (1.0 - expected);
}

AgreementReport agreement_report(const AnnotationMatrix& m, KappaWeighting weighting) {
    AgreementReport report;
    report.variance = rater_variance_stats(m);
    report.spectrum = pca_eigenspectrum(m);
    for (std::size_t a = 0; a < m.raters(); ++a)
        for (std::size_t b = a + 1; b < m.raters(); ++b) {
            const double k = weighted_kappa(m.rater_column(a), m.rater_column(b), m.num_levels(),
                                            weighting);
            report.pairwise_kappas.push_back({a, b, k});
            report.mean_kappa += k;
        }
    report.mean_kappa /= static_cast<double>(report.pairwise_kappas.size());
    return report;
}

nlohmann::json AgreementReport::to_json(const AnnotationMatrix& m) const {
    nlohmann::json j;
    j["items"] = m.items();
    j["raters"] = m.raters();
    j["num_levels"] = m.num_levels();
    j["average_variance"] = variance.average_variance;
    j["average_std"] = variance.average_std;
    j["eigenvalue_shares"] = spectrum.shares;
    j["total_variance"] = spectrum.total_variance;
    j["degenerate_variance"] = spectrum.degenerate;
    j["pairwise_kappas"] = nlohmann::json::array();
    for (const auto& pk : pairwise_kappas)
        j["pairwise_kappas"].push_back({{"rater_a", m.rater_ids()[pk.rater_a]},
                                        {"rater_b", m.rater_ids()[pk.rater_b]},
                                        {"kappa", pk.kappa}});
    j["mean_kappa"] = mean_kappa;
    return j;
}

}  // namespace cohesion
