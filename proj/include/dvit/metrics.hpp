#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dvit/tensor.hpp"

namespace dvit {

/// A metric whose definition breaks down on the given counts.
class UndefinedMetricError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Rows are true classes, columns predictions.
struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::uint64_t> counts;  // row-major C x C
    std::vector<std::string> class_names;

    explicit ConfusionMatrix(std::size_t c = 0, std::vector<std::string> names = {});

    std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * classes + p]; }
    std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * classes + p]; }
    std::uint64_t total() const;
    std::uint64_t row_sum(std::size_t i) const;
    std::uint64_t col_sum(std::size_t i) const;
    std::uint64_t tp(std::size_t i) const { return at(i, i); }
    std::uint64_t fn(std::size_t i) const { return row_sum(i) - tp(i); }
    std::uint64_t fp(std::size_t i) const { return col_sum(i) - tp(i); }
    std::uint64_t tn(std::size_t i) const { return total() - tp(i) - fp(i) - fn(i); }
    std::string name(std::size_t i) const;

    static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows);
};

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes,
                          std::vector<std::string> class_names = {});

double overall_accuracy(const ConfusionMatrix& m);
/// Mean per-class recall. Throws UndefinedMetricError naming the first
/// class with no true samples.
double mean_accuracy(const ConfusionMatrix& m);
/// Throws UndefinedMetricError when expected agreement is 1.
double cohen_kappa(const ConfusionMatrix& m);

/// Per-class value with a flag set when its denominator was zero (value 0).
struct PerClass {
    std::vector<double> values;
    std::vector<bool> undefined;
};

PerClass per_class_precision(const ConfusionMatrix& m);
PerClass per_class_recall(const ConfusionMatrix& m);
PerClass per_class_f1(const ConfusionMatrix& m);
/// Kappa of the 2 x 2 one-vs-rest matrix for each class; 0 and flagged when
/// that matrix is degenerate.
PerClass per_class_kappa(const ConfusionMatrix& m);

double macro_precision(const ConfusionMatrix& m);
double macro_recall(const ConfusionMatrix& m);
/// Mean of per-class F1, not F1 of the macro precision and recall.
double macro_f1(const ConfusionMatrix& m);

/// Row-normalized counts; empty rows stay zero.
std::vector<std::vector<double>> normalized_confusion(const ConfusionMatrix& m);

struct MetricsReport {
    std::size_t samples = 0;
    double overall_accuracy = 0.0;
    std::optional<double> mean_accuracy;  // absent if a class has no samples
    std::optional<double> kappa;          // absent if undefined
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    std::vector<std::string> class_names;
    std::vector<double> class_accuracy;  // per-class recall
    std::vector<double> class_precision;
    std::vector<double> class_f1;
    std::vector<double> class_kappa;
    std::vector<std::vector<double>> normalized;
    ConfusionMatrix matrix;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

MetricsReport make_report(const ConfusionMatrix& m);

// ---- KID -------------------------------------------------------------------

struct KidConfig {
    std::size_t subsets = 100;
    std::size_t subset_size = 0;  // 0: min(1000, n, m)
    int degree = 3;
    double gamma = 0.0;  // 0: 1 / feature_dim
    double coef0 = 1.0;
    std::uint64_t seed = 0;
};

struct KidEstimate {
    double value = 0.0;   // mean MMD^2 over subsets
    double scaled = 0.0;  // value x 1000
    double stddev = 0.0;  // across subsets
    std::size_t subsets = 0;
    std::size_t subset_size = 0;
    int degree = 3;
    double gamma = 0.0;
    double coef0 = 1.0;
    std::size_t feature_dim = 0;

    nlohmann::json to_json() const;
};

/// k(x, y) = (gamma * x.y + coef0)^degree.
double polynomial_kernel(const double* x, const double* y, std::size_t d, double gamma, double coef0, int degree);

/// Mean over subsets of the unbiased MMD^2 U-statistic
///   1/(s(s-1)) sum_{i != j} [k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(x_j,y_i)]
/// with paired subsets: subset t draws indices for both sets from the same
/// seed, so identical inputs give exactly zero. Features are n x d tensors.
KidEstimate kid(const Tensor& real, const Tensor& generated, const KidConfig& cfg = {});

}  // namespace dvit
