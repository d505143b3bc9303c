#include "dvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "dvit/rng.hpp"

namespace dvit {

ConfusionMatrix::ConfusionMatrix(std::size_t c, std::vector<std::string> names)
    : classes(c), counts(c * c, 0), class_names(std::move(names)) {
    if (!class_names.empty() && class_names.size() != c)
        throw std::invalid_argument("confusion matrix has " + std::to_string(c) + " classes but " +
                                    std::to_string(class_names.size()) + " names");
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::row_sum(std::size_t i) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < classes; ++j) s += at(i, j);
    return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t i) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < classes; ++j) s += at(j, i);
    return s;
}

std::string ConfusionMatrix::name(std::size_t i) const {
    return i < class_names.size() ? class_names[i] : "class " + std::to_string(i);
}

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.size()) throw std::invalid_argument("confusion matrix rows must be square");
        for (std::size_t j = 0; j < rows.size(); ++j) m.at(i, j) = rows[i][j];
    }
    return m;
}

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes,
                          std::vector<std::string> class_names) {
    if (truth.size() != predicted.size())
        throw std::invalid_argument("confusion: " + std::to_string(truth.size()) + " labels vs " +
                                    std::to_string(predicted.size()) + " predictions");
    ConfusionMatrix m(classes, std::move(class_names));
    const int c = static_cast<int>(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= c || predicted[i] < 0 || predicted[i] >= c)
            throw std::out_of_range("confusion: sample " + std::to_string(i) + " has label " + std::to_string(truth[i]) +
                                    " / prediction " + std::to_string(predicted[i]) + " outside [0, " +
                                    std::to_string(classes) + ")");
        ++m.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(predicted[i]));
    }
    return m;
}

namespace {

double require_total(const ConfusionMatrix& m) {
    const auto n = m.total();
    if (m.classes == 0 || n == 0) throw UndefinedMetricError("metric undefined on an empty confusion matrix");
    return static_cast<double>(n);
}

double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double ratio_or_zero(std::uint64_t num, std::uint64_t den, bool& undefined) {
    undefined = den == 0;
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double overall_accuracy(const ConfusionMatrix& m) {
    const double n = require_total(m);
    std::uint64_t trace = 0;
    for (std::size_t i = 0; i < m.classes; ++i) trace += m.at(i, i);
    return static_cast<double>(trace) / n;
}

double mean_accuracy(const ConfusionMatrix& m) {
    require_total(m);
    double sum = 0.0;
    for (std::size_t i = 0; i < m.classes; ++i) {
        const auto row = m.row_sum(i);
        if (row == 0) throw UndefinedMetricError("mean accuracy undefined: " + m.name(i) + " has no samples");
        sum += static_cast<double>(m.tp(i)) / static_cast<double>(row);
    }
    return sum / static_cast<double>(m.classes);
}

double cohen_kappa(const ConfusionMatrix& m) {
    const double n = require_total(m);
    double trace = 0.0, pe = 0.0;
    for (std::size_t i = 0; i < m.classes; ++i) {
        trace += static_cast<double>(m.at(i, i));
        pe += static_cast<double>(m.row_sum(i)) * static_cast<double>(m.col_sum(i));
    }
    const double po = trace / n;
    pe /= n * n;
    if (pe == 1.0) throw UndefinedMetricError("kappa undefined: expected agreement is 1 (single populated class)");
    return (po - pe) / (1.0 - pe);
}

PerClass per_class_precision(const ConfusionMatrix& m) {
    PerClass out{std::vector<double>(m.classes), std::vector<bool>(m.classes)};
    for (std::size_t i = 0; i < m.classes; ++i) {
        bool u = false;
        out.values[i] = ratio_or_zero(m.tp(i), m.col_sum(i), u);
        out.undefined[i] = u;
    }
    return out;
}

PerClass per_class_recall(const ConfusionMatrix& m) {
    PerClass out{std::vector<double>(m.classes), std::vector<bool>(m.classes)};
    for (std::size_t i = 0; i < m.classes; ++i) {
        bool u = false;
        out.values[i] = ratio_or_zero(m.tp(i), m.row_sum(i), u);
        out.undefined[i] = u;
    }
    return out;
}

PerClass per_class_f1(const ConfusionMatrix& m) {
    const auto p = per_class_precision(m);
    const auto r = per_class_recall(m);
    PerClass out{std::vector<double>(m.classes), std::vector<bool>(m.classes)};
    for (std::size_t i = 0; i < m.classes; ++i) {
        const double den = p.values[i] + r.values[i];
        out.undefined[i] = p.undefined[i] || r.undefined[i] || den == 0.0;
        out.values[i] = den == 0.0 ? 0.0 : 2.0 * p.values[i] * r.values[i] / den;
    }
    return out;
}

PerClass per_class_kappa(const ConfusionMatrix& m) {
    PerClass out{std::vector<double>(m.classes), std::vector<bool>(m.classes)};
    const double n = static_cast<double>(m.total());
    for (std::size_t i = 0; i < m.classes; ++i) {
        if (n == 0.0) {
            out.undefined[i] = true;
            continue;
        }
        const double tp = static_cast<double>(m.tp(i)), fp = static_cast<double>(m.fp(i));
        const double fn = static_cast<double>(m.fn(i)), tn = static_cast<double>(m.tn(i));
        const double po = (tp + tn) / n;
        const double pe = ((tp + fn) * (tp + fp) + (tn + fp) * (tn + fn)) / (n * n);
        if (pe == 1.0) {
            out.undefined[i] = true;
            continue;
        }
        out.values[i] = (po - pe) / (1.0 - pe);
    }
    return out;
}

double macro_precision(const ConfusionMatrix& m) { return mean(per_class_precision(m).values); }
double macro_recall(const ConfusionMatrix& m) { return mean(per_class_recall(m).values); }
double macro_f1(const ConfusionMatrix& m) { return mean(per_class_f1(m).values); }

std::vector<std::vector<double>> normalized_confusion(const ConfusionMatrix& m) {
    std::vector<std::vector<double>> out(m.classes, std::vector<double>(m.classes, 0.0));
    for (std::size_t i = 0; i < m.classes; ++i) {
        const auto row = m.row_sum(i);
        if (row == 0) continue;
        for (std::size_t j = 0; j < m.classes; ++j) out[i][j] = static_cast<double>(m.at(i, j)) / static_cast<double>(row);
    }
    return out;
}

MetricsReport make_report(const ConfusionMatrix& m) {
    MetricsReport r;
    r.matrix = m;
    r.samples = m.total();
    r.overall_accuracy = overall_accuracy(m);
    for (std::size_t i = 0; i < m.classes; ++i) r.class_names.push_back(m.name(i));
    try {
        r.mean_accuracy = mean_accuracy(m);
    } catch (const UndefinedMetricError& e) {
        r.warnings.push_back(e.what());
    }
    try {
        r.kappa = cohen_kappa(m);
    } catch (const UndefinedMetricError& e) {
        r.warnings.push_back(e.what());
    }
    const auto p = per_class_precision(m), rc = per_class_recall(m), f = per_class_f1(m), k = per_class_kappa(m);
    r.class_precision = p.values;
    r.class_accuracy = rc.values;
    r.class_f1 = f.values;
    r.class_kappa = k.values;
    for (std::size_t i = 0; i < m.classes; ++i) {
        if (p.undefined[i]) r.warnings.push_back("precision of " + m.name(i) + " set to 0: never predicted");
        if (rc.undefined[i]) r.warnings.push_back("recall of " + m.name(i) + " set to 0: no samples");
        if (f.undefined[i] && !p.undefined[i] && !rc.undefined[i])
            r.warnings.push_back("F1 of " + m.name(i) + " set to 0: precision and recall are both 0");
        if (k.undefined[i]) r.warnings.push_back("one-vs-rest kappa of " + m.name(i) + " set to 0: degenerate");
    }
    r.macro_precision = mean(r.class_precision);
    r.macro_recall = mean(r.class_accuracy);
    r.macro_f1 = mean(r.class_f1);
    r.normalized = normalized_confusion(m);
    return r;
}

nlohmann::json MetricsReport::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json j;
    j["samples"] = samples;
    j["overall_accuracy"] = overall_accuracy;
    j["mean_accuracy"] = opt(mean_accuracy);
    j["kappa"] = opt(kappa);
    j["macro_precision"] = macro_precision;
    j["macro_recall"] = macro_recall;
    j["macro_f1"] = macro_f1;
    j["class_names"] = class_names;
    j["class_accuracy"] = class_accuracy;
    j["class_precision"] = class_precision;
    j["class_f1"] = class_f1;
    j["class_kappa"] = class_kappa;
    j["normalized_confusion"] = normalized;
    std::vector<std::vector<std::uint64_t>> rows(matrix.classes);
    for (std::size_t i = 0; i < matrix.classes; ++i)
        for (std::size_t k = 0; k < matrix.classes; ++k) rows[i].push_back(matrix.at(i, k));
    j["confusion"] = rows;
    j["warnings"] = warnings;
    return j;
}

std::string MetricsReport::to_text() const {
    std::ostringstream out;
    char buf[160];
    auto fmt = [&](const std::optional<double>& v) { return v ? (std::snprintf(buf, sizeof buf, "%.4f", *v), std::string(buf)) : std::string("n/a"); };
    out << "samples          " << samples << '\n';
    out << "OA               " << fmt(overall_accuracy) << '\n';
    out << "mAcc             " << fmt(mean_accuracy) << '\n';
    out << "kappa            " << fmt(kappa) << '\n';
    out << "macro precision  " << fmt(macro_precision) << '\n';
    out << "macro recall     " << fmt(macro_recall) << '\n';
    out << "macro F1         " << fmt(macro_f1) << "\n\n";
    std::size_t width = 5;
    for (const auto& n : class_names) width = std::max(width, n.size());
    std::snprintf(buf, sizeof buf, "%-*s %9s %9s %9s %9s\n", static_cast<int>(width), "class", "accuracy", "precision", "f1",
                  "kappa");
    out << buf;
    for (std::size_t i = 0; i < class_names.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%-*s %9.4f %9.4f %9.4f %9.4f\n", static_cast<int>(width), class_names[i].c_str(),
                      class_accuracy[i], class_precision[i], class_f1[i], class_kappa[i]);
        out << buf;
    }
    out << "\nconfusion (rows true, cols predicted)\n";
    for (std::size_t i = 0; i < matrix.classes; ++i) {
        std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(width), class_names[i].c_str());
        out << buf;
        for (std::size_t k = 0; k < matrix.classes; ++k) out << ' ' << matrix.at(i, k);
        out << '\n';
    }
    for (const auto& w : warnings) out << "warning: " << w << '\n';
    return out.str();
}

// ---- KID -------------------------------------------------------------------

double polynomial_kernel(const double* x, const double* y, std::size_t d, double gamma, double coef0, int degree) {
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += x[i] * y[i];
    return std::pow(gamma * dot + coef0, degree);
}

nlohmann::json KidEstimate::to_json() const {
    return {{"kid", value}, {"kid_x1000", scaled}, {"stddev", stddev}, {"subsets", subsets}, {"subset_size", subset_size},
            {"degree", degree}, {"gamma", gamma}, {"coef0", coef0}, {"feature_dim", feature_dim}};
}

namespace {

Eigen::MatrixXd gather(const double* rows, const std::vector<std::size_t>& idx, std::size_t d) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t k = 0; k < d; ++k) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[idx[i] * d + k];
    return out;
}

Eigen::MatrixXd kernel_block(const double* a, const std::vector<std::size_t>& ia, const double* b,
                             const std::vector<std::size_t>& ib, std::size_t d, const KidEstimate& est) {
    const Eigen::MatrixXd dots = gather(a, ia, d) * gather(b, ib, d).transpose();
    return dots.unaryExpr([&](double v) { return std::pow(est.gamma * v + est.coef0, est.degree); });
}

}  // namespace

KidEstimate kid(const Tensor& real, const Tensor& generated, const KidConfig& cfg) {
    if (real.rank() != 2 || generated.rank() != 2 || real.dim(1) != generated.dim(1))
        throw ShapeError("kid expects n x d and m x d features, got " + shape_str(real.shape()) + " and " +
                         shape_str(generated.shape()));
    const std::size_t n = real.dim(0), m = generated.dim(0), d = real.dim(1);
    const std::size_t s = cfg.subset_size ? cfg.subset_size : std::min<std::size_t>({1000, n, m});
    if (s < 2) throw std::invalid_argument("kid needs a subset size of at least 2");
    if (n < s || m < s)
        throw std::invalid_argument("kid: subset size " + std::to_string(s) + " exceeds sample counts (" + std::to_string(n) +
                                    ", " + std::to_string(m) + ")");
    if (cfg.subsets == 0) throw std::invalid_argument("kid needs at least one subset");

    KidEstimate est;
    est.subsets = cfg.subsets;
    est.subset_size = s;
    est.degree = cfg.degree;
    est.gamma = cfg.gamma > 0.0 ? cfg.gamma : 1.0 / static_cast<double>(d);
    est.coef0 = cfg.coef0;
    est.feature_dim = d;

    const double* xs = real.data().data();
    const double* ys = generated.data().data();
    std::vector<double> values(cfg.subsets);
    for (std::size_t t = 0; t < cfg.subsets; ++t) {
        const std::uint64_t sub_seed = mix_seed(cfg.seed, t);
        Rng rx(sub_seed), ry(sub_seed);
        const auto ix = rx.sample_without_replacement(n, s);
        const auto iy = ry.sample_without_replacement(m, s);
        const Eigen::MatrixXd kxx = kernel_block(xs, ix, xs, ix, d, est);
        const Eigen::MatrixXd kyy = kernel_block(ys, iy, ys, iy, d, est);
        const Eigen::MatrixXd kxy = kernel_block(xs, ix, ys, iy, d, est);
        double acc = 0.0;
        // Pairs summed in symmetric form so identical sets cancel exactly.
        for (std::size_t i = 0; i < s; ++i)
            for (std::size_t j = i + 1; j < s; ++j) {
                const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
                const double cross = kxy(a, b) + kxy(b, a);
                acc += ((kxx(a, b) + kxx(b, a)) + (kyy(a, b) + kyy(b, a))) - (cross + cross);
            }
        values[t] = acc / (static_cast<double>(s) * static_cast<double>(s - 1));
    }
    est.value = mean(values);
    double var = 0.0;
    for (double v : values) var += (v - est.value) * (v - est.value);
    est.stddev = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
    est.scaled = est.value * 1000.0;
    return est;
}

}  // namespace dvit
