#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "masa/csv.hpp"
#include "masa/linalg.hpp"
#include "masa/matrix.hpp"
#include "masa/model.hpp"

namespace masa {

// ---- centered kernel alignment -----------------------------------------------

// Linear CKA: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centered
// inputs. Returns 0 when either self-similarity norm is below 1e-12.
inline double linear_cka(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) {
        throw ContractError("linear_cka: row counts differ, " + x.shape() + " vs " + y.shape());
    }
    if (x.rows() < 2) throw ContractError("linear_cka: need at least 2 samples");
    const Matrix xc = center_columns(x);
    const Matrix yc = center_columns(y);
    const Matrix xt = transpose(xc), yt = transpose(yc);
    const double cross = frobenius_norm(matmul(yt, xc));
    const double nx = frobenius_norm(matmul(xt, xc));
    const double ny = frobenius_norm(matmul(yt, yc));
    if (nx < 1e-12 || ny < 1e-12) return 0.0;
    return cross * cross / (nx * ny);
}

struct CkaReport {
    Signal signal = Signal::a_output;
    std::map<ModuleKind, std::vector<double>> scores; // L-1 adjacent-pair scores per module
    std::map<ModuleKind, double> averages;
    double overall_average = 0.0;
};

inline CkaReport adjacent_layer_cka(const CaptureBuffer& buf, Signal signal) {
    std::set<ModuleKind> modules;
    for (const auto& [key, site] : buf.sites)
        if (!site.get(signal).empty()) modules.insert(key.second);
    if (modules.empty()) {
        throw ContractError("adjacent_layer_cka: buffer holds no '" + std::string(to_string(signal)) + "' captures");
    }
    if (buf.n_layers < 2) throw ContractError("adjacent_layer_cka: need captures from at least 2 layers");
    std::string missing;
    for (ModuleKind m : modules)
        for (std::size_t l = 0; l < buf.n_layers; ++l) {
            const SiteCapture* sc = buf.find(l, m);
            if (!sc || sc->get(signal).empty()) {
                missing += (missing.empty() ? "" : ", ") + std::string("(") + std::to_string(l) + "," +
                           std::string(to_string(m)) + ")";
            }
        }
    if (!missing.empty()) {
        throw ContractError("adjacent_layer_cka: missing '" + std::string(to_string(signal)) + "' captures at " +
                            missing);
    }
    CkaReport rep;
    rep.signal = signal;
    double total = 0.0;
    std::size_t count = 0;
    for (ModuleKind m : modules) {
        auto& s = rep.scores[m];
        for (std::size_t l = 0; l + 1 < buf.n_layers; ++l) {
            s.push_back(linear_cka(buf.find(l, m)->get(signal), buf.find(l + 1, m)->get(signal)));
        }
        double avg = 0.0;
        for (double v : s) avg += v;
        avg /= static_cast<double>(s.size());
        rep.averages[m] = avg;
        total += avg * static_cast<double>(s.size());
        count += s.size();
    }
    rep.overall_average = total / static_cast<double>(count);
    return rep;
}

// ---- information ceiling -------------------------------------------------------

// Zero-mean Gaussian input with covariance sigma.
struct GaussianInputModel {
    Matrix sigma; // [d x d]

    std::size_t dim() const { return sigma.rows(); }

    // Unbiased sample covariance of rows of x.
    static GaussianInputModel from_samples(const Matrix& x) {
        if (x.rows() < 2) throw ContractError("GaussianInputModel: need at least 2 samples");
        const Matrix xc = center_columns(x);
        Matrix cov = matmul(transpose(xc), xc) * (1.0 / static_cast<double>(x.rows() - 1));
        for (std::size_t i = 0; i < cov.rows(); ++i)
            for (std::size_t j = i + 1; j < cov.cols(); ++j) cov(j, i) = cov(i, j);
        return {std::move(cov)};
    }

    // Violations of symmetry (1e-10) and positive semidefiniteness (min eigenvalue >= -tol).
    std::vector<std::string> validate(double psd_tol = 1e-10) const {
        std::vector<std::string> v;
        if (sigma.rows() != sigma.cols()) {
            v.push_back("covariance " + sigma.shape() + " is not square");
            return v;
        }
        const double defect = symmetry_defect(sigma);
        if (defect > 1e-10 * std::max(1.0, max_abs(sigma))) {
            v.push_back("covariance is not symmetric (defect " + format_number(defect) + ")");
        }
        const double min_ev = symmetric_eigenvalues(sigma).front();
        if (min_ev < -psd_tol) v.push_back("covariance has negative eigenvalue " + format_number(min_ev));
        return v;
    }
};

namespace detail {

inline void require_channel_input(const Matrix& a, const GaussianInputModel& g, const char* op) {
    if (a.cols() != g.dim() || g.sigma.rows() != g.sigma.cols()) {
        throw DimensionError(std::string(op) + ": A " + a.shape() + " incompatible with covariance " + g.sigma.shape());
    }
}

inline void require_psd(const GaussianInputModel& g, const char* op) {
    if (auto v = g.validate(1e-8); !v.empty()) throw ContractError(std::string(op) + ": " + v.front());
}

// 1/2 log det(M) for symmetric positive definite M, symmetrized first.
inline double half_logdet(Matrix m) {
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i + 1; j < m.cols(); ++j) m(i, j) = m(j, i) = 0.5 * (m(i, j) + m(j, i));
    return 0.5 * logdet_spd(m);
}

} // namespace detail

// 1/2 log det(I_r + A Sigma A^T), in nats.
inline double mi_ceiling(const Matrix& a, const GaussianInputModel& g) {
    detail::require_channel_input(a, g, "mi_ceiling");
    detail::require_psd(g, "mi_ceiling");
    Matrix m = matmul_nt(matmul(a, g.sigma), a);
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += 1.0;
    return detail::half_logdet(std::move(m));
}

// 1/2 log det(I_r + sum_i A_i Sigma A_i^T), in nats.
inline double ensemble_ceiling(std::span<const Matrix> experts, const GaussianInputModel& g) {
    if (experts.empty()) throw ContractError("ensemble_ceiling: empty expert list");
    for (const Matrix& a : experts) {
        experts[0].require_same(a, "ensemble_ceiling");
        detail::require_channel_input(a, g, "ensemble_ceiling");
    }
    detail::require_psd(g, "ensemble_ceiling");
    Matrix m = Matrix::identity(experts[0].rows());
    for (const Matrix& a : experts) m += matmul_nt(matmul(a, g.sigma), a);
    return detail::half_logdet(std::move(m));
}

// Number of singular values above tol * sigma_max.
inline std::size_t numeric_rank(const Matrix& m, double tol = 1e-10) {
    if (!(tol > 0.0)) throw ContractError("numeric_rank: tol must be positive");
    const std::vector<double> sv = singular_values(m);
    if (sv.empty() || sv.front() == 0.0) return 0;
    return static_cast<std::size_t>(
        std::count_if(sv.begin(), sv.end(), [&](double s) { return s > tol * sv.front(); }));
}

struct CeilingRow {
    std::size_t layer = 0;
    ModuleKind module = ModuleKind::q;
    double aggregated_bound = 0.0; // single channel through sum_i A_i
    double ensemble_bound = 0.0;   // lifted ceiling over the A-ensemble
    std::size_t increment_rank = 0;
    std::size_t rank_limit = 0;    // r
};

struct CeilingReport {
    std::vector<CeilingRow> rows;
};

// Per adapter site: ceilings under the empirical input covariance and the
// numerical rank of the captured increments. Needs input and increment captures.
inline CeilingReport ceiling_report(const AdaptedModel& model, const CaptureBuffer& buf) {
    CeilingReport rep;
    for (const auto& [key, site] : buf.sites) {
        if (site.input.empty() || site.increment.empty()) {
            throw ContractError("ceiling_report: site (" + std::to_string(key.first) + "," +
                                std::string(to_string(key.second)) + ") lacks input/increment captures");
        }
        const AdapterView view = model.plan.view(key.first, key.second);
        std::vector<Matrix> experts;
        for (const auto& p : view.a) experts.push_back(*p);
        const GaussianInputModel g = GaussianInputModel::from_samples(site.input);
        CeilingRow row;
        row.layer = key.first;
        row.module = key.second;
        row.aggregated_bound = mi_ceiling(aggregate_experts(experts), g);
        row.ensemble_bound = ensemble_ceiling(experts, g);
        row.increment_rank = numeric_rank(site.increment, 1e-9);
        row.rank_limit = model.config().rank * (model.config().variant == Variant::multi_pair ? view.a.size() : 1);
        rep.rows.push_back(row);
    }
    return rep;
}

// ---- feature export -------------------------------------------------------------

// One CSV row per (site, sample): layer,module,signal,label,f0..f{k-1}. Token rows
// are averaged per sample (seq_len rows each). Values use 9 significant digits.
inline std::string features_csv(const CaptureBuffer& buf, std::span<const int> labels, Signal signal) {
    std::size_t width = 0;
    for (const auto& [key, site] : buf.sites) {
        const Matrix& m = site.get(signal);
        if (m.empty()) continue;
        if (width && m.cols() != width) throw ContractError("export_features: sites have differing feature widths");
        width = m.cols();
        if (m.rows() != labels.size() * buf.seq_len) {
            throw ContractError("export_features: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(m.rows()) + " rows at seq_len " + std::to_string(buf.seq_len));
        }
    }
    if (width == 0) throw ContractError("export_features: no '" + std::string(to_string(signal)) + "' captures");
    std::vector<std::string> header{"layer", "module", "signal", "label"};
    for (std::size_t c = 0; c < width; ++c) header.push_back("f" + std::to_string(c));
    CsvWriter csv(header);
    for (const auto& [key, site] : buf.sites) {
        const Matrix& m = site.get(signal);
        if (m.empty()) continue;
        for (std::size_t s = 0; s < labels.size(); ++s) {
            std::vector<std::string> cells{std::to_string(key.first), std::string(to_string(key.second)),
                                           std::string(to_string(signal)), std::to_string(labels[s])};
            for (std::size_t c = 0; c < width; ++c) {
                double acc = 0.0;
                for (std::size_t t = 0; t < buf.seq_len; ++t) acc += m(s * buf.seq_len + t, c);
                cells.push_back(format_number(acc / static_cast<double>(buf.seq_len)));
            }
            csv.row(cells);
        }
    }
    return csv.str();
}

inline void export_features(const CaptureBuffer& buf, std::span<const int> labels, const std::filesystem::path& path,
                            Signal signal = Signal::a_output) {
    CsvWriter::write_file(path, features_csv(buf, labels, signal));
}

} // namespace masa
