#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "masa/matrix.hpp"

namespace masa {

namespace detail {

inline Eigen::MatrixXd to_eigen(const Matrix& a) {
    Eigen::MatrixXd e(static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
    return e;
}

inline void require_square(const Matrix& a, const char* op) {
    if (a.rows() != a.cols()) throw DimensionError(std::string(op) + ": matrix " + a.shape() + " is not square");
}

} // namespace detail

// Lower-triangular L with a = L L^T, or nullopt when a is not numerically positive definite.
inline std::optional<Matrix> cholesky(const Matrix& a) {
    detail::require_square(a, "cholesky");
    const Eigen::LLT<Eigen::MatrixXd> llt(detail::to_eigen(a));
    if (llt.info() != Eigen::Success) return std::nullopt;
    const Eigen::MatrixXd l = llt.matrixL();
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j <= i; ++j) out(i, j) = l(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    return out;
}

inline double symmetry_defect(const Matrix& a) {
    detail::require_square(a, "symmetry_defect");
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - a(j, i)));
    return m;
}

// Eigenvalues of a symmetric matrix, ascending.
inline std::vector<double> symmetric_eigenvalues(const Matrix& sym) {
    detail::require_square(sym, "symmetric_eigenvalues");
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(detail::to_eigen(sym), Eigen::EigenvaluesOnly);
    const Eigen::VectorXd& ev = es.eigenvalues();
    std::vector<double> out(ev.data(), ev.data() + ev.size());
    std::sort(out.begin(), out.end());
    return out;
}

// Singular values, descending.
inline std::vector<double> singular_values(const Matrix& m) {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(detail::to_eigen(m));
    const Eigen::VectorXd& sv = svd.singularValues();
    std::vector<double> out(sv.data(), sv.data() + sv.size());
    std::sort(out.begin(), out.end(), std::greater<>());
    return out;
}

// log det of a symmetric positive definite matrix. Uses Cholesky; if rounding
// breaks the factorization, falls back to eigenvalues clipped at zero.
inline double logdet_spd(const Matrix& a) {
    if (auto l = cholesky(a)) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) s += std::log((*l)(i, i));
        return 2.0 * s;
    }
    double s = 0.0;
    for (double ev : symmetric_eigenvalues(a)) s += std::log(std::max(ev, 0.0));
    return s;
}

} // namespace masa
