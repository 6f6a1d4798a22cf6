#pragma once

// Common aliases and the error type shared by every module.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace kato {

using real = double;
using cplx = std::complex<double>;

using VecR = Eigen::VectorXd;
using VecC = Eigen::VectorXcd;
using MatR = Eigen::MatrixXd;
using MatC = Eigen::MatrixXcd;
using SpR = Eigen::SparseMatrix<double>;
using SpC = Eigen::SparseMatrix<cplx>;
using TripletR = Eigen::Triplet<double>;
using TripletC = Eigen::Triplet<cplx>;

using index_t = std::ptrdiff_t;

inline constexpr real pi = 3.14159265358979323846;

enum class ErrorKind {
    input,         ///< precondition violated by the caller
    parse,         ///< malformed file contents
    dimension,     ///< size mismatch between objects
    degenerate,    ///< geometry or linear algebra too degenerate to continue
    disconnected,  ///< graph is not connected
    numerical,     ///< solver breakdown, tolerance not reached
    config,        ///< scenario configuration is invalid
    io,            ///< file could not be read or written
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::input: return "input";
        case ErrorKind::parse: return "parse";
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::degenerate: return "degenerate";
        case ErrorKind::disconnected: return "disconnected";
        case ErrorKind::numerical: return "numerical";
        case ErrorKind::config: return "config";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) throw Error(kind, msg);
}

/// <x> := min{1, x} for x >= 0, with <t/0> := 1.
inline real bracket_min1(real x) { return x < 1.0 ? x : 1.0; }

inline real ratio_bracket(real t, real rho) {
    if (rho <= 0.0) return 1.0;
    return bracket_min1(t / rho);
}

}  // namespace kato
