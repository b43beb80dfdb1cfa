#pragma once

#include "core.hpp"

#include <unsupported/Eigen/AutoDiff>

namespace ikn {

/// Forward-mode scalar carrying a dynamic gradient.
using ADScalar = Eigen::AutoDiffScalar<Eigen::VectorXd>;

inline double value_of(double x) { return x; }

template <class D> double value_of(const Eigen::AutoDiffScalar<D>& x) { return x.value(); }

template <class T> T scalar_cast(double x) { return T(x); }

/// Seed a phase vector for a full Jacobian pass.
inline VecXT<ADScalar> seed(const VecX& z)
{
    const auto n = z.size();
    VecXT<ADScalar> za(n);
    for (Eigen::Index i = 0; i < n; ++i) za(i) = ADScalar(z(i), n, i);
    return za;
}

/// Dense Jacobian of a vector field f: R^n -> R^n written against a generic
/// scalar. `f(const VecXT<T>&, VecXT<T>&)` must be callable for T = ADScalar.
template <class F> MatX jacobian(F&& f, const VecX& z)
{
    const auto n = z.size();
    VecXT<ADScalar> za = seed(z);
    VecXT<ADScalar> out(n);
    f(za, out);
    MatX J(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& d = out(i).derivatives();
        if (d.size() == 0)
            J.row(i).setZero();
        else
            J.row(i) = d.transpose();
    }
    return J;
}

} // namespace ikn
