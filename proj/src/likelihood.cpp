#include "dfgp/likelihood.hpp"

#include <cmath>
#include <string>

#include "dfgp/error.hpp"

namespace dfgp {

double neg2_loglik(const KalmanResult& run) {
    CompensatedSum total;
    for (const auto& rec : run.innovations) {
        total.add(rec.logdet);
        total.add(rec.quad);
    }
    return total.value();
}

double neg2_loglik(const Model& model, const std::vector<TimeSlice>& data, const DfgpParams& params,
                   const CarLogDet* car_logdet) {
    return neg2_loglik(kalman_filter_streaming(model, data, params, {}, car_logdet));
}

namespace {

/// ln|M| and x' M^{-1} x for a small SPD matrix.
std::pair<double, double> gaussian_terms(const Matrix& m, const Vector& x, const char* what) {
    const Eigen::LLT<Matrix> llt(m);
    if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + " is not positive definite", 0);
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    const Vector y = llt.matrixL().solve(x);
    return {logdet, y.squaredNorm()};
}

}  // namespace

CompleteLoglik neg2_complete_loglik(const Model& model, const std::vector<TimeSlice>& data, const DfgpParams& params,
                                    const std::vector<Vector>& eta, const std::vector<Vector>& xi,
                                    const CarLogDet* car_logdet) {
    const int u = static_cast<int>(data.size());
    const Index r = model.basis_size();
    const Index n = model.state_size();
    if (params.horizon() < u) throw InvalidArgument("complete likelihood: parameter horizon shorter than data");
    if (static_cast<int>(eta.size()) != u + 1) throw InvalidArgument("complete likelihood: need eta_0..eta_u");
    if (!model.lowrank_only && static_cast<int>(xi.size()) != u)
        throw InvalidArgument("complete likelihood: need xi_1..xi_u");
    for (const auto& e : eta)
        if (e.size() != r) throw InvalidArgument("complete likelihood: eta has wrong length");
    if (!model.lowrank_only)
        for (const auto& x : xi)
            if (x.size() != n) throw InvalidArgument("complete likelihood: xi has wrong length");

    CompensatedSum meas, evol, init;
    const auto k0 = gaussian_terms(params.K0, eta[0], "K0");
    init.add(k0.first);
    init.add(k0.second);
    for (int t = 1; t <= u; ++t) {
        const auto ti = static_cast<std::size_t>(t - 1);
        const TimeSlice& slice = data[ti];
        slice.validate(n, model.instruments);

        Vector fine = model.design.covariates * params.beta[ti] + model.design.basis * eta[ti + 1];
        if (!model.lowrank_only) fine += xi[ti];
        const Vector e = slice.z - slice.footprints * fine;
        const Vector var = slice.noise_variance(params.sigma2[ti]);
        meas.add(var.array().log().sum());
        meas.add(e.dot(var.cwiseInverse().cwiseProduct(e)));

        const auto w = gaussian_terms(params.U[ti], eta[ti + 1] - params.H[ti] * eta[ti], "U");
        evol.add(w.first);
        evol.add(w.second);

        if (!model.lowrank_only) {
            const SparseMatrix q = build_precision(model.car, params.car[ti], model.gamma_range);
            const double logdet_q =
                car_logdet ? car_logdet->precision_logdet(params.car[ti]) : SparseCholesky(q, t).logdet();
            init.add(xi[ti].dot(q * xi[ti]));
            init.add(-logdet_q);
        }
    }
    return {meas.value(), evol.value(), init.value()};
}

}  // namespace dfgp
