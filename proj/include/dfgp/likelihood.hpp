#pragma once

#include <cmath>
#include <vector>

#include "dfgp/dynamics.hpp"

namespace dfgp {

/// Neumaier compensated sum.
class CompensatedSum {
  public:
    void add(double x) {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

  private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

/// -2 ln L from the innovation records of a filter run: sum_t ln|Sigma_t| + alpha' Sigma_t^{-1} alpha.
/// No 2*pi constant. Time steps without data contribute nothing.
double neg2_loglik(const KalmanResult& run);

/// Runs the filter (streaming, one sparse factorization per time step) and sums the innovation terms.
double neg2_loglik(const Model& model, const std::vector<TimeSlice>& data, const DfgpParams& params,
                   const CarLogDet* car_logdet = nullptr);

/// The three blocks of the complete-data -2 ln L.
struct CompleteLoglik {
    double measurement = 0.0;  // sum_t ln|V_t| + e_t' V_t^{-1} e_t
    double evolution = 0.0;    // sum_t ln|U_t| + w_t' U_t^{-1} w_t
    double initial_car = 0.0;  // ln|K0| + eta_0' K0^{-1} eta_0 + sum_t (xi_t' Q_t xi_t - ln|Q_t|)

    double total() const { return measurement + evolution + initial_car; }
};

/// eta holds eta_0..eta_u, xi holds xi_1..xi_u (ignored in low-rank mode).
CompleteLoglik neg2_complete_loglik(const Model& model, const std::vector<TimeSlice>& data, const DfgpParams& params,
                                    const std::vector<Vector>& eta, const std::vector<Vector>& xi,
                                    const CarLogDet* car_logdet = nullptr);

}  // namespace dfgp
