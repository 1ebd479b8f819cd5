#pragma once

namespace hetmt::stats {

/// Inverse of the standard normal CDF.
///
/// Wichura's algorithm AS 241 (PPND16), Applied Statistics 37(3):477-484,
/// 1988: rational approximations of degree 7 on three ranges, relative
/// accuracy about 1e-16. Returns -inf / +inf at p = 0 / 1.
double normal_quantile(double p);

/// Standard normal CDF, via erfc.
double normal_cdf(double z);

/// Regularized lower incomplete gamma P(a, x).
double gamma_p(double a, double x);

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x). Series for
/// x < a + 1, modified Lentz continued fraction otherwise.
double gamma_q(double a, double x);

/// Upper tail of the chi-squared distribution: Q(dof / 2, x / 2).
double chi2_sf(double x, int dof);

}  // namespace hetmt::stats
