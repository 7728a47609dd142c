#include "vrwkv/biwkv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace vrwkv {
namespace {

template <typename Real>
constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

template <typename Real>
void validate_inputs(const Tensor<Real>& k, const Tensor<Real>& v, const DecayParams<Real>& p) {
  if (k.rank() != 2 || v.rank() != 2) throw ShapeError("biwkv: K and V must be T x C matrices");
  if (k.shape() != v.shape()) throw ShapeError("biwkv: K and V shapes differ");
  if (k.rows() == 0 || k.cols() == 0) throw ShapeError("biwkv: T and C must be >= 1");
  if (p.w.size() != k.cols() || p.u.size() != k.cols())
    throw ShapeError("biwkv: w and u must have length C");
  if (!all_finite(k.values()) || !all_finite(v.values()))
    throw NumericalError("biwkv: non-finite entry in K or V");
  if (!all_finite(p.w) || !all_finite(p.u))
    throw NumericalError("biwkv: non-finite entry in w or u");
}

template <typename Real>
std::vector<Real> step_decays(const DecayParams<Real>& p, std::size_t tokens, bool bounded) {
  std::vector<Real> lambda(p.w.size());
  for (std::size_t c = 0; c < lambda.size(); ++c)
    lambda[c] = bounded ? p.w[c] / static_cast<Real>(tokens) : p.w[c];
  return lambda;
}

template <typename Real>
Real max3(Real a, Real b, Real c) {
  return std::max(a, std::max(b, c));
}

template <typename Real>
Tensor<Real> forward_safe(const Tensor<Real>& k, const Tensor<Real>& v,
                          const DecayParams<Real>& p, const WkvOptions& opt) {
  const std::size_t T = k.rows(), C = k.cols();
  const bool bidir = opt.direction == WkvDirection::bidirectional;
  const auto lambda = step_decays(p, T, opt.bounded);

  // Future sums seen from token t, i.e. over i > t. One reverse sweep.
  Tensor<Real> fut_num, fut_den, fut_exp;
  if (bidir) {
    fut_num = Tensor<Real>({T, C});
    fut_den = Tensor<Real>({T, C});
    fut_exp = Tensor<Real>({T, C});
    WkvRecurrenceState<Real> fut(C);
    for (std::size_t t = T; t-- > 0;) {
      for (std::size_t c = 0; c < C; ++c) {
        fut_num.at(t, c) = fut.num[c];
        fut_den.at(t, c) = fut.den[c];
        fut_exp.at(t, c) = fut.exponent[c];
        fut.absorb(c, lambda[c], k.at(t, c), v.at(t, c));
      }
    }
  }

  Tensor<Real> y({T, C});
  WkvRecurrenceState<Real> past(C);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) {
      const Real self = p.u[c] + k.at(t, c);
      const Real qa = past.exponent[c];
      const Real qb = bidir ? fut_exp.at(t, c) : kNegInf<Real>;
      const Real q = max3(qa, qb, self);
      const Real ea = std::exp(qa - q);
      const Real es = std::exp(self - q);
      Real num = past.num[c] * ea + es * v.at(t, c);
      Real den = past.den[c] * ea + es;
      if (bidir) {
        const Real eb = std::exp(qb - q);
        num += fut_num.at(t, c) * eb;
        den += fut_den.at(t, c) * eb;
      }
      y.at(t, c) = num / den;
      past.absorb(c, opt.inject_bug ? -lambda[c] : lambda[c], k.at(t, c), v.at(t, c));
    }
  }
  if (!all_finite(y.values()))
    throw NumericalError("biwkv_forward: non-finite result from a recurrence step");
  return y;
}

// Raw exponentials, no max subtraction. Only used for stability ablations.
template <typename Real>
Tensor<Real> forward_naive(const Tensor<Real>& k, const Tensor<Real>& v,
                           const DecayParams<Real>& p, const WkvOptions& opt) {
  const std::size_t T = k.rows(), C = k.cols();
  const bool bidir = opt.direction == WkvDirection::bidirectional;
  const auto lambda = step_decays(p, T, opt.bounded);
  std::vector<Real> decay(C);
  for (std::size_t c = 0; c < C; ++c) decay[c] = std::exp(-lambda[c]);

  Tensor<Real> fut_num({T, C}), fut_den({T, C});
  if (bidir) {
    std::vector<Real> b(C, 0), d(C, 0);
    for (std::size_t t = T; t-- > 0;) {
      for (std::size_t c = 0; c < C; ++c) {
        fut_num.at(t, c) = b[c];
        fut_den.at(t, c) = d[c];
        const Real ek = std::exp(k.at(t, c));
        b[c] = decay[c] * b[c] + ek * v.at(t, c);
        d[c] = decay[c] * d[c] + ek;
      }
    }
  }
  Tensor<Real> y({T, C});
  std::vector<Real> a(C, 0), cc(C, 0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) {
      const Real es = std::exp(p.u[c] + k.at(t, c));
      y.at(t, c) = (a[c] + fut_num.at(t, c) + es * v.at(t, c)) / (cc[c] + fut_den.at(t, c) + es);
      const Real ek = std::exp(k.at(t, c));
      const Real dc = opt.inject_bug ? Real{1} / decay[c] : decay[c];
      a[c] = dc * a[c] + ek * v.at(t, c);
      cc[c] = dc * cc[c] + ek;
    }
  }
  return y;
}

}  // namespace

template <typename Real>
WkvRecurrenceState<Real>::WkvRecurrenceState(std::size_t channels)
    : num(channels, Real{0}), den(channels, Real{0}), exponent(channels, kNegInf<Real>) {}

template <typename Real>
void WkvRecurrenceState<Real>::absorb(std::size_t c, Real lambda, Real k, Real v) {
  const Real decayed = exponent[c] - lambda;
  const Real q = std::max(decayed, k);
  const Real carry = std::exp(decayed - q);
  const Real fresh = std::exp(k - q);
  num[c] = num[c] * carry + fresh * v;
  den[c] = den[c] * carry + fresh;
  exponent[c] = q;
}

Tensor<double> biwkv_oracle(const Tensor<double>& k, const Tensor<double>& v,
                            const DecayParams<double>& p, WkvOptions options) {
  validate_inputs(k, v, p);
  const std::size_t T = k.rows(), C = k.cols();
  const bool causal = options.direction == WkvDirection::causal;
  const double scale = options.bounded ? 1.0 / static_cast<double>(T) : 1.0;

  Tensor<double> y({T, C});
  std::vector<double> expo(T);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t last = causal ? t + 1 : T;
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < last; ++i) {
        if (i == t) {
          expo[i] = p.u[c] + k.at(t, c);
        } else {
          const double dist = static_cast<double>(i > t ? i - t : t - i);
          expo[i] = -(dist - 1.0) * scale * p.w[c] + k.at(i, c);
        }
        top = std::max(top, expo[i]);
      }
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < last; ++i) {
        const double e = std::exp(expo[i] - top);
        num += e * v.at(i, c);
        den += e;
      }
      if (!(den > 0.0) || !std::isfinite(den))
        throw NumericalError("biwkv_oracle: degenerate denominator at t=" + std::to_string(t) +
                             ", c=" + std::to_string(c));
      y.at(t, c) = num / den;
    }
  }
  return y;
}

template <typename Real>
WkvResult<Real> biwkv_forward(const Tensor<Real>& k, const Tensor<Real>& v,
                              const DecayParams<Real>& params, WkvOptions options) {
  validate_inputs(k, v, params);
  Tensor<Real> y = options.safe_exp ? forward_safe(k, v, params, options)
                                    : forward_naive(k, v, params, options);
  return {std::move(y), WkvContext<Real>{k, v, params, options}};
}

template <typename Real>
WkvGradients<Real> biwkv_backward(const WkvContext<Real>& ctx, const Tensor<Real>& gy) {
  const auto& k = ctx.k;
  const auto& v = ctx.v;
  const auto& p = ctx.params;
  validate_inputs(k, v, p);
  if (gy.shape() != k.shape()) throw ShapeError("biwkv_backward: gy shape does not match K");
  if (!all_finite(gy.values())) throw NumericalError("biwkv_backward: non-finite upstream gradient");

  const std::size_t T = k.rows(), C = k.cols();
  const bool bidir = ctx.options.direction == WkvDirection::bidirectional;
  const auto lambda = step_decays(p, T, ctx.options.bounded);
  // d(lambda)/dw
  const Real lambda_grad = ctx.options.bounded ? Real{1} / static_cast<Real>(T) : Real{1};

  WkvGradients<Real> g{std::vector<Real>(C, 0), std::vector<Real>(C, 0), Tensor<Real>({T, C}),
                       Tensor<Real>({T, C})};

  // Future sums over i > t, plus their distance-weighted companions
  // sum_{i>t} (i-t-1) * exp(...), which carry d/dw. Shared exponent per pair.
  Tensor<Real> fb, fd, fbd, fdd, fq;
  if (bidir) {
    fb = fd = fbd = fdd = fq = Tensor<Real>({T, C});
    std::vector<Real> b(C, 0), d(C, 0), bd(C, 0), dd(C, 0), q(C, kNegInf<Real>);
    for (std::size_t t = T; t-- > 0;) {
      for (std::size_t c = 0; c < C; ++c) {
        fb.at(t, c) = b[c];
        fd.at(t, c) = d[c];
        fbd.at(t, c) = bd[c];
        fdd.at(t, c) = dd[c];
        fq.at(t, c) = q[c];
        const Real decayed = q[c] - lambda[c];
        const Real qn = std::max(decayed, k.at(t, c));
        const Real carry = std::exp(decayed - qn);
        const Real fresh = std::exp(k.at(t, c) - qn);
        bd[c] = (bd[c] + b[c]) * carry;
        dd[c] = (dd[c] + d[c]) * carry;
        b[c] = b[c] * carry + fresh * v.at(t, c);
        d[c] = d[c] * carry + fresh;
        q[c] = qn;
      }
    }
  }

  // Per-token quantities reused by the final reverse sweep. The true
  // upstream-over-denominator factor is r * exp(-q).
  Tensor<Real> rs({T, C}), ys({T, C}), qs({T, C});

  std::vector<Real> a(C, 0), cc(C, 0), ad(C, 0), cd(C, 0), qa(C, kNegInf<Real>);
  // Accumulators sum_{s<t} g_s exp(-(t-s-1) lambda) and the y-weighted twin.
  std::vector<Real> glo(C, 0), hlo(C, 0), plo(C, kNegInf<Real>);

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) {
      const Real kt = k.at(t, c), vt = v.at(t, c);
      const Real self = p.u[c] + kt;
      const Real qb = bidir ? fq.at(t, c) : kNegInf<Real>;
      const Real q = max3(qa[c], qb, self);
      const Real ea = std::exp(qa[c] - q);
      const Real eb = std::exp(qb - q);
      const Real es = std::exp(self - q);

      Real num = a[c] * ea + es * vt;
      Real den = cc[c] * ea + es;
      Real num_d = ad[c] * ea;
      Real den_d = cd[c] * ea;
      if (bidir) {
        num += fb.at(t, c) * eb;
        den += fd.at(t, c) * eb;
        num_d += fbd.at(t, c) * eb;
        den_d += fdd.at(t, c) * eb;
      }
      const Real y = num / den;
      const Real r = gy.at(t, c) / den;

      const Real self_term = r * es * (vt - y);
      g.gu[c] += self_term;
      g.gk.at(t, c) += self_term;
      g.gv.at(t, c) += r * es;
      g.gw[c] -= lambda_grad * r * (num_d - y * den_d);

      if (bidir) {
        // Earlier tokens s < t see t in their future.
        const Real f = std::exp(kt + plo[c]);
        g.gv.at(t, c) += f * glo[c];
        g.gk.at(t, c) += f * (vt * glo[c] - hlo[c]);

        const Real decayed = plo[c] - lambda[c];
        const Real pn = std::max(decayed, -q);
        const Real carry = std::exp(decayed - pn);
        const Real fresh = std::exp(-q - pn);
        glo[c] = glo[c] * carry + fresh * r;
        hlo[c] = hlo[c] * carry + fresh * r * y;
        plo[c] = pn;
      }

      const Real decayed = qa[c] - lambda[c];
      const Real qn = std::max(decayed, kt);
      const Real carry = std::exp(decayed - qn);
      const Real fresh = std::exp(kt - qn);
      ad[c] = (ad[c] + a[c]) * carry;
      cd[c] = (cd[c] + cc[c]) * carry;
      a[c] = a[c] * carry + fresh * vt;
      cc[c] = cc[c] * carry + fresh;
      qa[c] = qn;

      rs.at(t, c) = r;
      ys.at(t, c) = y;
      qs.at(t, c) = q;
    }
  }

  // Later tokens t > i see i in their past (both directions).
  std::vector<Real> ghi(C, 0), hhi(C, 0), phi(C, kNegInf<Real>);
  for (std::size_t i = T; i-- > 0;) {
    for (std::size_t c = 0; c < C; ++c) {
      const Real ki = k.at(i, c), vi = v.at(i, c);
      const Real f = std::exp(ki + phi[c]);
      g.gv.at(i, c) += f * ghi[c];
      g.gk.at(i, c) += f * (vi * ghi[c] - hhi[c]);

      const Real q = qs.at(i, c);
      const Real decayed = phi[c] - lambda[c];
      const Real pn = std::max(decayed, -q);
      const Real carry = std::exp(decayed - pn);
      const Real fresh = std::exp(-q - pn);
      ghi[c] = ghi[c] * carry + fresh * rs.at(i, c);
      hhi[c] = hhi[c] * carry + fresh * rs.at(i, c) * ys.at(i, c);
      phi[c] = pn;
    }
  }

  if (!all_finite(g.gw) || !all_finite(g.gu) || !all_finite(g.gk.values()) ||
      !all_finite(g.gv.values()))
    throw NumericalError("biwkv_backward: non-finite gradient");
  return g;
}

std::int64_t flops_estimate(std::int64_t tokens, std::int64_t channels) {
  if (tokens < 1 || channels < 1) throw ShapeError("flops_estimate: T and C must be >= 1");
  std::int64_t tc = 0, out = 0;
  if (__builtin_mul_overflow(tokens, channels, &tc) || __builtin_mul_overflow(tc, 13, &out))
    throw Error("flops_estimate: 13*T*C overflows a 64-bit integer");
  return out;
}

template struct WkvRecurrenceState<float>;
template struct WkvRecurrenceState<double>;
template WkvResult<float> biwkv_forward(const Tensor<float>&, const Tensor<float>&,
                                        const DecayParams<float>&, WkvOptions);
template WkvResult<double> biwkv_forward(const Tensor<double>&, const Tensor<double>&,
                                         const DecayParams<double>&, WkvOptions);
template WkvGradients<float> biwkv_backward(const WkvContext<float>&, const Tensor<float>&);
template WkvGradients<double> biwkv_backward(const WkvContext<double>&, const Tensor<double>&);

}  // namespace vrwkv
