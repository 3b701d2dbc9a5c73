//! Scalar exponential tilting.
//!
//! Given log-weights `l_i` on offsets `z_i`, find `s` such that the tilted
//! law `w_i ∝ exp(l_i + s z_i)` has mean `target`. The tilted mean is
//! strictly increasing in `s`, so the root is unique whenever `target`
//! lies strictly inside the hull of the offsets carrying finite weight.
//! Used by the reference-chain rows, the martingale projection and the
//! mean correction of generated marginals.

/// How a tilt solve ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TiltStatus {
    Converged,
    /// Target at or beyond the lower edge of the support hull.
    ClampedLow,
    /// Target at or beyond the upper edge of the support hull.
    ClampedHigh,
    /// Iteration cap reached without meeting the tolerance.
    Stalled,
}

#[derive(Debug, Clone, Copy)]
pub struct Tilt {
    pub s: f64,
    /// Tilted mean minus target.
    pub residual: f64,
    pub status: TiltStatus,
    pub iters: usize,
}

/// Log-partition, mean and variance of the tilted law at `s`.
#[inline]
pub fn tilted_moments(logw: &[f64], z: &[f64], s: f64) -> (f64, f64, f64) {
    let mut mx = f64::NEG_INFINITY;
    for (l, zi) in logw.iter().zip(z) {
        let v = l + s * zi;
        if v > mx {
            mx = v;
        }
    }
    if mx == f64::NEG_INFINITY {
        return (f64::NEG_INFINITY, 0.0, 0.0);
    }
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (l, zi) in logw.iter().zip(z) {
        let v = l + s * zi;
        if v == f64::NEG_INFINITY {
            continue;
        }
        let w = (v - mx).exp();
        s0 += w;
        s1 += w * zi;
        s2 += w * zi * zi;
    }
    let mean = s1 / s0;
    let var = (s2 / s0 - mean * mean).max(0.0);
    (mx + s0.ln(), mean, var)
}

/// Solve for the tilt `s` with tilted mean `target`, starting at `s0`.
///
/// Newton steps with a bisection safeguard once a bracket exists. When the
/// target is outside the open hull of the support, the solve returns
/// `s = ±s_max` with a clamped status.
pub fn solve_tilt(
    logw: &[f64],
    z: &[f64],
    target: f64,
    s0: f64,
    tol: f64,
    s_max: f64,
    max_iter: usize,
) -> Tilt {
    let mut zmin = f64::INFINITY;
    let mut zmax = f64::NEG_INFINITY;
    for (l, zi) in logw.iter().zip(z) {
        if *l > f64::NEG_INFINITY {
            zmin = zmin.min(*zi);
            zmax = zmax.max(*zi);
        }
    }
    if !(zmin <= zmax) {
        return Tilt {
            s: 0.0,
            residual: f64::NAN,
            status: TiltStatus::Stalled,
            iters: 0,
        };
    }
    if zmin == zmax && (target - zmin).abs() <= tol {
        return Tilt {
            s: 0.0,
            residual: zmin - target,
            status: TiltStatus::Converged,
            iters: 0,
        };
    }
    if target <= zmin {
        let (_, m, _) = tilted_moments(logw, z, -s_max);
        return Tilt {
            s: -s_max,
            residual: m - target,
            status: TiltStatus::ClampedLow,
            iters: 0,
        };
    }
    if target >= zmax {
        let (_, m, _) = tilted_moments(logw, z, s_max);
        return Tilt {
            s: s_max,
            residual: m - target,
            status: TiltStatus::ClampedHigh,
            iters: 0,
        };
    }

    let spread = zmax - zmin;
    let mut lo = -s_max;
    let mut hi = s_max;
    let mut s = s0.clamp(lo, hi);
    let mut last = f64::NAN;
    for it in 0..max_iter {
        let (_, m, v) = tilted_moments(logw, z, s);
        let r = m - target;
        last = r;
        if r.abs() <= tol {
            return Tilt {
                s,
                residual: r,
                status: TiltStatus::Converged,
                iters: it + 1,
            };
        }
        if r < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let mut next = if v > 0.0 { s - r / v } else { f64::NAN };
        if !(next > lo && next < hi) {
            // Newton left the bracket: bisect when the bracket is bounded
            // on both sides, otherwise expand geometrically.
            let width = 1.0 / spread;
            next = if lo > -s_max && hi < s_max {
                0.5 * (lo + hi)
            } else if r < 0.0 {
                (s + (2.0 * s.abs()).max(width)).min(0.5 * (s + hi))
            } else {
                (s - (2.0 * s.abs()).max(width)).max(0.5 * (s + lo))
            };
        }
        if next == s {
            break;
        }
        s = next;
    }
    Tilt {
        s,
        residual: last,
        status: TiltStatus::Stalled,
        iters: max_iter,
    }
}
