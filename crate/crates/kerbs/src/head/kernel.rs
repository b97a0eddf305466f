//! The variance-aware similarity kernel and its normalization factor.
//!
//! `K_theta(h, e) = |h||e| (a exp(-theta cos(h,e)) - a)` with
//! `a(theta) = -theta / (2 (exp(-theta) + theta - 1))`. As theta -> 0 the
//! kernel degenerates to the plain inner product; the closed form for `a`
//! is 0/0 there, so below `|theta| < SERIES_THRESHOLD` everything switches
//! to series forms that stay finite through theta = 0. Continuity at the
//! switch point is pinned by tests to 1e-9.

use crate::error::{KerbsError, Result};
use crate::numerics::tensor::{dot, norm};
use crate::numerics::NORM_FLOOR;

/// Below this |theta| the closed forms give way to series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// Series denominator: 2(exp(-t)+t-1) = t^2 * m(t) with
/// m(t) = 1 - t/3 + t^2/12 - O(t^3).
fn series_m(theta: f64) -> f64 {
    1.0 - theta / 3.0 + theta * theta / 12.0
}

fn series_m_prime(theta: f64) -> f64 {
    -1.0 / 3.0 + theta / 6.0
}

/// Normalization factor `a(theta) = -theta / (2(exp(-theta)+theta-1))`.
///
/// Finite for every theta != 0 (the denominator is strictly positive);
/// diverges like -1/theta as theta -> 0, where the kernel itself stays
/// finite via [`kernel_shape`].
pub fn normalization_factor(theta: f64) -> f64 {
    if theta.abs() < SERIES_THRESHOLD {
        -1.0 / (theta * series_m(theta))
    } else {
        // expm1 keeps the denominator accurate where exp(-t)+t-1 cancels.
        -theta / (2.0 * ((-theta).exp_m1() + theta))
    }
}

/// `(a, da/dtheta)` in one call; the tape caches this per sense per step.
pub fn norm_factor_with_grad(theta: f64) -> (f64, f64) {
    if theta.abs() < SERIES_THRESHOLD {
        let m = series_m(theta);
        let mp = series_m_prime(theta);
        let a = -1.0 / (theta * m);
        // a = -1/(t m): a' = 1/(t^2 m) + m'/(t m^2)
        let a_prime = 1.0 / (theta * theta * m) + mp / (theta * m * m);
        (a, a_prime)
    } else {
        let d = 2.0 * ((-theta).exp_m1() + theta);
        let d_prime = -2.0 * (-theta).exp_m1();
        let a = -theta / d;
        let a_prime = (-d + theta * d_prime) / (d * d);
        (a, a_prime)
    }
}

/// Kernel profile at unit norms: `g(theta, c) = a (exp(-theta c) - 1)`.
/// The full kernel is `|h||e| * g(theta, cos(h,e))`.
///
/// For small theta the product is evaluated as the rational series
/// `(c - t c^2/2 + t^2 c^3/6) / (1 - t/3 + t^2/12)`, which equals `c`
/// exactly at theta = 0.
pub fn kernel_shape(theta: f64, cos: f64) -> f64 {
    if theta.abs() < SERIES_THRESHOLD {
        let n = cos - theta * cos * cos / 2.0 + theta * theta * cos * cos * cos / 6.0;
        n / series_m(theta)
    } else {
        normalization_factor(theta) * (-theta * cos).exp_m1()
    }
}

/// `(dg/dtheta, dg/dcos)` given the already-computed shape value and the
/// cached `(a, a')` pair. Matches the branch used by [`kernel_shape`].
pub fn kernel_shape_grads(theta: f64, cos: f64, shape: f64, a: f64, a_prime: f64) -> (f64, f64) {
    if theta.abs() < SERIES_THRESHOLD {
        let m = series_m(theta);
        let mp = series_m_prime(theta);
        let c2 = cos * cos;
        let n = cos - theta * c2 / 2.0 + theta * theta * c2 * cos / 6.0;
        let n_theta = -c2 / 2.0 + theta * c2 * cos / 3.0;
        let n_cos = 1.0 - theta * cos + theta * theta * c2 / 2.0;
        ((n_theta * m - n * mp) / (m * m), n_cos / m)
    } else {
        // shape = a E with E = exp(-theta cos) - 1, so E and exp(-theta cos)
        // come back out of the stored value without another transcendental.
        let e = shape / a;
        let eexp = e + 1.0;
        let dg_dtheta = a_prime * e - a * cos * eexp;
        let dg_dcos = -a * theta * eexp;
        (dg_dtheta, dg_dcos)
    }
}

fn checked_cos(h: &[f64], e: &[f64]) -> Result<f64> {
    if h.len() != e.len() {
        return Err(KerbsError::Dimension(format!(
            "kernel: vectors of length {} vs {}",
            h.len(),
            e.len()
        )));
    }
    let (nh, ne) = (norm(h), norm(e));
    if nh == 0.0 || ne == 0.0 {
        return Err(KerbsError::DegenerateVector(
            "kernel on zero-norm vector".into(),
        ));
    }
    Ok(dot(h, e) / (nh.max(NORM_FLOOR) * ne.max(NORM_FLOOR)))
}

/// `K_theta(h, e)`. Degenerates to `<h, e>` as theta -> 0.
pub fn kernel_eval(h: &[f64], e: &[f64], theta: f64) -> Result<f64> {
    let cos = checked_cos(h, e)?;
    let (nh, ne) = (norm(h).max(NORM_FLOOR), norm(e).max(NORM_FLOOR));
    Ok(nh * ne * kernel_shape(theta, cos))
}

/// Logarithmic derivative `d log K / d theta = a'/a - c e^{-tc}/(e^{-tc}-1)`,
/// with the removable singularity at cos = 0 filled by its limit
/// `a'/a + 1/theta`. Serves as the analytic cross-check for the tape's
/// theta gradients.
pub fn kernel_grad_theta(h: &[f64], e: &[f64], theta: f64) -> Result<f64> {
    let cos = checked_cos(h, e)?;
    let (a, a_prime) = norm_factor_with_grad(theta);
    let log_a_prime = if theta.abs() < SERIES_THRESHOLD {
        // a'/a for the series branch, written without the 1/theta pole
        // cancellation: a'/a = -1/theta - m'/m.
        -1.0 / theta - series_m_prime(theta) / series_m(theta)
    } else {
        a_prime / a
    };
    if cos == 0.0 {
        // lim_{c->0} c e^{-tc}/(e^{-tc}-1) = -1/theta
        return Ok(log_a_prime + 1.0 / theta);
    }
    let e1 = (-theta * cos).exp_m1();
    Ok(log_a_prime - cos * (e1 + 1.0) / e1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::rel_err;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // High-precision closed-form evaluations (30-digit arithmetic), frozen.
    const A_AT_1: f64 = -1.359_140_914_229_522_6;
    const A_AT_NEG_2: f64 = 0.227_839_420_927_802_68;
    const K_THETA_1_COS_1: f64 = 0.859_140_914_229_522_6;

    #[test]
    fn normalization_factor_matches_high_precision_oracle() {
        assert!((normalization_factor(1.0) - A_AT_1).abs() < 1e-12);
        assert!((normalization_factor(-2.0) - A_AT_NEG_2).abs() < 1e-12);
    }

    #[test]
    fn normalization_factor_continuous_at_series_switch() {
        for sign in [1.0, -1.0] {
            let t = sign * SERIES_THRESHOLD;
            let closed = -t / (2.0 * ((-t).exp_m1() + t));
            let series = -1.0 / (t * series_m(t));
            assert!(
                rel_err(closed, series) < 1e-9,
                "switch at {t}: {closed} vs {series}"
            );
            // Both sides of the actual branch cut.
            let below = normalization_factor(sign * (SERIES_THRESHOLD * 0.999_999));
            let above = normalization_factor(sign * (SERIES_THRESHOLD * 1.000_001));
            assert!(rel_err(below, above) < 1e-9);
        }
    }

    #[test]
    fn kernel_value_frozen_cases() {
        let u = [1.0, 0.0];
        // cos = 1, unit norms, theta = 1.
        assert!((kernel_eval(&u, &u, 1.0).unwrap() - K_THETA_1_COS_1).abs() < 1e-12);
        // cos = 0 gives exactly zero for any theta.
        let v = [0.0, 1.0];
        for theta in [-2.0, -0.5, 0.0, 1e-7, 0.3, 2.0] {
            assert_eq!(kernel_eval(&u, &v, theta).unwrap(), 0.0);
        }
    }

    #[test]
    fn kernel_degenerates_to_inner_product() {
        // theta = 1e-9, unit norms, cos = 0.5.
        let h = [1.0, 0.0];
        let e = [0.5, 0.75_f64.sqrt()];
        let k = kernel_eval(&h, &e, 1e-9).unwrap();
        assert!((k - 0.5).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let h: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            if norm(&h) == 0.0 || norm(&e) == 0.0 {
                continue;
            }
            for theta in [1e-6, -1e-6, 1e-8, -1e-8] {
                let k = kernel_eval(&h, &e, theta).unwrap();
                let ip = dot(&h, &e);
                assert!(
                    (k - ip).abs() < 1e-5 * norm(&h) * norm(&e),
                    "theta={theta}: {k} vs {ip}"
                );
            }
        }
    }

    #[test]
    fn kernel_at_theta_zero_is_exact_inner_product() {
        let h = [0.3, -0.4, 1.1];
        let e = [-0.2, 0.9, 0.5];
        assert_eq!(kernel_eval(&h, &e, 0.0).unwrap(), dot(&h, &e));
    }

    #[test]
    fn kernel_strictly_increasing_in_cos() {
        for theta in [-2.0, -0.5, 1e-6, 0.5, 2.0] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=200 {
                let c = -1.0 + 2.0 * i as f64 / 200.0;
                let g = kernel_shape(theta, c);
                assert!(g > prev, "theta={theta}, cos={c}");
                prev = g;
            }
        }
    }

    #[test]
    fn sharp_vs_flat_shapes_at_cos_one() {
        let sharp = kernel_shape(-2.0, 1.0);
        let limit = kernel_shape(0.0, 1.0);
        let flat = kernel_shape(2.0, 1.0);
        assert_eq!(limit, 1.0);
        assert!(sharp > limit && limit > flat, "{sharp} > {limit} > {flat}");
    }

    #[test]
    fn zero_norm_inputs_are_rejected() {
        let z = [0.0, 0.0];
        let u = [1.0, 0.0];
        assert!(matches!(
            kernel_eval(&z, &u, 1.0),
            Err(KerbsError::DegenerateVector(_))
        ));
        assert!(matches!(
            kernel_grad_theta(&u, &z, 1.0),
            Err(KerbsError::DegenerateVector(_))
        ));
    }

    #[test]
    fn grad_theta_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h_fd = 1e-6;
        for _ in 0..50 {
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            if norm(&h) < 0.1 || norm(&e) < 0.1 {
                continue;
            }
            let theta: f64 = rng.random_range(-2.5..2.5);
            if theta.abs() < 1e-3 {
                continue;
            }
            let analytic = kernel_grad_theta(&h, &e, theta).unwrap();
            let kp = kernel_eval(&h, &e, theta + h_fd).unwrap();
            let km = kernel_eval(&h, &e, theta - h_fd).unwrap();
            // d log|K| / d theta; K keeps its sign on the theta interval.
            let fd = (kp.abs().ln() - km.abs().ln()) / (2.0 * h_fd);
            assert!(
                rel_err(analytic, fd) < 1e-5,
                "theta={theta}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn grad_theta_continuous_across_cos_zero() {
        for theta in [-2.0, -0.5, 0.5, 2.0] {
            let e_plus = [1e-8, 1.0];
            let e_minus = [-1e-8, 1.0];
            let h = [1.0, 0.0];
            let gp = kernel_grad_theta(&h, &e_plus, theta).unwrap();
            let gm = kernel_grad_theta(&h, &e_minus, theta).unwrap();
            let g0 = kernel_grad_theta(&h, &[0.0, 1.0], theta).unwrap();
            assert!((gp - gm).abs() < 1e-6, "theta={theta}: {gp} vs {gm}");
            assert!((gp - g0).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_theta_bounded_on_cos_grid() {
        for theta in [-2.0, -0.5, 0.5, 2.0] {
            for i in 0..=400 {
                let c = -1.0 + 2.0 * i as f64 / 400.0;
                let e = [c, (1.0 - c * c).max(0.0).sqrt()];
                let g = kernel_grad_theta(&[1.0, 0.0], &e, theta).unwrap();
                assert!(g.is_finite(), "theta={theta}, cos={c}: {g}");
                assert!(g.abs() < 1e3, "theta={theta}, cos={c}: {g}");
            }
        }
    }
}
