//! Closed-form bounds and small numerical checks.

use super::OracleError;

/// `T sinh(beta/2)^2 / N`.
pub fn softbon_terminal_bound(horizon: usize, beta: f64, n: usize) -> f64 {
    horizon as f64 * (beta / 2.0).sinh().powi(2) / n as f64
}

/// Union-bound count `K B T^2`.
pub fn union_size(phases: usize, bins: usize, horizon: usize) -> f64 {
    phases as f64 * bins as f64 * (horizon as f64).powi(2)
}

/// Empirical-Bernstein radius for the log-moment bucket estimate:
/// `(1/(beta mu)) [sqrt(2 v log(3U/delta) / N) + 3 (e^beta - 1) log(3U/delta) / N]`
/// where `U` is the union-bound count.
pub fn bernstein_radius(v_hat: f64, n: u64, beta: f64, mu_floor: f64, delta: f64, union: f64) -> f64 {
    let n = n as f64;
    let log_term = (3.0 * union / delta).ln();
    let variance = (2.0 * v_hat * log_term / n).sqrt();
    let range = 3.0 * beta.exp_m1() * log_term / n;
    (variance + range) / (beta * mu_floor)
}

/// Indices of the `m` largest scores; ties go to the lower index.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// `max_{|A| = m} sum_A g - sum_selected g`.
pub fn topm_regret(gstar: &[f64], selected: &[usize], m: usize) -> f64 {
    let best: f64 = top_m(gstar, m).iter().map(|&i| gstar[i]).sum();
    let got: f64 = selected.iter().map(|&i| gstar[i]).sum();
    (best - got).max(0.0)
}

/// Softmax mass that `scores` put on the index set `set`.
pub fn softmax_mass(scores: &[f64], set: &[usize]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = w.iter().sum();
    set.iter().map(|&i| w[i]).sum::<f64>() / total
}

/// `|R| e^(gap - 2 eps) / (|R| e^(gap - 2 eps) + |C|)`.
pub fn residual_mass_lower_bound(residual: usize, complement: usize, gap: f64, eps: f64) -> f64 {
    let a = residual as f64 * (gap - 2.0 * eps).exp();
    a / (a + complement as f64)
}

/// `M(p) = sum_o u(o)^2 nu(o)^2 / p(o)`; infinite if `p` misses a charged order.
pub fn second_moment(p: &[f64], u: &[f64], nu: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&pi, &ui), &ni) in p.iter().zip(u).zip(nu) {
        let a = ui * ui * ni * ni;
        if a > 0.0 {
            if pi <= 0.0 {
                return f64::INFINITY;
            }
            acc += a / pi;
        }
    }
    acc
}

/// `p_opt ∝ u nu`.
pub fn variance_optimal_proposal(u: &[f64], nu: &[f64]) -> Result<Vec<f64>, OracleError> {
    if u.len() != nu.len() || nu.iter().any(|&x| !(x >= 0.0)) || u.iter().any(|&x| !(x >= 0.0)) {
        return Err(OracleError::Invalid("u and nu must be nonnegative and of equal length".into()));
    }
    let w: Vec<f64> = u.iter().zip(nu).map(|(a, b)| a * b).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(OracleError::Invalid("u * nu is identically zero".into()));
    }
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Numerical minimizer of [`second_moment`] over the simplex.
///
/// Damped Newton steps on the equality-constrained problem, restricted to the
/// orders with `u nu > 0` (the rest get zero mass). Starts from the uniform
/// proposal and never uses the closed form.
pub fn variance_optimal_reference(u: &[f64], nu: &[f64]) -> Result<Vec<f64>, OracleError> {
    let a: Vec<f64> = u.iter().zip(nu).map(|(x, y)| x * x * y * y).collect();
    let support: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    if support.is_empty() {
        return Err(OracleError::Invalid("u * nu is identically zero".into()));
    }
    let k = support.len();
    let a_s: Vec<f64> = support.iter().map(|&i| a[i]).collect();
    let f = |p: &[f64]| -> f64 { p.iter().zip(&a_s).map(|(pi, ai)| ai / pi).sum() };
    let mut p = vec![1.0 / k as f64; k];
    for _ in 0..200 {
        let g: Vec<f64> = p.iter().zip(&a_s).map(|(pi, ai)| -ai / (pi * pi)).collect();
        let hinv: Vec<f64> = p.iter().zip(&a_s).map(|(pi, ai)| pi * pi * pi / (2.0 * ai)).collect();
        let num: f64 = hinv.iter().zip(&g).map(|(h, gi)| h * gi).sum();
        let den: f64 = hinv.iter().sum();
        let lambda = -num / den;
        let step: Vec<f64> = hinv.iter().zip(&g).map(|(h, gi)| -h * (gi + lambda)).collect();
        let decrement: f64 = step.iter().zip(&g).map(|(s, gi)| -s * gi).sum();
        if decrement.abs() < 1e-30 {
            break;
        }
        let mut t = 1.0;
        let f0 = f(&p);
        loop {
            let trial: Vec<f64> = p.iter().zip(&step).map(|(pi, si)| pi + t * si).collect();
            if trial.iter().all(|&x| x > 0.0) && f(&trial) <= f0 - 0.25 * t * decrement {
                p = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                break;
            }
        }
        if t < 1e-20 {
            break;
        }
    }
    let total: f64 = p.iter().sum();
    let mut out = vec![0.0; a.len()];
    for (&i, pi) in support.iter().zip(p) {
        out[i] = pi / total;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn terminal_bound_examples() {
        assert!((softbon_terminal_bound(4, 1.0, 16) - 0.0678851).abs() < 1e-7);
        assert!(softbon_terminal_bound(4, 1e-9, 16) < 1e-18);
        let b = softbon_terminal_bound(3, 0.7, 5);
        assert_eq!(softbon_terminal_bound(3, 0.7, 10), b / 2.0);
    }

    /// Independent transcription of the radius.
    #[allow(clippy::too_many_arguments)]
    fn radius_reference(v: f64, n: u64, beta: f64, mu: f64, delta: f64, phases: f64, bins: f64, horizon: f64) -> f64 {
        let l = (3.0 * phases * bins * horizon * horizon / delta).ln();
        let n = n as f64;
        ((2.0 * v * l / n).sqrt() + 3.0 * (beta.exp() - 1.0) * l / n) / (beta * mu)
    }

    #[test]
    fn radius_examples() {
        let u = union_size(16, 8, 32);
        let r = bernstein_radius(0.25, 128, 1.0, 1.0, 0.05, u);
        let r2 = radius_reference(0.25, 128, 1.0, 1.0, 0.05, 16.0, 8.0, 32.0);
        assert!((r - r2).abs() < 1e-12);
        let pure = bernstein_radius(0.0, 50, 1.0, 1.0, 0.05, 1.0);
        assert!((pure - 3.0 * (1f64.exp() - 1.0) * (60f64).ln() / 50.0).abs() < 1e-14);
        let big = bernstein_radius(0.3, 1 << 40, 1.0, 1.0, 0.05, 1.0);
        let bigger = bernstein_radius(0.3, 1 << 42, 1.0, 1.0, 0.05, 1.0);
        assert!((big / bigger - 2.0).abs() < 1e-4);
    }

    #[test]
    fn variance_optimal_examples() {
        let u = [0.25, 0.25, 0.5];
        assert_eq!(variance_optimal_proposal(&u, &[2.0, 2.0, 2.0]).unwrap(), u.to_vec());
        let p = variance_optimal_proposal(&[0.5, 0.5], &[1.0, 3.0]).unwrap();
        assert_eq!(p, vec![0.25, 0.75]);
        assert!(second_moment(&p, &[0.5, 0.5], &[1.0, 3.0]) < second_moment(&[0.5, 0.5], &[0.5, 0.5], &[1.0, 3.0]));
        assert!(variance_optimal_proposal(&u, &[0.0; 3]).is_err());
    }

    #[test]
    fn minimizer_agrees_with_closed_form() {
        let mut rng = SeededRng::new(6, 0);
        for _ in 0..200 {
            let k = 2 + rng.below(8);
            let u: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform()).collect();
            let nu: Vec<f64> = (0..k).map(|_| 0.05 + 3.0 * rng.uniform()).collect();
            let closed = variance_optimal_proposal(&u, &nu).unwrap();
            let numeric = variance_optimal_reference(&u, &nu).unwrap();
            for (a, b) in closed.iter().zip(&numeric) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn regret_and_margin() {
        assert_eq!(topm_regret(&[0.1, 0.9, 0.5], &top_m(&[0.1, 0.9, 0.5], 2), 2), 0.0);
        assert!((topm_regret(&[0.1, 0.9, 0.5], &[0, 2], 2) - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn residual_mass_bound_holds(
            base in proptest::collection::vec(-3.0f64..3.0, 2..10),
            res_len in 1usize..4,
            gap in 0.0f64..4.0,
            eps_frac in 0.0f64..0.999,
            noise in proptest::collection::vec(-1.0f64..1.0, 14),
        ) {
            // residual scores exceed every complement score by at least gap
            let eps = eps_frac * gap / 2.0;
            let comp_max = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut g: Vec<f64> = base.clone();
            for n in noise.iter().take(res_len) {
                g.push(comp_max + gap + (n + 1.0));
            }
            let perturbed: Vec<f64> = g.iter().enumerate().map(|(i, x)| x + eps * noise[i % noise.len()]).collect();
            let residual: Vec<usize> = (base.len()..g.len()).collect();
            let mass = softmax_mass(&perturbed, &residual);
            let bound = residual_mass_lower_bound(res_len, base.len(), gap, eps);
            prop_assert!(mass >= bound - 1e-12);
        }
    }
}
