//! Masking schedules: survival probability `alpha(t)`, its analytic
//! derivative, the variational loss weight, and mutual-information decay.
//!
//! `alpha` is strictly decreasing on `[0,1]` with `alpha(0) = 1` and
//! `alpha(1) = 0` exactly. The `1/(1 - alpha)` singularity at `t -> 0` is
//! avoided by clamping loss-weight queries to `t >= T_MIN`; samplers draw
//! loss times from `[t_min, 1]` for the same reason.
//!
//! New kinds extend the enum and must supply an exact analytic derivative.

use crate::error::{PrimeError, Result};

/// Loss-weight queries below this time are clamped to it.
pub const T_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// `alpha(t) = 1 - t`.
    Linear,
    /// `alpha(t) = (1 - t)^power`.
    Polynomial { power: u32 },
}

impl Schedule {
    /// Parse a schedule name: `linear` or `poly<k>` (e.g. `poly3`).
    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim();
        if name == "linear" {
            return Ok(Schedule::Linear);
        }
        if let Some(p) = name.strip_prefix("poly") {
            let power: u32 = p
                .parse()
                .map_err(|_| PrimeError::Config(format!("bad schedule name: {name}")))?;
            if power == 0 {
                return Err(PrimeError::Config("poly power must be >= 1".into()));
            }
            return Ok(Schedule::Polynomial { power });
        }
        Err(PrimeError::Config(format!("unknown schedule: {name}")))
    }

    pub fn name(&self) -> String {
        match self {
            Schedule::Linear => "linear".into(),
            Schedule::Polynomial { power } => format!("poly{power}"),
        }
    }

    /// Survival probability at time `t in [0,1]`.
    pub fn alpha(&self, t: f64) -> f64 {
        assert!((0.0..=1.0).contains(&t), "t={t} outside [0,1]");
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::Polynomial { power } => (1.0 - t).powi(*power as i32),
        }
    }

    /// Exact analytic derivative of [`Schedule::alpha`].
    pub fn alpha_prime(&self, t: f64) -> f64 {
        assert!((0.0..=1.0).contains(&t), "t={t} outside [0,1]");
        match self {
            Schedule::Linear => -1.0,
            Schedule::Polynomial { power } => {
                -(*power as f64) * (1.0 - t).powi(*power as i32 - 1)
            }
        }
    }

    /// Variational loss weight `alpha'(t) / (1 - alpha(t))`, negative.
    ///
    /// `t` is clamped to `[T_MIN, 1]` before evaluation.
    pub fn loss_weight(&self, t: f64) -> f64 {
        let t = t.clamp(T_MIN, 1.0);
        self.alpha_prime(t) / (1.0 - self.alpha(t))
    }

    /// Mutual information (nats) between a token and its masked version at
    /// time `t`, given the token's marginal entropy: `alpha(t) * H0`.
    pub fn mutual_info(&self, t: f64, entropy_h0: f64) -> f64 {
        assert!(entropy_h0 >= 0.0, "entropy must be nonnegative");
        self.alpha(t) * entropy_h0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn alpha_examples() {
        assert_abs_diff_eq!(Schedule::Linear.alpha(0.25), 0.75);
        assert_abs_diff_eq!(Schedule::Polynomial { power: 3 }.alpha(0.5), 0.125);
        assert_eq!(Schedule::Linear.alpha(1.0), 0.0);
        assert_eq!(Schedule::Polynomial { power: 3 }.alpha(1.0), 0.0);
        assert_eq!(Schedule::Linear.alpha(0.0), 1.0);
        assert_eq!(Schedule::Polynomial { power: 3 }.alpha(0.0), 1.0);
    }

    #[test]
    #[should_panic(expected = "outside")]
    fn alpha_rejects_out_of_domain() {
        Schedule::Linear.alpha(1.5);
    }

    #[test]
    fn alpha_prime_examples() {
        assert_eq!(Schedule::Linear.alpha_prime(0.3), -1.0);
        assert_eq!(Schedule::Polynomial { power: 3 }.alpha_prime(0.0), -3.0);
        assert_abs_diff_eq!(
            Schedule::Polynomial { power: 3 }.alpha_prime(0.5),
            -0.75
        );
    }

    #[test]
    fn alpha_prime_matches_finite_differences() {
        let h = 1e-5;
        for sch in [
            Schedule::Linear,
            Schedule::Polynomial { power: 2 },
            Schedule::Polynomial { power: 3 },
            Schedule::Polynomial { power: 7 },
        ] {
            for i in 1..100 {
                let t = i as f64 / 100.0;
                let fd = (sch.alpha(t + h) - sch.alpha(t - h)) / (2.0 * h);
                assert!(
                    (sch.alpha_prime(t) - fd).abs() < 1e-6,
                    "{sch:?} t={t}: {} vs {fd}",
                    sch.alpha_prime(t)
                );
            }
        }
    }

    #[test]
    fn alpha_strictly_decreasing() {
        for sch in [Schedule::Linear, Schedule::Polynomial { power: 3 }] {
            let mut prev = sch.alpha(0.0);
            for i in 1..=200 {
                let cur = sch.alpha(i as f64 / 200.0);
                assert!(cur < prev, "{sch:?} not strictly decreasing at {i}");
                prev = cur;
            }
        }
    }

    #[test]
    fn loss_weight_examples() {
        assert_abs_diff_eq!(Schedule::Linear.loss_weight(0.5), -2.0);
        assert_abs_diff_eq!(Schedule::Linear.loss_weight(1.0), -1.0);
        assert_abs_diff_eq!(
            Schedule::Polynomial { power: 3 }.loss_weight(0.5),
            -0.75 / 0.875,
            epsilon = 1e-12
        );
        // Clamped below T_MIN rather than diverging.
        assert_abs_diff_eq!(Schedule::Linear.loss_weight(0.0), -1.0 / T_MIN, epsilon = 1e-6);
    }

    #[test]
    fn mutual_info_examples() {
        let h4 = 4.0f64.ln();
        assert_abs_diff_eq!(
            Schedule::Linear.mutual_info(0.5, h4),
            2.0f64.ln(),
            epsilon = 1e-15
        );
        assert_eq!(Schedule::Linear.mutual_info(1.0, 123.0), 0.0);
        assert_eq!(Schedule::Polynomial { power: 3 }.mutual_info(1.0, 0.7), 0.0);
    }

    /// Brute-force mutual information of the joint (x_t, x_0) induced by the
    /// element-wise masking kernel, over all (C+1) x C outcomes.
    fn brute_force_mi(pmf: &[f64], alpha: f64) -> f64 {
        let c = pmf.len();
        // Joint: x_t == x_0 w.p. alpha, x_t == mask (index c) w.p. 1-alpha.
        let mut joint = vec![vec![0.0f64; c]; c + 1];
        for (x0, &p0) in pmf.iter().enumerate() {
            joint[x0][x0] += p0 * alpha;
            joint[c][x0] += p0 * (1.0 - alpha);
        }
        let p_xt: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
        let mut mi = 0.0;
        for (xt, row) in joint.iter().enumerate() {
            for (x0, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    mi += p * (p / (p_xt[xt] * pmf[x0])).ln();
                }
            }
        }
        mi
    }

    #[test]
    fn mutual_info_matches_brute_force_joint() {
        use rand::Rng as _;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for sch in [Schedule::Linear, Schedule::Polynomial { power: 3 }] {
            for trial in 0..20 {
                let c = 2 + (trial % 7) as usize;
                let mut pmf: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
                let z: f64 = pmf.iter().sum();
                pmf.iter_mut().for_each(|p| *p /= z);
                let h0: f64 = -pmf.iter().map(|p| p * p.ln()).sum::<f64>();
                for i in 1..=9 {
                    let t = i as f64 / 10.0;
                    let expect = brute_force_mi(&pmf, sch.alpha(t));
                    assert!(
                        (sch.mutual_info(t, h0) - expect).abs() < 1e-10,
                        "{sch:?} t={t}"
                    );
                }
            }
        }
    }

    #[test]
    fn parse_round_trips() {
        for name in ["linear", "poly2", "poly3", "poly10"] {
            assert_eq!(Schedule::parse(name).unwrap().name(), name);
        }
        assert!(Schedule::parse("cosine").is_err());
        assert!(Schedule::parse("poly0").is_err());
    }
}
