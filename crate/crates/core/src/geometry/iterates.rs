use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, stream_rng, Stream};

/// Iterates modelled as Gaussian samples around an optimum `w0`: `n` from
/// `N(w0, η₁Σ)` (low learning rate) and `m` from `N(w0, η₂Σ)` (high).
#[derive(Debug, Clone, PartialEq)]
pub struct IterateSimSpec {
    pub n: usize,
    pub m: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub sigma_diag: Vec<f64>,
    pub w0: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl IterateSimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.n == 0 || self.m == 0 || self.trials < 2 {
            return bad("n, m must be positive and trials >= 2");
        }
        if !(self.eta1 > 0.0 && self.eta1 <= self.eta2 && self.eta2.is_finite()) {
            return bad("need 0 < eta1 <= eta2");
        }
        if self.sigma_diag.is_empty() || self.sigma_diag.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("sigma_diag entries must be positive");
        }
        if self.w0.len() != self.sigma_diag.len() {
            return Err(Error::LengthMismatch {
                expected: self.sigma_diag.len(),
                actual: self.w0.len(),
            });
        }
        Ok(())
    }

    pub fn trace_sigma(&self) -> f64 {
        self.sigma_diag.iter().sum()
    }

    /// `η₁/n·tr Σ`.
    pub fn swa_mse_closed_form(&self) -> f64 {
        self.eta1 / self.n as f64 * self.trace_sigma()
    }

    /// `(nη₁ + mη₂)/(n + m)²·tr Σ`.
    pub fn fast_swa_mse_closed_form(&self) -> f64 {
        let (n, m) = (self.n as f64, self.m as f64);
        (n * self.eta1 + m * self.eta2) / ((n + m) * (n + m)) * self.trace_sigma()
    }

    /// Adding the high-rate samples lowers the error iff `m > n(η₂/η₁ − 2)`.
    pub fn threshold(&self) -> f64 {
        self.n as f64 * (self.eta2 / self.eta1 - 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateSimReport {
    pub swa_mse: f64,
    pub swa_std_error: f64,
    pub swa_closed_form: f64,
    pub fast_swa_mse: f64,
    pub fast_swa_std_error: f64,
    pub fast_swa_closed_form: f64,
    /// Mean and standard error of the paired difference `fast-SWA − SWA`.
    pub diff_mean: f64,
    pub diff_std_error: f64,
    pub threshold: f64,
}

impl IterateSimReport {
    /// Both empirical errors agree with their closed forms within `k`
    /// standard errors.
    pub fn matches_closed_forms(&self, k: f64) -> bool {
        (self.swa_mse - self.swa_closed_form).abs() <= k * self.swa_std_error
            && (self.fast_swa_mse - self.fast_swa_closed_form).abs() <= k * self.fast_swa_std_error
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo squared errors of the SWA average (low-rate samples only)
/// and of the fast-SWA average (all samples).
pub fn gaussian_iterate_mse_sim(spec: &IterateSimSpec) -> Result<IterateSimReport> {
    spec.validate()?;
    let d = spec.sigma_diag.len();
    let sd1: Vec<f64> = spec.sigma_diag.iter().map(|s| (spec.eta1 * s).sqrt()).collect();
    let sd2: Vec<f64> = spec.sigma_diag.iter().map(|s| (spec.eta2 * s).sqrt()).collect();
    let mut swa = Vec::with_capacity(spec.trials);
    let mut fswa = Vec::with_capacity(spec.trials);
    for t in 0..spec.trials as u64 {
        let mut rng = stream_rng(spec.seed, Stream::Simulation, t);
        // deviations from w0; the error does not depend on w0 itself
        let mut low = vec![0.0; d];
        for _ in 0..spec.n {
            let z = standard_normal_vec(&mut rng, d);
            low.iter_mut().zip(&z).zip(&sd1).for_each(|((s, z), sd)| *s += sd * z);
        }
        let mut high = vec![0.0; d];
        for _ in 0..spec.m {
            let z = standard_normal_vec(&mut rng, d);
            high.iter_mut().zip(&z).zip(&sd2).for_each(|((s, z), sd)| *s += sd * z);
        }
        let (n, nm) = (spec.n as f64, (spec.n + spec.m) as f64);
        let err = |v: Vec<f64>| -> f64 { v.iter().map(|e| e * e).sum() };
        swa.push(err(low.iter().map(|s| s / n).collect()));
        fswa.push(err(low.iter().zip(&high).map(|(a, b)| (a + b) / nm).collect()));
    }
    let (swa_mse, swa_se) = mean_se(&swa);
    let (f_mse, f_se) = mean_se(&fswa);
    let diffs: Vec<f64> = fswa.iter().zip(&swa).map(|(f, s)| f - s).collect();
    let (diff_mean, diff_se) = mean_se(&diffs);
    Ok(IterateSimReport {
        swa_mse,
        swa_std_error: swa_se,
        swa_closed_form: spec.swa_mse_closed_form(),
        fast_swa_mse: f_mse,
        fast_swa_std_error: f_se,
        fast_swa_closed_form: spec.fast_swa_mse_closed_form(),
        diff_mean,
        diff_std_error: diff_se,
        threshold: spec.threshold(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossoverReport {
    pub threshold: f64,
    pub m_below: usize,
    pub m_above: usize,
    pub below: IterateSimReport,
    pub above: IterateSimReport,
    /// fast-SWA is significantly worse at `m_below` and significantly better
    /// at `m_above` (paired difference beyond `k` standard errors).
    pub bracketed: bool,
}

/// Runs the simulation on both sides of the closed-form threshold.
pub fn crossover_bracket(spec: &IterateSimSpec, m_below: usize, m_above: usize, k: f64) -> Result<CrossoverReport> {
    if m_below >= m_above {
        return Err(Error::InvalidArgument("m_below must be < m_above".into()));
    }
    let below = gaussian_iterate_mse_sim(&IterateSimSpec { m: m_below, ..spec.clone() })?;
    let above = gaussian_iterate_mse_sim(&IterateSimSpec { m: m_above, ..spec.clone() })?;
    let bracketed = below.diff_mean > k * below.diff_std_error && above.diff_mean < -k * above.diff_std_error;
    Ok(CrossoverReport {
        threshold: spec.threshold(),
        m_below,
        m_above,
        below,
        above,
        bracketed,
    })
}
