// SPDX-License-Identifier: MIT OR Apache-2.0

//! Threshold selection for the knowledge score via the two-sample
//! Kolmogorov-Smirnov construction.
//!
//! The fabricated population is expected to score *lower*, so the objective is
//! the one-sided gap `F(x) - G(x)` with `F` the fabricated ECDF.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this per-sample count the asymptotic p-value is flagged.
pub const SMALL_SAMPLE: usize = 10;

/// Empirical CDF, `F(x) = #{v <= x} / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyCollection("ECDF sample"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidConfig("ECDF sample contains NaN".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let count = self.sorted.partition_point(|&v| v <= x);
        count as f64 / self.sorted.len() as f64
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Distinct values with the CDF at each, for plotting.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, &v) in self.sorted.iter().enumerate() {
            let f = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 = f,
                _ => out.push((v, f)),
            }
        }
        out
    }

    /// CSV with header `x,F`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,F\n");
        for (x, f) in self.steps() {
            s.push_str(&format!("{x},{f}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub tau: f64,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub n_fabricated: usize,
    pub n_other: usize,
    /// Set when either sample is too small for the asymptotic p-value.
    pub small_sample: bool,
}

impl CalibrationResult {
    /// e.g. `75.00% at τ of 0.023 (p-value 2.01e-26)`.
    pub fn summary(&self) -> String {
        format_ks_summary(self.ks_statistic, self.tau, Some(self.p_value))
    }
}

pub fn format_ks_summary(statistic: f64, tau: f64, p_value: Option<f64>) -> String {
    let mut s = format!("{:.2}% at τ of {:.3}", statistic * 100.0, tau);
    if let Some(p) = p_value {
        s.push_str(&format!(" (p-value {p:.2e})"));
    }
    s
}

/// `tau = argmax_x F(x) - G(x)` over the pooled observed scores, smallest `x`
/// on ties. `fabricated` must be the low-scoring population.
pub fn ks_threshold(fabricated: &[f64], other: &[f64]) -> Result<CalibrationResult> {
    let f = Ecdf::new(fabricated)?;
    let g = Ecdf::new(other)?;

    // Merge-walk the pooled sorted values; both ECDFs only step at observed
    // points.
    let (a, b) = (f.sorted_values(), g.sorted_values());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let gap = i as f64 / na - j as f64 / nb;
        if best.is_none_or(|(_, g)| gap > g) {
            best = Some((x, gap));
        }
    }
    let (tau, gap) = best.expect("non-empty samples");
    let ks_statistic = gap.max(0.0);
    Ok(CalibrationResult {
        tau,
        ks_statistic,
        p_value: ks_p_value(ks_statistic, a.len(), b.len()),
        n_fabricated: a.len(),
        n_other: b.len(),
        small_sample: a.len().min(b.len()) < SMALL_SAMPLE,
    })
}

/// Asymptotic two-sample p-value `Q_KS(sqrt(nm/(n+m)) * D)`, kept inside
/// `(0, 1]`.
pub fn ks_p_value(statistic: f64, n: usize, m: usize) -> f64 {
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    kolmogorov_survival(en * statistic).clamp(f64::MIN_POSITIVE, 1.0)
}

/// `Q_KS(l) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 l^2)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1.18 {
        // Jacobi-theta form converges quickly for small lambda.
        if lambda <= 0.0 {
            return 1.0;
        }
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let series: f64 = (0..6).map(|k| y.powi((2 * k + 1) * (2 * k + 1))).sum();
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * series;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
