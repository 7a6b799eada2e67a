//! The synthetic strong/weak feature model, linear classifiers over it, the
//! exact composite (swap + ℓ∞) adversary and robust-accuracy estimates.
//!
//! A sample has label `y ∈ {−1, +1}`; feature 0 equals `y` with probability
//! `p` and `−y` otherwise; features `1..d` are independent `N(yη, 1)`. The
//! adversary may move feature 0 to any index of the reachable set `R` (a
//! transposition with that index) and then add `δ ∈ [−ε, ε]^d`.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid synthetic setting: {0}")]
    InvalidSpec(String),
    #[error("classifier has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("closed form needs N >= 2, got N = {0}")]
    BudgetTooSmall(usize),
    #[error("brute force is limited to |R| <= {max}, got {got}")]
    TooManyPositions { max: usize, got: usize },
    #[error("invalid classifier: {0}")]
    InvalidClassifier(String),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

pub const BRUTE_FORCE_MAX_POSITIONS: usize = 32;
const MC_CHUNK: usize = 4096;

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    d: usize,
    p: f64,
    eta: f64,
    epsilon: f64,
    reachable: Vec<usize>,
}

impl SyntheticSpec {
    /// Reachable set `{0, …, n − 1}`.
    pub fn new(d: usize, p: f64, eta: f64, epsilon: f64, n: usize) -> Result<Self> {
        Self::with_reachable(d, p, eta, epsilon, (0..n).collect())
    }

    pub fn with_reachable(d: usize, p: f64, eta: f64, epsilon: f64, mut reachable: Vec<usize>) -> Result<Self> {
        if d < 2 {
            return Err(TheoryError::InvalidSpec(format!("d must be at least 2, got {d}")));
        }
        if !(0.5..=1.0).contains(&p) {
            return Err(TheoryError::InvalidSpec(format!("p must lie in [0.5, 1], got {p}")));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(TheoryError::InvalidSpec(format!("eta must be positive, got {eta}")));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(TheoryError::InvalidSpec(format!("epsilon must be nonnegative, got {epsilon}")));
        }
        reachable.sort_unstable();
        reachable.dedup();
        if reachable.first() != Some(&0) {
            return Err(TheoryError::InvalidSpec("reachable set must contain index 0".into()));
        }
        if reachable.last().is_some_and(|&m| m >= d) {
            return Err(TheoryError::InvalidSpec(format!("reachable index out of range for d = {d}")));
        }
        Ok(Self {
            d,
            p,
            eta,
            epsilon,
            reachable,
        })
    }

    /// `η = 1/√d`, `ε = 2η`, `N = d/8`.
    pub fn theorem(d: usize, p: f64) -> Result<Self> {
        if !d.is_multiple_of(8) {
            return Err(TheoryError::InvalidSpec(format!("d = {d} is not divisible by 8")));
        }
        let eta = 1.0 / (d as f64).sqrt();
        Self::new(d, p, eta, 2.0 * eta, d / 8)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn reachable(&self) -> &[usize] {
        &self.reachable
    }

    pub fn n(&self) -> usize {
        self.reachable.len()
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::with_reachable(self.d, self.p, self.eta, epsilon, self.reachable.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub w: Vec<f64>,
}

impl LinearClassifier {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(TheoryError::InvalidClassifier("weights must be finite".into()));
        }
        Ok(Self { w })
    }

    pub fn predict(&self, x: &[f64]) -> i8 {
        if dot(&self.w, x) > 0.0 {
            1
        } else {
            -1
        }
    }

    fn check(&self, spec: &SyntheticSpec) -> Result<()> {
        if self.w.len() != spec.d {
            return Err(TheoryError::Dimension {
                expected: spec.d,
                got: self.w.len(),
            });
        }
        Ok(())
    }
}

/// `c` on every reachable index, zero elsewhere.
pub fn lemma_structured_classifier(spec: &SyntheticSpec, c: f64) -> Result<LinearClassifier> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(TheoryError::InvalidClassifier(format!("scale must be positive, got {c}")));
    }
    let mut w = vec![0.0; spec.d];
    for &i in &spec.reachable {
        w[i] = c;
    }
    Ok(LinearClassifier { w })
}

/// Labelled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<i8>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }
}

fn draw_into(spec: &SyntheticSpec, rng: &mut RngStream, x: &mut [f64]) -> i8 {
    let y: i8 = if rng.bernoulli(0.5) { 1 } else { -1 };
    let yf = y as f64;
    x[0] = if rng.bernoulli(spec.p) { yf } else { -yf };
    for v in &mut x[1..] {
        *v = yf * spec.eta + rng.normal();
    }
    y
}

pub fn sample_synthetic(spec: &SyntheticSpec, n: usize, rng: &mut RngStream) -> Samples {
    let mut x = vec![0.0; n * spec.d];
    let y = x.chunks_mut(spec.d).map(|row| draw_into(spec, rng, row)).collect();
    Samples { d: spec.d, x, y }
}

pub fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// `y · wᵀx`.
pub fn margin(w: &LinearClassifier, x: &[f64], y: i8) -> f64 {
    y as f64 * dot(&w.w, x)
}

fn perturb(w: &LinearClassifier, x: &mut [f64], y: i8, epsilon: f64) {
    let y = y as f64;
    for (v, &wj) in x.iter_mut().zip(&w.w) {
        if wj > 0.0 {
            *v -= epsilon * y;
        } else if wj < 0.0 {
            *v += epsilon * y;
        }
    }
}

/// Worst-case point of the composite region for a linear classifier.
///
/// The swap position is chosen from the closed-form margin change
/// `y (w₀ − wᵢ)(xᵢ − x₀)`; the ℓ∞ step is `−εy·sign(w)`.
pub fn optimal_composite_attack(w: &LinearClassifier, x: &[f64], y: i8, spec: &SyntheticSpec) -> Result<Vec<f64>> {
    w.check(spec)?;
    let yf = y as f64;
    let mut best = 0;
    let mut best_change = 0.0;
    for &i in &spec.reachable[1..] {
        let change = yf * (w.w[0] - w.w[i]) * (x[i] - x[0]);
        if change < best_change {
            best_change = change;
            best = i;
        }
    }
    let mut out = x.to_vec();
    out.swap(0, best);
    perturb(w, &mut out, y, spec.epsilon);
    Ok(out)
}

/// Independent oracle: builds every swapped candidate, applies the ℓ∞ step
/// and keeps the smallest full margin.
pub fn brute_force_attack(w: &LinearClassifier, x: &[f64], y: i8, spec: &SyntheticSpec) -> Result<Vec<f64>> {
    w.check(spec)?;
    if spec.n() > BRUTE_FORCE_MAX_POSITIONS {
        return Err(TheoryError::TooManyPositions {
            max: BRUTE_FORCE_MAX_POSITIONS,
            got: spec.n(),
        });
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for &i in &spec.reachable {
        let mut cand = x.to_vec();
        cand.swap(0, i);
        perturb(w, &mut cand, y, spec.epsilon);
        let m = margin(w, &cand, y);
        if best.as_ref().is_none_or(|(bm, _)| m < *bm) {
            best = Some((m, cand));
        }
    }
    Ok(best.expect("reachable set is never empty").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaVariant {
    /// `α₁ = (η(−N−3)+1)/√(N−1)`.
    Paper,
    /// `α₁ = (η(−N−1)+1)/√(N−1)`, the mean obtained by following the
    /// derivation's intermediate expression.
    Corrected,
}

impl AlphaVariant {
    pub const BOTH: [AlphaVariant; 2] = [AlphaVariant::Paper, AlphaVariant::Corrected];

    pub fn as_str(&self) -> &'static str {
        match self {
            AlphaVariant::Paper => "paper",
            AlphaVariant::Corrected => "corrected",
        }
    }
}

impl fmt::Display for AlphaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlphaVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(AlphaVariant::Paper),
            "corrected" => Ok(AlphaVariant::Corrected),
            other => Err(format!("unknown alpha variant {other:?}")),
        }
    }
}

/// `(α₁, α₋₁)` for the uniform classifier over `R`.
pub fn alphas(spec: &SyntheticSpec, variant: AlphaVariant) -> Result<(f64, f64)> {
    let n = spec.n();
    if n < 2 {
        return Err(TheoryError::BudgetTooSmall(n));
    }
    let nf = n as f64;
    let shift = match variant {
        AlphaVariant::Paper => spec.eta * (-nf - 3.0),
        AlphaVariant::Corrected => spec.eta * (-nf - 1.0),
    };
    let sd = (nf - 1.0).sqrt();
    Ok(((shift + 1.0) / sd, (shift - 1.0) / sd))
}

/// `p·Φ(α₁) + (1−p)·Φ(α₋₁)`.
pub fn closed_form_robust_accuracy(spec: &SyntheticSpec, variant: AlphaVariant) -> Result<f64> {
    let (a1, am1) = alphas(spec, variant)?;
    Ok(spec.p * phi(a1) + (1.0 - spec.p) * phi(am1))
}

/// Robust accuracy when only feature 0 is used and `2η < 1`.
pub fn single_position_robust_accuracy(spec: &SyntheticSpec) -> Result<f64> {
    if spec.n() != 1 || spec.epsilon >= 1.0 {
        return Err(TheoryError::InvalidSpec("special case needs N = 1 and epsilon < 1".into()));
    }
    Ok(spec.p)
}

/// Unattacked `P[y·wᵀx > 0]`.
pub fn natural_accuracy(w: &LinearClassifier, spec: &SyntheticSpec) -> Result<f64> {
    w.check(spec)?;
    if w.w.iter().all(|&v| v == 0.0) {
        return Err(TheoryError::InvalidClassifier("all-zero weights".into()));
    }
    let weak: f64 = w.w[1..].iter().sum();
    let var: f64 = w.w[1..].iter().map(|v| v * v).sum();
    let m_plus = w.w[0] + spec.eta * weak;
    let m_minus = -w.w[0] + spec.eta * weak;
    let prob = |m: f64| {
        if var == 0.0 {
            if m > 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            phi(m / var.sqrt())
        }
    };
    Ok(spec.p * prob(m_plus) + (1.0 - spec.p) * prob(m_minus))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    fn from_count(correct: usize, n: usize) -> Self {
        let est = correct as f64 / n as f64;
        Self {
            estimate: est,
            std_error: (est * (1.0 - est) / n as f64).sqrt(),
            n,
        }
    }

    /// `|estimate − reference| ≤ k·se`, where `se` is the larger of the
    /// empirical and the reference binomial standard errors.
    pub fn agrees_with(&self, reference: f64, k: f64) -> bool {
        let ref_se = (reference * (1.0 - reference) / self.n as f64).sqrt();
        (self.estimate - reference).abs() <= k * self.std_error.max(ref_se)
    }
}

fn monte_carlo<F>(spec: &SyntheticSpec, n: usize, seed: u64, purpose: &str, correct: F) -> Result<Estimate>
where
    F: Fn(&[f64], i8) -> Result<bool> + Sync,
{
    if n == 0 {
        return Err(TheoryError::InvalidSpec("sample count must be at least 1".into()));
    }
    let chunks = n.div_ceil(MC_CHUNK);
    let hits = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<usize> {
            let mut rng = RngStream::named(seed, &format!("theory.{purpose}.{c}"));
            let len = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut x = vec![0.0; spec.d];
            let mut hits = 0;
            for _ in 0..len {
                let y = draw_into(spec, &mut rng, &mut x);
                if correct(&x, y)? {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(Estimate::from_count(hits, n))
}

/// Fraction of `n` fresh samples still classified correctly after the
/// optimal composite attack.
pub fn monte_carlo_robust_accuracy(w: &LinearClassifier, spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Estimate> {
    w.check(spec)?;
    monte_carlo(spec, n, seed, "mc_robust", |x, y| {
        Ok(margin(w, &optimal_composite_attack(w, x, y, spec)?, y) > 0.0)
    })
}

pub fn monte_carlo_natural_accuracy(w: &LinearClassifier, spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Estimate> {
    w.check(spec)?;
    monte_carlo(spec, n, seed, "mc_natural", |x, y| Ok(margin(w, x, y) > 0.0))
}

/// Robust accuracy of `w` on a fixed sample set.
pub fn robust_accuracy_on(w: &LinearClassifier, spec: &SyntheticSpec, samples: &Samples) -> Result<f64> {
    let mut correct = 0;
    for i in 0..samples.len() {
        let y = samples.y[i];
        if margin(w, &optimal_composite_attack(w, samples.row(i), y, spec)?, y) > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// `g(d) = (d/8 + 3)/√d`.
pub fn theorem_gate(d: f64) -> f64 {
    (d / 8.0 + 3.0) / d.sqrt()
}

/// `g′(d) = (d − 24)/(16 d^{3/2})`.
pub fn theorem_gate_derivative(d: f64) -> f64 {
    (d - 24.0) / (16.0 * d.powf(1.5))
}

/// `g(d) ≥ 1` decided in integers: `(d + 24)² ≥ 64d`.
pub fn theorem_gate_holds_exact(d: u64) -> bool {
    let d = d as u128;
    (d + 24) * (d + 24) >= 64 * d
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremRow {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub p: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub cf_paper: f64,
    pub cf_corrected: f64,
    pub theorem_gate: f64,
    pub alpha_variant: AlphaVariant,
    pub agrees_within_3se: bool,
}

/// Theorem sweep: one row per `(d, p, α-variant)`, sharing the MC estimate
/// between the two variant rows of a grid point.
pub fn verify_theorem(d_list: &[usize], p_list: &[f64], n_mc: usize, seed: u64) -> Result<Vec<TheoremRow>> {
    let mut rows = Vec::with_capacity(d_list.len() * p_list.len() * 2);
    for &d in d_list {
        if d < 24 {
            return Err(TheoryError::InvalidSpec(format!("d = {d} is below 24")));
        }
        for &p in p_list {
            let spec = SyntheticSpec::theorem(d, p)?;
            let w = lemma_structured_classifier(&spec, 1.0)?;
            let mc = monte_carlo_robust_accuracy(&w, &spec, n_mc, point_seed(seed, d, p))?;
            let cf_paper = closed_form_robust_accuracy(&spec, AlphaVariant::Paper)?;
            let cf_corrected = closed_form_robust_accuracy(&spec, AlphaVariant::Corrected)?;
            for variant in AlphaVariant::BOTH {
                let cf = match variant {
                    AlphaVariant::Paper => cf_paper,
                    AlphaVariant::Corrected => cf_corrected,
                };
                rows.push(TheoremRow {
                    d,
                    n: spec.n(),
                    p,
                    eta: spec.eta,
                    epsilon: spec.epsilon,
                    mc_estimate: mc.estimate,
                    mc_stderr: mc.std_error,
                    cf_paper,
                    cf_corrected,
                    theorem_gate: theorem_gate(d as f64),
                    alpha_variant: variant,
                    agrees_within_3se: mc.agrees_with(cf, 3.0),
                });
            }
        }
    }
    Ok(rows)
}

fn point_seed(seed: u64, d: usize, p: f64) -> u64 {
    RngStream::named(seed, &format!("theory.verify.{d}.{}", p.to_bits())).next_u64()
}
