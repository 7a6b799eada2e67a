//! White-box attacks: ℓ∞ PGD, RT search (Worst-of-K and grid), the Max
//! strategy for the union threat model and Worst-on-Worst for the
//! composition.
//!
//! All attacks operate on one example at a time; candidate losses are always
//! computed with a single-image forward pass so that comparisons between
//! candidates are bit-consistent regardless of how callers batch their work.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::datasets::Dataset;
use crate::image::Image;
use crate::models::{cross_entropy, kl_divergence, Logits, Model, ModelError};
use crate::rng::RngStream;
use crate::spatial::{apply_affine, enumerate_grid, sample_affine, AffineParams, Interpolation, SpatialError, ThreatBudget};
use crate::tensor::Tensor;

/// Tolerance used when checking that an output lies in its reachable region.
pub const CONTAINMENT_TOL: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("invalid attack configuration: {0}")]
    Invalid(String),
}

impl From<crate::tensor::TensorError> for AttackError {
    fn from(e: crate::tensor::TensorError) -> Self {
        AttackError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// The loss an attack maximizes.
#[derive(Debug, Clone, PartialEq)]
pub enum LossTarget {
    /// Cross-entropy against the true label (evaluation attacks).
    CrossEntropy { label: usize },
    /// `KL(f(x) ‖ f(x'))` against fixed natural logits (TRADES inner step).
    Kl { natural: Logits },
}

impl LossTarget {
    pub fn loss(&self, logits: &Logits) -> Result<f32> {
        match self {
            LossTarget::CrossEntropy { label } => Ok(cross_entropy(logits, *label)?),
            LossTarget::Kl { natural } => Ok(kl_divergence(natural, logits)),
        }
    }

    /// Class the attack tries to move away from.
    pub fn reference_class(&self) -> usize {
        match self {
            LossTarget::CrossEntropy { label } => *label,
            LossTarget::Kl { natural } => natural.predicted(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub image: Image,
    pub params: AffineParams,
    pub loss: f32,
    /// The adversarial image is classified differently from the target's
    /// reference class.
    pub success: bool,
}

impl AttackResult {
    /// Checks `‖adv − T(x)‖∞ ≤ ε`, the pixel range and the RT budget.
    pub fn is_contained(&self, original: &Image, budget: &ThreatBudget) -> Result<bool> {
        if !self.params.within(budget) {
            return Ok(false);
        }
        let warped = apply_affine(original, self.params, Interpolation::Bilinear)?;
        let in_range = self.image.data().iter().all(|v| (0.0..=1.0).contains(v));
        Ok(in_range && self.image.linf_distance(&warped) <= budget.epsilon as f32 + CONTAINMENT_TOL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub steps: usize,
    /// Defaults to `2.5 · ε / steps` when unset.
    #[serde(default)]
    pub step_size: Option<f32>,
    #[serde(default)]
    pub random_start: bool,
    /// Standard deviation of a Gaussian start around the anchor, used when
    /// `random_start` is off. KL targets have a zero gradient at the anchor.
    #[serde(default)]
    pub jitter: f32,
    /// Best-over-restarts count; values above 1 use uniform random starts.
    #[serde(default = "one")]
    pub restarts: usize,
}

fn one() -> usize {
    1
}

impl PgdConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            step_size: None,
            random_start: false,
            jitter: 0.0,
            restarts: 1,
        }
    }

    /// 40-step evaluation attack used on MNIST.
    pub fn mnist() -> Self {
        Self::new(40)
    }

    /// 20-step evaluation attack used on CIFAR-10.
    pub fn cifar10() -> Self {
        Self::new(20)
    }

    /// Inner maximizer for TRADES training.
    pub fn training(steps: usize) -> Self {
        Self {
            jitter: 0.001,
            ..Self::new(steps)
        }
    }

    pub fn with_restarts(self, restarts: usize) -> Self {
        Self { restarts, ..self }
    }

    pub fn step_size_for(&self, epsilon: f32) -> f32 {
        self.step_size
            .unwrap_or_else(|| if self.steps == 0 { 0.0 } else { 2.5 * epsilon / self.steps as f32 })
    }
}

/// How the RT arm of an attack searches the transformation budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RtSearch {
    WorstOfK(usize),
    Grid { theta: usize, dx: usize, dy: usize },
}

impl RtSearch {
    pub const WORST_OF_10: RtSearch = RtSearch::WorstOfK(10);
    pub const STANDARD_GRID: RtSearch = RtSearch::Grid { theta: 12, dx: 5, dy: 5 };
}

pub fn evaluate_loss(model: &Model, image: &Image, target: &LossTarget) -> Result<(f32, Logits)> {
    let logits = model.forward_image(image)?;
    Ok((target.loss(&logits)?, logits))
}

/// Loss at `image` and its gradient with respect to the pixels.
pub fn loss_and_input_grad(model: &Model, image: &Image, target: &LossTarget) -> Result<(f32, Vec<f32>)> {
    let mut g = Graph::new();
    let params = model.constant_params(&mut g);
    let x = g.variable(image.to_tensor());
    let logits = model.build(&mut g, x, &params)?;
    let logits = model.loss_logits(&mut g, logits)?;
    let loss = match target {
        LossTarget::CrossEntropy { label } => g.cross_entropy(logits, &[*label])?,
        LossTarget::Kl { natural } => {
            let values = if natural.values.len() == 1 {
                vec![0.0, natural.values[0]]
            } else {
                natural.values.clone()
            };
            let k = values.len();
            let p = g.constant(Tensor::new(vec![1, k], values)?);
            g.kl_divergence(p, logits)?
        }
    };
    let value = g.value(loss).data()[0];
    let grad = g.backward(loss, &[x])?.remove(0).into_data();
    Ok((value, grad))
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(x: &mut [f32], anchor: &[f32], epsilon: f32) {
    for (v, &a) in x.iter_mut().zip(anchor) {
        *v = v.clamp(a - epsilon, a + epsilon).clamp(0.0, 1.0);
    }
}

/// Signed-gradient ascent projected onto `B∞(anchor, ε) ∩ [0, 1]`.
pub fn pgd(model: &Model, anchor: &Image, target: &LossTarget, epsilon: f32, cfg: &PgdConfig, rng: &mut RngStream) -> Result<AttackResult> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(AttackError::Invalid(format!("epsilon must be finite and nonnegative, got {epsilon}")));
    }
    if cfg.restarts > 1 {
        let mut best: Option<AttackResult> = None;
        for r in 0..cfg.restarts {
            let single = PgdConfig {
                random_start: true,
                restarts: 1,
                ..*cfg
            };
            let res = pgd(model, anchor, target, epsilon, &single, &mut rng.child(r as u64))?;
            if best.as_ref().is_none_or(|b| res.loss > b.loss) {
                best = Some(res);
            }
        }
        return Ok(best.expect("restarts > 1"));
    }
    let a = anchor.data();
    let mut x = a.to_vec();
    if epsilon > 0.0 {
        if cfg.random_start {
            for (v, &av) in x.iter_mut().zip(a) {
                *v = av + rng.uniform_range(-epsilon as f64, epsilon as f64) as f32;
            }
        } else if cfg.jitter > 0.0 {
            for v in x.iter_mut() {
                *v += cfg.jitter * rng.normal() as f32;
            }
        }
        project(&mut x, a, epsilon);
        let alpha = cfg.step_size_for(epsilon);
        for _ in 0..cfg.steps {
            let img = Image::new(anchor.shape(), x)?;
            let (_, grad) = loss_and_input_grad(model, &img, target)?;
            x = img.into_data();
            for (v, g) in x.iter_mut().zip(&grad) {
                *v += alpha * sign(*g);
            }
            project(&mut x, a, epsilon);
        }
    }
    let image = Image::new(anchor.shape(), x)?;
    let (loss, logits) = evaluate_loss(model, &image, target)?;
    Ok(AttackResult {
        image,
        params: AffineParams::IDENTITY,
        loss,
        success: logits.predicted() != target.reference_class(),
    })
}

fn best_transform(model: &Model, image: &Image, target: &LossTarget, candidates: &[AffineParams]) -> Result<AttackResult> {
    let mut best: Option<AttackResult> = None;
    for &params in candidates {
        let warped = apply_affine(image, params, Interpolation::Bilinear)?;
        let (loss, logits) = evaluate_loss(model, &warped, target)?;
        if best.as_ref().is_none_or(|b| loss > b.loss) {
            best = Some(AttackResult {
                image: warped,
                params,
                loss,
                success: logits.predicted() != target.reference_class(),
            });
        }
    }
    best.ok_or_else(|| AttackError::Invalid("RT search needs at least one candidate".into()))
}

/// Samples `k` transformations and keeps the highest-loss one.
pub fn rt_worst_of_k(
    model: &Model,
    image: &Image,
    target: &LossTarget,
    budget: &ThreatBudget,
    k: usize,
    rng: &mut RngStream,
) -> Result<AttackResult> {
    if k == 0 {
        return Err(AttackError::Invalid("worst-of-k needs k >= 1".into()));
    }
    let candidates: Vec<AffineParams> = (0..k).map(|_| sample_affine(budget, rng)).collect();
    best_transform(model, image, target, &candidates)
}

/// Exhaustive search over the evenly spaced transformation grid.
pub fn rt_grid_attack(
    model: &Model,
    image: &Image,
    target: &LossTarget,
    budget: &ThreatBudget,
    counts: (usize, usize, usize),
) -> Result<AttackResult> {
    let grid = enumerate_grid(budget, counts)?;
    best_transform(model, image, target, &grid)
}

pub fn rt_search(
    model: &Model,
    image: &Image,
    target: &LossTarget,
    budget: &ThreatBudget,
    search: RtSearch,
    rng: &mut RngStream,
) -> Result<AttackResult> {
    match search {
        RtSearch::WorstOfK(k) => rt_worst_of_k(model, image, target, budget, k, rng),
        RtSearch::Grid { theta, dx, dy } => rt_grid_attack(model, image, target, budget, (theta, dx, dy)),
    }
}

/// Max strategy: the higher-loss of an ℓ∞ candidate and an RT candidate.
/// The PGD arm consumes `rng` itself; the RT arm uses a derived stream.
pub fn union_max(
    model: &Model,
    image: &Image,
    target: &LossTarget,
    budget: &ThreatBudget,
    pgd_cfg: &PgdConfig,
    search: RtSearch,
    rng: &mut RngStream,
) -> Result<AttackResult> {
    let linf = pgd(model, image, target, budget.epsilon as f32, pgd_cfg, rng)?;
    let rt = rt_search(model, image, target, budget, search, &mut rng.child_named("rt"))?;
    Ok(if rt.loss > linf.loss { rt } else { linf })
}

/// Worst-on-Worst: RT search first, then PGD anchored at the worst RT image.
pub fn worst_on_worst(
    model: &Model,
    image: &Image,
    target: &LossTarget,
    budget: &ThreatBudget,
    search: RtSearch,
    pgd_cfg: &PgdConfig,
    rng: &mut RngStream,
) -> Result<AttackResult> {
    let rt = rt_search(model, image, target, budget, search, &mut rng.child_named("rt"))?;
    let composed = pgd(model, &rt.image, target, budget.epsilon as f32, pgd_cfg, rng)?;
    Ok(AttackResult {
        params: rt.params,
        ..composed
    })
}

/// A complete evaluation attack.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    Natural,
    Pgd { budget: ThreatBudget, pgd: PgdConfig },
    Rt { budget: ThreatBudget, search: RtSearch },
    Union { budget: ThreatBudget, pgd: PgdConfig, search: RtSearch },
    Composition { budget: ThreatBudget, pgd: PgdConfig, search: RtSearch },
}

impl AttackSpec {
    /// Column label; restart-based PGD is reported as `PGD-R`.
    pub fn name(&self) -> String {
        let linf = |p: &PgdConfig| if p.restarts > 1 { "PGD-R" } else { "PGD" };
        match self {
            AttackSpec::Natural => "Natural".into(),
            AttackSpec::Pgd { pgd, .. } => linf(pgd).into(),
            AttackSpec::Rt { .. } => "RT".into(),
            AttackSpec::Union { pgd, .. } => format!("{}∪RT", linf(pgd)),
            AttackSpec::Composition { pgd, .. } => format!("{}∘RT", linf(pgd)),
        }
    }

    pub fn budget(&self) -> ThreatBudget {
        match self {
            AttackSpec::Natural => ThreatBudget::zero(),
            AttackSpec::Pgd { budget, .. } => budget.without_rt(),
            AttackSpec::Rt { budget, .. } => budget.with_epsilon(0.0),
            AttackSpec::Union { budget, .. } | AttackSpec::Composition { budget, .. } => *budget,
        }
    }

    /// The four robust attacks, strongest first.
    pub fn full_suite(budget: ThreatBudget, pgd: PgdConfig) -> Vec<AttackSpec> {
        let search = RtSearch::STANDARD_GRID;
        vec![
            AttackSpec::Composition { budget, pgd, search },
            AttackSpec::Union { budget, pgd, search },
            AttackSpec::Pgd { budget, pgd },
            AttackSpec::Rt { budget, search },
        ]
    }

    pub fn run(&self, model: &Model, image: &Image, label: usize, rng: &mut RngStream) -> Result<AttackResult> {
        let target = LossTarget::CrossEntropy { label };
        match self {
            AttackSpec::Natural => {
                let (loss, logits) = evaluate_loss(model, image, &target)?;
                Ok(AttackResult {
                    image: image.clone(),
                    params: AffineParams::IDENTITY,
                    loss,
                    success: logits.predicted() != label,
                })
            }
            AttackSpec::Pgd { budget, pgd: cfg } => pgd(model, image, &target, budget.epsilon as f32, cfg, rng),
            AttackSpec::Rt { budget, search } => rt_search(model, image, &target, budget, *search, rng),
            AttackSpec::Union { budget, pgd, search } => union_max(model, image, &target, budget, pgd, *search, rng),
            AttackSpec::Composition { budget, pgd, search } => {
                worst_on_worst(model, image, &target, budget, *search, pgd, rng)
            }
        }
    }
}

/// One row of the per-example attack log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRecord {
    pub example_id: usize,
    pub attack_name: String,
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
    pub loss: f32,
    pub correct_before: bool,
    pub correct_after: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub attack_name: String,
    /// Fraction of examples still correctly classified after the attack.
    pub accuracy: f64,
    pub records: Vec<AttackRecord>,
}

/// Robust accuracy of `model` on `data`; example `i` draws from stream
/// `(seed, i)`.
pub fn evaluate_robust_accuracy(model: &Model, data: &Dataset, attack: &AttackSpec, seed: u64) -> Result<EvalOutcome> {
    if data.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let name = attack.name();
    let records = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let image = data.image(i);
            let label = data.label(i);
            let mut rng = RngStream::new(seed, i as u64);
            let clean = model.forward_image(&image)?;
            let res = attack.run(model, &image, label, &mut rng)?;
            Ok(AttackRecord {
                example_id: i,
                attack_name: name.clone(),
                theta: res.params.theta,
                dx: res.params.dx,
                dy: res.params.dy,
                loss: res.loss,
                correct_before: clean.predicted() == label,
                correct_after: !res.success,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = records.iter().filter(|r| r.correct_after).count();
    Ok(EvalOutcome {
        attack_name: name,
        accuracy: correct as f64 / records.len() as f64,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageShape;
    use crate::models::Architecture;

    fn scalar_linear(w: f32) -> Model {
        let shape = ImageShape::new(1, 1, 1);
        Model::from_params(
            Architecture::Linear,
            shape,
            1,
            vec![Tensor::new(vec![1, 1], vec![w]).unwrap(), Tensor::zeros(vec![1])],
        )
        .unwrap()
    }

    fn random_model(seed: u64) -> Model {
        Model::new(Architecture::Mlp, ImageShape::new(1, 8, 8), 4, &mut RngStream::new(seed, 0)).unwrap()
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = RngStream::new(seed, 99);
        Image::new(ImageShape::new(1, 8, 8), (0..64).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn single_step_on_linear_model() {
        let model = scalar_linear(1.0);
        let anchor = Image::new(ImageShape::new(1, 1, 1), vec![0.5]).unwrap();
        let cfg = PgdConfig {
            step_size: Some(0.1),
            ..PgdConfig::new(1)
        };
        // label 1 is the positive class of a single-logit model
        let res = pgd(&model, &anchor, &LossTarget::CrossEntropy { label: 1 }, 0.1, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert!((res.image.data()[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn zero_epsilon_returns_anchor() {
        let model = random_model(1);
        let img = random_image(2);
        let cfg = PgdConfig {
            random_start: true,
            ..PgdConfig::new(5)
        };
        let res = pgd(&model, &img, &LossTarget::CrossEntropy { label: 0 }, 0.0, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(res.image, img);
    }

    #[test]
    fn pgd_stays_in_ball_and_range() {
        let model = random_model(3);
        for s in 0..10 {
            let img = random_image(s);
            let cfg = PgdConfig {
                random_start: s % 2 == 0,
                ..PgdConfig::new(7)
            };
            let res = pgd(&model, &img, &LossTarget::CrossEntropy { label: 1 }, 0.1, &cfg, &mut RngStream::new(s, 0)).unwrap();
            assert!(res.image.linf_distance(&img) <= 0.1 + CONTAINMENT_TOL);
            assert!(res.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pgd_increases_loss() {
        let model = random_model(4);
        let img = random_image(5);
        let target = LossTarget::CrossEntropy { label: 2 };
        let (clean, _) = evaluate_loss(&model, &img, &target).unwrap();
        let res = pgd(&model, &img, &target, 0.1, &PgdConfig::new(10), &mut RngStream::new(0, 0)).unwrap();
        assert!(res.loss > clean);
    }

    #[test]
    fn restarts_keep_best_and_are_deterministic() {
        let model = random_model(6);
        let img = random_image(7);
        let target = LossTarget::CrossEntropy { label: 0 };
        let cfg = PgdConfig::new(3).with_restarts(4);
        let a = pgd(&model, &img, &target, 0.2, &cfg, &mut RngStream::new(1, 1)).unwrap();
        let b = pgd(&model, &img, &target, 0.2, &cfg, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(AttackSpec::Pgd { budget: ThreatBudget::mnist(), pgd: cfg }.name(), "PGD-R");
    }

    #[test]
    fn worst_of_one_under_zero_budget_is_identity() {
        let model = random_model(8);
        let img = random_image(9);
        let target = LossTarget::CrossEntropy { label: 3 };
        let res = rt_worst_of_k(&model, &img, &target, &ThreatBudget::zero(), 1, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(res.params, AffineParams::IDENTITY);
        assert_eq!(res.loss, evaluate_loss(&model, &img, &target).unwrap().0);
        let grid = rt_grid_attack(&model, &img, &target, &ThreatBudget::zero(), (12, 5, 5)).unwrap();
        assert_eq!(grid.params, AffineParams::IDENTITY);
    }

    #[test]
    fn worst_of_k_is_argmax_of_its_candidates() {
        let model = random_model(10);
        let img = random_image(11);
        let target = LossTarget::CrossEntropy { label: 1 };
        let budget = ThreatBudget::mnist();
        let res = rt_worst_of_k(&model, &img, &target, &budget, 10, &mut RngStream::new(4, 4)).unwrap();
        let mut replay = RngStream::new(4, 4);
        for _ in 0..10 {
            let p = sample_affine(&budget, &mut replay);
            let (loss, _) = evaluate_loss(&model, &apply_affine(&img, p, Interpolation::Bilinear).unwrap(), &target).unwrap();
            assert!(res.loss >= loss);
        }
    }

    #[test]
    fn union_and_composition_degenerate_cases() {
        let model = random_model(12);
        let img = random_image(13);
        let target = LossTarget::CrossEntropy { label: 0 };
        let cfg = PgdConfig::new(5);
        let full = ThreatBudget::new(0.1, 30.0, 3.0, 3.0).unwrap();
        let search = RtSearch::WORST_OF_10;

        let plain = pgd(&model, &img, &target, 0.1, &cfg, &mut RngStream::new(2, 0)).unwrap();
        let u = union_max(&model, &img, &target, &full.without_rt(), &cfg, search, &mut RngStream::new(2, 0)).unwrap();
        assert!(u.loss >= plain.loss);
        let c = worst_on_worst(&model, &img, &target, &full.without_rt(), search, &cfg, &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(c.image, plain.image);
        assert_eq!(c.loss, plain.loss);

        let rt = rt_search(&model, &img, &target, &full, search, &mut RngStream::new(2, 0).child_named("rt")).unwrap();
        let u = union_max(&model, &img, &target, &full.with_epsilon(0.0), &cfg, search, &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(u.loss, rt.loss.max(evaluate_loss(&model, &img, &target).unwrap().0));

        let both_zero = worst_on_worst(&model, &img, &target, &ThreatBudget::zero(), search, &cfg, &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(both_zero.image, img);

        let u = union_max(&model, &img, &target, &full, &cfg, search, &mut RngStream::new(5, 0)).unwrap();
        let p = pgd(&model, &img, &target, 0.1, &cfg, &mut RngStream::new(5, 0)).unwrap();
        let r = rt_search(&model, &img, &target, &full, search, &mut RngStream::new(5, 0).child_named("rt")).unwrap();
        assert_eq!(u.loss, p.loss.max(r.loss));
        assert!(u.is_contained(&img, &full).unwrap());
        let c = worst_on_worst(&model, &img, &target, &full, search, &cfg, &mut RngStream::new(5, 0)).unwrap();
        assert!(c.is_contained(&img, &full).unwrap());
        assert_eq!(c.params, r.params);
    }
}
