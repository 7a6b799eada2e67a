//! TRADES adversarial training with ℓ∞, RT, union, composition and mixed
//! inner maximizers.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackError, LossTarget, PgdConfig, RtSearch};
use crate::autodiff::Graph;
use crate::datasets::Dataset;
use crate::image::Image;
use crate::models::{Architecture, Logits, Model, ModelError};
use crate::rng::RngStream;
use crate::spatial::ThreatBudget;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TradesError {
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    Invalid(String),
    #[error("the `all` variant must be resolved per example before inner maximization")]
    UnresolvedAll,
    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss}); last good checkpoint: {last_checkpoint:?}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f32,
        last_checkpoint: Option<PathBuf>,
    },
}

impl From<TensorError> for TradesError {
    fn from(e: TensorError) -> Self {
        TradesError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TradesError>;

/// Which inner maximizer produces `x′`. `Natural` disables the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Natural,
    Linf,
    Rt,
    Union,
    Composition,
    All,
}

impl Variant {
    pub const ALL_CHOICES: [Variant; 3] = [Variant::Linf, Variant::Rt, Variant::Composition];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Natural => "natural",
            Variant::Linf => "linf",
            Variant::Rt => "rt",
            Variant::Union => "union",
            Variant::Composition => "composition",
            Variant::All => "all",
        }
    }

    /// Row label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Natural => "Natural",
            Variant::Linf => "TRADES_ℓ∞",
            Variant::Rt => "TRADES_RT",
            Variant::Union => "TRADES_ℓ∞∪RT",
            Variant::Composition => "TRADES_ℓ∞∘RT",
            Variant::All => "TRADES_All",
        }
    }

    fn slot(&self) -> Option<usize> {
        match self {
            Variant::Linf => Some(0),
            Variant::Rt => Some(1),
            Variant::Union => Some(2),
            Variant::Composition => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TradesError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "natural" => Variant::Natural,
            "linf" => Variant::Linf,
            "rt" => Variant::Rt,
            "union" => Variant::Union,
            "composition" => Variant::Composition,
            "all" => Variant::All,
            other => return Err(TradesError::Invalid(format!("unknown variant {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerConfig {
    pub pgd: PgdConfig,
    pub worst_of_k: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            pgd: PgdConfig::training(10),
            worst_of_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub lr_decay: f32,
}

fn default_decay() -> f32 {
    0.1
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 64,
            milestones: vec![],
            lr_decay: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradesConfig {
    pub variant: Variant,
    pub beta: f32,
    pub budget: ThreatBudget,
    #[serde(default)]
    pub inner: InnerConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl TradesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) && self.variant != Variant::Natural {
            return Err(TradesError::Invalid(format!("beta must be positive, got {}", self.beta)));
        }
        self.budget.validate().map_err(AttackError::from)?;
        let o = &self.optimizer;
        if o.batch_size == 0 || o.epochs == 0 || o.learning_rate.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !(0.0..1.0).contains(&o.momentum) {
            return Err(TradesError::Invalid(format!("bad optimizer settings: {o:?}")));
        }
        if self.inner.worst_of_k == 0 {
            return Err(TradesError::Invalid("worst_of_k must be at least 1".into()));
        }
        Ok(())
    }

    fn search(&self) -> RtSearch {
        RtSearch::WorstOfK(self.inner.worst_of_k)
    }
}

/// Uniform choice among the ℓ∞, RT and composition maximizers.
pub fn select_all(rng: &mut RngStream) -> Variant {
    Variant::ALL_CHOICES[rng.below(3)]
}

/// Adversarial example for the KL robustness term of one input.
pub fn inner_maximize(
    model: &Model,
    image: &Image,
    natural: &Logits,
    variant: Variant,
    cfg: &TradesConfig,
    rng: &mut RngStream,
) -> Result<Image> {
    let target = LossTarget::Kl {
        natural: natural.clone(),
    };
    let budget = &cfg.budget;
    let eps = budget.epsilon as f32;
    let pgd = &cfg.inner.pgd;
    let res = match variant {
        Variant::Natural => return Ok(image.clone()),
        Variant::All => return Err(TradesError::UnresolvedAll),
        Variant::Linf => attacks::pgd(model, image, &target, eps, pgd, rng)?,
        Variant::Rt => attacks::rt_search(model, image, &target, budget, cfg.search(), rng)?,
        Variant::Union => attacks::union_max(model, image, &target, budget, pgd, cfg.search(), rng)?,
        Variant::Composition => attacks::worst_on_worst(model, image, &target, budget, cfg.search(), pgd, rng)?,
    };
    Ok(res.image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradesLoss {
    pub loss: f32,
    pub natural_loss: f32,
    pub robust_loss: f32,
    pub grads: Vec<Tensor>,
    /// Inner maximizer counts in the order linf, rt, union, composition.
    pub variant_counts: [usize; 4],
}

/// `CE(f(x), y) + β · KL(f(x) ‖ f(x′))` averaged over the batch, with the
/// gradient with respect to every model parameter.
///
/// Example `j` draws its variant choice and inner-solver randomness from
/// `rng.child(j)`.
pub fn trades_loss(model: &Model, images: &[Image], labels: &[usize], cfg: &TradesConfig, rng: &RngStream) -> Result<TradesLoss> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(TradesError::Invalid(format!(
            "{} images for {} labels",
            images.len(),
            labels.len()
        )));
    }
    let refs: Vec<&Image> = images.iter().collect();
    let batch = Image::stack(&refs)?;
    let robust = cfg.variant != Variant::Natural;

    let adversarial = if robust {
        let natural = model.forward(&batch)?;
        let picked = images
            .par_iter()
            .zip(natural.par_iter())
            .enumerate()
            .map(|(j, (img, nat))| {
                let mut r = rng.child(j as u64);
                let variant = match cfg.variant {
                    Variant::All => select_all(&mut r),
                    v => v,
                };
                Ok((variant, inner_maximize(model, img, nat, variant, cfg, &mut r)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(picked)
    } else {
        None
    };

    let mut g = Graph::new();
    let params = model.variable_params(&mut g);
    let x = g.constant(batch);
    let nat = model.build(&mut g, x, &params)?;
    let nat = model.loss_logits(&mut g, nat)?;
    let ce = g.cross_entropy(nat, labels)?;
    let mut counts = [0usize; 4];
    let (loss, robust_loss) = match &adversarial {
        Some(picked) => {
            let adv_refs: Vec<&Image> = picked.iter().map(|(_, img)| img).collect();
            for (v, _) in picked {
                if let Some(s) = v.slot() {
                    counts[s] += 1;
                }
            }
            let xa = g.constant(Image::stack(&adv_refs)?);
            let adv = model.build(&mut g, xa, &params)?;
            let adv = model.loss_logits(&mut g, adv)?;
            let kl = g.kl_divergence(nat, adv)?;
            let weighted = g.scale(kl, cfg.beta)?;
            let total = g.add(ce, weighted)?;
            (total, g.value(kl).data()[0])
        }
        None => (ce, 0.0),
    };
    let grads = g.backward(loss, &params)?;
    Ok(TradesLoss {
        loss: g.value(loss).data()[0],
        natural_loss: g.value(ce).data()[0],
        robust_loss,
        grads,
        variant_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f32,
    pub natural_loss: f64,
    pub robust_loss: f64,
    pub eval_accuracy: f64,
    pub n_linf: usize,
    pub n_rt: usize,
    pub n_union: usize,
    pub n_composition: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()
    }
}

/// Fraction of `data` classified correctly, evaluated in chunks.
pub fn natural_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let correct: usize = idx
        .par_chunks(128)
        .map(|chunk| -> Result<usize> {
            let logits = model.forward(&data.batch(chunk))?;
            Ok(chunk.iter().zip(&logits).filter(|(&i, l)| l.predicted() == data.label(i)).count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / data.len() as f64)
}

pub struct TrainOptions<'a> {
    pub architecture: Architecture,
    /// Directory for per-epoch checkpoints `epoch_NNN.rlck`.
    pub checkpoint_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochStats)>,
}

/// SGD with momentum over `epochs`; deterministic given the config seed.
pub fn train(cfg: &TradesConfig, data: &Dataset, eval: &Dataset, mut opts: TrainOptions<'_>) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TradesError::Invalid("training set is empty".into()));
    }
    let seed = cfg.seed;
    let mut model = Model::new(
        opts.architecture,
        data.shape(),
        data.classes(),
        &mut RngStream::named(seed, "trades.init.0"),
    )?;
    let mut velocity: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let opt = &cfg.optimizer;
    let mut history = TrainHistory::default();
    let mut last_checkpoint = None;

    for epoch in 0..opt.epochs {
        let lr = opt.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        RngStream::named(seed, &format!("trades.shuffle.{epoch}")).shuffle(&mut order);
        let inner = RngStream::named(seed, &format!("trades.inner.{epoch}"));
        let (mut nat_sum, mut rob_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        let mut counts = [0usize; 4];

        for (b, chunk) in order.chunks(opt.batch_size).enumerate() {
            let images: Vec<Image> = chunk.iter().map(|&i| data.image(i)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let out = trades_loss(&model, &images, &labels, cfg, &inner.child(b as u64))?;
            let finite = out.loss.is_finite() && out.grads.iter().all(|g| g.is_finite());
            if !finite {
                return Err(TradesError::Diverged {
                    epoch,
                    batch: b,
                    loss: out.loss,
                    last_checkpoint,
                });
            }
            for ((p, v), g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&out.grads) {
                let (pd, vd, gd) = (p.data_mut(), v.data_mut(), g.data());
                for k in 0..pd.len() {
                    let grad = gd[k] + opt.weight_decay * pd[k];
                    vd[k] = opt.momentum * vd[k] + grad;
                    pd[k] -= lr * vd[k];
                }
            }
            nat_sum += out.natural_loss as f64 * chunk.len() as f64;
            rob_sum += out.robust_loss as f64 * chunk.len() as f64;
            seen += chunk.len();
            for (c, o) in counts.iter_mut().zip(out.variant_counts) {
                *c += o;
            }
        }

        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            natural_loss: nat_sum / seen as f64,
            robust_loss: rob_sum / seen as f64,
            eval_accuracy: natural_accuracy(&model, eval)?,
            n_linf: counts[0],
            n_rt: counts[1],
            n_union: counts[2],
            n_composition: counts[3],
        };
        if let Some(dir) = opts.checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:03}.rlck"));
            model.save(&path)?;
            last_checkpoint = Some(path);
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&stats);
        }
        history.epochs.push(stats);
    }
    Ok((model, history))
}
