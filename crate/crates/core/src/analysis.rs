//! Logit-stability curves, ℓp distances between images and their RT
//! transforms, and robust-accuracy tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, evaluate_robust_accuracy, AttackError, AttackSpec, LossTarget, PgdConfig};
use crate::datasets::Dataset;
use crate::image::Image;
use crate::models::Model;
use crate::rng::RngStream;
use crate::spatial::{apply_affine, AffineParams, Interpolation, SpatialError};

/// Batch size of the stability study.
pub const STABILITY_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMode {
    RtOnly,
    RtPlusPgd,
}

impl StabilityMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            StabilityMode::RtOnly => "rt_only",
            StabilityMode::RtPlusPgd => "rt_plus_pgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityPoint {
    pub model: String,
    pub mode: StabilityMode,
    /// Integer bucket `⌊|θ| + |δx| + |δy|⌋`.
    pub strength_bin: usize,
    pub median_l2: f64,
    pub n: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median `‖f(I) − f(I′)‖₂` per strength bucket, where `I′ = T(I)` or
/// `I′ = PGD(T(I))` against the true label with budget `epsilon`.
#[allow(clippy::too_many_arguments)]
pub fn logit_stability_curve(
    model: &Model,
    model_tag: &str,
    images: &[Image],
    labels: &[usize],
    transforms: &[AffineParams],
    mode: StabilityMode,
    epsilon: f32,
    pgd: &PgdConfig,
    seed: u64,
) -> Result<Vec<StabilityPoint>, AttackError> {
    let pairs: Vec<(usize, usize)> = (0..images.len())
        .flat_map(|i| (0..transforms.len()).map(move |t| (i, t)))
        .collect();
    let clean: Vec<_> = images
        .par_iter()
        .map(|img| model.forward_image(img))
        .collect::<Result<Vec<_>, _>>()?;
    let dists = pairs
        .par_iter()
        .map(|&(i, t)| -> Result<(usize, f64), AttackError> {
            let params = transforms[t];
            let warped = apply_affine(&images[i], params, Interpolation::Bilinear)?;
            let perturbed = match mode {
                StabilityMode::RtOnly => warped,
                StabilityMode::RtPlusPgd => {
                    let mut rng = RngStream::named(seed, &format!("analysis.stability.{i}")).child(t as u64);
                    let target = LossTarget::CrossEntropy { label: labels[i] };
                    attacks::pgd(model, &warped, &target, epsilon, pgd, &mut rng)?.image
                }
            };
            let logits = model.forward_image(&perturbed)?;
            Ok((params.strength().floor() as usize, clean[i].l2_distance(&logits)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut buckets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (bin, d) in dists {
        buckets.entry(bin).or_default().push(d);
    }
    Ok(buckets
        .into_iter()
        .map(|(bin, mut v)| StabilityPoint {
            model: model_tag.to_string(),
            mode,
            strength_bin: bin,
            n: v.len(),
            median_l2: median(&mut v),
        })
        .collect())
}

pub fn write_stability_csv(path: &Path, points: &[StabilityPoint]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LpNorm {
    L1,
    L2,
    Linf,
}

impl LpNorm {
    pub const ALL: [LpNorm; 3] = [LpNorm::L1, LpNorm::L2, LpNorm::Linf];

    /// File-name suffix: `1`, `2` or `inf`.
    pub fn tag(&self) -> &'static str {
        match self {
            LpNorm::L1 => "1",
            LpNorm::L2 => "2",
            LpNorm::Linf => "inf",
        }
    }

    pub fn distance(&self, a: &[f32], b: &[f32]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs());
        match self {
            LpNorm::L1 => diffs.sum(),
            LpNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            LpNorm::Linf => diffs.fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpHistogram {
    pub norm: LpNorm,
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl LpHistogram {
    pub fn new(norm: LpNorm, values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let hi = values.iter().copied().fold(0.0f64, f64::max);
        let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = ((v / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { norm, edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv(&self, path: &Path) -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (k, c) in self.counts.iter().enumerate() {
            w.write_record([self.edges[k].to_string(), self.edges[k + 1].to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpStudy {
    pub histograms: Vec<LpHistogram>,
    /// Smallest `‖I − T(I)‖∞` over every image/transform pair.
    pub min_linf: f64,
    pub pairs: usize,
}

/// Distances `‖I − T(I)‖_p` for every image of `data` and every transform.
pub fn lp_distance_histogram(data: &Dataset, transforms: &[AffineParams], bins: usize) -> Result<LpStudy, SpatialError> {
    let per_image = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<[f64; 3]>, SpatialError> {
            let img = data.image(i);
            transforms
                .iter()
                .map(|&t| {
                    let warped = apply_affine(&img, t, Interpolation::Bilinear)?;
                    Ok(LpNorm::ALL.map(|n| n.distance(img.data(), warped.data())))
                })
                .collect()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let all: Vec<[f64; 3]> = per_image.into_iter().flatten().collect();
    let histograms = LpNorm::ALL
        .iter()
        .enumerate()
        .map(|(k, &norm)| {
            let values: Vec<f64> = all.iter().map(|d| d[k]).collect();
            LpHistogram::new(norm, &values, bins)
        })
        .collect();
    let min_linf = all.iter().map(|d| d[2]).fold(f64::INFINITY, f64::min);
    Ok(LpStudy {
        histograms,
        min_linf,
        pairs: all.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankFlag {
    Best,
    Second,
    None,
}

/// Robust accuracies in percent; rows are models, columns are attacks
/// followed by `Natural`.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub models: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct ReportCell<'a> {
    model: &'a str,
    attack: &'a str,
    accuracy: String,
    flag: RankFlag,
}

impl Report {
    pub fn from_cells(models: Vec<String>, columns: Vec<String>, cells: Vec<Vec<f64>>) -> Self {
        Self { models, columns, cells }
    }

    /// Best and second-best flags per column; ties share the flag.
    pub fn flags(&self) -> Vec<Vec<RankFlag>> {
        let mut flags = vec![vec![RankFlag::None; self.columns.len()]; self.models.len()];
        for c in 0..self.columns.len() {
            let mut values: Vec<f64> = self.cells.iter().map(|r| round1(r[c])).collect();
            values.sort_by(|a, b| b.total_cmp(a));
            values.dedup();
            for (r, row) in self.cells.iter().enumerate() {
                let v = round1(row[c]);
                flags[r][c] = if Some(&v) == values.first() {
                    RankFlag::Best
                } else if Some(&v) == values.get(1) {
                    RankFlag::Second
                } else {
                    RankFlag::None
                };
            }
        }
        flags
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let flags = self.flags();
        for (r, model) in self.models.iter().enumerate() {
            for (c, attack) in self.columns.iter().enumerate() {
                w.serialize(ReportCell {
                    model,
                    attack,
                    accuracy: format!("{:.1}", self.cells[r][c]),
                    flag: flags[r][c],
                })
                .expect("in-memory csv");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 input")
    }

    /// Aligned text table; best entries are wrapped in `*…*`, second-best in
    /// `(…)`.
    pub fn to_text(&self) -> String {
        let flags = self.flags();
        let rendered: Vec<Vec<String>> = self
            .cells
            .iter()
            .zip(&flags)
            .map(|(row, f)| {
                row.iter()
                    .zip(f)
                    .map(|(v, flag)| match flag {
                        RankFlag::Best => format!("*{v:.1}*"),
                        RankFlag::Second => format!("({v:.1})"),
                        RankFlag::None => format!("{v:.1}"),
                    })
                    .collect()
            })
            .collect();
        let w0 = self.models.iter().map(|m| m.chars().count()).max().unwrap_or(0).max(5);
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                rendered
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain([self.columns[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
        let _ = write!(out, "{}", pad("model", w0));
        for (c, col) in self.columns.iter().enumerate() {
            let _ = write!(out, "  {}", pad(col, widths[c]));
        }
        out.push('\n');
        for (r, model) in self.models.iter().enumerate() {
            let _ = write!(out, "{}", pad(model, w0));
            for (c, cell) in rendered[r].iter().enumerate() {
                let _ = write!(out, "  {}", pad(cell, widths[c]));
            }
            out.push('\n');
        }
        out
    }
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Evaluates every model under every attack plus natural accuracy.
pub fn build_report(models: &[(String, &Model)], suite: &[AttackSpec], data: &Dataset, seed: u64) -> Result<Report, AttackError> {
    if models.is_empty() {
        return Err(AttackError::Invalid("report needs at least one model".into()));
    }
    let mut columns: Vec<AttackSpec> = suite.iter().filter(|a| **a != AttackSpec::Natural).cloned().collect();
    columns.push(AttackSpec::Natural);
    let mut cells = Vec::with_capacity(models.len());
    for (_, model) in models {
        let row = columns
            .iter()
            .map(|a| Ok(100.0 * evaluate_robust_accuracy(model, data, a, seed)?.accuracy))
            .collect::<Result<Vec<_>, AttackError>>()?;
        cells.push(row);
    }
    Ok(Report {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        columns: columns.iter().map(|a| a.name()).collect(),
        cells,
    })
}
