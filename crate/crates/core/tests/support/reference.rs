//! Straightforward f64 re-implementation of the model forward passes and
//! losses, used as a finite-difference oracle for the autodiff gradients.

#![allow(dead_code)]

use robustlab::{Architecture, ImageShape};

pub struct RefModel<'a> {
    pub arch: Architecture,
    pub shape: ImageShape,
    pub classes: usize,
    pub params: &'a [Vec<f64>],
}

fn dense(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    y
}

fn relu(x: &mut [f64]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// Valid 3x3 convolution, stride 1, OIHW weights.
fn conv(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], o: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - 2, w - 2);
    let mut y = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = bias[oc];
                for ic in 0..c {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            s += weight[((oc * c + ic) * 3 + ki) * 3 + kj] * x[(ic * h + i + ki) * w + j + kj];
                        }
                    }
                }
                y[(oc * oh + i) * ow + j] = s;
            }
        }
    }
    (y, oh, ow)
}

fn pool(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(x[(ch * h + 2 * i + di) * w + 2 * j + dj]);
                    }
                }
                y[(ch * oh + i) * ow + j] = m;
            }
        }
    }
    (y, oh, ow)
}

impl RefModel<'_> {
    /// Logits of one CHW image.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let p = self.params;
        let k = self.classes;
        match self.arch {
            Architecture::Linear => dense(x, &p[0], &p[1], k),
            Architecture::Mlp => {
                let hidden = p[1].len();
                let mut h = dense(x, &p[0], &p[1], hidden);
                relu(&mut h);
                dense(&h, &p[2], &p[3], k)
            }
            Architecture::SmallCnn => {
                let (mut h, mut c, mut hh, mut ww) = (x.to_vec(), self.shape.channels, self.shape.height, self.shape.width);
                for (i, pooled) in [(0, false), (2, true), (4, false), (6, true)] {
                    let o = p[i + 1].len();
                    let (mut y, oh, ow) = conv(&h, c, hh, ww, &p[i], &p[i + 1], o);
                    relu(&mut y);
                    (h, c, hh, ww) = (y, o, oh, ow);
                    if pooled {
                        let (y, oh, ow) = pool(&h, c, hh, ww);
                        (h, hh, ww) = (y, oh, ow);
                    }
                }
                let hidden = p[9].len();
                let mut f = dense(&h, &p[8], &p[9], hidden);
                relu(&mut f);
                dense(&f, &p[10], &p[11], k)
            }
        }
    }
}

pub fn expand(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 1 {
        vec![0.0, logits[0]]
    } else {
        logits.to_vec()
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    -log_softmax(&expand(logits))[label]
}

/// `KL(softmax(p) ‖ softmax(q))`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let lp = log_softmax(&expand(p));
    let lq = log_softmax(&expand(q));
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

use robustlab::autodiff::Graph;
use robustlab::{Model, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    KlFixed,
    Trades,
}

#[derive(Debug)]
pub struct GradCase {
    pub arch: Architecture,
    pub kind: LossKind,
    pub classes: usize,
    /// Largest relative error over the probed directions.
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

const FD_STEP: f64 = 1e-6;

fn to_f64(t: &[f32]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

/// One randomized gradient check: analytic directional derivatives of the
/// autodiff loss (parameters and inputs jointly) against central
/// differences of the f64 reference, along a random unit direction and the
/// normalized gradient itself.
pub fn gradient_case(index: u64) -> GradCase {
    let mut rng = RngStream::new(0x6772_6164, index);
    let arch = [Architecture::Linear, Architecture::Mlp, Architecture::SmallCnn][index as usize % 3];
    let kind = [LossKind::CrossEntropy, LossKind::KlFixed, LossKind::Trades][(index as usize / 3) % 3];
    let classes = [1usize, 3, 10][rng.below(3)];
    let shape = match arch {
        Architecture::SmallCnn => [ImageShape::new(1, 16, 16), ImageShape::new(3, 16, 16), ImageShape::new(1, 18, 17)][rng.below(3)],
        _ => [ImageShape::new(1, 6, 6), ImageShape::new(3, 5, 4), ImageShape::new(1, 28, 28)][rng.below(3)],
    };
    let batch = 1 + rng.below(2);
    let model = Model::new(arch, shape, classes, &mut rng.child(1)).unwrap();
    let wide = classes.max(2);
    let mut uniform = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.uniform() as f32).collect() };
    let x1 = uniform(batch * shape.len());
    let x2 = uniform(batch * shape.len());
    let fixed: Vec<f32> = (0..batch * wide).map(|i| ((i * 7919) % 13) as f32 / 4.0 - 1.5).collect();
    let labels: Vec<usize> = (0..batch).map(|i| (index as usize + i) % wide).collect();
    let beta = 3.0f32;

    let dims = vec![batch, shape.channels, shape.height, shape.width];
    let mut g = Graph::new();
    let params = model.variable_params(&mut g);
    let xv = g.variable(Tensor::new(dims.clone(), x1.clone()).unwrap());
    let x2v = g.variable(Tensor::new(dims, x2.clone()).unwrap());
    let z = model.build(&mut g, xv, &params).unwrap();
    let z = model.loss_logits(&mut g, z).unwrap();
    let loss = match kind {
        LossKind::CrossEntropy => g.cross_entropy(z, &labels).unwrap(),
        LossKind::KlFixed => {
            let p = g.constant(Tensor::new(vec![batch, wide], fixed.clone()).unwrap());
            g.kl_divergence(p, z).unwrap()
        }
        LossKind::Trades => {
            let ce = g.cross_entropy(z, &labels).unwrap();
            let z2 = model.build(&mut g, x2v, &params).unwrap();
            let z2 = model.loss_logits(&mut g, z2).unwrap();
            let kl = g.kl_divergence(z, z2).unwrap();
            let kl = g.scale(kl, beta).unwrap();
            g.add(ce, kl).unwrap()
        }
    };
    let mut wrt = params.clone();
    wrt.push(xv);
    wrt.push(x2v);
    let grads: Vec<Vec<f64>> = g.backward(loss, &wrt).unwrap().iter().map(|t| to_f64(t.data())).collect();

    let base: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| to_f64(p.data()))
        .chain([to_f64(&x1), to_f64(&x2)])
        .collect();
    let n_params = model.params().len();
    let reference_loss = |point: &[Vec<f64>]| -> f64 {
        let r = RefModel {
            arch,
            shape,
            classes,
            params: &point[..n_params],
        };
        let per = shape.len();
        let fixed64 = to_f64(&fixed);
        let mut total = 0.0;
        for b in 0..batch {
            let z1 = r.forward(&point[n_params][b * per..(b + 1) * per]);
            total += match kind {
                LossKind::CrossEntropy => cross_entropy(&z1, labels[b]),
                LossKind::KlFixed => {
                    let p = &fixed64[b * wide..(b + 1) * wide];
                    let q = expand(&z1);
                    kl(p, &q)
                }
                LossKind::Trades => {
                    let z2 = r.forward(&point[n_params + 1][b * per..(b + 1) * per]);
                    cross_entropy(&z1, labels[b]) + beta as f64 * kl(&z1, &z2)
                }
            };
        }
        total / batch as f64
    };

    let gnorm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let random: Vec<Vec<f64>> = base.iter().map(|b| b.iter().map(|_| rng.normal()).collect()).collect();
    let steepest: Vec<Vec<f64>> = grads.clone();
    let mut error = 0.0f64;
    for mut dir in [random, steepest] {
        let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        dir.iter_mut().flatten().for_each(|v| *v /= norm);
        let analytic: f64 = grads.iter().flatten().zip(dir.iter().flatten()).map(|(a, b)| a * b).sum();
        let shifted = |s: f64| -> Vec<Vec<f64>> {
            base.iter().zip(&dir).map(|(b, d)| b.iter().zip(d).map(|(x, v)| x + s * v).collect()).collect()
        };
        let numeric = (reference_loss(&shifted(FD_STEP)) - reference_loss(&shifted(-FD_STEP))) / (2.0 * FD_STEP);
        let scale = analytic.abs().max(numeric.abs()).max(1e-2 * gnorm).max(1e-6);
        error = error.max((analytic - numeric).abs() / scale);
    }
    GradCase {
        arch,
        kind,
        classes,
        error,
        tolerance: if arch == Architecture::SmallCnn { 1e-2 } else { 1e-3 },
    }
}
