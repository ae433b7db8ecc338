//! Softmax classifier (linear or one hidden ReLU layer) with hand-written
//! backpropagation, plus SGD with momentum.
//!
//! Parameters live in one flat vector. Layouts, all row-major:
//!
//! ```text
//! linear: W [out x in] | b [out]
//! mlp:    W1 [h x in] | b1 [h] | W2 [out x h] | b2 [out]
//! ```

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SsaError};
use crate::seed::{rng_for, stream};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Arch {
    #[default]
    Linear,
    Mlp {
        hidden: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// One term of a weighted cross-entropy objective.
#[derive(Debug, Clone, Copy)]
pub struct WeightedExample<'a> {
    pub x: &'a [f64],
    pub label: usize,
    pub weight: f64,
}

impl<'a> WeightedExample<'a> {
    pub fn new(x: &'a [f64], label: usize, weight: f64) -> Self {
        Self { x, label, weight }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    pub arch: Arch,
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: Vec<f64>,
    pub seed: u64,
}

pub fn param_count(arch: Arch, in_dim: usize, out_dim: usize) -> usize {
    match arch {
        Arch::Linear => out_dim * in_dim + out_dim,
        Arch::Mlp { hidden } => hidden * in_dim + hidden + out_dim * hidden + out_dim,
    }
}

impl SoftmaxClassifier {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer.
    pub fn new(arch: Arch, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch, in_dim, out_dim)?;
        model.seed = seed;
        let mut rng = rng_for(seed, stream::INIT);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in slice {
                *p = rng.random_range(-bound..=bound);
            }
        };
        match arch {
            Arch::Linear => fill(&mut model.params, in_dim),
            Arch::Mlp { hidden } => {
                let first = hidden * in_dim + hidden;
                let (l1, l2) = model.params.split_at_mut(first);
                fill(l1, in_dim);
                fill(l2, hidden);
            }
        }
        Ok(model)
    }

    pub fn zeros(arch: Arch, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if let Arch::Mlp { hidden: 0 } = arch {
            return Err(invalid("hidden width must be positive"));
        }
        Ok(Self {
            arch,
            in_dim,
            out_dim,
            params: vec![0.0; param_count(arch, in_dim, out_dim)],
            seed: 0,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Width of the representation fed to the output layer.
    pub fn repr_dim(&self) -> usize {
        match self.arch {
            Arch::Linear => self.in_dim,
            Arch::Mlp { hidden } => hidden,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(SsaError::DimensionMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Writes the representation into `repr` (ReLU activations for mlp, the
    /// input itself for linear) and the logits into `logits`.
    fn forward_into(&self, x: &[f64], repr: &mut Vec<f64>, logits: &mut Vec<f64>) {
        repr.clear();
        logits.clear();
        let (w_out, b_out, width) = match self.arch {
            Arch::Linear => {
                repr.extend_from_slice(x);
                let w_len = self.out_dim * self.in_dim;
                (&self.params[..w_len], &self.params[w_len..], self.in_dim)
            }
            Arch::Mlp { hidden } => {
                let w1_len = hidden * self.in_dim;
                let (w1, rest) = self.params.split_at(w1_len);
                let (b1, rest) = rest.split_at(hidden);
                for (row, &b) in w1.chunks_exact(self.in_dim).zip(b1) {
                    repr.push((dot(row, x) + b).max(0.0));
                }
                let (w2, b2) = rest.split_at(self.out_dim * hidden);
                (w2, b2, hidden)
            }
        };
        for (row, &b) in w_out.chunks_exact(width).zip(b_out) {
            logits.push(dot(row, repr) + b);
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut repr = Vec::new();
        let mut logits = Vec::new();
        self.forward_into(x, &mut repr, &mut logits);
        Ok(logits)
    }

    /// Class probabilities for `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut p = self.logits(x)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Allocation-free variant of [`forward`](Self::forward) for hot loops.
    pub fn forward_with(&self, x: &[f64], scratch: &mut Vec<f64>, probs: &mut Vec<f64>) -> Result<()> {
        self.check_dim(x)?;
        self.forward_into(x, scratch, probs);
        softmax_in_place(probs);
        Ok(())
    }

    pub fn representation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut repr = Vec::new();
        let mut logits = Vec::new();
        self.forward_into(x, &mut repr, &mut logits);
        Ok(repr)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?).0)
    }

    fn validate_batch(&self, batch: &[WeightedExample<'_>]) -> Result<()> {
        for ex in batch {
            self.check_dim(ex.x)?;
            if ex.label >= self.out_dim {
                return Err(SsaError::LabelOutOfRange {
                    label: ex.label,
                    classes: self.out_dim,
                });
            }
            if !(ex.weight >= 0.0 && ex.weight.is_finite()) {
                return Err(invalid("example weights must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Adds the gradient of `sum_i w_i * CE_i` into `grad` and returns that sum.
    /// Examples are processed in order, so the reduction is deterministic.
    pub fn accumulate_weighted_grad(&self, batch: &[WeightedExample<'_>], grad: &mut [f64]) -> Result<f64> {
        self.validate_batch(batch)?;
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        let mut repr = Vec::with_capacity(self.repr_dim());
        let mut probs = Vec::with_capacity(self.out_dim);
        let mut delta_hidden = Vec::new();
        let mut total = 0.0;
        for ex in batch {
            if ex.weight == 0.0 {
                continue;
            }
            self.forward_into(ex.x, &mut repr, &mut probs);
            softmax_in_place(&mut probs);
            total += ex.weight * -probs[ex.label].max(PROB_FLOOR).ln();
            // dL/dlogit = w * (p - onehot)
            for (k, p) in probs.iter_mut().enumerate() {
                *p = ex.weight * (*p - if k == ex.label { 1.0 } else { 0.0 });
            }
            match self.arch {
                Arch::Linear => {
                    let w_len = self.out_dim * self.in_dim;
                    let (gw, gb) = grad.split_at_mut(w_len);
                    for (k, &d) in probs.iter().enumerate() {
                        axpy(d, ex.x, &mut gw[k * self.in_dim..(k + 1) * self.in_dim]);
                        gb[k] += d;
                    }
                }
                Arch::Mlp { hidden } => {
                    let l1 = hidden * self.in_dim + hidden;
                    let w2 = &self.params[l1..l1 + self.out_dim * hidden];
                    delta_hidden.clear();
                    delta_hidden.resize(hidden, 0.0);
                    {
                        let (gw2, gb2) = grad[l1..].split_at_mut(self.out_dim * hidden);
                        for (k, &d) in probs.iter().enumerate() {
                            axpy(d, &repr, &mut gw2[k * hidden..(k + 1) * hidden]);
                            gb2[k] += d;
                            axpy(d, &w2[k * hidden..(k + 1) * hidden], &mut delta_hidden);
                        }
                    }
                    for (dh, &h) in delta_hidden.iter_mut().zip(&repr) {
                        if h <= 0.0 {
                            *dh = 0.0;
                        }
                    }
                    self.backprop_hidden(ex.x, &delta_hidden, grad);
                }
            }
        }
        Ok(total)
    }

    /// Gradient of the weight-normalized mean cross-entropy
    /// `sum_i w_i CE_i / sum_i w_i`; zero when every weight is zero.
    pub fn grad(&self, batch: &[WeightedExample<'_>]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(SsaError::EmptyInput("gradient batch"));
        }
        let mut g = vec![0.0; self.params.len()];
        self.accumulate_weighted_grad(batch, &mut g)?;
        let total_weight: f64 = batch.iter().map(|e| e.weight).sum();
        if total_weight > 0.0 {
            g.iter_mut().for_each(|v| *v /= total_weight);
        }
        Ok(g)
    }

    /// Weight-normalized mean cross-entropy, the objective `grad` differentiates.
    pub fn loss(&self, batch: &[WeightedExample<'_>]) -> Result<f64> {
        self.validate_batch(batch)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for ex in batch {
            num += ex.weight * cross_entropy(&self.forward(ex.x)?, ex.label)?;
            den += ex.weight;
        }
        Ok(if den > 0.0 { num / den } else { 0.0 })
    }

    /// Backpropagates `dL/d(representation)` for input `x` into `grad`.
    /// No-op for the linear architecture, whose representation is the input.
    pub fn accumulate_representation_grad(&self, x: &[f64], d_repr: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_dim(x)?;
        let Arch::Mlp { hidden } = self.arch else {
            return Ok(());
        };
        if d_repr.len() != hidden {
            return Err(SsaError::DimensionMismatch {
                expected: hidden,
                got: d_repr.len(),
            });
        }
        let (w1, rest) = self.params.split_at(hidden * self.in_dim);
        let delta: Vec<f64> = w1
            .chunks_exact(self.in_dim)
            .zip(&rest[..hidden])
            .zip(d_repr)
            .map(|((row, &b), &d)| if dot(row, x) + b > 0.0 { d } else { 0.0 })
            .collect();
        self.backprop_hidden(x, &delta, grad);
        Ok(())
    }

    /// `delta` is dL/d(pre-activation) of the hidden layer.
    fn backprop_hidden(&self, x: &[f64], delta: &[f64], grad: &mut [f64]) {
        let hidden = delta.len();
        let (gw1, rest) = grad.split_at_mut(hidden * self.in_dim);
        for (j, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                axpy(d, x, &mut gw1[j * self.in_dim..(j + 1) * self.in_dim]);
                rest[j] += d;
            }
        }
    }

    /// Text checkpoint: header lines then one parameter per line, 17
    /// significant digits.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("ssa-checkpoint v1\n");
        match self.arch {
            Arch::Linear => out.push_str("arch linear\n"),
            Arch::Mlp { hidden } => {
                let _ = writeln!(out, "arch mlp {hidden}");
            }
        }
        let _ = writeln!(out, "dims {} {}", self.in_dim, self.out_dim);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "params {}", self.params.len());
        for p in &self.params {
            let _ = writeln!(out, "{}", fmt_f64(*p));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
            let (i, line) = lines.next().ok_or_else(|| SsaError::Parse {
                line: 0,
                msg: format!("missing {what}"),
            })?;
            Ok((i + 1, line.split_whitespace().collect()))
        };
        let perr = |line: usize, msg: &str| SsaError::Parse {
            line,
            msg: msg.to_string(),
        };

        let (l, magic) = next("magic")?;
        if magic != ["ssa-checkpoint", "v1"] {
            return Err(perr(l, "not an ssa checkpoint"));
        }
        let (l, arch_tok) = next("arch")?;
        let arch = match arch_tok.as_slice() {
            ["arch", "linear"] => Arch::Linear,
            ["arch", "mlp", h] => Arch::Mlp {
                hidden: h.parse().map_err(|_| perr(l, "bad hidden width"))?,
            },
            _ => return Err(perr(l, "bad arch line")),
        };
        let (l, dims) = next("dims")?;
        let (in_dim, out_dim) = match dims.as_slice() {
            ["dims", i, o] => (
                i.parse().map_err(|_| perr(l, "bad in_dim"))?,
                o.parse().map_err(|_| perr(l, "bad out_dim"))?,
            ),
            _ => return Err(perr(l, "bad dims line")),
        };
        let (l, seed_tok) = next("seed")?;
        let seed = match seed_tok.as_slice() {
            ["seed", s] => s.parse().map_err(|_| perr(l, "bad seed"))?,
            _ => return Err(perr(l, "bad seed line")),
        };
        let (l, count_tok) = next("params")?;
        let count: usize = match count_tok.as_slice() {
            ["params", n] => n.parse().map_err(|_| perr(l, "bad parameter count"))?,
            _ => return Err(perr(l, "bad params line")),
        };
        let mut model = Self::zeros(arch, in_dim, out_dim)?;
        if count != model.params.len() {
            return Err(perr(l, "parameter count does not match architecture"));
        }
        model.seed = seed;
        for p in model.params.iter_mut() {
            let (l, tok) = next("parameter")?;
            *p = match tok.as_slice() {
                [v] => v.parse().map_err(|_| perr(l, "bad parameter value"))?,
                _ => return Err(perr(l, "expected one value")),
            };
        }
        Ok(model)
    }
}

/// Shortest-round-trip is not required; `{:.16e}` gives 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in v.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in v.iter_mut() {
        *z /= sum;
    }
}

/// Index and value of the maximum; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(SsaError::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// `v <- momentum*v + g + wd*theta; theta <- theta - lr*v`
pub fn sgd_step(model: &mut SoftmaxClassifier, gradient: &[f64], cfg: &SgdConfig, velocity: &mut [f64]) {
    assert_eq!(gradient.len(), model.params.len(), "gradient length");
    assert_eq!(velocity.len(), model.params.len(), "velocity length");
    for ((theta, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(gradient) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *theta;
        *theta -= cfg.learning_rate * *v;
    }
}

/// SGD state owned by one training loop.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub cfg: SgdConfig,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, n_params: usize) -> Self {
        Self {
            cfg,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, model: &mut SoftmaxClassifier, gradient: &[f64]) {
        sgd_step(model, gradient, &self.cfg, &mut self.velocity);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(model: &SoftmaxClassifier, batch: &[WeightedExample<'_>], h: f64) -> Vec<f64> {
        let mut m = model.clone();
        (0..model.params.len())
            .map(|i| {
                let orig = m.params[i];
                m.params[i] = orig + h;
                let up = m.loss(batch).unwrap();
                m.params[i] = orig - h;
                let down = m.loss(batch).unwrap();
                m.params[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_params_give_uniform() {
        let m = SoftmaxClassifier::zeros(Arch::Linear, 3, 4).unwrap();
        let p = m.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariant() {
        for t in [-500.0, 0.0, 3.0, 800.0] {
            let mut v = vec![t; 5];
            softmax_in_place(&mut v);
            assert!(v.iter().all(|&p| (p - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn two_class_logits() {
        // weights row 0 = 2, row 1 = 0, no bias: logits (2, 0) on x = 1
        let mut m = SoftmaxClassifier::zeros(Arch::Linear, 1, 2).unwrap();
        m.params = vec![2.0, 0.0, 0.0, 0.0];
        let p = m.forward(&[1.0]).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let m = SoftmaxClassifier::zeros(Arch::Linear, 3, 2).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(SsaError::DimensionMismatch { .. })));
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let c = 7.0;
        let uniform = vec![1.0 / c; 7];
        assert!((cross_entropy(&uniform, 3).unwrap() - c.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.96, 0.04], 0).unwrap() + 0.96f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let m = SoftmaxClassifier::new(Arch::Mlp { hidden: 3 }, 2, 2, 1).unwrap();
        let x = [0.3, -0.7];
        let g = m.grad(&[WeightedExample::new(&x, 1, 0.0)]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_half_weights_equal_single() {
        let m = SoftmaxClassifier::new(Arch::Linear, 3, 3, 4).unwrap();
        let x = [0.1, 0.2, -0.4];
        let g1 = m.grad(&[WeightedExample::new(&x, 2, 1.0)]).unwrap();
        let g2 = m
            .grad(&[WeightedExample::new(&x, 2, 0.5), WeightedExample::new(&x, 2, 0.5)])
            .unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // softmax layouts have C*(d+1) params, so no 5-parameter linear model
        // exists; the smallest neighbours are used instead
        for (arch, d, c) in [
            (Arch::Linear, 1, 2),
            (Arch::Linear, 2, 2),
            (Arch::Mlp { hidden: 4 }, 3, 3),
        ] {
            let m = SoftmaxClassifier::new(arch, d, c, rng.random()).unwrap();
            let xs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let batch: Vec<WeightedExample> = xs
                .iter()
                .map(|x| WeightedExample::new(x, rng.random_range(0..c), rng.random_range(0.1..1.0)))
                .collect();
            let g = m.grad(&batch).unwrap();
            let fd = fd_grad(&m, &batch, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sgd_zero_gradient_keeps_params() {
        let mut m = SoftmaxClassifier::new(Arch::Linear, 2, 2, 3).unwrap();
        let before = m.params.clone();
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut v = vec![0.0; m.n_params()];
        let zero = vec![0.0; m.n_params()];
        sgd_step(&mut m, &zero, &cfg, &mut v);
        assert_eq!(m.params, before);
    }

    #[test]
    fn sgd_plain_descent_without_momentum() {
        let mut m = SoftmaxClassifier::zeros(Arch::Linear, 1, 1).unwrap();
        m.params = vec![1.0, 2.0];
        let cfg = SgdConfig {
            learning_rate: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut v = vec![0.0; 2];
        sgd_step(&mut m, &[0.2, -0.4], &cfg, &mut v);
        assert_eq!(m.params, vec![0.9, 2.2]);
    }

    #[test]
    fn momentum_iterates() {
        // hand-iterated: v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut m = SoftmaxClassifier::zeros(Arch::Linear, 1, 1).unwrap();
        m.params = vec![0.0, 0.0];
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut v = vec![0.0; 2];
        sgd_step(&mut m, &[1.0, 0.0], &cfg, &mut v);
        assert!((m.params[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut m, &[1.0, 0.0], &cfg, &mut v);
        assert!((m.params[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn separable_toy_set_trains_below_point_one() {
        let data: Vec<(Vec<f64>, usize)> = (0..40)
            .map(|i| {
                let label = i % 2;
                let s = if label == 1 { 1.0 } else { -1.0 };
                (vec![s * (1.0 + (i as f64) * 0.05), 0.3 * (i as f64 % 3.0)], label)
            })
            .collect();
        let batch: Vec<WeightedExample> = data.iter().map(|(x, y)| WeightedExample::new(x, *y, 1.0)).collect();
        let mut m = SoftmaxClassifier::new(Arch::Linear, 2, 2, 9).unwrap();
        let mut opt = Sgd::new(
            SgdConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            m.n_params(),
        );
        let mut steps = 0;
        while m.loss(&batch).unwrap() >= 0.1 {
            let g = m.grad(&batch).unwrap();
            opt.step(&mut m, &g);
            steps += 1;
            assert!(steps <= 2000, "loss did not fall below 0.1");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = SoftmaxClassifier::new(Arch::Mlp { hidden: 5 }, 4, 3, 77).unwrap();
        let back = SoftmaxClassifier::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.arch, m.arch);
        assert_eq!(back.seed, 77);
        let bits = |v: &[f64]| v.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&m.params));
    }

    #[test]
    fn checkpoint_rejects_wrong_count() {
        let m = SoftmaxClassifier::new(Arch::Linear, 2, 2, 1).unwrap();
        let text = m.to_checkpoint().replace("params 6", "params 5");
        assert!(SoftmaxClassifier::from_checkpoint(&text).is_err());
    }
}
