//! Differentiable downstream classifiers `p(y | x)` used to steer and judge
//! counterfactuals.
//!
//! A classifier is a feature map `phi(x)` followed by a head producing
//! logits. Both pieces expose analytic vector-Jacobian products so the input
//! gradient of `log p(y | x)` is exact.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{silu, silu_grad};
use crate::error::{Error, Result};
use crate::metrics::{argmax, softmax, unit_rows};
use crate::optim::{Adam, TrainConfig};
use crate::sample::{check_finite, Mat, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    SoftmaxLinear,
    SmallDense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    /// Row-major flattening of the `R x L` sample.
    RawFlatten,
    /// Strict upper triangle of the region correlation matrix.
    FcFeatures,
}

macro_rules! kebab_enum {
    ($ty:ident { $($var:ident => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $name),* })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$var),)*
                    _ => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), s
                    ))),
                }
            }
        }
    };
}

kebab_enum!(ClassifierKind { SoftmaxLinear => "softmax-linear", SmallDense => "small-dense" });
kebab_enum!(FeatureMap { RawFlatten => "raw-flatten", FcFeatures => "fc-features" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub feature_map: FeatureMap,
    pub classes: usize,
    /// Hidden width for `small-dense`; ignored otherwise.
    pub hidden: usize,
    pub regions: usize,
    pub timepoints: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes < 2 {
            return bad(format!("classifier needs at least 2 classes, got {}", self.classes));
        }
        if self.regions == 0 || self.timepoints == 0 {
            return bad("classifier input shape must be positive".into());
        }
        if self.feature_map == FeatureMap::FcFeatures && (self.regions < 2 || self.timepoints < 2) {
            return bad("fc-features need at least 2 regions and 2 timepoints".into());
        }
        if self.kind == ClassifierKind::SmallDense && self.hidden == 0 {
            return bad("small-dense hidden width must be positive".into());
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.feature_map {
            FeatureMap::RawFlatten => self.regions * self.timepoints,
            FeatureMap::FcFeatures => self.regions * (self.regions - 1) / 2,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, c, h) = (self.feature_dim(), self.classes, self.hidden);
        match self.kind {
            ClassifierKind::SoftmaxLinear => c * d + c,
            ClassifierKind::SmallDense => h * d + h + c * h + c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Classifier {
    pub config: ClassifierConfig,
    /// `softmax-linear`: `W (C x D)`, `b (C)`.
    /// `small-dense`: `W1 (H x D)`, `b1 (H)`, `W2 (C x H)`, `b2 (C)`.
    pub weights: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Forward {
    features: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn fc_upper(u: &Mat) -> Vec<f64> {
    let r = u.nrows();
    let mut out = Vec::with_capacity(r * (r - 1) / 2);
    for i in 0..r {
        for j in i + 1..r {
            out.push(u.row(i).dot(&u.row(j)));
        }
    }
    out
}

fn matvec(w: &[f64], rows: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..rows)
        .map(|i| w[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[i])
        .collect()
}

/// `W^T g` for row-major `W (rows x d)`.
fn matvec_t(w: &[f64], d: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (i, gi) in g.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w[i * d..(i + 1) * d]) {
            *o += gi * wij;
        }
    }
    out
}

impl Classifier {
    pub fn zeros(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let weights = vec![0.0; config.param_count()];
        Ok(Classifier { config, weights })
    }

    /// Glorot-uniform hidden layer, zero head and biases.
    pub fn init(config: ClassifierConfig, seed: u64) -> Result<Self> {
        let mut clf = Classifier::zeros(config)?;
        if clf.config.kind == ClassifierKind::SmallDense {
            let (d, h) = (clf.config.feature_dim(), clf.config.hidden);
            let limit = (6.0 / (d + h) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for w in &mut clf.weights[..h * d] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(clf)
    }

    pub fn from_weights(config: ClassifierConfig, weights: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if weights.len() != config.param_count() {
            return Err(Error::shape(config.param_count(), weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("classifier weights".into()));
        }
        Ok(Classifier { config, weights })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        let want = (self.config.regions, self.config.timepoints);
        if x.dim() != want {
            return Err(Error::shape(format!("{want:?}"), format!("{:?}", x.dim())));
        }
        check_finite(x, "classifier input")
    }

    pub fn features(&self, x: &Mat) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.features_unchecked(x))
    }

    fn features_unchecked(&self, x: &Mat) -> Vec<f64> {
        match self.config.feature_map {
            FeatureMap::RawFlatten => x.iter().copied().collect(),
            FeatureMap::FcFeatures => fc_upper(&unit_rows(x).0),
        }
    }

    fn forward_features(&self, features: Vec<f64>) -> Forward {
        let (d, c, h) = (self.config.feature_dim(), self.config.classes, self.config.hidden);
        let w = &self.weights;
        match self.config.kind {
            ClassifierKind::SoftmaxLinear => {
                let logits = matvec(&w[..c * d], c, &features, &w[c * d..]);
                Forward { features, pre: Vec::new(), hidden: Vec::new(), probs: softmax(&logits) }
            }
            ClassifierKind::SmallDense => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let pre = matvec(w1, h, &features, b1);
                let hidden: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
                let logits = matvec(w2, c, &hidden, b2);
                Forward { features, pre, hidden, probs: softmax(&logits) }
            }
        }
    }

    pub fn posterior(&self, x: &Mat) -> Result<Vec<f64>> {
        Ok(self.forward_features(self.features(x)?).probs)
    }

    pub fn predict(&self, x: &Mat) -> Result<usize> {
        Ok(argmax(&self.posterior(x)?))
    }

    /// Gradient of `log p(y | x)` with respect to the features, given
    /// `dlogits = onehot(y) - p`.
    fn feature_grad(&self, fw: &Forward, dlogits: &[f64]) -> Vec<f64> {
        let (d, c, h) = (self.config.feature_dim(), self.config.classes, self.config.hidden);
        match self.config.kind {
            ClassifierKind::SoftmaxLinear => matvec_t(&self.weights[..c * d], d, dlogits),
            ClassifierKind::SmallDense => {
                let w2 = &self.weights[h * d + h..h * d + h + c * h];
                let dh = matvec_t(w2, h, dlogits);
                let dpre: Vec<f64> = dh.iter().zip(&fw.pre).map(|(g, p)| g * silu_grad(*p)).collect();
                matvec_t(&self.weights[..h * d], d, &dpre)
            }
        }
    }

    fn input_grad(&self, x: &Mat, dfeat: &[f64]) -> Mat {
        let (r, l) = (self.config.regions, self.config.timepoints);
        match self.config.feature_map {
            FeatureMap::RawFlatten => {
                Array2::from_shape_vec((r, l), dfeat.to_vec()).expect("feature length is R*L")
            }
            FeatureMap::FcFeatures => {
                // corr_ij = u_i . u_j with u_i = a_i / |a_i|, a_i = x_i - mean(x_i)
                let (u, norms) = unit_rows(x);
                let mut du = Array2::<f64>::zeros((r, l));
                let mut k = 0;
                for i in 0..r {
                    for j in i + 1..r {
                        let g = dfeat[k];
                        k += 1;
                        if g != 0.0 {
                            du.row_mut(i).scaled_add(g, &u.row(j));
                            du.row_mut(j).scaled_add(g, &u.row(i));
                        }
                    }
                }
                let mut dx = Array2::<f64>::zeros((r, l));
                for i in 0..r {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let ui = u.row(i);
                    let proj = ui.dot(&du.row(i));
                    let mut da = &du.row(i) - &(&ui * proj);
                    da /= norms[i];
                    let mean = da.sum() / l as f64;
                    da.mapv_inplace(|v| v - mean);
                    dx.row_mut(i).assign(&da);
                }
                dx
            }
        }
    }

    /// `(p(y | x), d log p(y | x) / dx)`.
    pub fn posterior_and_input_grad(&self, x: &Mat, y: usize) -> Result<(f64, Mat)> {
        if y >= self.config.classes {
            return Err(Error::InvalidArgument(format!(
                "class {y} outside 0..{}",
                self.config.classes
            )));
        }
        self.check_input(x)?;
        let fw = self.forward_features(self.features_unchecked(x));
        let dlogits: Vec<f64> = fw
            .probs
            .iter()
            .enumerate()
            .map(|(c, p)| if c == y { 1.0 - p } else { -p })
            .collect();
        let dfeat = self.feature_grad(&fw, &dlogits);
        Ok((fw.probs[y], self.input_grad(x, &dfeat)))
    }

    /// Mean cross-entropy over `batch` and its gradient in weight order.
    fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> (f64, Vec<f64>) {
        let (d, c, h) = (self.config.feature_dim(), self.config.classes, self.config.hidden);
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        for (feat, y) in batch {
            let fw = self.forward_features(feat.to_vec());
            loss -= fw.probs[*y].max(f64::MIN_POSITIVE).ln() / n;
            // d loss / d logits
            let dz: Vec<f64> = fw
                .probs
                .iter()
                .enumerate()
                .map(|(k, p)| (p - if k == *y { 1.0 } else { 0.0 }) / n)
                .collect();
            let (input, off) = match self.config.kind {
                ClassifierKind::SoftmaxLinear => (&fw.features, 0),
                ClassifierKind::SmallDense => (&fw.hidden, h * d + h),
            };
            let width = input.len();
            for k in 0..c {
                for (g, v) in grad[off + k * width..off + (k + 1) * width].iter_mut().zip(input) {
                    *g += dz[k] * v;
                }
                grad[off + c * width + k] += dz[k];
            }
            if self.config.kind == ClassifierKind::SmallDense {
                let w2 = &self.weights[h * d + h..h * d + h + c * h];
                let dh = matvec_t(w2, h, &dz);
                for i in 0..h {
                    let dp = dh[i] * silu_grad(fw.pre[i]);
                    for (g, v) in grad[i * d..(i + 1) * d].iter_mut().zip(&fw.features) {
                        *g += dp * v;
                    }
                    grad[h * d + i] += dp;
                }
            }
        }
        (loss, grad)
    }

    /// Mini-batch Adam on cross-entropy over labelled samples.
    pub fn train(
        config: ClassifierConfig,
        data: &[Sample],
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<(Classifier, Vec<f64>)> {
        cfg.validate()?;
        let mut clf = Classifier::init(config, seed)?;
        let mut items = Vec::with_capacity(data.len());
        for s in data {
            let y = s.label.ok_or_else(|| {
                Error::InvalidArgument(format!("training sample {} has no label", s.id))
            })?;
            if y >= clf.config.classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {} label {y} outside 0..{}",
                    s.id, clf.config.classes
                )));
            }
            items.push((clf.features(&s.values)?, y));
        }
        if items.is_empty() {
            return Err(Error::InvalidArgument("classifier training data is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(clf.weights.len());
        let per_epoch = items.len().div_ceil(cfg.batch);
        let total = per_epoch * cfg.epochs;
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let batch: Vec<(&[f64], usize)> =
                    chunk.iter().map(|&i| (items[i].0.as_slice(), items[i].1)).collect();
                let (loss, grad) = clf.loss_and_grad(&batch);
                adam.step_with_lr(&mut clf.weights, &grad, cfg, cfg.lr_at(step, total))?;
                step += 1;
                epoch += loss * batch.len() as f64;
            }
            losses.push(epoch / items.len() as f64);
        }
        if clf.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("classifier weights after training".into()));
        }
        Ok((clf, losses))
    }

    /// Fraction of labelled samples predicted correctly.
    pub fn accuracy(&self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for s in data {
            if Some(self.predict(&s.values)?) == s.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Classifier = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Classifier::from_weights(raw.config, raw.weights)
    }
}
