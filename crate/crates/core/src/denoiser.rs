//! Trainable denoisers `D(x_t, t) -> x0_hat`.
//!
//! Two architectures share one flat parameter vector with named segments:
//!
//! * `Dense`: `flatten(x_t) ++ emb(t/T)` through two SiLU hidden layers and a
//!   linear head reshaped back to `regions x timepoints`.
//! * `WindowedAttention`: timepoints are tokens; one single-head self-attention
//!   block restricted to non-overlapping windows of `window_len` tokens,
//!   followed by a residual SiLU MLP and a linear head.
//!
//! Both add a learned scalar skip term `g * x_t`. SiLU is `x * sigmoid(x)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::sample::{check_finite, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Dense,
    WindowedAttention,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Dense => "dense",
            Arch::WindowedAttention => "windowed-attention",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Arch::Dense),
            "windowed-attention" => Ok(Arch::WindowedAttention),
            other => Err(Error::InvalidArgument(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub arch: Arch,
    pub hidden_dim: usize,
    /// Sinusoidal channels for `t/T`; must be even.
    pub time_embed_dim: usize,
    /// Attention window in timepoints; ignored by `Dense`.
    pub window_len: usize,
    pub regions: usize,
    pub timepoints: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn dense(regions: usize, timepoints: usize) -> Self {
        DenoiserConfig {
            arch: Arch::Dense,
            hidden_dim: 128,
            time_embed_dim: 16,
            window_len: timepoints,
            regions,
            timepoints,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.hidden_dim == 0 || self.regions == 0 || self.timepoints == 0 {
            return bad(format!("denoiser dimensions must be positive: {self:?}"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!(
                "time_embed_dim must be positive and even, got {}",
                self.time_embed_dim
            ));
        }
        if self.arch == Arch::WindowedAttention
            && (self.window_len == 0 || !self.timepoints.is_multiple_of(self.window_len))
        {
            return bad(format!(
                "window_len {} must divide timepoints {}",
                self.window_len, self.timepoints
            ));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let (h, e, r) = (self.hidden_dim, self.time_embed_dim, self.regions);
        match self.arch {
            Arch::Dense => {
                let d = self.regions * self.timepoints;
                vec![
                    ("w1", d + e, h),
                    ("b1", 1, h),
                    ("w2", h, h),
                    ("b2", 1, h),
                    ("w_out", h, d),
                    ("b_out", 1, d),
                    ("skip", 1, 1),
                ]
            }
            Arch::WindowedAttention => vec![
                ("w_in", r + e, h),
                ("b_in", 1, h),
                ("wq", h, h),
                ("wk", h, h),
                ("wv", h, h),
                ("w1", h, h),
                ("b1", 1, h),
                ("w2", h, h),
                ("b2", 1, h),
                ("w_out", h, r),
                ("b_out", 1, r),
                ("skip", 1, 1),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One `(x_t, t, target)` training triple.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x_t: Mat,
    pub t: usize,
    pub target: Mat,
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub params: Vec<f64>,
    /// Gradient of the loss with respect to each batch item's `x_t`.
    pub inputs: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    steps: usize,
    segments: Vec<Segment>,
    params: Vec<f64>,
}

struct Forward {
    params: Vec<Var>,
    inputs: Vec<Var>,
    /// Dense: one `B x (R*L)` node. Attention: one `L x R` node per item.
    outputs: Vec<Var>,
}

impl DenoiserNet {
    /// Seeded Glorot-uniform hidden weights; the output head, biases and skip
    /// gain start at zero, so a fresh network predicts `x0_hat = 0`. Parameters are
    /// rounded to `f32` precision so checkpoints reproduce them exactly.
    pub fn new(config: &DenoiserConfig, steps: usize) -> Result<Self> {
        Self::with_init_seed(config, steps, config.seed)
    }

    /// Like `new`, but draws the initial weights from `init_seed`.
    pub fn with_init_seed(config: &DenoiserConfig, steps: usize, init_seed: u64) -> Result<Self> {
        config.validate()?;
        if steps == 0 {
            return Err(Error::InvalidArgument("denoiser needs T >= 1".into()));
        }
        let mut offset = 0;
        let segments: Vec<Segment> = config
            .layer_shapes()
            .into_iter()
            .map(|(name, rows, cols)| {
                let seg = Segment {
                    name: name.to_string(),
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                seg
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = vec![0.0; offset];
        for seg in &segments {
            if seg.rows == 1 || seg.name == "w_out" {
                continue;
            }
            let a = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
            for p in &mut params[seg.offset..seg.offset + seg.len()] {
                *p = rng.random_range(-a..a);
            }
        }
        let mut net = DenoiserNet {
            config: config.clone(),
            steps,
            segments,
            params,
        };
        net.snap_to_f32();
        Ok(net)
    }

    /// Rebuilds a network from stored parameters (checkpoint loading).
    pub fn from_params(config: &DenoiserConfig, steps: usize, params: Vec<f64>) -> Result<Self> {
        let mut net = DenoiserNet::new(config, steps)?;
        if params.len() != net.params.len() {
            return Err(Error::shape(
                format!("{} parameters", net.params.len()),
                format!("{} parameters", params.len()),
            ));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Deep copy; the copy shares nothing with `self`.
    pub fn clone_params(&self) -> DenoiserNet {
        self.clone()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Zeroes the output projection, its bias and the skip gain.
    pub fn zero_output_head(&mut self) {
        for name in ["w_out", "b_out", "skip"] {
            let seg = self.segment(name).cloned().expect("head segment");
            self.params[seg.offset..seg.offset + seg.len()].fill(0.0);
        }
    }

    pub fn snap_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn check_input(&self, x_t: &Mat, t: usize) -> Result<()> {
        let expected = (self.config.regions, self.config.timepoints);
        if x_t.dim() != expected {
            return Err(Error::shape(format!("{expected:?}"), format!("{:?}", x_t.dim())));
        }
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                min: 1,
                max: self.steps,
            });
        }
        check_finite(x_t, "denoiser input")
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let tau = t as f64 / self.steps as f64;
        let half = self.config.time_embed_dim / 2;
        let mut emb = Vec::with_capacity(2 * half);
        for i in 0..half {
            let freq = 1000.0 * 10000f64.powf(-(i as f64) / half as f64);
            emb.push((tau * freq).sin());
        }
        for i in 0..half {
            let freq = 1000.0 * 10000f64.powf(-(i as f64) / half as f64);
            emb.push((tau * freq).cos());
        }
        emb
    }

    fn forward(&self, tape: &mut Tape, items: &[(&Mat, usize)]) -> Forward {
        let params: Vec<Var> = self
            .segments
            .iter()
            .map(|seg| {
                let data = self.params[seg.offset..seg.offset + seg.len()].to_vec();
                tape.leaf(Array2::from_shape_vec((seg.rows, seg.cols), data).expect("segment"))
            })
            .collect();
        match self.config.arch {
            Arch::Dense => self.forward_dense(tape, params, items),
            Arch::WindowedAttention => self.forward_attention(tape, params, items),
        }
    }

    fn forward_dense(&self, tape: &mut Tape, p: Vec<Var>, items: &[(&Mat, usize)]) -> Forward {
        let d = self.config.regions * self.config.timepoints;
        let e = self.config.time_embed_dim;
        let mut x = Array2::zeros((items.len(), d));
        let mut emb = Array2::zeros((items.len(), e));
        for (b, (x_t, t)) in items.iter().enumerate() {
            x.row_mut(b)
                .assign(&x_t.view().into_shape_with_order(d).expect("row-major sample"));
            emb.row_mut(b).assign(&ndarray::Array1::from(self.time_embedding(*t)));
        }
        let x = tape.leaf(x);
        let emb = tape.leaf(emb);
        let input = tape.concat_cols(&[x, emb]);
        let h = tape.matmul(input, p[0]);
        let h = tape.add_row(h, p[1]);
        let h = tape.silu(h);
        let h = tape.matmul(h, p[2]);
        let h = tape.add_row(h, p[3]);
        let h = tape.silu(h);
        let out = tape.matmul(h, p[4]);
        let out = tape.add_row(out, p[5]);
        let skip = tape.mul_scalar(x, p[6]);
        let out = tape.add(out, skip);
        Forward {
            params: p,
            inputs: vec![x],
            outputs: vec![out],
        }
    }

    /// Builds the attention block for one sample; returns (input, output, attention maps).
    fn attention_item(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x_t: &Mat,
        t: usize,
    ) -> (Var, Var, Vec<Var>) {
        let l = self.config.timepoints;
        let w = self.config.window_len;
        let h_dim = self.config.hidden_dim;
        let emb = ndarray::Array1::from(self.time_embedding(t));
        let emb = emb
            .insert_axis(Axis(0))
            .broadcast((l, self.config.time_embed_dim))
            .expect("broadcast")
            .to_owned();
        let x = tape.leaf(x_t.t().to_owned());
        let emb = tape.leaf(emb);
        let input = tape.concat_cols(&[x, emb]);
        let h0 = tape.matmul(input, p[0]);
        let h0 = tape.add_row(h0, p[1]);
        let inv_sqrt = 1.0 / (h_dim as f64).sqrt();
        let mut mixed = Vec::with_capacity(l / w);
        let mut maps = Vec::with_capacity(l / w);
        for start in (0..l).step_by(w) {
            let hw = tape.slice_rows(h0, start, w);
            let q = tape.matmul(hw, p[2]);
            let k = tape.matmul(hw, p[3]);
            let v = tape.matmul(hw, p[4]);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax_rows(scores);
            maps.push(attn);
            mixed.push(tape.matmul(attn, v));
        }
        let att = tape.concat_rows(&mixed);
        let h1 = tape.add(h0, att);
        let m = tape.matmul(h1, p[5]);
        let m = tape.add_row(m, p[6]);
        let m = tape.silu(m);
        let m = tape.matmul(m, p[7]);
        let m = tape.add_row(m, p[8]);
        let h2 = tape.add(h1, m);
        let out = tape.matmul(h2, p[9]);
        let out = tape.add_row(out, p[10]);
        let skip = tape.mul_scalar(x, p[11]);
        let out = tape.add(out, skip);
        (x, out, maps)
    }

    fn forward_attention(&self, tape: &mut Tape, p: Vec<Var>, items: &[(&Mat, usize)]) -> Forward {
        let mut inputs = Vec::with_capacity(items.len());
        let mut outputs = Vec::with_capacity(items.len());
        for (x_t, t) in items {
            let (x, out, _) = self.attention_item(tape, &p, x_t, *t);
            inputs.push(x);
            outputs.push(out);
        }
        Forward {
            params: p,
            inputs,
            outputs,
        }
    }

    fn collect_outputs(&self, tape: &Tape, fwd: &Forward, n: usize) -> Vec<Mat> {
        let shape = (self.config.regions, self.config.timepoints);
        match self.config.arch {
            Arch::Dense => {
                let out = tape.value(fwd.outputs[0]);
                (0..n)
                    .map(|b| {
                        out.row(b)
                            .to_owned()
                            .into_shape_with_order(shape)
                            .expect("reshape")
                    })
                    .collect()
            }
            Arch::WindowedAttention => fwd
                .outputs
                .iter()
                .map(|&o| tape.value(o).t().to_owned())
                .collect(),
        }
    }

    /// Denoised estimate `x0_hat` for a single noisy sample at step `t`.
    pub fn denoise(&self, x_t: &Mat, t: usize) -> Result<Mat> {
        self.check_input(x_t, t)?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &[(x_t, t)]);
        Ok(self.collect_outputs(&tape, &fwd, 1).pop().expect("one output"))
    }

    pub fn denoise_batch(&self, items: &[(&Mat, usize)]) -> Result<Vec<Mat>> {
        for (x, t) in items {
            self.check_input(x, *t)?;
        }
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, items);
        Ok(self.collect_outputs(&tape, &fwd, items.len()))
    }

    /// Row-stochastic attention maps for each window (attention only).
    pub fn attention_weights(&self, x_t: &Mat, t: usize) -> Result<Vec<Mat>> {
        self.check_input(x_t, t)?;
        if self.config.arch != Arch::WindowedAttention {
            return Err(Error::InvalidArgument("dense network has no attention".into()));
        }
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &[]);
        let (_, _, maps) = self.attention_item(&mut tape, &fwd.params, x_t, t);
        Ok(maps.iter().map(|&m| tape.value(m).clone()).collect())
    }

    /// Mean over the batch of `||D(x_t) - target||^2 / (R * L)` and its
    /// gradient with respect to the parameters.
    pub fn loss_and_grad(&self, batch: &[TrainItem]) -> Result<(f64, Vec<f64>)> {
        let full = self.loss_and_grads_full(batch)?;
        Ok((full.loss, full.params))
    }

    pub fn loss_and_grads_full(&self, batch: &[TrainItem]) -> Result<LossGrads> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        for item in batch {
            self.check_input(&item.x_t, item.t)?;
            if item.target.dim() != item.x_t.dim() {
                return Err(Error::shape(
                    format!("{:?}", item.x_t.dim()),
                    format!("{:?}", item.target.dim()),
                ));
            }
        }
        let (r, l) = (self.config.regions, self.config.timepoints);
        let items: Vec<(&Mat, usize)> = batch.iter().map(|b| (&b.x_t, b.t)).collect();
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &items);
        let sse = match self.config.arch {
            Arch::Dense => {
                let mut target = Array2::zeros((batch.len(), r * l));
                for (b, item) in batch.iter().enumerate() {
                    target
                        .row_mut(b)
                        .assign(&item.target.view().into_shape_with_order(r * l).expect("row-major"));
                }
                tape.squared_error(fwd.outputs[0], target)
            }
            Arch::WindowedAttention => {
                let parts: Vec<Var> = fwd
                    .outputs
                    .iter()
                    .zip(batch)
                    .map(|(&o, item)| tape.squared_error(o, item.target.t().to_owned()))
                    .collect();
                tape.sum(&parts)
            }
        };
        let loss = tape.scale(sse, 1.0 / (batch.len() * r * l) as f64);
        let grads = tape.backward(loss);

        let mut flat = vec![0.0; self.params.len()];
        for (seg, &var) in self.segments.iter().zip(&fwd.params) {
            let g = grads.wrt(&tape, var);
            flat[seg.offset..seg.offset + seg.len()]
                .copy_from_slice(g.as_slice().expect("standard layout"));
        }
        let inputs = match self.config.arch {
            Arch::Dense => {
                let g = grads.wrt(&tape, fwd.inputs[0]);
                (0..batch.len())
                    .map(|b| g.row(b).to_owned().into_shape_with_order((r, l)).expect("reshape"))
                    .collect()
            }
            Arch::WindowedAttention => fwd
                .inputs
                .iter()
                .map(|&x| grads.wrt(&tape, x).t().to_owned())
                .collect(),
        };
        Ok(LossGrads {
            loss: tape.scalar(loss),
            params: flat,
            inputs,
        })
    }
}
