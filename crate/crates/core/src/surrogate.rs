//! Feedforward property predictor `C^H = NN(c_hat, v)` with tanh hidden
//! layers, Levenberg-Marquardt training and analytic input gradients.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogenize::EffectiveStiffness;

pub const MODEL_SCHEMA: &str = "fgs-surrogate/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Linear hidden layers; used to test the gradient plumbing.
    Identity,
}

impl Activation {
    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value `h`.
    #[inline]
    fn slope(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer; `w` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Per-feature affine map of `[lo, hi]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl MinMax {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Invalid("cannot normalize an empty table".into()))?;
        let mut lo = first.clone();
        let mut hi = first.clone();
        for r in rows {
            if r.len() != lo.len() {
                return Err(Error::Invalid("ragged table".into()));
            }
            for (k, &v) in r.iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        Ok(Self { lo, hi })
    }

    fn identity(n: usize) -> Self {
        Self {
            lo: vec![-1.0; n],
            hi: vec![1.0; n],
        }
    }

    /// Half-width; constant features map with unit scale.
    #[inline]
    fn half(&self, k: usize) -> f64 {
        let s = 0.5 * (self.hi[k] - self.lo[k]);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, v)| (v - self.lo[k]) / self.half(k) - 1.0)
            .collect()
    }

    fn inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(k, v)| self.lo[k] + (v + 1.0) * self.half(k))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub schema: String,
    pub activation: Activation,
    pub layers: Vec<Layer>,
    pub input_norm: MinMax,
    pub output_norm: MinMax,
    /// Names of the predicted stiffness components.
    pub responses: Vec<String>,
}

/// Values kept from a forward pass for backpropagation.
struct Trace {
    /// Layer inputs, then the final output.
    h: Vec<Vec<f64>>,
}

impl SurrogateModel {
    /// Random initialization: each weight uniform in `±1/sqrt(fan_in)`,
    /// biases zero.
    pub fn init(
        n_in: usize,
        hidden: &[usize],
        n_out: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if n_in == 0 || n_out == 0 || hidden.contains(&0) {
            return Err(Error::Invalid("layer sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        sizes.push(n_out);
        let layers = sizes
            .windows(2)
            .map(|p| {
                let bound = 1.0 / (p[0] as f64).sqrt();
                Layer {
                    inputs: p[0],
                    outputs: p[1],
                    w: (0..p[0] * p[1])
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    b: vec![0.0; p[1]],
                }
            })
            .collect();
        let responses = default_response_names(n_out);
        Ok(Self {
            schema: MODEL_SCHEMA.into(),
            activation,
            layers,
            input_norm: MinMax::identity(n_in),
            output_norm: MinMax::identity(n_out),
            responses,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Number of basis weights `D` (inputs minus the volume fraction).
    pub fn n_classes(&self) -> usize {
        self.n_inputs() - 1
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.outputs)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(&l.w);
            p.extend_from_slice(&l.b);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter count");
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }

    fn forward_normalized(&self, xn: &[f64]) -> Trace {
        let mut h = Vec::with_capacity(self.layers.len() + 1);
        h.push(xn.to_vec());
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let input = h.last().unwrap();
            let out: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let row = &l.w[o * l.inputs..(o + 1) * l.inputs];
                    let z = l.b[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
                    if li == last {
                        z
                    } else {
                        self.activation.eval(z)
                    }
                })
                .collect();
            h.push(out);
        }
        Trace { h }
    }

    /// Backpropagates `dout` (w.r.t. the normalized output). Writes
    /// parameter gradients into `grad` when given and returns the gradient
    /// w.r.t. the normalized input.
    fn backward(&self, tr: &Trace, dout: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.n_params();
        }
        let mut delta = dout.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let input = &tr.h[li];
            if let Some(g) = grad.as_deref_mut() {
                let off = offsets[li];
                for o in 0..l.outputs {
                    let d = delta[o];
                    let row = &mut g[off + o * l.inputs..off + (o + 1) * l.inputs];
                    row.iter_mut().zip(input).for_each(|(gw, x)| *gw = d * x);
                    g[off + l.w.len() + o] = d;
                }
            }
            let mut prev = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                let d = delta[o];
                if d != 0.0 {
                    let row = &l.w[o * l.inputs..(o + 1) * l.inputs];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
            }
            if li > 0 {
                prev.iter_mut()
                    .zip(input)
                    .for_each(|(p, h)| *p *= self.activation.slope(*h));
            }
            delta = prev;
        }
        delta
    }

    /// Raw prediction for a full input vector `[c_hat..., v]`.
    pub fn predict_raw(&self, input: &[f64]) -> Vec<f64> {
        let tr = self.forward_normalized(&self.input_norm.forward(input));
        self.output_norm.inverse(tr.h.last().unwrap())
    }

    /// Raw prediction and its Jacobian (`outputs x inputs`).
    pub fn jacobian_raw(&self, input: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let tr = self.forward_normalized(&self.input_norm.forward(input));
        let out = self.output_norm.inverse(tr.h.last().unwrap());
        let n_out = self.n_outputs();
        let jac = (0..n_out)
            .map(|k| {
                let mut e = vec![0.0; n_out];
                e[k] = 1.0;
                let dxn = self.backward(&tr, &e, None);
                let so = self.output_norm.half(k);
                dxn.iter()
                    .enumerate()
                    .map(|(i, d)| so * d / self.input_norm.half(i))
                    .collect()
            })
            .collect();
        (out, jac)
    }

    fn check_input(&self, c_hat: &[f64], v: f64) -> Result<Vec<f64>> {
        if c_hat.len() != self.n_classes() {
            return Err(Error::Invalid(format!(
                "surrogate expects {} class weights, got {}",
                self.n_classes(),
                c_hat.len()
            )));
        }
        if !v.is_finite() || c_hat.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite surrogate input".into()));
        }
        let mut x = c_hat.to_vec();
        x.push(v);
        Ok(x)
    }

    pub fn predict(&self, c_hat: &[f64], v: f64) -> Result<EffectiveStiffness> {
        let x = self.check_input(c_hat, v)?;
        EffectiveStiffness::from_components(&self.predict_raw(&x))
    }

    /// `(C, dC/dc_hat[d], dC/dv)`, derivatives as Voigt matrices.
    pub fn predict_with_gradients(
        &self,
        c_hat: &[f64],
        v: f64,
    ) -> Result<(
        EffectiveStiffness,
        Vec<EffectiveStiffness>,
        EffectiveStiffness,
    )> {
        let x = self.check_input(c_hat, v)?;
        let (out, jac) = self.jacobian_raw(&x);
        let n_in = x.len();
        let column = |i: usize| -> Result<EffectiveStiffness> {
            EffectiveStiffness::from_components(&jac.iter().map(|row| row[i]).collect::<Vec<_>>())
        };
        let dc = (0..n_in - 1).map(column).collect::<Result<Vec<_>>>()?;
        Ok((
            EffectiveStiffness::from_components(&out)?,
            dc,
            column(n_in - 1)?,
        ))
    }

    /// `(dC/dc_hat: outputs x D, dC/dv: outputs)` on the component vector.
    pub fn input_gradients(&self, c_hat: &[f64], v: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let x = self.check_input(c_hat, v)?;
        let (_, jac) = self.jacobian_raw(&x);
        let d = c_hat.len();
        let dc = jac.iter().map(|row| row[..d].to_vec()).collect();
        let dv = jac.iter().map(|row| row[d]).collect();
        Ok((dc, dv))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != MODEL_SCHEMA {
            return Err(Error::Invalid(format!(
                "unsupported model schema {:?}",
                self.schema
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Invalid("model has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.w.len() != l.inputs * l.outputs || l.b.len() != l.outputs {
                return Err(Error::Invalid(format!("layer {k} has inconsistent shapes")));
            }
            if k > 0 && self.layers[k - 1].outputs != l.inputs {
                return Err(Error::Invalid(format!("layer {k} does not chain")));
            }
        }
        if !self.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Numerical("model parameters are not finite".into()));
        }
        let (ni, no) = (self.n_inputs(), self.n_outputs());
        if self.input_norm.lo.len() != ni || self.input_norm.hi.len() != ni {
            return Err(Error::Invalid("input normalization size mismatch".into()));
        }
        if self.output_norm.lo.len() != no
            || self.output_norm.hi.len() != no
            || self.responses.len() != no
        {
            return Err(Error::Invalid("output normalization size mismatch".into()));
        }
        if no != 4 && no != 6 {
            return Err(Error::Invalid(format!(
                "surrogate must predict 4 or 6 components, not {no}"
            )));
        }
        Ok(())
    }
}

fn default_response_names(n: usize) -> Vec<String> {
    if n == 4 || n == 6 {
        crate::homogenize::response_names(n)
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        (1..=n).map(|k| format!("y{k}")).collect()
    }
}

/// Input rows `[c_hat..., v]` and target rows (stiffness components).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: Vec<f64>, target: Vec<f64>) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    /// Rows in lexicographic order so training does not depend on the
    /// order records were produced in.
    fn canonical(&self) -> Table {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let cmp = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        };
        idx.sort_by(|&i, &j| {
            cmp(&self.inputs[i], &self.inputs[j])
                .then_with(|| cmp(&self.targets[i], &self.targets[j]))
        });
        Table {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Table,
    pub val: Table,
    pub test: Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub max_epochs: usize,
    pub mu_init: f64,
    pub mu_max: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Largest full Jacobian (bytes) before switching to mini-batches.
    pub jacobian_cap_bytes: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16, 12],
            seed: 0,
            max_epochs: 400,
            mu_init: 1e-3,
            mu_max: 1e10,
            patience: 6,
            jacobian_cap_bytes: 1 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub mse: f64,
    /// Coefficient of determination `1 - SSE/SST` per response.
    pub r2: Vec<f64>,
    pub r2_mean: f64,
    /// Root mean squared error per response in raw units.
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub stop_reason: String,
    pub minibatch: bool,
    pub n_params: usize,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
    pub test: SplitMetrics,
    /// (train MSE, validation MSE) per epoch in normalized units.
    pub history: Vec<(f64, f64)>,
}

/// R² and RMSE per response. A response with zero variance scores 1 when it
/// is reproduced exactly and 0 otherwise.
pub fn split_metrics(model: &SurrogateModel, table: &Table) -> SplitMetrics {
    let n_out = model.n_outputs();
    if table.is_empty() {
        return SplitMetrics {
            mse: 0.0,
            r2: vec![1.0; n_out],
            r2_mean: 1.0,
            rmse: vec![0.0; n_out],
        };
    }
    let preds: Vec<Vec<f64>> = table
        .inputs
        .par_iter()
        .map(|x| model.predict_raw(x))
        .collect();
    let n = table.len() as f64;
    let mut r2 = Vec::with_capacity(n_out);
    let mut rmse = Vec::with_capacity(n_out);
    let mut mse_norm = 0.0;
    for k in 0..n_out {
        let mean = table.targets.iter().map(|t| t[k]).sum::<f64>() / n;
        let sst: f64 = table.targets.iter().map(|t| (t[k] - mean).powi(2)).sum();
        let sse: f64 = table
            .targets
            .iter()
            .zip(&preds)
            .map(|(t, p)| (t[k] - p[k]).powi(2))
            .sum();
        r2.push(if sst > 0.0 {
            1.0 - sse / sst
        } else if sse <= 1e-30 {
            1.0
        } else {
            0.0
        });
        rmse.push((sse / n).sqrt());
        let h = model.output_norm.half(k);
        mse_norm += sse / (h * h);
    }
    let r2_mean = r2.iter().sum::<f64>() / n_out as f64;
    SplitMetrics {
        mse: mse_norm / (n * n_out as f64),
        r2,
        r2_mean,
        rmse,
    }
}

/// Normalized inputs and targets.
struct Normalized {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

fn normalize(model: &SurrogateModel, t: &Table) -> Normalized {
    Normalized {
        x: t.inputs
            .iter()
            .map(|r| model.input_norm.forward(r))
            .collect(),
        y: t.targets
            .iter()
            .map(|r| model.output_norm.forward(r))
            .collect(),
    }
}

fn mse(model: &SurrogateModel, data: &Normalized) -> f64 {
    if data.x.is_empty() {
        return 0.0;
    }
    let sse: f64 = data
        .x
        .par_iter()
        .zip(&data.y)
        .map(|(x, y)| {
            let tr = model.forward_normalized(x);
            tr.h.last()
                .unwrap()
                .iter()
                .zip(y)
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    sse / (data.x.len() * data.y[0].len()) as f64
}

/// Residual rows per block when forming `JᵀJ`.
const BLOCK_ROWS: usize = 2048;

/// Accumulates `JᵀJ` and `Jᵀr` over the given samples, block by block.
fn normal_equations(
    model: &SurrogateModel,
    data: &Normalized,
    rows: &[usize],
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let p = model.n_params();
    let n_out = model.n_outputs();
    let per_block = (BLOCK_ROWS / n_out).max(1);
    let mut jtj = DMatrix::zeros(p, p);
    let mut jtr = DVector::zeros(p);
    let mut sse = 0.0;
    for chunk in rows.chunks(per_block) {
        let parts: Vec<(Vec<f64>, Vec<f64>)> = chunk
            .par_iter()
            .map(|&s| {
                let tr = model.forward_normalized(&data.x[s]);
                let out = tr.h.last().unwrap();
                let mut jrows = vec![0.0; n_out * p];
                let mut res = Vec::with_capacity(n_out);
                let mut e = vec![0.0; n_out];
                for k in 0..n_out {
                    e[k] = 1.0;
                    model.backward(&tr, &e, Some(&mut jrows[k * p..(k + 1) * p]));
                    e[k] = 0.0;
                    res.push(out[k] - data.y[s][k]);
                }
                (jrows, res)
            })
            .collect();
        let m = chunk.len() * n_out;
        // column-major p x m, i.e. Jᵀ for this block
        let mut jt = DMatrix::zeros(p, m);
        let mut r = DVector::zeros(m);
        for (si, (jrows, res)) in parts.iter().enumerate() {
            for k in 0..n_out {
                let col = si * n_out + k;
                jt.column_mut(col)
                    .copy_from_slice(&jrows[k * p..(k + 1) * p]);
                r[col] = res[k];
                sse += res[k] * res[k];
            }
        }
        jtj.gemm(1.0, &jt, &jt.transpose(), 1.0);
        jtr.gemv(1.0, &jt, &r, 1.0);
    }
    (jtj, jtr, sse)
}

/// Trains a surrogate on `data` with Levenberg-Marquardt.
pub fn train_lm(data: &TrainData, opts: &TrainOptions) -> Result<(SurrogateModel, TrainReport)> {
    train_with_activation(data, opts, Activation::Tanh)
}

pub fn train_with_activation(
    data: &TrainData,
    opts: &TrainOptions,
    activation: Activation,
) -> Result<(SurrogateModel, TrainReport)> {
    let train = data.train.canonical();
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    for t in [&data.train, &data.val, &data.test] {
        let bad = t
            .inputs
            .iter()
            .chain(&t.targets)
            .flatten()
            .any(|v| !v.is_finite());
        if bad || t.inputs.len() != t.targets.len() {
            return Err(Error::Invalid(
                "training table has non-finite or missing values".into(),
            ));
        }
    }
    let n_in = train.inputs[0].len();
    let n_out = train.targets[0].len();
    let mut model = SurrogateModel::init(n_in, &opts.hidden, n_out, activation, opts.seed)?;
    model.input_norm = MinMax::fit(&train.inputs)?;
    model.output_norm = MinMax::fit(&train.targets)?;
    let p = model.n_params();
    if train.len() * n_out < 10 * p {
        log::warn!(
            "{} training residuals for {} parameters; at least 10x more residuals are recommended",
            train.len() * n_out,
            p
        );
    }
    let tr_n = normalize(&model, &train);
    let val_n = normalize(&model, &data.val);
    let has_val = !val_n.x.is_empty();

    let total_rows = train.len();
    let jac_bytes = total_rows * n_out * p * std::mem::size_of::<f64>();
    let minibatch = jac_bytes > opts.jacobian_cap_bytes;
    let batch = if minibatch {
        (opts.jacobian_cap_bytes / (n_out * p * std::mem::size_of::<f64>())).clamp(1, total_rows)
    } else {
        total_rows
    };
    if minibatch {
        log::warn!("jacobian of {jac_bytes} bytes exceeds the cap; training on mini-batches of {batch} samples");
    }

    let mut params = DVector::from_vec(model.params());
    let mut mu = opts.mu_init;
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut stale = 0;
    let mut history = Vec::new();
    let mut stop_reason = "max epochs".to_string();
    let mut epochs = 0;

    for epoch in 0..opts.max_epochs {
        let rows: Vec<usize> = if minibatch {
            let start = (epoch * batch) % total_rows;
            (0..batch).map(|k| (start + k) % total_rows).collect()
        } else {
            (0..total_rows).collect()
        };
        let (jtj, jtr, sse) = normal_equations(&model, &tr_n, &rows);
        if !sse.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became non-finite at epoch {epoch}"
            )));
        }
        if sse < 1e-28 || jtr.amax() < 1e-15 {
            stop_reason = "converged".into();
            break;
        }
        let mut accepted = false;
        while mu <= opts.mu_max {
            let mut a = jtj.clone();
            for k in 0..p {
                a[(k, k)] += mu;
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&jtr),
                None => {
                    mu *= 10.0;
                    continue;
                }
            };
            let trial = &params - &step;
            let mut cand = model.clone();
            cand.set_params(trial.as_slice());
            let sub = Normalized {
                x: rows.iter().map(|&s| tr_n.x[s].clone()).collect(),
                y: rows.iter().map(|&s| tr_n.y[s].clone()).collect(),
            };
            let new_sse = mse(&cand, &sub) * (rows.len() * n_out) as f64;
            if new_sse.is_finite() && new_sse < sse {
                params = trial;
                model = cand;
                mu = (mu / 10.0).max(1e-20);
                accepted = true;
                break;
            }
            mu *= 10.0;
        }
        epochs = epoch + 1;
        if !accepted {
            stop_reason = "damping limit".into();
            break;
        }
        let train_mse = mse(&model, &tr_n);
        let val_mse = if has_val {
            mse(&model, &val_n)
        } else {
            train_mse
        };
        history.push((train_mse, val_mse));
        if val_mse < best.0 {
            best = (val_mse, params.clone(), epochs);
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                stop_reason = "validation stalled".into();
                break;
            }
        }
    }
    if best.0.is_finite() {
        model.set_params(best.1.as_slice());
    }
    let report = TrainReport {
        epochs,
        best_epoch: best.2,
        stop_reason,
        minibatch,
        n_params: p,
        train: split_metrics(&model, &data.train),
        val: split_metrics(&model, &data.val),
        test: split_metrics(&model, &data.test),
        history,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_table(n: usize, seed: u64) -> Table {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Table::default();
        for _ in 0..n {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y = vec![
                2.0 * x[0] - x[1] + 0.5 * x[2] + 0.1,
                x[0] + x[1],
                -0.3 * x[2] + 1.0,
                0.7 * x[0] - 0.2,
            ];
            t.push(x, y);
        }
        t
    }

    fn small_model(act: Activation) -> SurrogateModel {
        let mut m = SurrogateModel::init(3, &[5, 4], 4, act, 3).unwrap();
        m.input_norm = MinMax {
            lo: vec![0.0, -1.0, 0.2],
            hi: vec![1.0, 2.0, 0.9],
        };
        m.output_norm = MinMax {
            lo: vec![0.0, -0.5, 0.1, 0.0],
            hi: vec![2.0, 0.5, 0.4, 3.0],
        };
        let p: Vec<f64> = m
            .params()
            .iter()
            .enumerate()
            .map(|(k, v)| v + 0.05 * (k as f64).sin())
            .collect();
        m.set_params(&p);
        m
    }

    #[test]
    fn fits_a_linear_map() {
        let data = TrainData {
            train: linear_table(200, 1),
            val: linear_table(40, 2),
            test: linear_table(40, 3),
        };
        let opts = TrainOptions {
            hidden: vec![8],
            max_epochs: 200,
            ..Default::default()
        };
        let (_, rep) = train_lm(&data, &opts).unwrap();
        assert!(
            rep.test.r2.iter().all(|r| *r >= 0.9999),
            "{:?}",
            rep.test.r2
        );
    }

    #[test]
    fn training_ignores_record_order() {
        let t = linear_table(60, 4);
        let mut rev = t.clone();
        rev.inputs.reverse();
        rev.targets.reverse();
        let opts = TrainOptions {
            hidden: vec![6],
            max_epochs: 30,
            ..Default::default()
        };
        let val = linear_table(20, 5);
        let a = train_lm(
            &TrainData {
                train: t,
                val: val.clone(),
                test: Table::default(),
            },
            &opts,
        )
        .unwrap()
        .0;
        let b = train_lm(
            &TrainData {
                train: rev,
                val,
                test: Table::default(),
            },
            &opts,
        )
        .unwrap()
        .0;
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn input_gradients_match_central_differences() {
        let m = small_model(Activation::Tanh);
        let x = [0.3, 0.4, 0.55];
        let (_, jac) = m.jacobian_raw(&x);
        let h = 1e-5;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let (fp, fm) = (m.predict_raw(&xp), m.predict_raw(&xm));
            for k in 0..4 {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                let rel = (fd - jac[k][i]).abs() / jac[k][i].abs().max(1e-3);
                assert!(rel <= 1e-6, "out {k} in {i}: {fd} vs {}", jac[k][i]);
            }
        }
    }

    #[test]
    fn linear_network_gradient_is_the_weight_product() {
        let m = small_model(Activation::Identity);
        let (_, jac) = m.jacobian_raw(&[0.1, 0.2, 0.3]);
        let as_mat = |l: &Layer| DMatrix::from_row_slice(l.outputs, l.inputs, &l.w);
        let w = m
            .layers
            .iter()
            .rev()
            .map(as_mat)
            .reduce(|acc, x| acc * x)
            .unwrap();
        for k in 0..4 {
            for i in 0..3 {
                let expect = m.output_norm.half(k) * w[(k, i)] / m.input_norm.half(i);
                assert!((jac[k][i] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn constant_model_has_zero_gradient() {
        let mut m = small_model(Activation::Tanh);
        let last = m.layers.last_mut().unwrap();
        last.w.iter_mut().for_each(|w| *w = 0.0);
        let (dc, dv) = m.input_gradients(&[0.2, 0.3], 0.5).unwrap();
        assert!(dc.iter().flatten().chain(&dv).all(|g| *g == 0.0));
    }

    #[test]
    fn parameter_jacobian_matches_differences() {
        let m = small_model(Activation::Tanh);
        let data = normalize(&m, &linear_table(3, 9));
        let (_, jtr, sse) = normal_equations(&m, &data, &[0, 1, 2]);
        // Jᵀr is half the gradient of the sum of squared residuals
        let p0 = m.params();
        let h = 1e-6;
        for k in [0, 7, 20, p0.len() - 1] {
            let mut pp = p0.clone();
            let mut pm = p0.clone();
            pp[k] += h;
            pm[k] -= h;
            let mut a = m.clone();
            a.set_params(&pp);
            let mut b = m.clone();
            b.set_params(&pm);
            let fd = (mse(&a, &data) - mse(&b, &data)) * 12.0 / (2.0 * h);
            assert!(
                (fd - 2.0 * jtr[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{k}: {fd} {}",
                2.0 * jtr[k]
            );
        }
        assert!(sse > 0.0);
    }

    #[test]
    fn minibatch_fallback_is_flagged() {
        let data = TrainData {
            train: linear_table(100, 1),
            val: linear_table(20, 2),
            test: Table::default(),
        };
        let opts = TrainOptions {
            hidden: vec![4],
            max_epochs: 20,
            jacobian_cap_bytes: 20_000,
            ..Default::default()
        };
        let (_, rep) = train_lm(&data, &opts).unwrap();
        assert!(rep.minibatch);
        assert!(rep.val.mse < 1.0);
    }

    #[test]
    fn save_load_round_trip() {
        let m = small_model(Activation::Tanh);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(SurrogateModel::load(&path).unwrap(), m);
        assert!(matches!(
            SurrogateModel::load(&dir.path().join("none.json")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn rejects_wrong_class_count() {
        let m = small_model(Activation::Tanh);
        assert!(m.predict(&[0.1, 0.2, 0.3], 0.4).is_err());
        let a = m.predict(&[0.1, 0.2], 0.4).unwrap();
        assert_eq!(a, m.predict(&[0.1, 0.2], 0.4).unwrap());
    }
}
