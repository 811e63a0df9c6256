//! Learnable velocity field `v_θ(t, x)` with an EMA shadow parameter set.
//!
//! The network is an MLP over `[embed(t), x]`. One network covers every
//! segment; the segment is implied by `t`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_time, Error, Result};
use crate::field::{check_batch, Field};
use crate::nd::{Activation, NumArray, Tape, Var};
use crate::rng::{stream_rng, Stream};

/// Sinusoidal features of `t` at geometrically spaced frequencies, plus raw `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeEmbedding {
    pub frequencies: usize,
    pub base_frequency: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self {
            frequencies: 8,
            base_frequency: 1.0,
        }
    }
}

impl TimeEmbedding {
    pub fn dim(&self) -> usize {
        2 * self.frequencies + 1
    }

    /// Angular frequency of pair `k`: `base * 2^(k/2)`.
    pub fn frequency(&self, k: usize) -> f64 {
        self.base_frequency * (k as f64 * 0.5).exp2()
    }

    pub fn embed_into(&self, t: f64, out: &mut [f64]) {
        for k in 0..self.frequencies {
            let w = self.frequency(k) * t;
            out[2 * k] = w.sin();
            out[2 * k + 1] = w.cos();
        }
        out[2 * self.frequencies] = t;
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.embed_into(t, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![128; 4],
            activation: Activation::Gelu,
            time_embedding: TimeEmbedding::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::Invalid("data dimension must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        if !(self.time_embedding.base_frequency.is_finite()) {
            return Err(Error::Invalid(
                "time embedding base frequency must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.time_embedding.dim() + self.data_dim
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.data_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Parameter manifest: layer-major, weight then bias, weights `[in, out]` row-major.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(i, &(fi, fo))| {
                [
                    (format!("layer{i}.weight"), vec![fi, fo]),
                    (format!("layer{i}.bias"), vec![fo]),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSet {
    Online,
    Ema,
}

/// MLP velocity field holding online parameters θ and their EMA θ⁻.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    config: NetConfig,
    online: Vec<NumArray>,
    ema: Vec<NumArray>,
}

impl VelocityField {
    /// Fan-in scaled uniform initialization; θ⁻ starts as an exact copy of θ.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut online = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            online.push(NumArray::new(
                vec![fan_in, fan_out],
                draw(fan_in * fan_out),
            )?);
            online.push(NumArray::new(vec![fan_out], draw(fan_out))?);
        }
        let ema = online.clone();
        Ok(Self {
            config,
            online,
            ema,
        })
    }

    pub fn from_params(
        config: NetConfig,
        online: Vec<NumArray>,
        ema: Vec<NumArray>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        for set in [&online, &ema] {
            if set.len() != layout.len() {
                return Err(Error::Shape(format!(
                    "expected {} parameter tensors, got {}",
                    layout.len(),
                    set.len()
                )));
            }
            for ((name, shape), p) in layout.iter().zip(set) {
                if p.shape() != &shape[..] {
                    return Err(Error::Shape(format!(
                        "{name}: {:?} vs {shape:?}",
                        p.shape()
                    )));
                }
            }
        }
        Ok(Self {
            config,
            online,
            ema,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn params(&self, set: ParamSet) -> &[NumArray] {
        match set {
            ParamSet::Online => &self.online,
            ParamSet::Ema => &self.ema,
        }
    }

    pub fn online_mut(&mut self) -> &mut [NumArray] {
        &mut self.online
    }

    pub fn ema_mut(&mut self) -> &mut [NumArray] {
        &mut self.ema
    }

    /// Network input rows `[embed(t_i), x_i]`.
    pub fn features(&self, t: &[f64], x: &NumArray) -> Result<NumArray> {
        check_batch(self.dim(), t, x)?;
        let emb = &self.config.time_embedding;
        let width = self.config.input_dim();
        let mut data = vec![0.0; t.len() * width];
        for (i, (&ti, xi)) in t.iter().zip(x.iter_rows()).enumerate() {
            check_time(ti, 0.0, 1.0)?;
            let row = &mut data[i * width..(i + 1) * width];
            emb.embed_into(ti, &mut row[..emb.dim()]);
            row[emb.dim()..].copy_from_slice(xi);
        }
        NumArray::new(vec![t.len(), width], data)
    }

    /// Side-effect free evaluation under the chosen parameter set.
    pub fn eval(&self, set: ParamSet, t: &[f64], x: &NumArray) -> Result<NumArray> {
        let mut h = self.features(t, x)?;
        let params = self.params(set);
        let last = params.len() / 2 - 1;
        for (layer, wb) in params.chunks(2).enumerate() {
            h = h.matmul(&wb[0])?.add_bias(&wb[1])?;
            if layer < last {
                h = self.config.activation.forward(&h);
            }
        }
        h.ensure_finite("velocity network")
    }

    pub fn eval_point(&self, set: ParamSet, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let x = NumArray::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.eval(set, &[t], &x)?.into_data())
    }

    /// Records the network on `tape`. Online parameters become trainable
    /// leaves; EMA parameters become constants. Returns the output and the
    /// parameter leaves in layout order.
    pub fn record(
        &self,
        tape: &mut Tape,
        set: ParamSet,
        t: &[f64],
        x: &NumArray,
    ) -> Result<(Var, Vec<Var>)> {
        self.record_with(tape, set, set == ParamSet::Online, t, x)
    }

    /// Like [`record`](Self::record) but every parameter is a constant leaf.
    pub fn record_frozen(
        &self,
        tape: &mut Tape,
        set: ParamSet,
        t: &[f64],
        x: &NumArray,
    ) -> Result<(Var, Vec<Var>)> {
        self.record_with(tape, set, false, t, x)
    }

    fn record_with(
        &self,
        tape: &mut Tape,
        set: ParamSet,
        trainable: bool,
        t: &[f64],
        x: &NumArray,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = tape.constant(self.features(t, x)?)?;
        let mut leaves = Vec::new();
        for p in self.params(set) {
            leaves.push(if trainable {
                tape.param(p.clone())?
            } else {
                tape.constant(p.clone())?
            });
        }
        let last = leaves.len() / 2 - 1;
        for (layer, wb) in leaves.chunks(2).enumerate() {
            h = tape.matmul(h, wb[0])?;
            h = tape.add_bias(h, wb[1])?;
            if layer < last {
                h = tape.activation(h, self.config.activation)?;
            }
        }
        Ok((h, leaves))
    }

    /// `θ⁻ ← μ θ⁻ + (1 − μ) θ`.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        for (e, o) in self.ema.iter_mut().zip(&self.online) {
            for (ev, ov) in e.data_mut().iter_mut().zip(o.data()) {
                *ev = decay * *ev + (1.0 - decay) * ov;
            }
        }
        Ok(())
    }

    pub fn view(&self, set: ParamSet) -> FieldView<'_> {
        FieldView { field: self, set }
    }
}

/// A [`VelocityField`] pinned to one parameter set.
#[derive(Clone, Copy)]
pub struct FieldView<'a> {
    pub field: &'a VelocityField,
    pub set: ParamSet,
}

impl Field for FieldView<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn velocity(&self, t: &[f64], x: &NumArray) -> Result<NumArray> {
        self.field.eval(self.set, t, x)
    }
}
