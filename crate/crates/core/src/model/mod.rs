//! Forecasters: a temporal-token Transformer, a variate-token Transformer,
//! and MMformer (variate tokens, meta-learned attention, MC-dropout FFN).
//!
//! All three share one encoder block:
//! attention → residual → layer norm → FFN (dropout) → residual → layer norm,
//! followed by a per-token projection head.

mod params;

pub use params::{Bound, ParamSet};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::NormStat;
use crate::error::{Error, Result};
use crate::nn::{self, AffineLayer, FeedForward, LayerNorm, MultiHeadAttention};
use crate::rng::Rng;
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One token per time step, sinusoidal positions, last-token pooling.
    TemporalTransformer,
    /// One token per feature series (inverted layout).
    VariateTransformer,
    /// Variate tokens with meta-learned attention and MC dropout.
    Mmformer,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::TemporalTransformer => "temporal_transformer",
            Variant::VariateTransformer => "variate_transformer",
            Variant::Mmformer => "mmformer",
        })
    }
}

fn default_layer_norm_eps() -> f64 {
    nn::LAYER_NORM_EPS
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub lookback: usize,
    pub horizon: usize,
    /// 0 means "take it from the dataset".
    #[serde(default)]
    pub num_features: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    /// Hidden width of the variate embedding MLP; defaults to `model_dim`.
    #[serde(default)]
    pub embed_hidden: Option<usize>,
    pub dropout: f64,
    pub mc_passes: usize,
    #[serde(default)]
    pub disable_maml: bool,
    #[serde(default)]
    pub disable_mc_dropout: bool,
    /// Learned per-lookback-position bias inside the variate embedding.
    /// Defaults to on for MMformer, off otherwise.
    #[serde(default)]
    pub time_encoding: Option<bool>,
    /// Predict one step and roll forward `horizon` times instead of the
    /// direct multi-horizon head.
    #[serde(default)]
    pub autoregressive: bool,
    /// Apply dropout on training passes (including MAML inner steps).
    #[serde(default = "yes")]
    pub train_dropout: bool,
    #[serde(default = "default_layer_norm_eps")]
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Defaults for desk-scale experiments.
    pub fn new(variant: Variant, lookback: usize, horizon: usize, num_features: usize) -> Self {
        Self {
            variant,
            lookback,
            horizon,
            num_features,
            model_dim: 16,
            num_heads: 2,
            num_layers: 1,
            ffn_dim: 32,
            embed_hidden: None,
            dropout: 0.1,
            mc_passes: 8,
            disable_maml: false,
            disable_mc_dropout: false,
            time_encoding: None,
            autoregressive: false,
            train_dropout: true,
            layer_norm_eps: nn::LAYER_NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("num_features", self.num_features),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("mc_passes", self.mc_passes),
            ("embed_hidden", self.embed_hidden()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        nn::DropoutSpec::new(self.dropout, self.mc_passes)?;
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        if self.time_encoding == Some(true) && self.variant == Variant::TemporalTransformer {
            return Err(Error::Config(
                "time_encoding applies to variate-token models; the temporal model uses sinusoidal positions".into(),
            ));
        }
        Ok(())
    }

    pub fn embed_hidden(&self) -> usize {
        self.embed_hidden.unwrap_or(self.model_dim)
    }

    /// Whether training goes through the meta-learning loop.
    pub fn uses_maml(&self) -> bool {
        self.variant == Variant::Mmformer && !self.disable_maml
    }

    /// Whether inference averages stochastic dropout passes.
    pub fn uses_mc_dropout(&self) -> bool {
        self.variant == Variant::Mmformer && !self.disable_mc_dropout && self.dropout > 0.0
    }

    pub fn uses_time_encoding(&self) -> bool {
        self.time_encoding.unwrap_or(self.variant == Variant::Mmformer)
    }

    fn head_steps(&self) -> usize {
        if self.autoregressive {
            1
        } else {
            self.horizon
        }
    }

    /// Name and shape of every learnable tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (l, v, d, f) = (self.lookback, self.num_features, self.model_dim, self.ffn_dim);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |n: String, s: Vec<usize>| out.push((n, s));
        match self.variant {
            Variant::TemporalTransformer => {
                add("embed.w".into(), vec![v, d]);
                add("embed.b".into(), vec![d]);
            }
            Variant::VariateTransformer | Variant::Mmformer => {
                let h = self.embed_hidden();
                add("embed.w1".into(), vec![l, h]);
                add("embed.b1".into(), vec![h]);
                add("embed.w2".into(), vec![h, d]);
                add("embed.b2".into(), vec![d]);
                if self.uses_time_encoding() {
                    add("embed.time_bias".into(), vec![l]);
                }
            }
        }
        for i in 0..self.num_layers {
            let p = format!("layers.{i}");
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                add(format!("{p}.attn.{w}"), vec![d, d]);
            }
            add(format!("{p}.norm1.gamma"), vec![d]);
            add(format!("{p}.norm1.beta"), vec![d]);
            add(format!("{p}.ffn.w1"), vec![d, f]);
            add(format!("{p}.ffn.b1"), vec![f]);
            add(format!("{p}.ffn.w2"), vec![f, d]);
            add(format!("{p}.ffn.b2"), vec![d]);
            add(format!("{p}.norm2.gamma"), vec![d]);
            add(format!("{p}.norm2.beta"), vec![d]);
        }
        let out_dim = match self.variant {
            Variant::TemporalTransformer => self.head_steps() * v,
            _ => self.head_steps(),
        };
        add("head.w".into(), vec![d, out_dim]);
        add("head.b".into(), vec![out_dim]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Whether a parameter belongs to an attention projection.
pub fn is_attention_param(name: &str) -> bool {
    name.contains(".attn.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// One pass with training dropout.
    Train,
    /// Average of `mc_passes` dropout passes, with their spread.
    McInfer,
    /// Dropout off.
    Deterministic,
}

/// Multi-horizon prediction for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `[horizon × features]`, normalized space.
    pub values: Tensor,
    pub denormalized: Option<Tensor>,
    /// Population std across MC passes, normalized space.
    pub mc_std: Option<Tensor>,
}

impl Forecast {
    pub fn denormalize(&mut self, stats: &[NormStat]) {
        let nv = stats.len();
        let mut raw = self.values.clone();
        for (i, x) in raw.data_mut().iter_mut().enumerate() {
            let s = stats[i % nv];
            *x = *x * s.sigma + s.mu;
        }
        self.denormalized = Some(raw);
    }
}

/// Sinusoidal position table `[len × dim]`: even columns `sin`, odd `cos`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in (0..dim).step_by(2) {
            let freq = 10000f64.powf(-(i as f64) / dim as f64);
            let a = pos as f64 * freq;
            data[pos * dim + i] = a.sin();
            if i + 1 < dim {
                data[pos * dim + i + 1] = a.cos();
            }
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape")
}

/// Mean squared error between a `[horizon × features]` prediction and target.
pub fn loss_mse(tape: &mut Tape, pred: Var, target: &Tensor) -> tensor::Result<Var> {
    let t = tape.constant(target.clone())?;
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

fn at_stage(stage: impl Into<String>) -> impl FnOnce(TensorError) -> Error {
    let stage = stage.into();
    move |e| match e {
        TensorError::NonFinite { .. } => Error::Numeric { stage, source: e },
        other => Error::Tensor(other),
    }
}

/// A forecaster bound to one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters: weights and biases uniform in `±1/sqrt(fan_in)`,
    /// layer-norm scales 1, shifts 0, time bias 0.
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, shape) in self.config.param_shapes() {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".beta") || name.ends_with("time_bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = self.fan_in(&name, &shape);
                nn::uniform_init(&shape, fan_in, rng)
            };
            p.insert(name, t);
        }
        p
    }

    fn fan_in(&self, name: &str, shape: &[usize]) -> usize {
        if shape.len() == 2 {
            return shape[0];
        }
        // bias: fan-in of the matching weight
        let weight = name.replace(".b1", ".w1").replace(".b2", ".w2").replace(".b", ".w");
        self.config
            .param_shapes()
            .into_iter()
            .find(|(n, _)| *n == weight)
            .map_or(shape[0], |(_, s)| s[0])
    }

    /// Checks that `params` has exactly the layout this configuration needs.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let expected = self.config.param_shapes();
        let mismatch = expected.len() != params.len()
            || expected
                .iter()
                .any(|(n, s)| params.get(n).map(Tensor::shape) != Some(s.as_slice()));
        if mismatch {
            return Err(Error::Format(format!(
                "parameters do not match the {} configuration ({} tensors expected, {} given)",
                self.config.variant,
                expected.len(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Variate tokens `[features × model_dim]`: each input column (one
    /// feature's lookback series) goes through the shared two-layer MLP.
    pub fn embed_variate_tokens(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xt = tape.transpose(x)?;
        let xt = match p.try_var("embed.time_bias") {
            Some(tb) => tape.add_row(xt, tb)?,
            None => xt,
        };
        let l1 = AffineLayer {
            weight: p.var("embed.w1")?,
            bias: p.var("embed.b1")?,
        };
        let l2 = AffineLayer {
            weight: p.var("embed.w2")?,
            bias: p.var("embed.b2")?,
        };
        let h = l1.forward(tape, xt)?;
        let h = tape.gelu(h)?;
        Ok(l2.forward(tape, h)?)
    }

    /// Temporal tokens `[lookback × model_dim]`: each time step's feature
    /// vector mapped affinely, plus sinusoidal positions.
    pub fn embed_temporal_tokens(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let layer = AffineLayer {
            weight: p.var("embed.w")?,
            bias: p.var("embed.b")?,
        };
        let h = layer.forward(tape, x)?;
        let (len, dim) = tape.value(h)?.dims2()?;
        let pe = tape.constant(positional_encoding(len, dim))?;
        Ok(tape.add(h, pe)?)
    }

    pub fn embed(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (l, v) = tape.value(x)?.dims2()?;
        if l != self.config.lookback || v != self.config.num_features {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "embed",
                left: vec![self.config.lookback, self.config.num_features],
                right: vec![l, v],
            }));
        }
        let tokens = match self.config.variant {
            Variant::TemporalTransformer => self.embed_temporal_tokens(tape, p, x),
            _ => self.embed_variate_tokens(tape, p, x),
        };
        tokens.map_err(|e| match e {
            Error::Tensor(t) => at_stage("embedding")(t),
            other => other,
        })
    }

    fn encoder_layer(&self, tape: &mut Tape, p: &Bound, i: usize, h: Var, dropout: bool, rng: &mut Rng) -> Result<Var> {
        let pre = format!("layers.{i}");
        let v = |n: &str| p.var(&format!("{pre}.{n}"));
        let attn = MultiHeadAttention {
            num_heads: self.config.num_heads,
            w_q: v("attn.w_q")?,
            w_k: v("attn.w_k")?,
            w_v: v("attn.w_v")?,
            w_o: v("attn.w_o")?,
        };
        let norm1 = LayerNorm {
            eps: self.config.layer_norm_eps,
            gamma: Some(v("norm1.gamma")?),
            beta: Some(v("norm1.beta")?),
        };
        let ffn = FeedForward {
            up: AffineLayer {
                weight: v("ffn.w1")?,
                bias: v("ffn.b1")?,
            },
            down: AffineLayer {
                weight: v("ffn.w2")?,
                bias: v("ffn.b2")?,
            },
        };
        let norm2 = LayerNorm {
            eps: self.config.layer_norm_eps,
            gamma: Some(v("norm2.gamma")?),
            beta: Some(v("norm2.beta")?),
        };
        let run = |tape: &mut Tape, rng: &mut Rng| -> tensor::Result<Var> {
            let a = attn.forward(tape, h, h)?;
            let r = tape.add(h, a)?;
            let n = norm1.forward(tape, r)?;
            let f = ffn.forward(tape, n, self.config.dropout, rng, dropout)?;
            let r2 = tape.add(n, f)?;
            norm2.forward(tape, r2)
        };
        run(tape, rng).map_err(at_stage(format!("encoder layer {i}")))
    }

    /// One encoder pass over the window `x`, returning `[steps × features]`
    /// where `steps` is the head width.
    fn predict_block(&self, tape: &mut Tape, p: &Bound, x: Var, dropout: bool, rng: &mut Rng) -> Result<Var> {
        let mut h = self.embed(tape, p, x)?;
        for i in 0..self.config.num_layers {
            h = self.encoder_layer(tape, p, i, h, dropout, rng)?;
        }
        let head = AffineLayer {
            weight: p.var("head.w")?,
            bias: p.var("head.b")?,
        };
        let steps = self.config.head_steps();
        let out = |tape: &mut Tape| -> tensor::Result<Var> {
            match self.config.variant {
                Variant::TemporalTransformer => {
                    let (len, _) = tape.value(h)?.dims2()?;
                    let last = tape.slice_rows(h, len - 1, len)?;
                    let y = head.forward(tape, last)?;
                    tape.reshape(y, &[steps, self.config.num_features])
                }
                _ => {
                    let y = head.forward(tape, h)?;
                    tape.transpose(y)
                }
            }
        };
        out(tape).map_err(at_stage("projection head"))
    }

    /// Forward pass on a tape; returns `[horizon × features]`.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, x: Var, dropout: bool, rng: &mut Rng) -> Result<Var> {
        if !self.config.autoregressive {
            return self.predict_block(tape, p, x, dropout, rng);
        }
        let lookback = self.config.lookback;
        let mut window = x;
        let mut steps = Vec::with_capacity(self.config.horizon);
        for _ in 0..self.config.horizon {
            let y = self.predict_block(tape, p, window, dropout, rng)?;
            steps.push(y);
            let tail = tape.slice_rows(window, 1, lookback)?;
            window = tape.concat_rows(&[tail, y])?;
        }
        Ok(tape.concat_rows(&steps)?)
    }

    fn single_pass(&self, params: &ParamSet, x: &Tensor, dropout: bool, rng: &mut Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false)?;
        let xv = tape.constant(x.clone())?;
        let y = self.forward_tape(&mut tape, &p, xv, dropout, rng)?;
        Ok(tape.value(y)?.clone())
    }

    /// Forecast for one `[lookback × features]` window.
    ///
    /// `Train` runs one dropout pass on `rng.substream(0)`; `McInfer` runs
    /// `mc_passes` passes on substreams `0..T` and averages them. When MC
    /// dropout is disabled for this configuration, `McInfer` is the
    /// deterministic pass with a zero spread.
    pub fn forecast(&self, params: &ParamSet, x: &Tensor, mode: ForwardMode, rng: &Rng) -> Result<Forecast> {
        match mode {
            ForwardMode::Deterministic => Ok(Forecast {
                values: self.single_pass(params, x, false, &mut rng.clone())?,
                denormalized: None,
                mc_std: None,
            }),
            ForwardMode::Train => Ok(Forecast {
                values: self.single_pass(params, x, self.config.train_dropout, &mut rng.substream(0))?,
                denormalized: None,
                mc_std: None,
            }),
            ForwardMode::McInfer if !self.config.uses_mc_dropout() => {
                let values = self.single_pass(params, x, false, &mut rng.clone())?;
                let mc_std = Tensor::zeros(values.shape());
                Ok(Forecast {
                    values,
                    denormalized: None,
                    mc_std: Some(mc_std),
                })
            }
            ForwardMode::McInfer => {
                let est = nn::mc_average(self.config.mc_passes, rng, |r| self.single_pass(params, x, true, r))?;
                Ok(Forecast {
                    values: est.mean,
                    denormalized: None,
                    mc_std: Some(est.std),
                })
            }
        }
    }

    /// Mean window MSE over `batch` on the tape.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[crate::data::WindowSample],
        dropout: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Task("empty batch".into()));
        }
        let mut total: Option<Var> = None;
        for w in batch {
            let x = tape.constant(w.input.clone())?;
            let y = self.forward_tape(tape, p, x, dropout, rng)?;
            let l = loss_mse(tape, y, &w.target)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.expect("non-empty batch");
        Ok(tape.mul_scalar(total, 1.0 / batch.len() as f64)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny(variant: Variant) -> ModelConfig {
        let mut c = ModelConfig::new(variant, 4, 3, 2);
        c.model_dim = 8;
        c.num_heads = 1;
        c.num_layers = 1;
        c.ffn_dim = 8;
        c
    }

    fn window(l: usize, v: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::new(vec![l, v], (0..l * v).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Variant::Mmformer);
        c.num_heads = 3;
        assert!(Model::new(c).is_err());
        let mut c = tiny(Variant::Mmformer);
        c.dropout = 1.0;
        assert!(Model::new(c).is_err());
        let mut c = tiny(Variant::Mmformer);
        c.horizon = 0;
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn parameter_count_golden() {
        // embed 4·8+8+8·8+8+4 = 116; layer 4·64 + 4·8 + 8·8+8+8·8+8 = 432; head 8·3+3 = 27
        assert_eq!(tiny(Variant::Mmformer).param_count(), 116 + 432 + 27);
        // time encoding off: 112 + 432 + 27
        assert_eq!(tiny(Variant::VariateTransformer).param_count(), 571);
        // embed 2·8+8 = 24; head 8·6+6 = 54
        assert_eq!(tiny(Variant::TemporalTransformer).param_count(), 24 + 432 + 54);
        let c = ModelConfig::new(Variant::Mmformer, 32, 8, 3);
        assert_eq!(c.param_count(), c.param_count());
        assert_eq!(c.param_count(), 32 * 16 + 16 + 16 * 16 + 16 + 32 + 4 * 256 + 64 + 16 * 32 + 32 + 32 * 16 + 16 + 16 * 8 + 8);
    }

    #[test]
    fn forward_shapes() {
        for variant in [Variant::TemporalTransformer, Variant::VariateTransformer, Variant::Mmformer] {
            for ar in [false, true] {
                let mut c = tiny(variant);
                c.autoregressive = ar;
                let m = Model::new(c).unwrap();
                let p = m.init_params(&mut Rng::new(1));
                m.check_params(&p).unwrap();
                for mode in [ForwardMode::Train, ForwardMode::McInfer, ForwardMode::Deterministic] {
                    let f = m.forecast(&p, &window(4, 2, 2), mode, &Rng::new(3)).unwrap();
                    assert_eq!(f.values.shape(), &[3, 2], "{variant} ar={ar} {mode:?}");
                }
            }
        }
    }

    #[test]
    fn deterministic_is_repeatable() {
        let m = Model::new(tiny(Variant::Mmformer)).unwrap();
        let p = m.init_params(&mut Rng::new(1));
        let x = window(4, 2, 5);
        let a = m.forecast(&p, &x, ForwardMode::Deterministic, &Rng::new(0)).unwrap();
        let b = m.forecast(&p, &x, ForwardMode::Deterministic, &Rng::new(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_with_zero_dropout_equals_deterministic() {
        let mut c = tiny(Variant::Mmformer);
        c.dropout = 0.0;
        let m = Model::new(c).unwrap();
        let p = m.init_params(&mut Rng::new(1));
        let x = window(4, 2, 5);
        let det = m.forecast(&p, &x, ForwardMode::Deterministic, &Rng::new(0)).unwrap();
        let mc = m.forecast(&p, &x, ForwardMode::McInfer, &Rng::new(0)).unwrap();
        assert_eq!(det.values, mc.values);
    }

    #[test]
    fn disabled_mc_dropout_collapses_to_deterministic() {
        let mut c = tiny(Variant::Mmformer);
        c.dropout = 0.3;
        c.disable_mc_dropout = true;
        let m = Model::new(c).unwrap();
        let p = m.init_params(&mut Rng::new(1));
        let x = window(4, 2, 5);
        let det = m.forecast(&p, &x, ForwardMode::Deterministic, &Rng::new(0)).unwrap();
        let mc = m.forecast(&p, &x, ForwardMode::McInfer, &Rng::new(0)).unwrap();
        assert_eq!(det.values, mc.values);
        assert!(mc.mc_std.unwrap().data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn mc_spread_is_reported() {
        let mut c = tiny(Variant::Mmformer);
        c.dropout = 0.3;
        let m = Model::new(c).unwrap();
        let p = m.init_params(&mut Rng::new(1));
        let f = m.forecast(&p, &window(4, 2, 5), ForwardMode::McInfer, &Rng::new(0)).unwrap();
        assert!(f.mc_std.unwrap().data().iter().any(|&s| s > 0.0));
    }

    #[test]
    fn zero_head_gives_zero_forecast() {
        let m = Model::new(tiny(Variant::Mmformer)).unwrap();
        let mut p = m.init_params(&mut Rng::new(1));
        for n in ["head.w", "head.b"] {
            p.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let f = m.forecast(&p, &window(4, 2, 5), ForwardMode::Deterministic, &Rng::new(0)).unwrap();
        assert!(f.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variate_tokens_are_per_feature() {
        let mut c = tiny(Variant::Mmformer);
        c.num_features = 3;
        let m = Model::new(c).unwrap();
        let params = m.init_params(&mut Rng::new(4));
        let tokens = |x: &Tensor| {
            let mut t = Tape::new();
            let p = params.bind(&mut t, |_| false).unwrap();
            let xv = t.constant(x.clone()).unwrap();
            let tok = m.embed(&mut t, &p, xv).unwrap();
            t.value(tok).unwrap().clone()
        };
        let x = window(4, 3, 8);
        let base = tokens(&x);
        assert_eq!(base.shape(), &[3, 8]);

        let mut bumped = x.clone();
        for t in 0..4 {
            bumped.data_mut()[t * 3 + 1] += 0.5;
        }
        let after = tokens(&bumped);
        for v in 0..3 {
            let changed = (0..8).any(|d| base.at(v, d) != after.at(v, d));
            assert_eq!(changed, v == 1, "token {v}");
        }

        // swapping features 0 and 2 swaps their tokens
        let mut swapped = x.clone();
        for t in 0..4 {
            swapped.data_mut().swap(t * 3, t * 3 + 2);
        }
        let s = tokens(&swapped);
        for d in 0..8 {
            assert_eq!(s.at(0, d), base.at(2, d));
            assert_eq!(s.at(2, d), base.at(0, d));
        }
    }

    #[test]
    fn single_feature_and_zero_series() {
        let mut c = tiny(Variant::VariateTransformer);
        c.num_features = 1;
        let m = Model::new(c).unwrap();
        let mut params = m.init_params(&mut Rng::new(4));
        for n in ["embed.b1", "embed.b2"] {
            params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let p = params.bind(&mut t, |_| false).unwrap();
        let xv = t.constant(Tensor::zeros(&[4, 1])).unwrap();
        let tok = m.embed(&mut t, &p, xv).unwrap();
        assert_eq!(t.value(tok).unwrap(), &Tensor::zeros(&[1, 8]));
    }

    #[test]
    fn temporal_tokens() {
        let mut c = tiny(Variant::TemporalTransformer);
        c.lookback = 1;
        let m = Model::new(c.clone()).unwrap();
        let params = m.init_params(&mut Rng::new(4));
        let mut t = Tape::new();
        let p = params.bind(&mut t, |_| false).unwrap();
        let xv = t.constant(Tensor::zeros(&[1, 2])).unwrap();
        let tok = m.embed(&mut t, &p, xv).unwrap();
        assert_eq!(t.value(tok).unwrap().shape(), &[1, 8]);

        // equal steps differ only by the position table
        c.lookback = 3;
        let m = Model::new(c).unwrap();
        let params = m.init_params(&mut Rng::new(4));
        let mut t = Tape::new();
        let p = params.bind(&mut t, |_| false).unwrap();
        let xv = t.constant(Tensor::full(&[3, 2], 0.7)).unwrap();
        let tok = m.embed(&mut t, &p, xv).unwrap();
        let tok = t.value(tok).unwrap().clone();
        let pe = positional_encoding(3, 8);
        for d in 0..8 {
            let a = tok.at(0, d) - pe.at(0, d);
            let b = tok.at(2, d) - pe.at(2, d);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn position_zero_is_sin0_cos0() {
        let pe = positional_encoding(2, 4);
        assert_eq!((pe.at(0, 0), pe.at(0, 1)), (0.0, 1.0));
        assert_eq!((pe.at(0, 2), pe.at(0, 3)), (0.0, 1.0));
    }

    #[test]
    fn loss_examples() {
        let mut t = Tape::new();
        let target = Tensor::vector(vec![2.0, 5.0]);
        let p = t.constant(Tensor::vector(vec![1.0, 3.0])).unwrap();
        let l = loss_mse(&mut t, p, &target).unwrap();
        assert_eq!(t.value(l).unwrap().item(), Some(2.5));
        let same = t.constant(target.clone()).unwrap();
        let l = loss_mse(&mut t, same, &target).unwrap();
        assert_eq!(t.value(l).unwrap().item(), Some(0.0));
        let off = t.constant(Tensor::vector(vec![3.0, 6.0])).unwrap();
        let l = loss_mse(&mut t, off, &target).unwrap();
        assert_eq!(t.value(l).unwrap().item(), Some(1.0));
        let bad = t.constant(Tensor::vector(vec![1.0])).unwrap();
        assert!(loss_mse(&mut t, bad, &target).is_err());
    }

    #[test]
    fn tiny_mmformer_gradient() {
        let mut c = tiny(Variant::Mmformer);
        c.dropout = 0.0;
        let m = Model::new(c).unwrap();
        let params = m.init_params(&mut Rng::new(12));
        let x = window(4, 2, 13);
        let y = window(3, 2, 14);
        let err = grad_check(
            |t, flat| {
                let values = t.value(flat)?.data().to_vec();
                let _ = values;
                // Rebuild each tensor as a slice of the flat leaf so the
                // gradient flows back to it.
                let mut bound = std::collections::BTreeMap::new();
                let mut off = 0;
                let row = t.reshape(flat, &[1, params.num_scalars()])?;
                for (name, tensor) in params.iter() {
                    let n = tensor.len();
                    let s = t.slice_cols(row, off, off + n)?;
                    bound.insert(name.clone(), t.reshape(s, tensor.shape())?);
                    off += n;
                }
                let p = Bound::from_vars(bound);
                let xv = t.constant(x.clone())?;
                let out = m
                    .forward_tape(t, &p, xv, false, &mut Rng::new(0))
                    .map_err(|e| TensorError::Invalid(e.to_string()))?;
                loss_mse(t, out, &y)
            },
            &Tensor::vector(params.flatten()),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
