//! Layer building blocks over the gradient tape.
//!
//! Layers hold [`Var`] handles bound on the current tape; they own no data.
//! See [`crate::model::ParamSet`] for the parameter storage they are bound
//! from.

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// `y = xW + b` over the last dimension.
#[derive(Debug, Clone, Copy)]
pub struct AffineLayer {
    pub weight: Var,
    pub bias: Var,
}

impl AffineLayer {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> tensor::Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

/// Per-token standardization with optional learnable scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub eps: f64,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

impl LayerNorm {
    pub fn plain(eps: f64) -> Self {
        Self {
            eps,
            gamma: None,
            beta: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> tensor::Result<Var> {
        let mut y = tape.layer_norm_rows(h, self.eps)?;
        if let Some(g) = self.gamma {
            y = tape.mul_row(y, g)?;
        }
        if let Some(b) = self.beta {
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    rate: f64,
    mc_passes: usize,
}

impl DropoutSpec {
    pub fn new(rate: f64, mc_passes: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if mc_passes == 0 {
            return Err(Error::Config("mc_passes must be at least 1".into()));
        }
        Ok(Self { rate, mc_passes })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mc_passes(&self) -> usize {
        self.mc_passes
    }
}

/// Inverted dropout: kept units are scaled by `1/(1-p)`.
///
/// `active` is true both for training passes and for Monte-Carlo inference
/// passes; otherwise, or when `p == 0`, `x` is returned unchanged and no
/// randomness is consumed.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Rng, active: bool) -> tensor::Result<Var> {
    if !active || rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x)?.shape().to_vec();
    let n: usize = shape.iter().product();
    let scale = 1.0 / (1.0 - rate);
    let mask = (0..n)
        .map(|_| if rng.uniform() >= rate { scale } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?)?;
    tape.mul(x, mask)
}

/// Mean and population standard deviation over stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Tensor,
    pub std: Tensor,
}

/// Runs `passes` stochastic evaluations, pass `t` drawing from
/// `rng.substream(t)`, and averages them in pass order.
pub fn mc_average<F>(passes: usize, rng: &Rng, pass: F) -> Result<McEstimate>
where
    F: Fn(&mut Rng) -> Result<Tensor> + Sync + Send,
{
    if passes == 0 {
        return Err(Error::Config("mc_average needs at least one pass".into()));
    }
    let outputs = par::try_map_indexed(passes, |t| {
        let mut r = rng.substream(t as u64);
        pass(&mut r)
    })?;
    welford(&outputs)
}

/// Running mean/variance. Exact when all samples are identical.
pub(crate) fn welford(samples: &[Tensor]) -> Result<McEstimate> {
    let first = &samples[0];
    let mut mean = first.data().to_vec();
    let mut m2 = vec![0.0; mean.len()];
    for (k, s) in samples.iter().enumerate().skip(1) {
        if s.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mc_average",
                left: first.shape().to_vec(),
                right: s.shape().to_vec(),
            }
            .into());
        }
        let n = (k + 1) as f64;
        for ((m, q), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(s.data()) {
            let d = x - *m;
            *m += d / n;
            *q += d * (x - *m);
        }
    }
    let n = samples.len() as f64;
    let std = m2.iter().map(|q| (q / n).max(0.0).sqrt()).collect();
    Ok(McEstimate {
        mean: Tensor::new(first.shape().to_vec(), mean)?,
        std: Tensor::new(first.shape().to_vec(), std)?,
    })
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Attention result with the per-head intermediates exposed.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Var,
    /// Row-stochastic `[n_q × n_kv]` weight matrix per head.
    pub weights: Vec<Var>,
    /// `[n_kv × d_v]` value matrix per head.
    pub values: Vec<Var>,
    /// `[n_q × d_v]` weighted value sums per head, before `W_O`.
    pub heads: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn forward(&self, tape: &mut Tape, xq: Var, xkv: Var) -> tensor::Result<Var> {
        Ok(self.forward_traced(tape, xq, xkv)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape, xq: Var, xkv: Var) -> tensor::Result<AttentionTrace> {
        let (_, model_dim) = tape.value(self.w_q)?.dims2()?;
        for w in [self.w_k, self.w_v] {
            let shape = tape.value(w)?.shape().to_vec();
            if shape != tape.value(self.w_q)?.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    left: tape.value(self.w_q)?.shape().to_vec(),
                    right: shape,
                });
            }
        }
        if self.num_heads == 0 || model_dim % self.num_heads != 0 {
            return Err(TensorError::Invalid(format!(
                "model dimension {model_dim} is not divisible by {} heads",
                self.num_heads
            )));
        }
        let d_k = model_dim / self.num_heads;
        let scale = 1.0 / (d_k as f64).sqrt();

        let q = tape.matmul(xq, self.w_q)?;
        let k = tape.matmul(xkv, self.w_k)?;
        let v = tape.matmul(xkv, self.w_v)?;

        let mut weights = Vec::with_capacity(self.num_heads);
        let mut values = Vec::with_capacity(self.num_heads);
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (lo, hi) = (h * d_k, (h + 1) * d_k);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scores = tape.mul_scalar(raw, scale)?;
            let alpha = tape.softmax_rows(scores)?;
            let out = tape.matmul(alpha, vh)?;
            weights.push(alpha);
            values.push(vh);
            heads.push(out);
        }
        let concat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let output = tape.matmul(concat, self.w_o)?;
        Ok(AttentionTrace {
            output,
            weights,
            values,
            heads,
        })
    }
}

/// Two affine maps with GELU in between and dropout after each.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: AffineLayer,
    pub down: AffineLayer,
}

impl FeedForward {
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        rate: f64,
        rng: &mut Rng,
        dropout_active: bool,
    ) -> tensor::Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h)?;
        let h = dropout(tape, h, rate, rng, dropout_active)?;
        let y = self.down.forward(tape, h)?;
        dropout(tape, y, rate, rng, dropout_active)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn leaf(t: &mut Tape, rows: &[Vec<f64>]) -> Var {
        t.constant(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut t = Tape::new();
        let layer = AffineLayer {
            weight: t.constant(Tensor::eye(2)).unwrap(),
            bias: t.constant(Tensor::zeros(&[2])).unwrap(),
        };
        let x = leaf(&mut t, &[vec![1.0, 2.0]]);
        let y = layer.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[1.0, 2.0]);

        let layer = AffineLayer {
            weight: leaf(&mut t, &[vec![2.0]]),
            bias: t.constant(Tensor::vector(vec![1.0])).unwrap(),
        };
        let x = leaf(&mut t, &[vec![3.0]]);
        let y = layer.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[7.0]);

        let layer = AffineLayer {
            weight: t.constant(Tensor::zeros(&[3, 2])).unwrap(),
            bias: t.constant(Tensor::vector(vec![5.0, 5.0])).unwrap(),
        };
        let x = leaf(&mut t, &[vec![-4.0, 8.0, 0.5]]);
        let y = layer.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[5.0, 5.0]);

        let x = leaf(&mut t, &[vec![1.0, 2.0]]);
        assert!(layer.forward(&mut t, x).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let ln = LayerNorm::plain(LAYER_NORM_EPS);
        let h = leaf(&mut t, &[vec![4.0, 4.0, 4.0], vec![1.0, 2.0, 3.0]]);
        let y = ln.forward(&mut t, h).unwrap();
        let v = t.value(y).unwrap().data().to_vec();
        assert_eq!(&v[..3], &[0.0, 0.0, 0.0]);
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in v[3..].iter().zip(expect) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        let h = leaf(&mut t, &[vec![-1.0, 1.0]]);
        let y = ln.forward(&mut t, h).unwrap();
        for (a, b) in t.value(y).unwrap().data().iter().zip([-1.0, 1.0]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_with_affine() {
        let mut t = Tape::new();
        let ln = LayerNorm {
            eps: LAYER_NORM_EPS,
            gamma: Some(t.constant(Tensor::vector(vec![2.0, 2.0])).unwrap()),
            beta: Some(t.constant(Tensor::vector(vec![1.0, 1.0])).unwrap()),
        };
        let h = leaf(&mut t, &[vec![-3.0, 3.0]]);
        let y = ln.forward(&mut t, h).unwrap();
        let v = t.value(y).unwrap().data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn dropout_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.5, -2.0, 3.0])).unwrap();
        let mut rng = Rng::new(0);
        let y = dropout(&mut t, x, 0.0, &mut rng, true).unwrap();
        assert_eq!(y, x);

        let ones = t.constant(Tensor::ones(&[10_000])).unwrap();
        let y = dropout(&mut t, ones, 0.5, &mut Rng::new(5), true).unwrap();
        let v = t.value(y).unwrap().data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((0.9..=1.1).contains(&mean), "{mean}");
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));

        let a = dropout(&mut t, ones, 0.3, &mut Rng::new(9), true).unwrap();
        let b = dropout(&mut t, ones, 0.3, &mut Rng::new(9), true).unwrap();
        assert_eq!(t.value(a).unwrap(), t.value(b).unwrap());

        let off = dropout(&mut t, ones, 0.3, &mut Rng::new(9), false).unwrap();
        assert_eq!(off, ones);
    }

    #[test]
    fn dropout_spec_validation() {
        assert!(DropoutSpec::new(1.0, 1).is_err());
        assert!(DropoutSpec::new(-0.1, 1).is_err());
        assert!(DropoutSpec::new(0.2, 0).is_err());
        assert!(DropoutSpec::new(0.0, 1).is_ok());
    }

    fn noisy_pass(x: &Tensor, rate: f64) -> impl Fn(&mut Rng) -> Result<Tensor> + Sync + '_ {
        move |r: &mut Rng| {
            let mut t = Tape::new();
            let v = t.constant(x.clone())?;
            let y = dropout(&mut t, v, rate, r, true)?;
            Ok(t.value(y)?.clone())
        }
    }

    #[test]
    fn mc_average_single_pass_matches_substream() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let rng = Rng::new(3);
        let est = mc_average(1, &rng, noisy_pass(&x, 0.5)).unwrap();
        let single = noisy_pass(&x, 0.5)(&mut rng.substream(0)).unwrap();
        assert_eq!(est.mean, single);
        assert!(est.std.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn mc_average_zero_rate_is_deterministic() {
        let x = Tensor::vector(vec![0.1, 0.7, -3.3]);
        let est = mc_average(7, &Rng::new(1), noisy_pass(&x, 0.0)).unwrap();
        assert_eq!(est.mean, x);
        assert!(mc_average(0, &Rng::new(1), noisy_pass(&x, 0.0)).is_err());
    }

    #[test]
    fn mc_average_spread_shrinks_with_passes() {
        let x = Tensor::vector(vec![1.0]);
        let spread = |passes: usize| {
            let means: Vec<f64> = (0..100)
                .map(|s| mc_average(passes, &Rng::new(s), noisy_pass(&x, 0.3)).unwrap().mean.data()[0])
                .collect();
            let m = means.iter().sum::<f64>() / means.len() as f64;
            (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
        };
        assert!(spread(16) < spread(1));
    }

    fn mha(t: &mut Tape, heads: usize, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> MultiHeadAttention {
        MultiHeadAttention {
            num_heads: heads,
            w_q: t.constant(wq).unwrap(),
            w_k: t.constant(wk).unwrap(),
            w_v: t.constant(wv).unwrap(),
            w_o: t.constant(wo).unwrap(),
        }
    }

    #[test]
    fn attention_singleton_key() {
        let mut rng = Rng::new(2);
        let mut t = Tape::new();
        let att = mha(
            &mut t,
            2,
            uniform_init(&[4, 4], 4, &mut rng),
            uniform_init(&[4, 4], 4, &mut rng),
            uniform_init(&[4, 4], 4, &mut rng),
            uniform_init(&[4, 4], 4, &mut rng),
        );
        let xq = t.constant(uniform_init(&[3, 4], 1, &mut rng)).unwrap();
        let xkv = t.constant(uniform_init(&[1, 4], 1, &mut rng)).unwrap();
        let tr = att.forward_traced(&mut t, xq, xkv).unwrap();
        for w in &tr.weights {
            assert!(t.value(*w).unwrap().data().iter().all(|&a| a == 1.0));
        }
        let v = t.matmul(xkv, att.w_v).unwrap();
        let vo = t.matmul(v, att.w_o).unwrap();
        let expect = t.value(vo).unwrap().data().to_vec();
        let out = t.value(tr.output).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.at(r, c) - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_uniform() {
        let mut rng = Rng::new(4);
        let mut t = Tape::new();
        let att = mha(
            &mut t,
            1,
            uniform_init(&[3, 3], 3, &mut rng),
            uniform_init(&[3, 3], 3, &mut rng),
            uniform_init(&[3, 3], 3, &mut rng),
            Tensor::eye(3),
        );
        let xq = t.constant(uniform_init(&[2, 3], 1, &mut rng)).unwrap();
        let xkv = t.constant(Tensor::full(&[5, 3], 0.4)).unwrap();
        let tr = att.forward_traced(&mut t, xq, xkv).unwrap();
        for &a in t.value(tr.weights[0]).unwrap().data() {
            assert!((a - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_computed_two_by_two() {
        // Identity projections: Q = K = V = X.
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]).unwrap();
        let mut t = Tape::new();
        let att = mha(&mut t, 1, Tensor::eye(2), Tensor::eye(2), Tensor::eye(2), Tensor::eye(2));
        let xv = t.constant(x.clone()).unwrap();
        let y = att.forward(&mut t, xv, xv).unwrap();
        let got = t.value(y).unwrap().clone();

        let rows = [[1.0, 0.0], [0.5, 2.0]];
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1]) / 2f64.sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            let a = [s[0].exp() / z, s[1].exp() / z];
            for c in 0..2 {
                let want = a[0] * rows[0][c] + a[1] * rows[1][c];
                assert!((got.at(i, c) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut t = Tape::new();
        let att = mha(&mut t, 3, Tensor::eye(4), Tensor::eye(4), Tensor::eye(4), Tensor::eye(4));
        let x = t.constant(Tensor::zeros(&[2, 4])).unwrap();
        assert!(att.forward(&mut t, x, x).is_err());
    }

    #[test]
    fn feed_forward_gradient() {
        let mut rng = Rng::new(8);
        let w1 = uniform_init(&[3, 5], 3, &mut rng);
        let b1 = uniform_init(&[5], 3, &mut rng);
        let w2 = uniform_init(&[5, 3], 5, &mut rng);
        let b2 = uniform_init(&[3], 5, &mut rng);
        let x = uniform_init(&[2, 3], 1, &mut rng);
        let err = grad_check(
            |t, xv| {
                let ffn = FeedForward {
                    up: AffineLayer {
                        weight: t.constant(w1.clone())?,
                        bias: t.constant(b1.clone())?,
                    },
                    down: AffineLayer {
                        weight: t.constant(w2.clone())?,
                        bias: t.constant(b2.clone())?,
                    },
                };
                let y = ffn.forward(t, xv, 0.0, &mut Rng::new(0), false)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
