//! Small embedding network with a source identity classifier.
//!
//! `x → ReLU(W1·x + b1) → dropout → e = W2·h + b2 → f = e/‖e‖`, and the
//! classifier reads the un-normalized embedding: `logits = Wc·e + bc`.
//! Gradients are derived by hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, l2_normalize_vjp, norm, DenseMat, Prng, EPS};

/// Every trainable tensor of the network. Also used for gradients and
/// optimizer velocity, which share the same shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub w1: DenseMat,
    pub b1: Vec<f64>,
    pub w2: DenseMat,
    pub b2: Vec<f64>,
    pub wc: DenseMat,
    pub bc: Vec<f64>,
}

impl Params {
    pub fn zeros(input_dim: usize, hidden_dim: usize, embed_dim: usize, n_classes: usize) -> Self {
        Params {
            w1: DenseMat::zeros(hidden_dim, input_dim),
            b1: vec![0.0; hidden_dim],
            w2: DenseMat::zeros(embed_dim, hidden_dim),
            b2: vec![0.0; embed_dim],
            wc: DenseMat::zeros(n_classes, embed_dim),
            bc: vec![0.0; n_classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params::zeros(
            self.w1.cols(),
            self.w1.rows(),
            self.w2.rows(),
            self.wc.rows(),
        )
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.wc.as_slice(),
            &self.bc,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.wc.as_mut_slice(),
            &mut self.bc,
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 6] = ["w1", "b1", "w2", "b2", "wc", "bc"];

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, scale: f64, other: &Params) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn same_shape(&self, other: &Params) -> bool {
        self.w1.rows() == other.w1.rows()
            && self.w1.cols() == other.w1.cols()
            && self.w2.rows() == other.w2.rows()
            && self.wc.rows() == other.wc.rows()
            && self.b1.len() == other.b1.len()
            && self.b2.len() == other.b2.len()
            && self.bc.len() == other.bc.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet {
    pub params: Params,
    pub dropout_rate: f64,
}

/// Intermediate values from [`EmbeddingNet::forward`] needed for backprop.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    /// Post-ReLU, post-dropout hidden activations.
    pub hidden: Vec<f64>,
    /// Per-unit dropout multipliers (0 or 1/(1−rate)); `None` when inactive.
    pub dropout_mask: Option<Vec<f64>>,
    pub embedding: Vec<f64>,
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

fn he_normal(rng: &mut Prng, rows: usize, cols: usize) -> DenseMat {
    let std = (2.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    DenseMat::from_vec(rows, cols, data).expect("shape")
}

impl EmbeddingNet {
    /// He-normal weights (`std = sqrt(2/fan_in)`), zero biases.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if [input_dim, hidden_dim, embed_dim, n_classes].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network dimensions must be positive: {input_dim}/{hidden_dim}/{embed_dim}/{n_classes}"
            )));
        }
        let mut rng = Prng::new(seed);
        let mut params = Params::zeros(input_dim, hidden_dim, embed_dim, n_classes);
        params.w1 = he_normal(&mut rng, hidden_dim, input_dim);
        params.w2 = he_normal(&mut rng, embed_dim, hidden_dim);
        params.wc = he_normal(&mut rng, n_classes, embed_dim);
        Ok(EmbeddingNet {
            params,
            dropout_rate: 0.0,
        })
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.params.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.params.w2.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.params.wc.rows()
    }

    /// Forward pass. Dropout is drawn from `rng` only when `train` is set and
    /// the rate is positive.
    pub fn forward(&self, x: &[f64], train: bool, rng: &mut Prng) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let p = &self.params;
        let mut pre = p.w1.matvec(x);
        for (z, b) in pre.iter_mut().zip(&p.b1) {
            *z += b;
        }
        let mut hidden: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();

        let dropout_mask = if train && self.dropout_rate > 0.0 {
            let keep = 1.0 / (1.0 - self.dropout_rate);
            let mask: Vec<f64> = (0..hidden.len())
                .map(|_| {
                    if rng.next_f64() < self.dropout_rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect();
            for (h, m) in hidden.iter_mut().zip(&mask) {
                *h *= m;
            }
            Some(mask)
        } else {
            None
        };

        let mut embedding = p.w2.matvec(&hidden);
        for (e, b) in embedding.iter_mut().zip(&p.b2) {
            *e += b;
        }
        let feature = l2_normalize(&embedding, EPS);
        let mut logits = p.wc.matvec(&embedding);
        for (l, b) in logits.iter_mut().zip(&p.bc) {
            *l += b;
        }
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre_activation: pre,
            hidden,
            dropout_mask,
            embedding,
            feature,
            logits,
        })
    }

    /// Forward in evaluation mode (no dropout).
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut unused = Prng::new(0);
        Ok(self.forward(x, false, &mut unused)?.feature)
    }

    /// Gradients of a loss given its gradient with respect to the normalized
    /// feature and/or the logits of one forward pass.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_f: Option<&[f64]>,
        grad_logits: Option<&[f64]>,
    ) -> Result<Params> {
        let mut grads = self.params.zeros_like();
        self.backward_into(trace, grad_f, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Like [`EmbeddingNet::backward`] but accumulates into `grads`.
    ///
    /// A degenerate embedding (norm below eps) has a zero feature and passes
    /// no gradient through the normalization.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_f: Option<&[f64]>,
        grad_logits: Option<&[f64]>,
        grads: &mut Params,
    ) -> Result<()> {
        if !grads.same_shape(&self.params) {
            return Err(Error::InvalidArgument(
                "gradient buffer shape mismatch".into(),
            ));
        }
        let p = &self.params;
        let mut grad_e = vec![0.0; self.embed_dim()];

        if let Some(gl) = grad_logits {
            if gl.len() != self.n_classes() {
                return Err(Error::DimensionMismatch {
                    what: "logit gradient",
                    expected: self.n_classes(),
                    found: gl.len(),
                });
            }
            grads.wc.add_outer(1.0, gl, &trace.embedding);
            for (g, d) in grads.bc.iter_mut().zip(gl) {
                *g += d;
            }
            grad_e = p.wc.matvec_t(gl);
        }

        if let Some(gf) = grad_f {
            if gf.len() != self.embed_dim() {
                return Err(Error::DimensionMismatch {
                    what: "feature gradient",
                    expected: self.embed_dim(),
                    found: gf.len(),
                });
            }
            if norm(&trace.embedding) >= EPS {
                let through = l2_normalize_vjp(&trace.embedding, gf, EPS)?;
                for (g, t) in grad_e.iter_mut().zip(&through) {
                    *g += t;
                }
            }
        }

        grads.w2.add_outer(1.0, &grad_e, &trace.hidden);
        for (g, d) in grads.b2.iter_mut().zip(&grad_e) {
            *g += d;
        }

        let mut grad_pre = p.w2.matvec_t(&grad_e);
        if let Some(mask) = &trace.dropout_mask {
            for (g, m) in grad_pre.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        for (g, z) in grad_pre.iter_mut().zip(&trace.pre_activation) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }
        grads.w1.add_outer(1.0, &grad_pre, &trace.input);
        for (g, d) in grads.b1.iter_mut().zip(&grad_pre) {
            *g += d;
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← m·v + g; p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Params,
}

impl SgdState {
    pub fn new(net: &EmbeddingNet, lr: f64, momentum: f64) -> Self {
        SgdState {
            lr,
            momentum,
            velocity: net.params.zeros_like(),
        }
    }

    pub fn step(&mut self, net: &mut EmbeddingNet, grads: &Params) -> Result<()> {
        if !grads.same_shape(&net.params) || !self.velocity.same_shape(&net.params) {
            return Err(Error::InvalidArgument("optimizer shape mismatch".into()));
        }
        let lr = self.lr;
        let m = self.momentum;
        for ((param, vel), grad) in net
            .params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads.tensors())
        {
            for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = m * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
