//! Adam and the training loop.
//!
//! `adam_step` and the BN running-stat update inside train-mode forward are
//! the only places that mutate parameters in place.

use crate::error::{Error, Result};
use crate::layers::{softmax_xent, Mode};
use crate::model::{backward, forward, is_learnable, roster, ModelConfig, ModelParams, ParamGrads};
use crate::rng::substream;
use crate::sampling::PatchBatch;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_LR: f64 = 0.005;
pub const DEFAULT_BATCH: usize = 8;
pub const DEFAULT_STEPS: usize = 3000;

/// Per-parameter first/second moments plus the shared step counter and
/// hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with zero moments; beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(lr: T) -> Self {
        let zeros = || -> BTreeMap<String, Tensor<T>> {
            roster()
                .into_iter()
                .filter(|(n, _)| is_learnable(n))
                .map(|(n, d)| (n, Tensor::zeros(&d)))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }
}

/// One bias-corrected Adam update:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
/// BN running stats are not touched.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    state.t += 1;
    let one = T::one();
    let bc1 = one - state.beta1.powi(state.t as i32);
    let bc2 = one - state.beta2.powi(state.t as i32);
    for (name, g) in grads.iter() {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("adam state missing '{name}'")))?;
        let v = state.v.get_mut(name).unwrap();
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("params missing '{name}'")))?;
        if p.dims() != g.dims() {
            return Err(Error::shape(format!(
                "grad '{name}' dims {:?} do not match param dims {:?}",
                g.dims(),
                p.dims()
            )));
        }
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = state.beta1 * *mv + (one - state.beta1) * gv;
            *vv = state.beta2 * *vv + (one - state.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv - state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: DEFAULT_STEPS,
            batch: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Epoch-wise shuffled index stream over the patch pool.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            rng: substream(seed, "shuffle"),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per = t.len() / t.dims()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut dims = t.dims().to_vec();
    dims[0] = idx.len();
    Tensor::from_vec(&dims, data).unwrap()
}

/// Runs `steps` optimizer steps over shuffled mini-batches of the pool.
/// Deterministic under the seed; returns the per-step loss history.
pub fn train_loop(
    params: &mut ModelParams<f32>,
    model_cfg: &ModelConfig,
    data: &PatchBatch,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    if data.len() == 0 {
        return Err(Error::config("training pool is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let mut sampler = BatchSampler::new(data.len(), cfg.seed);
    let mut state = AdamState::<f32>::new(cfg.lr as f32);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch);
        let inputs = gather(&data.inputs, &idx);
        let labels = gather(&data.labels, &idx);
        let (logits, trace) = forward(params, model_cfg, &inputs, Mode::Train)?;
        let (loss, d_logits) = softmax_xent(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became non-finite at step {step}"
            )));
        }
        let grads = backward(params, &trace, &d_logits)?;
        adam_step(params, &grads, &mut state)?;
        history.push(LossRecord {
            step,
            loss: loss as f64,
        });
    }
    Ok(history)
}
