//! The fixed network topology and its parameters.
//!
//! Pipeline for a `N x 32 x 32 x 3` batch:
//!
//! ```text
//! BN -> [Conv-3.1, ReLU] -> [Conv-3.2, ReLU] -> [Conv-3.3, ReLU] -> MP-2
//!    -> for s in {2, 4, 8, 16}: pool s -> [Conv-1 (128->32), ReLU] -> deconv (stride s)
//!    -> concat(branches..., MP-2 skip) = 16x16x256
//!    -> [Conv-3.4, ReLU] -> Conv-1.5 -> DeConv.5 -> 32x32x2 logits
//! ```
//!
//! The parameter roster is closed: checkpoints and gradient maps must carry
//! exactly the tensors listed by [`roster`], nothing more or less.

use crate::error::{Error, Result};
use crate::layers::{
    avgpool_backward, avgpool_forward, batchnorm_backward, batchnorm_forward, concat_channels,
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, BnCache, Mode, PoolCache, RunningStats,
};
use crate::rng::substream;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::collections::BTreeMap;

pub const PATCH: usize = 32;
pub const IN_CHANNELS: usize = 3;
pub const BRANCH_SCALES: [usize; 4] = [2, 4, 8, 16];

/// Pool flavor of the multi-scale branches. Average is the default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpPool {
    #[default]
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub sp_pool: SpPool,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sp_pool: SpPool::Avg,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

/// The closed list of parameter tensors: `(name, dims)` in storage order.
pub fn roster() -> Vec<(String, Vec<usize>)> {
    let mut r: Vec<(String, Vec<usize>)> = vec![
        ("bn_in.gamma".into(), vec![IN_CHANNELS]),
        ("bn_in.beta".into(), vec![IN_CHANNELS]),
        ("bn_in.running_mean".into(), vec![IN_CHANNELS]),
        ("bn_in.running_var".into(), vec![IN_CHANNELS]),
        ("conv3_1.weight".into(), vec![3, 3, 3, 32]),
        ("conv3_1.bias".into(), vec![32]),
        ("conv3_2.weight".into(), vec![3, 3, 32, 64]),
        ("conv3_2.bias".into(), vec![64]),
        ("conv3_3.weight".into(), vec![3, 3, 64, 128]),
        ("conv3_3.bias".into(), vec![128]),
    ];
    for s in BRANCH_SCALES {
        r.push((format!("branch{s}.conv1.weight"), vec![1, 1, 128, 32]));
        r.push((format!("branch{s}.conv1.bias"), vec![32]));
        r.push((format!("branch{s}.deconv.weight"), vec![s, s, 32, 32]));
        r.push((format!("branch{s}.deconv.bias"), vec![32]));
    }
    r.push(("conv3_4.weight".into(), vec![3, 3, 256, 64]));
    r.push(("conv3_4.bias".into(), vec![64]));
    r.push(("conv1_5.weight".into(), vec![1, 1, 64, 2]));
    r.push(("conv1_5.bias".into(), vec![2]));
    r.push(("deconv5.weight".into(), vec![2, 2, 2, 2]));
    r.push(("deconv5.bias".into(), vec![2]));
    r
}

/// BN running stats are carried in checkpoints but never optimized.
pub fn is_learnable(name: &str) -> bool {
    !name.contains("running_")
}

/// Total learnable scalar count implied by the roster.
pub fn learnable_param_count() -> usize {
    roster()
        .iter()
        .filter(|(n, _)| is_learnable(n))
        .map(|(_, d)| d.iter().product::<usize>())
        .sum()
}

/// Ordered, closed map of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    /// Iterate tensors in roster (storage) order.
    pub fn iter_roster(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        roster().into_iter().map(move |(name, _)| {
            let t = &self.map[&name];
            (name, t)
        })
    }

    fn p(&self, name: &str) -> &Tensor<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("roster tensor '{name}' missing"))
    }

    fn running(&self) -> RunningStats<T> {
        RunningStats {
            mean: self.p("bn_in.running_mean").clone(),
            var: self.p("bn_in.running_var").clone(),
        }
    }

    pub fn set_running(&mut self, stats: &RunningStats<T>) {
        self.map
            .insert("bn_in.running_mean".into(), stats.mean.clone());
        self.map
            .insert("bn_in.running_var".into(), stats.var.clone());
    }

    pub(crate) fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams { map }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

/// He-initialized parameters, deterministic under the seed.
///
/// Conv and deconv weights are zero-mean normal with std `sqrt(2 / fan_in)`
/// (`fan_in = k*k*Cin` for convolutions, `Cin` for the scatter-style
/// transposed convolutions); biases start at 0, BN at identity.
pub fn init_params<T: Scalar>(seed: u64) -> ModelParams<T> {
    let mut rng = substream(seed, "init");
    let mut map = BTreeMap::new();
    for (name, dims) in roster() {
        let t = if name.ends_with(".weight") {
            let (k, cin) = (dims[0], dims[2]);
            let fan_in = if name.contains("deconv") { cin } else { k * k * cin };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let data: Vec<T> = (0..dims.iter().product::<usize>())
                .map(|_| T::from_f64(normal.sample(&mut rng)))
                .collect();
            Tensor::from_vec(&dims, data).unwrap()
        } else if name.ends_with("gamma") || name.ends_with("running_var") {
            Tensor::filled(&dims, T::one())
        } else {
            Tensor::zeros(&dims)
        };
        map.insert(name, t);
    }
    ModelParams { map }
}

/// Gradient map mirroring the learnable part of the roster.
#[derive(Clone, Debug)]
pub struct ParamGrads<T: Scalar = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros() -> Self {
        let map = roster()
            .into_iter()
            .filter(|(n, _)| is_learnable(n))
            .map(|(n, d)| (n, Tensor::zeros(&d)))
            .collect();
        ParamGrads { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("gradient name '{name}' not in roster")))?;
        if slot.dims() != grad.dims() {
            return Err(Error::shape(format!(
                "gradient '{name}' dims {:?} do not match parameter dims {:?}",
                grad.dims(),
                slot.dims()
            )));
        }
        for (a, &g) in slot.data_mut().iter_mut().zip(grad.data()) {
            *a += g;
        }
        Ok(())
    }
}

struct BranchTrace<T: Scalar> {
    scale: usize,
    pool: Tensor<T>,
    pool_cache: Option<PoolCache>,
    conv_pre: Tensor<T>,
    conv: Tensor<T>,
    deconv: Tensor<T>,
}

/// All per-sample intermediate activations of one forward pass.
struct SampleTrace<T: Scalar> {
    bn_out: Tensor<T>,
    conv1_pre: Tensor<T>,
    conv1: Tensor<T>,
    conv2_pre: Tensor<T>,
    conv2: Tensor<T>,
    conv3_pre: Tensor<T>,
    conv3: Tensor<T>,
    mp: Tensor<T>,
    mp_cache: PoolCache,
    branches: Vec<BranchTrace<T>>,
    concat: Tensor<T>,
    conv4_pre: Tensor<T>,
    conv4: Tensor<T>,
    conv5: Tensor<T>,
    logits: Tensor<T>,
}

/// Retained activations of a whole batch, consumed by [`backward`].
pub struct ForwardTrace<T: Scalar> {
    input_dims: Vec<usize>,
    bn_cache: BnCache<T>,
    samples: Vec<SampleTrace<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }

    /// Named per-sample activation dims in pipeline order, for conformance
    /// checks against the expected layer extents.
    pub fn layer_dims(&self) -> Vec<(String, Vec<usize>)> {
        let s = &self.samples[0];
        let mut rows: Vec<(String, Vec<usize>)> = vec![
            ("Input".into(), self.input_dims[1..].to_vec()),
            ("Conv-3.1".into(), s.conv1.dims().to_vec()),
            ("Conv-3.2".into(), s.conv2.dims().to_vec()),
            ("Conv-3.3".into(), s.conv3.dims().to_vec()),
            ("MP-2".into(), s.mp.dims().to_vec()),
        ];
        for (i, b) in s.branches.iter().enumerate() {
            rows.push((format!("SP-{}", b.scale), b.pool.dims().to_vec()));
            rows.push((format!("Conv-1.{}", i + 1), b.conv.dims().to_vec()));
            rows.push((format!("DeConv.{}", i + 1), b.deconv.dims().to_vec()));
        }
        rows.push(("Contact".into(), s.concat.dims().to_vec()));
        rows.push(("Conv-3.4".into(), s.conv4.dims().to_vec()));
        rows.push(("Conv-1.5".into(), s.conv5.dims().to_vec()));
        rows.push(("DeConv.5".into(), s.logits.dims().to_vec()));
        rows
    }
}

fn check_batch_dims<T: Scalar>(batch: &Tensor<T>) -> Result<usize> {
    match batch.dims() {
        [n, PATCH, PATCH, IN_CHANNELS] => Ok(*n),
        d => Err(Error::shape(format!(
            "model input must be N x {PATCH} x {PATCH} x {IN_CHANNELS}, got {d:?}"
        ))),
    }
}

fn forward_sample<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bn_out: Tensor<T>,
) -> Result<SampleTrace<T>> {
    let conv1_pre = conv2d_forward(
        &bn_out,
        params.p("conv3_1.weight"),
        params.p("conv3_1.bias"),
        1,
        1,
    )?;
    let conv1 = relu_forward(&conv1_pre);
    let conv2_pre = conv2d_forward(
        &conv1,
        params.p("conv3_2.weight"),
        params.p("conv3_2.bias"),
        1,
        1,
    )?;
    let conv2 = relu_forward(&conv2_pre);
    let conv3_pre = conv2d_forward(
        &conv2,
        params.p("conv3_3.weight"),
        params.p("conv3_3.bias"),
        1,
        1,
    )?;
    let conv3 = relu_forward(&conv3_pre);
    let (mp, mp_cache) = maxpool_forward(&conv3, 2, 2)?;

    let mut branches = Vec::with_capacity(BRANCH_SCALES.len());
    for s in BRANCH_SCALES {
        let (pool, pool_cache) = match cfg.sp_pool {
            SpPool::Avg => (avgpool_forward(&mp, s)?, None),
            SpPool::Max => {
                let (p, c) = maxpool_forward(&mp, s, s)?;
                (p, Some(c))
            }
        };
        let conv_pre = conv2d_forward(
            &pool,
            params.p(&format!("branch{s}.conv1.weight")),
            params.p(&format!("branch{s}.conv1.bias")),
            1,
            0,
        )?;
        let conv = relu_forward(&conv_pre);
        let deconv = deconv2d_forward(
            &conv,
            params.p(&format!("branch{s}.deconv.weight")),
            params.p(&format!("branch{s}.deconv.bias")),
            s,
        )?;
        branches.push(BranchTrace {
            scale: s,
            pool,
            pool_cache,
            conv_pre,
            conv,
            deconv,
        });
    }

    let concat = concat_channels(&[
        &branches[0].deconv,
        &branches[1].deconv,
        &branches[2].deconv,
        &branches[3].deconv,
        &mp,
    ])?;
    let conv4_pre = conv2d_forward(
        &concat,
        params.p("conv3_4.weight"),
        params.p("conv3_4.bias"),
        1,
        1,
    )?;
    let conv4 = relu_forward(&conv4_pre);
    let conv5 = conv2d_forward(
        &conv4,
        params.p("conv1_5.weight"),
        params.p("conv1_5.bias"),
        1,
        0,
    )?;
    let logits = deconv2d_forward(
        &conv5,
        params.p("deconv5.weight"),
        params.p("deconv5.bias"),
        2,
    )?;

    Ok(SampleTrace {
        bn_out,
        conv1_pre,
        conv1,
        conv2_pre,
        conv2,
        conv3_pre,
        conv3,
        mp,
        mp_cache,
        branches,
        concat,
        conv4_pre,
        conv4,
        conv5,
        logits,
    })
}

fn run<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, ForwardTrace<T>, RunningStats<T>)> {
    let n = check_batch_dims(batch)?;
    let running = params.running();
    let (bn_out, updated, bn_cache) = batchnorm_forward(
        batch,
        params.p("bn_in.gamma"),
        params.p("bn_in.beta"),
        &running,
        mode,
        T::from_f64(cfg.bn_momentum),
        T::from_f64(cfg.bn_epsilon),
    )?;

    let samples: Vec<SampleTrace<T>> = (0..n)
        .into_par_iter()
        .map(|i| forward_sample(params, cfg, bn_out.batch_slice(i)))
        .collect::<Result<_>>()?;

    let per_sample: Vec<Tensor<T>> = samples.iter().map(|s| s.logits.clone()).collect();
    let logits = Tensor::stack(&per_sample)?;
    let trace = ForwardTrace {
        input_dims: batch.dims().to_vec(),
        bn_cache,
        samples,
    };
    Ok((logits, trace, updated))
}

/// Forward pass. Train mode uses batch statistics and updates the BN running
/// stats in place (the only mutation of `params` outside the optimizer);
/// eval mode leaves `params` untouched.
pub fn forward<T: Scalar>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let (logits, trace, updated) = run(params, cfg, batch, mode)?;
    if mode == Mode::Train {
        params.set_running(&updated);
    }
    Ok((logits, trace))
}

/// Eval-mode forward over shared immutable params; safe to call from
/// concurrent threads.
pub fn forward_eval<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let (logits, trace, _) = run(params, cfg, batch, Mode::Eval)?;
    Ok((logits, trace))
}

type SampleGrads<T> = Vec<(String, Tensor<T>)>;

/// Pull (weight, bias) gradients out of a layer's `d_params` map.
fn take_wb<T: Scalar>(g: BTreeMap<String, Tensor<T>>) -> (Tensor<T>, Tensor<T>) {
    let mut weight = None;
    let mut bias = None;
    for (k, v) in g {
        match k.as_str() {
            "weight" => weight = Some(v),
            "bias" => bias = Some(v),
            _ => {}
        }
    }
    (weight.unwrap(), bias.unwrap())
}

fn backward_sample<T: Scalar>(
    params: &ModelParams<T>,
    s: &SampleTrace<T>,
    d_logits: &Tensor<T>,
) -> Result<(SampleGrads<T>, Tensor<T>)> {
    let mut grads: SampleGrads<T> = Vec::with_capacity(24);

    let g = deconv2d_backward(&s.conv5, params.p("deconv5.weight"), d_logits, 2)?;
    let d_conv5 = g.d_input;
    let (w, b) = take_wb(g.d_params);
    grads.push(("deconv5.weight".into(), w));
    grads.push(("deconv5.bias".into(), b));

    let g = conv2d_backward(&s.conv4, params.p("conv1_5.weight"), &d_conv5, 1, 0)?;
    let d_conv4_pre = relu_backward(&s.conv4_pre, &g.d_input)?;
    let (w, b) = take_wb(g.d_params);
    grads.push(("conv1_5.weight".into(), w));
    grads.push(("conv1_5.bias".into(), b));

    let g = conv2d_backward(&s.concat, params.p("conv3_4.weight"), &d_conv4_pre, 1, 1)?;
    let d_concat = g.d_input;
    let (w, b) = take_wb(g.d_params);
    grads.push(("conv3_4.weight".into(), w));
    grads.push(("conv3_4.bias".into(), b));

    let mut parts = crate::layers::split_channels(&d_concat, &[32, 32, 32, 32, 128])?;
    let mut d_mp = parts.pop().unwrap();
    for (branch, d_branch) in s.branches.iter().zip(parts) {
        let sc = branch.scale;
        let g = deconv2d_backward(
            &branch.conv,
            params.p(&format!("branch{sc}.deconv.weight")),
            &d_branch,
            sc,
        )?;
        let d_conv_pre = relu_backward(&branch.conv_pre, &g.d_input)?;
        let (w, b) = take_wb(g.d_params);
        grads.push((format!("branch{sc}.deconv.weight"), w));
        grads.push((format!("branch{sc}.deconv.bias"), b));

        let g = conv2d_backward(
            &branch.pool,
            params.p(&format!("branch{sc}.conv1.weight")),
            &d_conv_pre,
            1,
            0,
        )?;
        let (w, b) = take_wb(g.d_params);
        grads.push((format!("branch{sc}.conv1.weight"), w));
        grads.push((format!("branch{sc}.conv1.bias"), b));

        let d_pool_in = match &branch.pool_cache {
            None => avgpool_backward(&g.d_input, sc)?,
            Some(cache) => maxpool_backward(cache, &g.d_input)?,
        };
        for (a, &v) in d_mp.data_mut().iter_mut().zip(d_pool_in.data()) {
            *a += v;
        }
    }

    let d_conv3 = maxpool_backward(&s.mp_cache, &d_mp)?;
    let d_conv3_pre = relu_backward(&s.conv3_pre, &d_conv3)?;
    let g = conv2d_backward(&s.conv2, params.p("conv3_3.weight"), &d_conv3_pre, 1, 1)?;
    let d_conv2 = g.d_input;
    let (w, b) = take_wb(g.d_params);
    grads.push(("conv3_3.weight".into(), w));
    grads.push(("conv3_3.bias".into(), b));

    let d_conv2_pre = relu_backward(&s.conv2_pre, &d_conv2)?;
    let g = conv2d_backward(&s.conv1, params.p("conv3_2.weight"), &d_conv2_pre, 1, 1)?;
    let d_conv1 = g.d_input;
    let (w, b) = take_wb(g.d_params);
    grads.push(("conv3_2.weight".into(), w));
    grads.push(("conv3_2.bias".into(), b));

    let d_conv1_pre = relu_backward(&s.conv1_pre, &d_conv1)?;
    let g = conv2d_backward(&s.bn_out, params.p("conv3_1.weight"), &d_conv1_pre, 1, 1)?;
    let (w, b) = take_wb(g.d_params);
    grads.push(("conv3_1.weight".into(), w));
    grads.push(("conv3_1.bias".into(), b));

    Ok((grads, g.d_input))
}

/// Exact analytic gradients of every learnable parameter for a train-mode
/// trace. Branch gradients flow through the channel-concat split; BN running
/// stats receive no gradient.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    d_logits: &Tensor<T>,
) -> Result<ParamGrads<T>> {
    let n = trace.samples.len();
    let expect = [n, PATCH, PATCH, 2];
    if d_logits.dims() != expect {
        return Err(Error::shape(format!(
            "d_logits dims {:?} do not match trace logits dims {expect:?}",
            d_logits.dims()
        )));
    }

    let per_sample: Vec<(SampleGrads<T>, Tensor<T>)> = (0..n)
        .into_par_iter()
        .map(|i| backward_sample(params, &trace.samples[i], &d_logits.batch_slice(i)))
        .collect::<Result<_>>()?;

    let mut grads = ParamGrads::zeros();
    let mut d_bn_samples = Vec::with_capacity(n);
    for (sample_grads, d_bn) in per_sample {
        for (name, g) in sample_grads {
            grads.accumulate(&name, &g)?;
        }
        d_bn_samples.push(d_bn);
    }

    let d_bn_out = Tensor::stack(&d_bn_samples)?;
    let bn = batchnorm_backward(&trace.bn_cache, &d_bn_out)?;
    grads.accumulate("bn_in.gamma", &bn.d_params["gamma"])?;
    grads.accumulate("bn_in.beta", &bn.d_params["beta"])?;
    Ok(grads)
}

/// Random batch helper used by tests and smoke paths.
pub fn random_batch<T: Scalar>(n: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = substream(seed, "random-batch");
    let mut inputs = Tensor::zeros(&[n, PATCH, PATCH, IN_CHANNELS]);
    for v in inputs.data_mut() {
        *v = T::from_f64(rng.random_range(0.0..1.0));
    }
    let mut labels = Tensor::zeros(&[n, PATCH, PATCH]);
    for v in labels.data_mut() {
        *v = if rng.random_range(0.0..1.0f64) < 0.5 {
            T::zero()
        } else {
            T::one()
        };
    }
    (inputs, labels)
}
