//! Encoder/decoder U-Net with skip connections and block-addressable parameters.
//!
//! Block numbering for the default depth of five: encoder blocks `1..=5`
//! (block 5 is the bottleneck), decoder blocks `6..=9` (block `6` pairs with
//! encoder block `4`, ..., block `9` with block `1`), and the 1x1 head is block
//! `10`. Each encoder/decoder block is two `conv3x3 -> batch norm -> relu`
//! stages; decoder blocks start with a learned 2x2 transposed convolution
//! whose output is concatenated after the skip features.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{max_relative_error_at_scale, numeric_gradient, BnMode, BnStats, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{BlockId, Parameter};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Filters of the first encoder block; doubled per block.
    pub base_filters: usize,
    pub encoder_blocks: usize,
    pub num_classes: usize,
    /// Nominal square input extent; forward accepts any extents divisible by
    /// `2^(encoder_blocks - 1)`.
    pub input_size: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_filters: 16,
            encoder_blocks: 5,
            num_classes: 3,
            input_size: 96,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 {
            return Err(Error::Config("in_channels and base_filters must be positive".into()));
        }
        if !(1..=7).contains(&self.encoder_blocks) {
            return Err(Error::Config(format!(
                "encoder_blocks must be in 1..=7, got {}",
                self.encoder_blocks
            )));
        }
        if ![2, 3, 5].contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be 2, 3 or 5, got {}",
                self.num_classes
            )));
        }
        let m = self.spatial_multiple();
        if self.input_size == 0 || self.input_size % m != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not a positive multiple of {m}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.encoder_blocks - 1)
    }

    pub fn filters(&self, encoder_block: usize) -> usize {
        self.base_filters << (encoder_block - 1)
    }

    pub fn encoder_ids(&self) -> impl Iterator<Item = BlockId> {
        (1..=self.encoder_blocks as u8).map(BlockId)
    }

    pub fn decoder_ids(&self) -> impl Iterator<Item = BlockId> {
        let e = self.encoder_blocks as u8;
        (e + 1..2 * e).map(BlockId)
    }

    pub fn head_id(&self) -> BlockId {
        BlockId(2 * self.encoder_blocks as u8)
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        (1..=2 * self.encoder_blocks as u8).map(BlockId).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct ConvStage {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
}

#[derive(Clone, Debug)]
struct Block {
    /// Transposed-convolution kernel; decoder blocks only.
    up: Option<usize>,
    stages: [ConvStage; 2],
}

/// Running statistics of one batch-norm layer and the block that owns it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormBuffer<T> {
    pub name: String,
    pub block_id: BlockId,
    pub stats: BnStats<T>,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: UNetConfig,
    params: Vec<Parameter<T>>,
    norms: Vec<NormBuffer<T>>,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    head: (usize, usize),
}

/// Parameter leaves of one forward pass.
pub struct Forward {
    pub logits: Var,
    params: Vec<Var>,
}

struct Builder<'a, T> {
    params: Vec<Parameter<T>>,
    norms: Vec<NormBuffer<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize, block: BlockId) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal.sample(self.rng))).collect();
        self.push(name, Tensor::new(shape, data).expect("valid shape"), block)
    }

    fn push(&mut self, name: String, tensor: Tensor<T>, block: BlockId) -> usize {
        self.params.push(Parameter::new(name, tensor, block));
        self.params.len() - 1
    }

    fn stage(&mut self, prefix: &str, cin: usize, cout: usize, block: BlockId) -> ConvStage {
        let weight = self.kaiming(format!("{prefix}.conv.weight"), &[cout, cin, 3, 3], cin * 9, block);
        let bias = self.push(format!("{prefix}.conv.bias"), Tensor::zeros(&[cout]), block);
        let gamma = self.push(format!("{prefix}.bn.gamma"), Tensor::full(&[cout], T::one()), block);
        let beta = self.push(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]), block);
        self.norms.push(NormBuffer {
            name: format!("{prefix}.bn"),
            block_id: block,
            stats: BnStats::new(cout),
        });
        ConvStage {
            weight,
            bias,
            gamma,
            beta,
            norm: self.norms.len() - 1,
        }
    }
}

impl<T: Scalar> UNet<T> {
    /// Build with Kaiming fan-in initialization drawn from `config.seed`.
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            params: Vec::new(),
            norms: Vec::new(),
            rng: &mut rng,
        };
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for (i, id) in config.encoder_ids().enumerate() {
            let f = config.filters(i + 1);
            let s1 = b.stage(&format!("block{id}.0"), cin, f, id);
            let s2 = b.stage(&format!("block{id}.1"), f, f, id);
            encoder.push(Block {
                up: None,
                stages: [s1, s2],
            });
            cin = f;
        }
        let mut decoder = Vec::new();
        for (j, id) in config.decoder_ids().enumerate() {
            let f = config.filters(config.encoder_blocks - 1 - j);
            let up = b.kaiming(format!("block{id}.up.weight"), &[cin, f, 2, 2], cin, id);
            let s1 = b.stage(&format!("block{id}.0"), 2 * f, f, id);
            let s2 = b.stage(&format!("block{id}.1"), f, f, id);
            decoder.push(Block {
                up: Some(up),
                stages: [s1, s2],
            });
            cin = f;
        }
        let hid = config.head_id();
        let hw = b.kaiming("head.weight".into(), &[config.num_classes, cin, 1, 1], cin, hid);
        let hb = b.push("head.bias".into(), Tensor::zeros(&[config.num_classes]), hid);
        let Builder { params, norms, .. } = b;
        Ok(Self {
            config,
            params,
            norms,
            encoder,
            decoder,
            head: (hw, hb),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormBuffer<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormBuffer<T>] {
        &mut self.norms
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        self.config.block_ids()
    }

    fn check_block(&self, id: BlockId) -> Result<()> {
        if id.0 == 0 || id > self.config.head_id() {
            return Err(Error::UnknownBlock(id.0));
        }
        Ok(())
    }

    /// Set the trainable flag of every parameter in `block`. Batch-norm running
    /// statistics of a frozen block stop updating as well.
    pub fn set_block_trainable(&mut self, block: BlockId, trainable: bool) -> Result<()> {
        self.check_block(block)?;
        for p in self.params.iter_mut().filter(|p| p.block_id == block) {
            p.trainable = trainable;
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn is_block_trainable(&self, block: BlockId) -> Result<bool> {
        self.check_block(block)?;
        Ok(self.params.iter().any(|p| p.block_id == block && p.trainable))
    }

    pub fn frozen_blocks(&self) -> Vec<BlockId> {
        self.block_ids()
            .into_iter()
            .filter(|&b| !self.params.iter().any(|p| p.block_id == b && p.trainable))
            .collect()
    }

    /// Replace the 3-class head (background, liver, lesion) with a 5-class head.
    /// Background and liver channels are copied; the three lesion-type
    /// channels start from N(0, 0.01) weights and zero bias.
    pub fn swap_head(&mut self, new_num_classes: usize, seed: u64) -> Result<()> {
        if new_num_classes == self.config.num_classes {
            warn!("head already has {new_num_classes} classes; swap_head is a no-op");
            return Ok(());
        }
        if self.config.num_classes != 3 || new_num_classes != 5 {
            return Err(Error::Config(format!(
                "swap_head supports 3 -> 5 classes, got {} -> {new_num_classes}",
                self.config.num_classes
            )));
        }
        let (wi, bi) = self.head;
        let cin = self.params[wi].tensor.shape()[1];
        let old_w = self.params[wi].tensor.data().to_vec();
        let old_b = self.params[bi].tensor.data().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        let mut w = Vec::with_capacity(new_num_classes * cin);
        w.extend_from_slice(&old_w[..2 * cin]);
        w.extend((0..3 * cin).map(|_| T::from_f64(normal.sample(&mut rng))));
        let mut b = old_b[..2].to_vec();
        b.extend([T::zero(); 3]);
        self.params[wi].tensor = Tensor::new(&[new_num_classes, cin, 1, 1], w)?;
        self.params[wi].grad = None;
        self.params[bi].tensor = Tensor::new(&[new_num_classes], b)?;
        self.params[bi].grad = None;
        self.config.num_classes = new_num_classes;
        Ok(())
    }

    /// Record a forward pass. In train mode trainable blocks normalize with
    /// batch statistics and update their running statistics; frozen blocks
    /// normalize with their running statistics once those exist.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<Forward> {
        let mut norms = std::mem::take(&mut self.norms);
        let out = self.forward_with(tape, input, mode, &mut norms);
        self.norms = norms;
        out
    }

    /// Eval-mode forward without touching the model.
    pub fn forward_eval(&self, tape: &mut Tape<T>, input: Var) -> Result<Forward> {
        let mut norms = self.norms.clone();
        self.forward_with(tape, input, Mode::Eval, &mut norms)
    }

    /// Eval-mode logits for a `[N, C, H, W]` batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let f = self.forward_eval(&mut tape, x)?;
        Ok(tape.value(f.logits).clone())
    }

    fn forward_with(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        norms: &mut [NormBuffer<T>],
    ) -> Result<Forward> {
        let [_, c, h, w] = tape.value(input).dims4("unet input")?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "unet expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "unet input extents {h}x{w} must be multiples of {m}"
            )));
        }
        let want_grad = mode == Mode::Train;
        let vars: Vec<Var> = self.params.iter().map(|p| p.bind(tape, want_grad)).collect();
        let mut x = input;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = tape.max_pool_2x2(x)?;
            }
            x = self.run_block(tape, block, x, mode, &vars, norms)?;
            skips.push(x);
        }
        skips.pop();
        for block in &self.decoder {
            let up = tape.transposed_conv_2x2(x, vars[block.up.expect("decoder block")])?;
            let skip = skips.pop().expect("one skip per decoder block");
            let cat = tape.concat_channels(skip, up)?;
            x = self.run_block(tape, block, cat, mode, &vars, norms)?;
        }
        let logits = tape.conv2d(x, vars[self.head.0], vars[self.head.1])?;
        Ok(Forward { logits, params: vars })
    }

    fn run_block(
        &self,
        tape: &mut Tape<T>,
        block: &Block,
        mut x: Var,
        mode: Mode,
        vars: &[Var],
        norms: &mut [NormBuffer<T>],
    ) -> Result<Var> {
        for s in &block.stages {
            x = tape.conv2d(x, vars[s.weight], vars[s.bias])?;
            let stats = &mut norms[s.norm].stats;
            let frozen = !self.params[s.gamma].trainable;
            let bn_mode = match mode {
                Mode::Eval => BnMode::Eval,
                Mode::Train if !frozen => BnMode::Train { update_stats: true },
                Mode::Train if stats.initialized => BnMode::Eval,
                Mode::Train => BnMode::Train { update_stats: false },
            };
            x = tape.batch_norm(x, vars[s.gamma], vars[s.beta], stats, bn_mode)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    /// Add the gradients of a finished backward pass into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, fwd: &Forward) {
        for (p, &v) in self.params.iter_mut().zip(&fwd.params) {
            p.accumulate_grad(tape, v);
        }
    }

    /// Spatial extent of each encoder block's output for a square input.
    pub fn encoder_extents(&self, input: usize) -> Vec<usize> {
        (0..self.config.encoder_blocks).map(|k| input >> k).collect()
    }

    /// Copy of this model in another precision.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: None,
                    trainable: p.trainable,
                    block_id: p.block_id,
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| NormBuffer {
                    name: n.name.clone(),
                    block_id: n.block_id,
                    stats: BnStats {
                        mean: n.stats.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        var: n.stats.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        initialized: n.stats.initialized,
                    },
                })
                .collect(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }

    /// Reassemble a model from checkpointed parts; shapes must match `config`.
    pub fn from_parts(config: UNetConfig, params: Vec<Parameter<T>>, norms: Vec<NormBuffer<T>>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() || norms.len() != model.norms.len() {
            return Err(Error::Config(format!(
                "expected {} parameters and {} norm buffers, got {} and {}",
                model.params.len(),
                model.norms.len(),
                params.len(),
                norms.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.tensor.shape() != p.tensor.shape() || slot.block_id != p.block_id {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.tensor.shape(),
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            *slot = p;
        }
        for (slot, n) in model.norms.iter_mut().zip(norms) {
            if slot.name != n.name || slot.stats.mean.len() != n.stats.mean.len() {
                return Err(Error::Config(format!("norm buffer `{}` does not match `{}`", n.name, slot.name)));
            }
            *slot = n;
        }
        Ok(model)
    }
}

/// Compares the parameter gradients of the train-mode weighted cross-entropy
/// of `model` on `(input, classes)` against central differences with step `h`.
/// Relative errors are floored at `1e-6` of the largest gradient of the model.
pub fn loss_grad_check(
    model: &UNet<f64>,
    input: &Tensor<f64>,
    classes: &[u32],
    weights: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    let loss = |m: &mut UNet<f64>, tape: &mut Tape<f64>| -> Result<(Var, Forward)> {
        let x = tape.constant(input.clone());
        let fwd = m.forward(tape, x, Mode::Train)?;
        let probs = tape.softmax_pixelwise(fwd.logits)?;
        let l = tape.weighted_cross_entropy_indices(probs, classes.to_vec(), weights)?;
        Ok((l, fwd))
    };
    let mut m = model.clone();
    m.set_all_trainable(true);
    let mut tape = Tape::new();
    let (l, fwd) = loss(&mut m, &mut tape)?;
    tape.backward(l)?;
    m.accumulate_grads(&tape, &fwd);
    let analytic: Vec<Vec<f64>> = m
        .params
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        .collect();
    let tensors: Vec<Tensor<f64>> = model.params.iter().map(|p| p.tensor.clone()).collect();
    let numeric = numeric_gradient(
        |ts| {
            let mut m = model.clone();
            m.set_all_trainable(true);
            for (p, t) in m.params.iter_mut().zip(ts) {
                p.tensor = t.clone();
            }
            let mut tape = Tape::new();
            let (l, _) = loss(&mut m, &mut tape)?;
            Ok(tape.value(l).data()[0])
        },
        &tensors,
        h,
    )?;
    // conv biases ahead of batch norm have exactly zero gradient, so the
    // relative-error floor comes from the model-wide gradient scale
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let per_input: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error_at_scale(a, n, scale))
        .collect();
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Adam, AdamConfig};

    fn tiny(seed: u64) -> UNetConfig {
        UNetConfig {
            base_filters: 2,
            input_size: 16,
            seed,
            ..UNetConfig::default()
        }
    }

    /// Closed form: each encoder block k has filters f_k = b * 2^(k-1);
    /// a 3x3 conv contributes 9*cin*cout + cout, a batch norm 2*cout,
    /// an up-convolution 4*cin*cout, the head cin*K + K.
    fn count_formula(cin: usize, b: usize, depth: usize, k: usize) -> usize {
        let conv = |i: usize, o: usize| 9 * i * o + o + 2 * o;
        let f = |k: usize| b << (k - 1);
        let mut total = 0;
        let mut prev = cin;
        for blk in 1..=depth {
            total += conv(prev, f(blk)) + conv(f(blk), f(blk));
            prev = f(blk);
        }
        for blk in (1..depth).rev() {
            total += 4 * f(blk + 1) * f(blk) + conv(2 * f(blk), f(blk)) + conv(f(blk), f(blk));
        }
        total + b * k + k
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let model = UNet::<f32>::new(UNetConfig::default()).unwrap();
        assert_eq!(model.parameter_count(), count_formula(1, 16, 5, 3));
        // hand count for base 1, depth 1: conv(1->1)=9+1, bn=2, conv(1->1)=10, bn=2, head 1*3+3
        let one = UNet::<f32>::new(UNetConfig {
            base_filters: 1,
            encoder_blocks: 1,
            input_size: 4,
            ..UNetConfig::default()
        })
        .unwrap();
        assert_eq!(one.parameter_count(), 10 + 2 + 10 + 2 + 6);
        assert_eq!(count_formula(1, 1, 1, 3), 30);
    }

    #[test]
    fn every_parameter_has_a_known_block() {
        let model = UNet::<f32>::new(UNetConfig::default()).unwrap();
        let ids = model.block_ids();
        assert_eq!(ids.len(), 10);
        assert!(model.params().iter().all(|p| ids.contains(&p.block_id)));
        for id in &ids {
            assert!(model.params().iter().any(|p| p.block_id == *id));
        }
        assert!(model.params().iter().filter(|p| p.block_id == BlockId(10)).count() == 2);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = UNet::<f32>::new(tiny(3)).unwrap();
        let b = UNet::<f32>::new(tiny(3)).unwrap();
        let c = UNet::<f32>::new(tiny(4)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            UNetConfig {
                input_size: 40,
                ..UNetConfig::default()
            },
            UNetConfig {
                num_classes: 4,
                ..UNetConfig::default()
            },
            UNetConfig {
                base_filters: 0,
                ..UNetConfig::default()
            },
        ] {
            assert!(matches!(UNet::<f32>::new(cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn forward_preserves_spatial_extent() {
        let mut model = UNet::<f32>::new(UNetConfig {
            base_filters: 4,
            ..UNetConfig::default()
        })
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 96, 96]));
        let f = model.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(f.logits).shape(), &[1, 3, 96, 96]);
        assert!(tape.value(f.logits).all_finite());
    }

    #[test]
    fn minimal_config_runs() {
        let mut model = UNet::<f32>::new(UNetConfig {
            base_filters: 1,
            input_size: 16,
            ..UNetConfig::default()
        })
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 16, 16], 0.3));
        let f = model.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(f.logits).shape(), &[2, 3, 16, 16]);
        let bad = tape.constant(Tensor::zeros(&[1, 1, 24, 24]));
        assert!(matches!(model.forward(&mut tape, bad, Mode::Train), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_requires_statistics_then_is_deterministic() {
        let mut model = UNet::<f32>::new(tiny(1)).unwrap();
        let batch = Tensor::full(&[1, 1, 16, 16], 0.25);
        assert!(matches!(model.predict(&batch), Err(Error::UninitializedStatistics)));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 16, 16], (0..256).map(|i| (i as f32).sin()).collect()).unwrap());
        model.forward(&mut tape, x, Mode::Train).unwrap();
        let a = model.predict(&batch).unwrap();
        let b = model.predict(&batch).unwrap();
        assert_eq!(a, b);
    }

    fn train_steps(model: &mut UNet<f32>, steps: usize) {
        let mut adam = Adam::new(model.params(), AdamConfig::default());
        let labels: Vec<u32> = (0..256).map(|i| (i % 3) as u32).collect();
        for s in 0..steps {
            let mut tape = Tape::new();
            let data = (0..256).map(|i| ((i + s) as f32 * 0.37).sin()).collect();
            let x = tape.constant(Tensor::new(&[1, 1, 16, 16], data).unwrap());
            let f = model.forward(&mut tape, x, Mode::Train).unwrap();
            let p = tape.softmax_pixelwise(f.logits).unwrap();
            let n = model.num_classes();
            let loss = tape.weighted_cross_entropy_indices(p, labels.clone(), &vec![1.0; n]).unwrap();
            tape.backward(loss).unwrap();
            model.accumulate_grads(&tape, &f);
            adam.step(model.params_mut(), 1e-2).unwrap();
        }
    }

    #[test]
    fn frozen_block_is_bit_identical_after_training() {
        let mut model = UNet::<f32>::new(tiny(2)).unwrap();
        train_steps(&mut model, 1);
        model.set_block_trainable(BlockId(1), false).unwrap();
        let before = model.clone();
        train_steps(&mut model, 10);
        let mut changed = false;
        for (a, b) in before.params().iter().zip(model.params()) {
            if a.block_id == BlockId(1) {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            } else if a.tensor != b.tensor {
                changed = true;
            }
        }
        assert!(changed);
        for (a, b) in before.norms().iter().zip(model.norms()) {
            if a.block_id == BlockId(1) {
                assert_eq!(a.stats, b.stats);
            }
        }
    }

    #[test]
    fn trainable_flags_round_trip_and_unknown_blocks_error() {
        let mut model = UNet::<f32>::new(tiny(0)).unwrap();
        let initial: Vec<bool> = model.params().iter().map(|p| p.trainable).collect();
        for id in model.block_ids() {
            model.set_block_trainable(id, false).unwrap();
        }
        assert_eq!(model.frozen_blocks().len(), 10);
        for id in model.block_ids() {
            model.set_block_trainable(id, true).unwrap();
        }
        assert_eq!(model.params().iter().map(|p| p.trainable).collect::<Vec<_>>(), initial);
        assert!(matches!(model.set_block_trainable(BlockId(11), false), Err(Error::UnknownBlock(11))));
        assert!(matches!(model.set_block_trainable(BlockId(0), false), Err(Error::UnknownBlock(0))));
    }

    #[test]
    fn swap_head_preserves_body_and_background_liver_logits() {
        let mut model = UNet::<f32>::new(tiny(5)).unwrap();
        train_steps(&mut model, 3);
        let before = model.clone();
        let count_before = model.parameter_count();
        let probe = Tensor::new(&[1, 1, 16, 16], (0..256).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap();
        let old = model.predict(&probe).unwrap();
        model.swap_head(5, 99).unwrap();
        assert_eq!(model.num_classes(), 5);
        let head = model.config().head_id();
        for (a, b) in before.params().iter().zip(model.params()) {
            if a.block_id != head {
                assert_eq!(a.tensor.data().len(), b.tensor.data().len());
                assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        // head delta: two extra output channels of (cin weights + 1 bias)
        assert_eq!(model.parameter_count() - count_before, 2 * (2 + 1));
        let new = model.predict(&probe).unwrap();
        let hw = 256;
        for c in 0..2 {
            assert_eq!(&old.data()[c * hw..(c + 1) * hw], &new.data()[c * hw..(c + 1) * hw]);
        }
        assert!(new.data()[2 * hw..].iter().all(|v| v.abs() < 0.5));
        // second swap is a no-op
        let snapshot = model.clone();
        model.swap_head(5, 1).unwrap();
        assert_eq!(snapshot.params(), model.params());
    }

    #[test]
    fn encoder_extents_halve_per_block() {
        let model = UNet::<f32>::new(UNetConfig::default()).unwrap();
        assert_eq!(model.encoder_extents(96), vec![96, 48, 24, 12, 6]);
    }
}
