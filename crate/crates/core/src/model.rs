//! Encoder with a residual latent space feeding two output branches.
//!
//! ```text
//! T2 ─► enc0 ─► enc1 ─► enc2 ─► enc3 ─► latent (residual x3)
//!        │       │       │       │          │
//!        │       │       │       ├──────► dec3 ─► dec2 ─► dec1 ─► dec0 ─► recon
//!        │       │       │       │          │      │
//!        │       │       │       └──────► syn3 ◄──┘ (decoder skip)
//!        └───────┴───────┴──────────────► syn2 ─► syn1 ─► syn0 ─► seg
//! ```
//!
//! Each encoder block is `convs_per_block` x (conv, instance norm, leaky ReLU)
//! followed by 2x2 max pooling. Output blocks mirror this with nearest
//! upsampling in place of pooling and take the matching encoder block output
//! as a skip connection. The deepest synthesis block additionally receives
//! the output of the deepest decoder block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    max_pool2, max_pool2_backward, sigmoid_backward, sigmoid_inplace, upsample2,
    upsample2_backward, Conv2d, ConvUnit, ConvUnitCache, PoolCache, LEAKY_SLOPE,
};
use crate::rng::stream_rng;
use crate::tensor::{concat_channels, split_channels, Real, Tensor};

/// Number of pooling stages in the encoder.
pub const DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    pub input_hw: (usize, usize),
    pub base_channels: usize,
    pub channel_multipliers: [usize; DEPTH],
    pub latent_residual_blocks: usize,
    pub convs_per_block: usize,
    pub kernel_size: usize,
    /// Input modalities; one decoder branch is built per modality.
    pub modalities: Vec<String>,
    pub seg_output_activation: OutputActivation,
    pub recon_output_activation: OutputActivation,
    /// Foreground probability the segmentation head predicts at
    /// initialisation (its bias is set to the matching logit).
    pub seg_prior: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ArchitectureConfig {
    /// 400x400 slices with a channel plan sized to roughly 26.7M parameters.
    pub fn paper_scale() -> Self {
        ArchitectureConfig {
            input_hw: (400, 400),
            base_channels: 46,
            channel_multipliers: [1, 2, 4, 8],
            latent_residual_blocks: 3,
            convs_per_block: 3,
            kernel_size: 3,
            modalities: vec!["T2".into()],
            seg_output_activation: OutputActivation::Sigmoid,
            recon_output_activation: OutputActivation::Sigmoid,
            seg_prior: 0.01,
        }
    }

    /// 96x96 phantoms with channels small enough for CPU training.
    pub fn desk_scale() -> Self {
        ArchitectureConfig {
            input_hw: (96, 96),
            base_channels: 4,
            ..Self::paper_scale()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        let factor = 1 << DEPTH;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} must be a positive multiple of {factor} for {DEPTH} pooling stages"
            )));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if self.convs_per_block == 0 {
            return Err(Error::InvalidConfig("convs_per_block must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig("kernel_size must be odd".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidConfig("at least one modality required".into()));
        }
        if !(self.seg_prior > 0.0 && self.seg_prior < 1.0) {
            return Err(Error::InvalidConfig(format!("seg_prior {} outside (0, 1)", self.seg_prior)));
        }
        Ok(())
    }
}

/// Parameter groups, used for freezing and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Encoder,
    Latent,
    Decoder,
    Synthesis,
    Uncertainty,
}

/// One upsampling output branch. `blocks[0]` is the deepest block.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputBranch<T> {
    pub blocks: Vec<Vec<ConvUnit<T>>>,
    pub head: Conv2d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub first: ConvUnit<T>,
    pub second: ConvUnit<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthModel<T> {
    pub config: ArchitectureConfig,
    pub encoder: Vec<Vec<ConvUnit<T>>>,
    pub latent: Vec<ResidualBlock<T>>,
    pub decoders: Vec<OutputBranch<T>>,
    pub synthesis: OutputBranch<T>,
    /// `[log sigma1^2, log sigma2^2]` for the segmentation and local losses.
    pub log_sigma_sq: [T; 2],
    synthesis_frozen: bool,
    uncertainty_frozen: bool,
}

/// Everything the backward pass needs from a training forward pass.
pub struct ForwardCache<T> {
    encoder: Vec<Vec<ConvUnitCache<T>>>,
    pools: Vec<PoolCache>,
    latent: Vec<(ConvUnitCache<T>, ConvUnitCache<T>)>,
    decoders: Vec<BranchCache<T>>,
    synthesis: Option<BranchCache<T>>,
    pub recon: Tensor<T>,
    pub seg: Option<Tensor<T>>,
}

struct BranchCache<T> {
    units: Vec<Vec<ConvUnitCache<T>>>,
    /// Channel split of each block's concatenated input.
    splits: Vec<Vec<usize>>,
    deepest_out: Tensor<T>,
    head_input: Tensor<T>,
    output: Tensor<T>,
}

fn leaky_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

impl<T: Real> SynthModel<T> {
    pub fn build(cfg: &ArchitectureConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let gain = leaky_gain();
        let n_mod = cfg.modalities.len();

        let mut rng = stream_rng(seed, &[0xE4C0]);
        let mut encoder = Vec::with_capacity(DEPTH);
        for level in 0..DEPTH {
            let out = cfg.channels(level);
            let mut cin = if level == 0 { n_mod } else { cfg.channels(level - 1) };
            let mut units = Vec::with_capacity(cfg.convs_per_block);
            for _ in 0..cfg.convs_per_block {
                units.push(ConvUnit::new(Conv2d::new(cin, out, k, gain, &mut rng), true));
                cin = out;
            }
            encoder.push(units);
        }

        let deep = cfg.channels(DEPTH - 1);
        let mut rng = stream_rng(seed, &[0x1A7E]);
        let latent = (0..cfg.latent_residual_blocks)
            .map(|_| ResidualBlock {
                first: ConvUnit::new(Conv2d::new(deep, deep, k, gain, &mut rng), true),
                // Shortcut branch ends without activation so the block is an
                // identity at zero residual.
                second: ConvUnit::new(Conv2d::new(deep, deep, k, gain, &mut rng), false),
            })
            .collect();

        let decoders = (0..n_mod)
            .map(|m| {
                let mut rng = stream_rng(seed, &[0xDEC0, m as u64]);
                Self::build_branch(cfg, 0, &mut rng)
            })
            .collect();
        let mut rng = stream_rng(seed, &[0x5E6]);
        let mut synthesis = Self::build_branch(cfg, n_mod * deep, &mut rng);
        let prior = cfg.seg_prior;
        synthesis.head.bias[0] = T::from_f64_lossy((prior / (1.0 - prior)).ln());

        Ok(SynthModel {
            config: cfg.clone(),
            encoder,
            latent,
            decoders,
            synthesis,
            log_sigma_sq: [T::zero(); 2],
            synthesis_frozen: false,
            uncertainty_frozen: false,
        })
    }

    fn build_branch<R: rand::Rng>(
        cfg: &ArchitectureConfig,
        extra_deep_channels: usize,
        rng: &mut R,
    ) -> OutputBranch<T> {
        let k = cfg.kernel_size;
        let gain = leaky_gain();
        let mut blocks = Vec::with_capacity(DEPTH);
        let mut prev = cfg.channels(DEPTH - 1);
        for level in (0..DEPTH).rev() {
            let out = cfg.channels(level);
            let mut cin = prev + out;
            if level == DEPTH - 1 {
                cin += extra_deep_channels;
            }
            let mut units = Vec::with_capacity(cfg.convs_per_block);
            for _ in 0..cfg.convs_per_block {
                units.push(ConvUnit::new(Conv2d::new(cin, out, k, gain, rng), true));
                cin = out;
            }
            blocks.push(units);
            prev = out;
        }
        OutputBranch {
            blocks,
            head: Conv2d::new(cfg.channels(0), 1, 1, 1.0, rng),
        }
    }

    /// A zero-valued model with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let zero_units = |units: &Vec<ConvUnit<T>>| units.iter().map(|u| u.zeros_like()).collect();
        let zero_branch = |b: &OutputBranch<T>| OutputBranch {
            blocks: b.blocks.iter().map(zero_units).collect(),
            head: b.head.zeros_like(),
        };
        SynthModel {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(zero_units).collect(),
            latent: self
                .latent
                .iter()
                .map(|r| ResidualBlock {
                    first: r.first.zeros_like(),
                    second: r.second.zeros_like(),
                })
                .collect(),
            decoders: self.decoders.iter().map(zero_branch).collect(),
            synthesis: zero_branch(&self.synthesis),
            log_sigma_sq: [T::zero(); 2],
            synthesis_frozen: self.synthesis_frozen,
            uncertainty_frozen: self.uncertainty_frozen,
        }
    }

    /// Excludes (or re-includes) the synthesis branch from gradient updates.
    pub fn freeze_synthesis_branch(&mut self, frozen: bool) {
        self.synthesis_frozen = frozen;
    }

    pub fn synthesis_frozen(&self) -> bool {
        self.synthesis_frozen
    }

    pub fn freeze_uncertainty(&mut self, frozen: bool) {
        self.uncertainty_frozen = frozen;
    }

    pub fn uncertainty_frozen(&self) -> bool {
        self.uncertainty_frozen
    }

    pub fn is_trainable(&self, part: Part) -> bool {
        match part {
            Part::Synthesis => !self.synthesis_frozen,
            Part::Uncertainty => !self.uncertainty_frozen,
            _ => true,
        }
    }

    /// Exact number of trainable scalars, including the two uncertainty
    /// parameters.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, _, p)| p.len()).sum()
    }

    pub fn parameter_count_of(&self, part: Part) -> usize {
        self.params()
            .iter()
            .filter(|(_, p, _)| *p == part)
            .map(|(_, _, s)| s.len())
            .sum()
    }

    /// All parameter tensors in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, Part, &[T])> {
        type Named<'a, T> = Vec<(String, Part, &'a [T])>;
        fn unit<'a, T>(out: &mut Named<'a, T>, name: String, part: Part, u: &'a ConvUnit<T>) {
            out.push((format!("{name}.conv.weight"), part, &u.conv.weight[..]));
            out.push((format!("{name}.conv.bias"), part, &u.conv.bias[..]));
            out.push((format!("{name}.norm.gamma"), part, &u.norm.gamma[..]));
            out.push((format!("{name}.norm.beta"), part, &u.norm.beta[..]));
        }
        fn branch<'a, T>(out: &mut Named<'a, T>, prefix: String, part: Part, br: &'a OutputBranch<T>) {
            for (b, units) in br.blocks.iter().enumerate() {
                for (i, u) in units.iter().enumerate() {
                    unit(out, format!("{prefix}.{b}.{i}"), part, u);
                }
            }
            out.push((format!("{prefix}.head.weight"), part, &br.head.weight[..]));
            out.push((format!("{prefix}.head.bias"), part, &br.head.bias[..]));
        }
        let mut out = Vec::new();
        for (b, units) in self.encoder.iter().enumerate() {
            for (i, u) in units.iter().enumerate() {
                unit(&mut out, format!("encoder.{b}.{i}"), Part::Encoder, u);
            }
        }
        for (b, r) in self.latent.iter().enumerate() {
            unit(&mut out, format!("latent.{b}.0"), Part::Latent, &r.first);
            unit(&mut out, format!("latent.{b}.1"), Part::Latent, &r.second);
        }
        for (m, d) in self.decoders.iter().enumerate() {
            branch(&mut out, format!("decoder{m}"), Part::Decoder, d);
        }
        branch(&mut out, "synthesis".into(), Part::Synthesis, &self.synthesis);
        out.push(("log_sigma_sq".into(), Part::Uncertainty, &self.log_sigma_sq[..]));
        out
    }

    /// Mutable counterpart of [`params`](Self::params), same order.
    pub fn params_mut(&mut self) -> Vec<(Part, &mut [T])> {
        fn unit<'a, T>(out: &mut Vec<(Part, &'a mut [T])>, part: Part, u: &'a mut ConvUnit<T>) {
            out.push((part, &mut u.conv.weight[..]));
            out.push((part, &mut u.conv.bias[..]));
            out.push((part, &mut u.norm.gamma[..]));
            out.push((part, &mut u.norm.beta[..]));
        }
        fn branch<'a, T>(out: &mut Vec<(Part, &'a mut [T])>, part: Part, br: &'a mut OutputBranch<T>) {
            for units in br.blocks.iter_mut() {
                for u in units.iter_mut() {
                    unit(out, part, u);
                }
            }
            out.push((part, &mut br.head.weight[..]));
            out.push((part, &mut br.head.bias[..]));
        }
        let mut out = Vec::new();
        for units in self.encoder.iter_mut() {
            for u in units.iter_mut() {
                unit(&mut out, Part::Encoder, u);
            }
        }
        for r in self.latent.iter_mut() {
            unit(&mut out, Part::Latent, &mut r.first);
            unit(&mut out, Part::Latent, &mut r.second);
        }
        for d in self.decoders.iter_mut() {
            branch(&mut out, Part::Decoder, d);
        }
        branch(&mut out, Part::Synthesis, &mut self.synthesis);
        out.push((Part::Uncertainty, &mut self.log_sigma_sq[..]));
        out
    }

    /// `exp(log sigma^2)` for both tasks.
    pub fn sigma_sq(&self) -> [T; 2] {
        [self.log_sigma_sq[0].exp(), self.log_sigma_sq[1].exp()]
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.config.input_hw;
        let c = self.config.modalities.len();
        if x.c != c || x.h != h || x.w != w || x.n == 0 {
            return Err(Error::shape(
                format!("[batch >= 1, {c}, {h}, {w}]"),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Inference: returns `(recon, seg_prob)`, each `[n, 1, h, w]` per modality
    /// (recon has one channel per modality).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let cache = self.forward_train(x, true)?;
        Ok((cache.recon, cache.seg.expect("synthesis requested")))
    }

    /// Forward pass keeping intermediates for [`backward`](Self::backward).
    /// The synthesis branch is skipped when `with_synthesis` is false.
    pub fn forward_train(&self, x: &Tensor<T>, with_synthesis: bool) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let mut enc_caches = Vec::with_capacity(DEPTH);
        let mut pools = Vec::with_capacity(DEPTH);
        let mut skips = Vec::with_capacity(DEPTH);
        let mut h = x.clone();
        for units in &self.encoder {
            let mut caches = Vec::with_capacity(units.len());
            for u in units {
                let (y, c) = u.forward_train(h);
                caches.push(c);
                h = y;
            }
            let (pooled, pc) = max_pool2(&h);
            skips.push(h);
            pools.push(pc);
            enc_caches.push(caches);
            h = pooled;
        }

        let mut latent_caches = Vec::with_capacity(self.latent.len());
        for r in &self.latent {
            let (a, ca) = r.first.forward_train(h.clone());
            let (mut b, cb) = r.second.forward_train(a);
            b.add_assign(&h);
            latent_caches.push((ca, cb));
            h = b;
        }
        let latent = h;

        let mut dec_caches = Vec::with_capacity(self.decoders.len());
        for d in &self.decoders {
            dec_caches.push(self.branch_forward(d, &latent, &skips, &[]));
        }
        let recon = if dec_caches.len() == 1 {
            dec_caches[0].output.clone()
        } else {
            concat_channels(&dec_caches.iter().map(|c| &c.output).collect::<Vec<_>>())
        };

        let syn = with_synthesis.then(|| {
            let extras: Vec<&Tensor<T>> = dec_caches.iter().map(|c| &c.deepest_out).collect();
            self.branch_forward(&self.synthesis, &latent, &skips, &extras)
        });
        let seg = syn.as_ref().map(|c| c.output.clone());

        Ok(ForwardCache {
            encoder: enc_caches,
            pools,
            latent: latent_caches,
            decoders: dec_caches,
            synthesis: syn,
            recon,
            seg,
        })
    }

    fn branch_forward(
        &self,
        branch: &OutputBranch<T>,
        latent: &Tensor<T>,
        skips: &[Tensor<T>],
        extras: &[&Tensor<T>],
    ) -> BranchCache<T> {
        let mut units_cache = Vec::with_capacity(DEPTH);
        let mut splits = Vec::with_capacity(DEPTH);
        let mut h = latent.clone();
        let mut deepest_out = None;
        for (d, units) in branch.blocks.iter().enumerate() {
            let level = DEPTH - 1 - d;
            let up = upsample2(&h);
            let mut parts: Vec<&Tensor<T>> = vec![&up, &skips[level]];
            if d == 0 {
                parts.extend_from_slice(extras);
            }
            splits.push(parts.iter().map(|p| p.c).collect());
            h = concat_channels(&parts);
            let mut caches = Vec::with_capacity(units.len());
            for u in units {
                let (y, c) = u.forward_train(h);
                caches.push(c);
                h = y;
            }
            if d == 0 {
                deepest_out = Some(h.clone());
            }
            units_cache.push(caches);
        }
        let mut output = branch.head.forward(&h);
        sigmoid_inplace(&mut output);
        BranchCache {
            units: units_cache,
            splits,
            deepest_out: deepest_out.expect("at least one block"),
            head_input: h,
            output,
        }
    }

    /// Returns `(d_latent, d_skips by level, d_extras)`.
    fn branch_backward(
        &self,
        branch: &OutputBranch<T>,
        cache: &BranchCache<T>,
        d_out: &Tensor<T>,
        d_deepest_extra: Option<&Tensor<T>>,
        grad: &mut OutputBranch<T>,
    ) -> (Tensor<T>, Vec<Tensor<T>>, Vec<Tensor<T>>) {
        let d_logits = sigmoid_backward(&cache.output, d_out);
        let mut dh = branch
            .head
            .backward(&cache.head_input, &d_logits, &mut grad.head, true)
            .expect("dx requested");
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..DEPTH).map(|_| None).collect();
        let mut d_extras = Vec::new();
        for d in (0..branch.blocks.len()).rev() {
            if d == 0 {
                if let Some(extra) = d_deepest_extra {
                    dh.add_assign(extra);
                }
            }
            let units = &branch.blocks[d];
            for (i, u) in units.iter().enumerate().rev() {
                dh = u
                    .backward(&cache.units[d][i], dh, &mut grad.blocks[d][i], true)
                    .expect("dx requested");
            }
            let mut parts = split_channels(&dh, &cache.splits[d]).into_iter();
            let d_up = parts.next().expect("upsample part");
            d_skips[DEPTH - 1 - d] = parts.next();
            if d == 0 {
                d_extras = parts.collect();
            }
            dh = upsample2_backward(&d_up);
        }
        let d_skips = d_skips
            .into_iter()
            .map(|s| s.expect("every level has a skip"))
            .collect();
        (dh, d_skips, d_extras)
    }

    /// Backpropagates gradients w.r.t. the two outputs (post-activation).
    /// Returns a gradient buffer shaped like the model; the uncertainty
    /// entries are left at zero for the caller to fill.
    ///
    /// The synthesis branch is only traversed when `d_seg` is given and the
    /// forward pass ran it.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_recon: Option<&Tensor<T>>,
        d_seg: Option<&Tensor<T>>,
    ) -> SynthModel<T> {
        let mut grad = self.zeros_like();
        let mut d_latent: Option<Tensor<T>> = None;
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..DEPTH).map(|_| None).collect();
        let accumulate = |d_latent: &mut Option<Tensor<T>>,
                              d_skips: &mut Vec<Option<Tensor<T>>>,
                              dl: Tensor<T>,
                              ds: Vec<Tensor<T>>| {
            match d_latent {
                Some(acc) => acc.add_assign(&dl),
                None => *d_latent = Some(dl),
            }
            for (slot, s) in d_skips.iter_mut().zip(ds) {
                match slot {
                    Some(acc) => acc.add_assign(&s),
                    None => *slot = Some(s),
                }
            }
        };

        let mut d_dec_deepest: Vec<Option<Tensor<T>>> = vec![None; self.decoders.len()];
        if let (Some(ds), Some(sc)) = (d_seg, cache.synthesis.as_ref()) {
            let (dl, dsk, dex) =
                self.branch_backward(&self.synthesis, sc, ds, None, &mut grad.synthesis);
            accumulate(&mut d_latent, &mut d_skips, dl, dsk);
            for (slot, e) in d_dec_deepest.iter_mut().zip(dex) {
                *slot = Some(e);
            }
        }

        let n_mod = self.decoders.len();
        let d_recon_parts: Vec<Tensor<T>> = match d_recon {
            Some(dr) if n_mod == 1 => vec![dr.clone()],
            Some(dr) => split_channels(dr, &vec![1; n_mod]),
            None => cache
                .decoders
                .iter()
                .map(|c| Tensor::zeros(c.output.n, 1, c.output.h, c.output.w))
                .collect(),
        };
        let decoder_needed = d_recon.is_some() || d_dec_deepest.iter().any(|d| d.is_some());
        if decoder_needed {
            for (m, dec) in self.decoders.iter().enumerate() {
                let (dl, dsk, _) = self.branch_backward(
                    dec,
                    &cache.decoders[m],
                    &d_recon_parts[m],
                    d_dec_deepest[m].as_ref(),
                    &mut grad.decoders[m],
                );
                accumulate(&mut d_latent, &mut d_skips, dl, dsk);
            }
        }

        let Some(mut dh) = d_latent else {
            return grad;
        };
        for (r, (gr, (ca, cb))) in self
            .latent
            .iter()
            .zip(grad.latent.iter_mut().zip(&cache.latent))
            .rev()
        {
            let d_mid = r
                .second
                .backward(cb, dh.clone(), &mut gr.second, true)
                .expect("dx requested");
            let d_in = r
                .first
                .backward(ca, d_mid, &mut gr.first, true)
                .expect("dx requested");
            dh.add_assign(&d_in);
        }

        for level in (0..DEPTH).rev() {
            let mut d_block = max_pool2_backward(&cache.pools[level], &dh);
            if let Some(s) = d_skips[level].take() {
                d_block.add_assign(&s);
            }
            let units = &self.encoder[level];
            let mut d = Some(d_block);
            for (i, u) in units.iter().enumerate().rev() {
                let need_dx = !(level == 0 && i == 0);
                d = u.backward(
                    &cache.encoder[level][i],
                    d.expect("gradient present"),
                    &mut grad.encoder[level][i],
                    need_dx,
                );
            }
            if let Some(d) = d {
                dh = d;
            }
        }
        grad
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Real>(&self) -> SynthModel<U> {
        let mut out = SynthModel::<U>::build(&self.config, 0).expect("config already validated");
        for ((_, _, src), (_, dst)) in self.params().into_iter().zip(out.params_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64_lossy(s.to_f64_lossy());
            }
        }
        out.synthesis_frozen = self.synthesis_frozen;
        out.uncertainty_frozen = self.uncertainty_frozen;
        out
    }
}

/// Metadata stored next to a checkpoint's weight archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: ArchitectureConfig,
    pub phase: u8,
    pub epoch: usize,
    pub log_sigma1_sq: f64,
    pub log_sigma2_sq: f64,
    pub seed: u64,
    /// Validation Dice recorded when this checkpoint was written (phase 2).
    #[serde(default)]
    pub val_dice: Option<f64>,
}

const ARCHIVE_MAGIC: &[u8; 8] = b"VSYNWTS1";

/// Writes a flat archive of named `f32` tensors (little endian).
pub fn write_archive(path: &Path, tensors: &[(String, &[f32])]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(ARCHIVE_MAGIC).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, data) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(data.len() as u64).to_le_bytes()).map_err(io)?;
        for v in data.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a weight archive", path.display())));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(io)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(io)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        r.read_exact(&mut u64buf).map_err(io)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, data));
    }
    Ok(out)
}

/// Paths of the two files making up a checkpoint with the given stem.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("weights"), stem.with_extension("json"))
}

impl SynthModel<f32> {
    /// Writes `<stem>.weights` and `<stem>.json`. Extra named tensors (for
    /// example optimiser state) are appended to the archive.
    pub fn save_checkpoint(
        &self,
        stem: &Path,
        meta: &CheckpointMeta,
        extra: &[(String, &[f32])],
    ) -> Result<()> {
        let (weights, sidecar) = checkpoint_paths(stem);
        let mut tensors: Vec<(String, &[f32])> =
            self.params().into_iter().map(|(n, _, d)| (n, d)).collect();
        tensors.extend(extra.iter().map(|(n, d)| (n.clone(), *d)));
        write_archive(&weights, &tensors)?;
        let json = serde_json::to_string_pretty(meta).expect("meta serialises");
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    /// Loads a checkpoint; returns the model, its metadata and any archive
    /// entries that are not model parameters.
    pub fn load_checkpoint(
        stem: &Path,
    ) -> Result<(SynthModel<f32>, CheckpointMeta, Vec<(String, Vec<f32>)>)> {
        let (weights, sidecar) = checkpoint_paths(stem);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: sidecar.clone(), source: e })?;
        let mut model = SynthModel::<f32>::build(&meta.architecture, meta.seed)?;
        let mut entries = read_archive(&weights)?.into_iter();
        let names: Vec<String> = model.params().into_iter().map(|(n, _, _)| n).collect();
        for (name, (_, dst)) in names.iter().zip(model.params_mut()) {
            let (got_name, data) = entries
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("archive ends before {name}")))?;
            if &got_name != name || data.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} with {} values, found {got_name} with {}",
                    dst.len(),
                    data.len()
                )));
            }
            dst.copy_from_slice(&data);
        }
        let rest = entries.collect();
        Ok((model, meta, rest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchitectureConfig {
        ArchitectureConfig {
            input_hw: (16, 16),
            base_channels: 2,
            channel_multipliers: [1, 1, 2, 2],
            latent_residual_blocks: 1,
            convs_per_block: 2,
            ..ArchitectureConfig::desk_scale()
        }
    }

    #[test]
    fn rejects_input_not_divisible_by_sixteen() {
        let cfg = ArchitectureConfig {
            input_hw: (100, 96),
            ..tiny()
        };
        assert!(SynthModel::<f32>::build(&cfg, 0).is_err());
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = SynthModel::<f32>::build(&tiny(), 0).unwrap();
        let x = Tensor::zeros(1, 1, 32, 32);
        let err = m.forward(&x).unwrap_err().to_string();
        assert!(err.contains("16"), "{err}");
    }

    #[test]
    fn desk_parameter_count_matches_layer_sum() {
        // 3x3 conv with bias plus instance-norm scale and shift
        let unit = |cin: usize, cout: usize| 9 * cin * cout + cout + 2 * cout;
        let block = |cin: usize, cout: usize| unit(cin, cout) + 2 * unit(cout, cout);
        let encoder = block(1, 4) + block(4, 8) + block(8, 16) + block(16, 32);
        let latent = 6 * unit(32, 32);
        let branch = |extra: usize| {
            block(32 + 32 + extra, 32) + block(32 + 16, 16) + block(16 + 8, 8) + block(8 + 4, 4) + (4 + 1)
        };
        let expected = encoder + latent + branch(0) + branch(32) + 2;
        let m = SynthModel::<f32>::build(&ArchitectureConfig::desk_scale(), 0).unwrap();
        assert_eq!(m.parameter_count(), expected);
        assert_eq!(m.parameter_count_of(Part::Synthesis), branch(32));
    }

    #[test]
    fn params_and_params_mut_agree() {
        let mut m = SynthModel::<f32>::build(&tiny(), 3).unwrap();
        let lens: Vec<usize> = m.params().iter().map(|(_, _, p)| p.len()).collect();
        let parts: Vec<Part> = m.params().iter().map(|(_, p, _)| *p).collect();
        let lens_mut: Vec<usize> = m.params_mut().iter().map(|(_, p)| p.len()).collect();
        let parts_mut: Vec<Part> = m.params_mut().iter().map(|(p, _)| *p).collect();
        assert_eq!(lens, lens_mut);
        assert_eq!(parts, parts_mut);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = SynthModel::<f32>::build(&tiny(), 9).unwrap();
        let meta = CheckpointMeta {
            architecture: tiny(),
            phase: 1,
            epoch: 3,
            log_sigma1_sq: 0.0,
            log_sigma2_sq: 0.0,
            seed: 9,
            val_dice: None,
        };
        let extra = vec![1.5f32, -2.0];
        let stem = dir.path().join("ckpt");
        m.save_checkpoint(&stem, &meta, &[("velocity.0".into(), &extra)]).unwrap();
        let (back, meta_back, rest) = SynthModel::load_checkpoint(&stem).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
        assert_eq!(rest, vec![("velocity.0".to_string(), extra)]);
    }

    #[test]
    fn multi_modality_builds_one_decoder_per_modality() {
        let cfg = ArchitectureConfig {
            modalities: vec!["T1".into(), "T2".into()],
            ..tiny()
        };
        let m = SynthModel::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(m.decoders.len(), 2);
        let (recon, seg) = m.forward(&Tensor::filled(2, 2, 16, 16, 0.5)).unwrap();
        assert_eq!(recon.shape(), [2, 2, 16, 16]);
        assert_eq!(seg.shape(), [2, 1, 16, 16]);
    }
}
