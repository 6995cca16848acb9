//! Network definitions for the operator family `F` and kernel extractor `G`.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{res_stack, run_stack, Conv, ResBlock, LEAKY_SLOPE};
use crate::nn::{fingerprint, Bound, ParamDecl, ParamMeta, ParamStore, Tape, Var};

/// Widths and depths of `F` and `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub kernel_channels: usize,
    /// Total spatial reduction between image and kernel; a power of two ≥ 4.
    pub downsample_factor: usize,
    pub image_channels: usize,
    /// Residual blocks inside each preprocess block.
    pub pre_res_blocks: usize,
    /// Residual blocks at the start of the postprocess block.
    pub post_res_blocks: usize,
    /// Residual blocks at the end of the extractor.
    pub extractor_res_blocks: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            kernel_channels: 64,
            downsample_factor: 16,
            image_channels: 3,
            pre_res_blocks: 10,
            post_res_blocks: 20,
            extractor_res_blocks: 4,
        }
    }
}

impl ArchConfig {
    /// Widths used by the original full-resolution model.
    pub fn full_scale(image_channels: usize) -> Self {
        Self {
            base_channels: 64,
            kernel_channels: 512,
            downsample_factor: 128,
            image_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.downsample_factor;
        if d < 4 || !d.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample_factor must be a power of two ≥ 4, got {d}"
            )));
        }
        if self.base_channels == 0 || self.kernel_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        Ok(())
    }

    /// Number of stride-2 levels after the preprocess block.
    pub fn levels(&self) -> usize {
        (self.downsample_factor / 4).trailing_zeros() as usize
    }

    pub fn kernel_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        let d = self.downsample_factor;
        if height % d != 0 || width % d != 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image {height}×{width} not divisible by downsample factor {d}"
            )));
        }
        Ok([self.kernel_channels, height / d, width / d])
    }

    pub fn arch_id(&self) -> String {
        format!(
            "bks-v1:c{}:b{}:k{}:d{}:r{}.{}.{}",
            self.image_channels,
            self.base_channels,
            self.kernel_channels,
            self.downsample_factor,
            self.pre_res_blocks,
            self.post_res_blocks,
            self.extractor_res_blocks
        )
    }

    /// Inverse of [`ArchConfig::arch_id`].
    pub fn from_arch_id(id: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unrecognized arch_id `{id}`"));
        let mut parts = id.split(':');
        if parts.next() != Some("bks-v1") {
            return Err(bad());
        }
        let mut field = |prefix: char| -> Result<String> {
            let p = parts.next().ok_or_else(bad)?;
            p.strip_prefix(prefix).map(str::to_string).ok_or_else(bad)
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let image_channels = num(&field('c')?)?;
        let base_channels = num(&field('b')?)?;
        let kernel_channels = num(&field('k')?)?;
        let downsample_factor = num(&field('d')?)?;
        let blocks = field('r')?;
        let counts: Vec<usize> = blocks.split('.').map(num).collect::<Result<_>>()?;
        if counts.len() != 3 || parts.next().is_some() {
            return Err(bad());
        }
        let cfg = Self {
            base_channels,
            kernel_channels,
            downsample_factor,
            image_channels,
            pre_res_blocks: counts[0],
            post_res_blocks: counts[1],
            extractor_res_blocks: counts[2],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn config_hash(&self) -> String {
        fingerprint(&serde_json::to_vec(self).expect("serializable"))
    }
}

/// Full-resolution conv, two stride-2 convs, then residual blocks.
#[derive(Debug, Clone)]
pub struct PreprocessBlock {
    conv_in: Conv,
    down: [Conv; 2],
    blocks: Vec<ResBlock>,
}

impl PreprocessBlock {
    pub fn new(prefix: &str, cin: usize, width: usize, res_blocks: usize) -> Self {
        Self {
            conv_in: Conv::new(format!("{prefix}.conv_in"), cin, width, 3, 1, 1),
            down: [
                Conv::new(format!("{prefix}.down0"), width, width, 3, 2, 1),
                Conv::new(format!("{prefix}.down1"), width, width, 3, 2, 1),
            ],
            blocks: res_stack(&format!("{prefix}.res"), width, res_blocks),
        }
    }

    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.conv_in.declare(out);
        self.down.iter().for_each(|c| c.declare(out));
        self.blocks.iter().for_each(|b| b.declare(out));
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_levels(tape, p, x)?.0)
    }

    /// Output plus the intermediate maps at full and half resolution.
    fn forward_levels(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, [Var; 2])> {
        let full = self.conv_in.forward(tape, p, x)?;
        let half = self.down[0].forward(tape, p, full)?;
        let h = self.down[1].forward(tape, p, half)?;
        Ok((run_stack(&self.blocks, tape, p, h)?, [full, half]))
    }
}

/// Residual blocks, two conv + pixel-shuffle ×2 upsamplings, output convs.
#[derive(Debug, Clone)]
pub struct PostprocessBlock {
    blocks: Vec<ResBlock>,
    up: [Conv; 2],
    conv_mid: Conv,
    conv_out: Conv,
}

impl PostprocessBlock {
    pub fn new(prefix: &str, width: usize, cout: usize, res_blocks: usize) -> Self {
        Self {
            blocks: res_stack(&format!("{prefix}.res"), width, res_blocks),
            up: [
                Conv::new(format!("{prefix}.up0"), width, 4 * width, 3, 1, 1),
                Conv::new(format!("{prefix}.up1"), width, 4 * width, 3, 1, 1),
            ],
            conv_mid: Conv::new(format!("{prefix}.conv_mid"), width, width, 3, 1, 1),
            conv_out: Conv::new(format!("{prefix}.conv_out"), width, cout, 3, 1, 1),
        }
    }

    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.blocks.iter().for_each(|b| b.declare(out));
        self.up.iter().for_each(|c| c.declare(out));
        self.conv_mid.declare(out);
        self.conv_out.declare(out);
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, skips: Option<[Var; 2]>) -> Result<Var> {
        let mut h = run_stack(&self.blocks, tape, p, x)?;
        for (i, c) in self.up.iter().enumerate() {
            h = c.forward(tape, p, h)?;
            h = tape.pixel_shuffle(h, 2)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            if let Some(s) = skips {
                h = tape.add(h, s[1 - i])?;
            }
        }
        let h = self.conv_mid.forward(tape, p, h)?;
        self.conv_out.forward(tape, p, h)
    }
}

/// Shared behaviour of parametric networks.
pub trait Network {
    fn arch_id(&self) -> String;
    fn declare(&self) -> Vec<ParamDecl>;

    /// Seeded initial parameters.
    fn init(&self, seed: u64) -> ParamStore {
        let meta = ParamMeta {
            arch_id: self.arch_id(),
            config_hash: fingerprint(self.arch_id().as_bytes()),
            iteration: 0,
            rng_seed: seed,
        };
        ParamStore::init(&self.declare(), meta)
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if store.meta.arch_id != self.arch_id() {
            return Err(Error::Checkpoint(format!(
                "arch_id `{}` does not match network `{}`",
                store.meta.arch_id,
                self.arch_id()
            )));
        }
        store.check_layout(&self.declare())
    }
}

fn width_at(base: usize, kernel: usize, level: usize) -> usize {
    (base << level).min(kernel)
}

/// Kernel extractor `G(x, y)`: a residual network over the channel
/// concatenation of the sharp and blurry images.
#[derive(Debug)]
pub struct Extractor {
    cfg: ArchConfig,
    prefix: String,
    in_channels: usize,
    pre: PreprocessBlock,
    head: Conv,
    downs: Vec<Conv>,
    blocks: Vec<ResBlock>,
    evaluations: AtomicUsize,
}

impl Extractor {
    pub fn new(cfg: ArchConfig) -> Result<Self> {
        Self::with_prefix(cfg, "extractor")
    }

    pub(crate) fn with_prefix(cfg: ArchConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let (b, k) = (cfg.base_channels, cfg.kernel_channels);
        let in_channels = 2 * cfg.image_channels;
        let levels = cfg.levels();
        let mut downs = Vec::with_capacity(levels);
        let mut cin = b;
        for i in 1..=levels {
            let cout = if i == levels { k } else { width_at(b, k, i) };
            downs.push(Conv::new(format!("{prefix}.down{i}"), cin, cout, 3, 2, 1));
            cin = cout;
        }
        if levels == 0 && b != k {
            downs.push(Conv::new(format!("{prefix}.proj"), b, k, 3, 1, 1));
        }
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            in_channels,
            pre: PreprocessBlock::new(&format!("{prefix}.pre"), in_channels, b, cfg.pre_res_blocks),
            head: Conv::new(format!("{prefix}.head"), b, b, 7, 1, 3),
            downs,
            blocks: res_stack(&format!("{prefix}.res"), k, cfg.extractor_res_blocks),
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Forward passes run so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// `input` is the `2C × H × W` concatenation of sharp and blurry.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<Var> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let (c, h, w) = tape.value(input).chw()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "extractor expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        self.cfg.kernel_shape(h, w)?;
        let mut t = self.pre.forward(tape, p, input)?;
        t = self.head.forward(tape, p, t)?;
        t = tape.leaky_relu(t, LEAKY_SLOPE);
        for c in &self.downs {
            t = c.forward(tape, p, t)?;
            t = tape.leaky_relu(t, LEAKY_SLOPE);
        }
        run_stack(&self.blocks, tape, p, t)
    }
}

impl Network for Extractor {
    fn arch_id(&self) -> String {
        format!("{}/{}", self.prefix, self.cfg.arch_id())
    }

    fn declare(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        self.pre.declare(&mut out);
        self.head.declare(&mut out);
        self.downs.iter().for_each(|c| c.declare(&mut out));
        self.blocks.iter().for_each(|b| b.declare(&mut out));
        out
    }
}

/// Blur operator family `F(x, k)`: encoder-decoder with skip connections;
/// the kernel joins at the bottleneck by channel concatenation.
#[derive(Debug)]
pub struct OperatorFamily {
    cfg: ArchConfig,
    pre: PreprocessBlock,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    post: PostprocessBlock,
}

impl OperatorFamily {
    pub fn new(cfg: ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let (b, k) = (cfg.base_channels, cfg.kernel_channels);
        let levels = cfg.levels();
        // encoder width at level i (level 0 is the preprocess output)
        let enc = |i: usize| if i == 0 { b } else { width_at(b, k, i - 1) };
        let encoder = (1..=levels)
            .map(|i| Conv::new(format!("operator.enc{i}"), enc(i - 1), enc(i), 3, 2, 1))
            .collect();
        let mut decoder = Vec::with_capacity(levels);
        for i in (1..=levels).rev() {
            let cin = if i == levels { enc(i) + k } else { 2 * enc(i) };
            decoder.push(Conv::up2(format!("operator.dec{i}"), cin, enc(i - 1)));
        }
        let mut bottleneck_proj = None;
        if levels == 0 {
            bottleneck_proj = Some(Conv::new("operator.fuse", b + k, b, 3, 1, 1));
        }
        let mut decoder: Vec<Conv> = decoder;
        if let Some(p) = bottleneck_proj {
            decoder.push(p);
        }
        Ok(Self {
            cfg,
            pre: PreprocessBlock::new("operator.pre", cfg.image_channels, b, cfg.pre_res_blocks),
            encoder,
            decoder,
            post: PostprocessBlock::new("operator.post", b, cfg.image_channels, cfg.post_res_blocks),
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    /// Channels of the decoder input at the bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        self.decoder[0].cin
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, k: Var) -> Result<Var> {
        let (c, h, w) = tape.value(x).chw()?;
        if c != self.cfg.image_channels {
            return Err(Error::Shape(format!(
                "operator expects {} image channels, got {c}",
                self.cfg.image_channels
            )));
        }
        let expected = self.cfg.kernel_shape(h, w)?;
        if tape.value(k).shape() != expected {
            return Err(Error::Shape(format!(
                "kernel shape {:?} does not match bottleneck {:?}",
                tape.value(k).shape(),
                expected
            )));
        }
        let mut feats = Vec::with_capacity(self.encoder.len());
        let (pre, levels_skip) = self.pre.forward_levels(tape, p, x)?;
        let mut t = pre;
        for conv in &self.encoder {
            t = conv.forward(tape, p, t)?;
            t = tape.leaky_relu(t, LEAKY_SLOPE);
            feats.push(t);
        }
        t = tape.concat(&[t, k])?;
        let levels = self.encoder.len();
        for (j, conv) in self.decoder.iter().enumerate() {
            if j > 0 && j < levels {
                // skip from the encoder level at the current resolution
                t = tape.concat(&[t, feats[levels - 1 - j]])?;
            }
            t = conv.forward(tape, p, t)?;
            t = tape.leaky_relu(t, LEAKY_SLOPE);
        }
        // residual path from the preprocess features at H/4
        t = tape.add(t, pre)?;
        self.post.forward(tape, p, t, Some(levels_skip))
    }
}

impl Network for OperatorFamily {
    fn arch_id(&self) -> String {
        format!("operator/{}", self.cfg.arch_id())
    }

    fn declare(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        self.pre.declare(&mut out);
        self.encoder.iter().for_each(|c| c.declare(&mut out));
        self.decoder.iter().for_each(|c| c.declare(&mut out));
        self.post.declare(&mut out);
        out
    }
}
