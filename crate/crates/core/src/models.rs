//! Teacher and student networks with encoder / bottleneck / decoder feature taps.
//!
//! All roles share one encoder–decoder skeleton ([`UNet`]); the role decides the
//! channel ladder, convolutions per block, whether skip connections exist and
//! whether a reconstruction decoder is attached.
//!
//! | role            | encoder blocks        | bottleneck | convs/block | skips | recon |
//! |-----------------|-----------------------|------------|-------------|-------|-------|
//! | `teacher_mt_unet` | b, 2b, 4b, 8b (b=64) | 16b        | 2           | yes   | yes   |
//! | `student_s1`    | b, 2b (b=16)          | 4b         | 1           | no    | no    |
//! | `student_s2`    | b, 2b (b=16)          | 4b         | 2           | yes   | no    |

use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, Conv2d, ConvBlock, Linear, Mode, ParamBuilder, ParamStore, UpConv};
use crate::nn::pool::max_pool2x2;

/// Default projector embedding width.
pub const DEFAULT_EMBED_DIM: usize = 128;
/// Norm clamp used when normalizing embeddings.
pub const EMBED_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TeacherMtUnet,
    StudentS1,
    StudentS2,
}

impl Role {
    pub fn is_teacher(self) -> bool {
        matches!(self, Role::TeacherMtUnet)
    }

    pub fn default_base_channels(self) -> usize {
        match self {
            Role::TeacherMtUnet => 64,
            Role::StudentS1 | Role::StudentS2 => 16,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::TeacherMtUnet => "teacher_mt_unet",
            Role::StudentS1 => "student_s1",
            Role::StudentS2 => "student_s2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Encoder,
    Bottleneck,
    Decoder,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Encoder, Scale::Bottleneck, Scale::Decoder];

    /// Short label used in method names (`E`, `B`, `D`).
    pub fn letter(self) -> char {
        match self {
            Scale::Encoder => 'E',
            Scale::Bottleneck => 'B',
            Scale::Decoder => 'D',
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Encoder => "encoder",
            Scale::Bottleneck => "bottleneck",
            Scale::Decoder => "decoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub role: Role,
    #[serde(default = "three")]
    pub in_channels: usize,
    #[serde(default = "one")]
    pub out_channels: usize,
    pub base_channels: usize,
    #[serde(default)]
    pub with_recon_head: bool,
    /// `(H, W)` the model will see; checked against the downsampling ladder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(usize, usize)>,
}

fn three() -> usize {
    3
}
fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            in_channels: 3,
            out_channels: 1,
            base_channels: role.default_base_channels(),
            with_recon_head: role.is_teacher(),
            image_size: None,
        }
    }

    pub fn teacher() -> Self {
        Self::new(Role::TeacherMtUnet)
    }

    pub fn student_s1() -> Self {
        Self::new(Role::StudentS1)
    }

    pub fn student_s2() -> Self {
        Self::new(Role::StudentS2)
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn with_image_size(mut self, h: usize, w: usize) -> Self {
        self.image_size = Some((h, w));
        self
    }

    fn plan(&self) -> Plan {
        let b = self.base_channels;
        match self.role {
            Role::TeacherMtUnet => Plan {
                encoder: vec![b, 2 * b, 4 * b, 8 * b],
                bottleneck: 16 * b,
                convs_per_block: 2,
                skips: true,
                decoder: vec![8 * b, 4 * b, 2 * b, b],
            },
            Role::StudentS1 => Plan {
                encoder: vec![b, 2 * b],
                bottleneck: 4 * b,
                convs_per_block: 1,
                skips: false,
                decoder: vec![b, b],
            },
            Role::StudentS2 => Plan {
                encoder: vec![b, 2 * b],
                bottleneck: 4 * b,
                convs_per_block: 2,
                skips: true,
                decoder: vec![2 * b, b],
            },
        }
    }

    /// Total spatial downsampling between input and bottleneck.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.plan().encoder.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel counts must be positive: {self:?}"
            )));
        }
        if self.with_recon_head && !self.role.is_teacher() {
            return Err(Error::InvalidArgument(format!(
                "{} cannot carry a reconstruction head",
                self.role
            )));
        }
        if let Some((h, w)) = self.image_size {
            check_divisible(h, w, self.downsampling_factor())?;
        }
        Ok(())
    }
}

fn check_divisible(h: usize, w: usize, factor: usize) -> Result<()> {
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} is not divisible by the downsampling factor {factor}"
        )));
    }
    Ok(())
}

struct Plan {
    encoder: Vec<usize>,
    bottleneck: usize,
    convs_per_block: usize,
    skips: bool,
    /// Output channels per decoder level, deepest first.
    decoder: Vec<usize>,
}

/// Activation maps tapped during one forward pass, each `(B, C, h, w)`.
#[derive(Debug, Clone)]
pub struct FeatureTaps {
    pub encoder: Tensor,
    pub bottleneck: Tensor,
    pub decoder: Tensor,
}

impl FeatureTaps {
    pub fn get(&self, scale: Scale) -> &Tensor {
        match scale {
            Scale::Encoder => &self.encoder,
            Scale::Bottleneck => &self.bottleneck,
            Scale::Decoder => &self.decoder,
        }
    }

    pub fn detach(&self) -> FeatureTaps {
        FeatureTaps {
            encoder: self.encoder.detach(),
            bottleneck: self.bottleneck.detach(),
            decoder: self.decoder.detach(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Pre-sigmoid segmentation map `(B, 1, H, W)`.
    pub seg_logits: Tensor,
    /// Reconstruction in [0, 1], `(B, 3, H, W)`; teacher only.
    pub recon: Option<Tensor>,
    pub taps: FeatureTaps,
}

/// Anything that can serve as a teacher or student in distillation.
pub trait TapNetwork {
    fn config(&self) -> &ModelConfig;

    fn forward_with_taps(&self, x: &Tensor, mode: Mode) -> Result<ForwardOutput>;

    /// Every array, trainable or not.
    fn params(&self) -> &ParamStore;

    /// Variables an optimizer may update. Empty for frozen networks.
    fn trainable_vars(&self) -> Vec<Var>;

    fn tap_channels(&self, scale: Scale) -> usize;

    /// Spatial downsampling of the tap relative to the input.
    fn tap_stride(&self, scale: Scale) -> usize;

    fn checksum(&self) -> Result<String> {
        self.params().checksum()
    }
}

/// Exact count of trainable scalars (independent of freeze state).
pub fn count_parameters(model: &dyn TapNetwork) -> usize {
    model.params().num_trainable()
}

#[derive(Debug, Clone)]
struct Decoder {
    ups: Vec<UpConv>,
    blocks: Vec<ConvBlock>,
    head: Conv2d,
    skips: bool,
}

impl Decoder {
    fn new(pb: &mut ParamBuilder, prefix: &str, plan: &Plan, head_channels: usize) -> Result<Self> {
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        let mut c_in = plan.bottleneck;
        for (level, &c_out) in plan.decoder.iter().enumerate() {
            let skip_c = plan.encoder[plan.encoder.len() - 1 - level];
            let (up_c, block_in) = if plan.skips {
                (skip_c, skip_c * 2)
            } else {
                (c_in, c_in)
            };
            ups.push(UpConv::new(pb, &format!("{prefix}.up{level}"), c_in, up_c)?);
            blocks.push(ConvBlock::new(
                pb,
                &format!("{prefix}.block{level}"),
                block_in,
                c_out,
                plan.convs_per_block,
            )?);
            c_in = c_out;
        }
        let head = Conv2d::new(pb, &format!("{prefix}.head"), c_in, head_channels, 1)?;
        Ok(Self {
            ups,
            blocks,
            head,
            skips: plan.skips,
        })
    }

    /// Returns `(last hidden activation, head output)`.
    fn forward(&self, bottleneck: &Tensor, skips: &[Tensor], mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = bottleneck.clone();
        for (level, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            h = up.forward(&h)?;
            if self.skips {
                let skip = &skips[skips.len() - 1 - level];
                h = Tensor::cat(&[skip, &h], 1)?;
            }
            h = block.forward(&h, mode)?;
        }
        let out = self.head.forward(&h)?;
        Ok((h, out))
    }
}

/// Encoder–decoder segmentation network.
#[derive(Debug, Clone)]
pub struct UNet {
    config: ModelConfig,
    params: ParamStore,
    encoder: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    seg: Decoder,
    recon: Option<Decoder>,
    encoder_channels: Vec<usize>,
    bottleneck_channels: usize,
    decoder_channels: usize,
}

/// Builds a network with seeded initialization in `f32` on the CPU.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<UNet> {
    UNet::new(cfg, seed, DType::F32, &Device::Cpu)
}

impl UNet {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.plan();
        let mut pb = ParamBuilder::new(seed, dtype, device.clone());
        let mut encoder = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &c) in plan.encoder.iter().enumerate() {
            encoder.push(ConvBlock::new(&mut pb, &format!("enc{i}"), c_in, c, plan.convs_per_block)?);
            c_in = c;
        }
        let bottleneck = ConvBlock::new(&mut pb, "bottleneck", c_in, plan.bottleneck, plan.convs_per_block)?;
        let seg = Decoder::new(&mut pb, "seg", &plan, cfg.out_channels)?;
        let recon = if cfg.with_recon_head {
            Some(Decoder::new(&mut pb, "rec", &plan, cfg.in_channels)?)
        } else {
            None
        };
        Ok(Self {
            config: cfg.clone(),
            params: pb.finish(),
            encoder,
            bottleneck,
            seg,
            recon,
            encoder_channels: plan.encoder.clone(),
            bottleneck_channels: plan.bottleneck,
            decoder_channels: *plan.decoder.last().expect("decoder has levels"),
        })
    }

    fn encoder_tap_level(&self) -> usize {
        1.min(self.encoder.len() - 1)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 {
            return Err(Error::Shape(format!("input must be (B, C, H, W), got {dims:?}")));
        }
        if dims[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "channel dimension is {}, model expects {}",
                dims[1], self.config.in_channels
            )));
        }
        if let Some((h, w)) = self.config.image_size {
            if (dims[2], dims[3]) != (h, w) {
                return Err(Error::Shape(format!(
                    "spatial dimensions are {}x{}, model configured for {h}x{w}",
                    dims[2], dims[3]
                )));
            }
        }
        check_divisible(dims[2], dims[3], self.config.downsampling_factor())
    }

    /// Consumes the network into a read-only handle.
    pub fn freeze(self) -> FrozenModel {
        FrozenModel(self)
    }
}

impl TapNetwork for UNet {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward_with_taps(&self, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let tap_level = self.encoder_tap_level();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for block in &self.encoder {
            h = block.forward(&h, mode)?;
            skips.push(h.clone());
            h = max_pool2x2(&h)?;
        }
        let bottleneck = self.bottleneck.forward(&h, mode)?;
        let (decoder_tap, seg_logits) = self.seg.forward(&bottleneck, &skips, mode)?;
        let recon = match &self.recon {
            Some(dec) => Some(candle_nn::ops::sigmoid(&dec.forward(&bottleneck, &skips, mode)?.1)?),
            None => None,
        };
        Ok(ForwardOutput {
            seg_logits,
            recon,
            taps: FeatureTaps {
                encoder: skips[tap_level].clone(),
                bottleneck,
                decoder: decoder_tap,
            },
        })
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.params.trainable_vars()
    }

    fn tap_channels(&self, scale: Scale) -> usize {
        match scale {
            Scale::Encoder => self.encoder_channels[self.encoder_tap_level()],
            Scale::Bottleneck => self.bottleneck_channels,
            Scale::Decoder => self.decoder_channels,
        }
    }

    fn tap_stride(&self, scale: Scale) -> usize {
        match scale {
            Scale::Encoder => 1 << self.encoder_tap_level(),
            Scale::Bottleneck => 1 << self.encoder.len(),
            Scale::Decoder => 1,
        }
    }
}

/// A network whose parameters can no longer be optimized. Forward passes
/// always run in evaluation mode, so normalization statistics stay fixed.
#[derive(Debug, Clone)]
pub struct FrozenModel(UNet);

impl FrozenModel {
    pub fn freeze(self) -> FrozenModel {
        self
    }

    pub fn inner(&self) -> &UNet {
        &self.0
    }
}

impl TapNetwork for FrozenModel {
    fn config(&self) -> &ModelConfig {
        self.0.config()
    }

    fn forward_with_taps(&self, x: &Tensor, _mode: Mode) -> Result<ForwardOutput> {
        let out = self.0.forward_with_taps(x, Mode::Eval)?;
        Ok(ForwardOutput {
            seg_logits: out.seg_logits.detach(),
            recon: out.recon.map(|r| r.detach()),
            taps: out.taps.detach(),
        })
    }

    fn params(&self) -> &ParamStore {
        self.0.params()
    }

    fn trainable_vars(&self) -> Vec<Var> {
        Vec::new()
    }

    fn tap_channels(&self, scale: Scale) -> usize {
        self.0.tap_channels(scale)
    }

    fn tap_stride(&self, scale: Scale) -> usize {
        self.0.tap_stride(scale)
    }
}

pub fn freeze(model: UNet) -> FrozenModel {
    model.freeze()
}

/// Global-average-pool → linear(2d) → ReLU → linear(d) → L2 normalize.
#[derive(Debug, Clone)]
pub struct Projector {
    pub scale: Scale,
    pub in_channels: usize,
    pub embed_dim: usize,
    fc1: Linear,
    fc2: Linear,
    params: ParamStore,
}

impl Projector {
    pub fn new(scale: Scale, in_channels: usize, embed_dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if in_channels == 0 || embed_dim == 0 {
            return Err(Error::InvalidArgument("projector dimensions must be positive".into()));
        }
        let mut pb = ParamBuilder::new(seed, dtype, device.clone());
        let fc1 = Linear::new(&mut pb, "fc1", in_channels, embed_dim * 2)?;
        let fc2 = Linear::new(&mut pb, "fc2", embed_dim * 2, embed_dim)?;
        Ok(Self {
            scale,
            in_channels,
            embed_dim,
            fc1,
            fc2,
            params: pb.finish(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Maps a `(B, C, h, w)` tap to `(B, embed_dim)` unit-norm rows.
    pub fn project(&self, tap: &Tensor) -> Result<Tensor> {
        let dims = tap.dims();
        if dims.len() != 4 || dims[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "{} projector expects (B, {}, h, w), got {dims:?}",
                self.scale, self.in_channels
            )));
        }
        let pooled = tap.mean(3)?.mean(2)?;
        let hidden = self.fc1.forward(&pooled)?.relu()?;
        l2_normalize(&self.fc2.forward(&hidden)?, EMBED_NORM_EPS)
    }
}

/// Integer-factor average pool followed by a learnable 1×1 convolution that
/// maps a student tap onto the teacher tap's channel count.
#[derive(Debug, Clone)]
pub struct FeatureAdapter {
    pub scale: Scale,
    pool: usize,
    conv: Conv2d,
    params: ParamStore,
}

impl FeatureAdapter {
    pub fn new(scale: Scale, student_channels: usize, teacher_channels: usize, pool: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if pool == 0 {
            return Err(Error::InvalidArgument("adapter pool factor must be >= 1".into()));
        }
        let mut pb = ParamBuilder::new(seed, dtype, device.clone());
        let conv = Conv2d::new(&mut pb, "conv", student_channels, teacher_channels, 1)?;
        Ok(Self {
            scale,
            pool,
            conv,
            params: pb.finish(),
        })
    }

    /// Adapter between two networks' taps at `scale`. The student tap must be
    /// at least as fine as the teacher's, by an integer factor.
    pub fn between(student: &dyn TapNetwork, teacher: &dyn TapNetwork, scale: Scale, seed: u64) -> Result<Self> {
        let (ss, ts) = (student.tap_stride(scale), teacher.tap_stride(scale));
        if ts % ss != 0 {
            return Err(Error::Shape(format!(
                "{scale} taps cannot be aligned: student stride {ss}, teacher stride {ts}"
            )));
        }
        Self::new(
            scale,
            student.tap_channels(scale),
            teacher.tap_channels(scale),
            ts / ss,
            seed,
            DType::F32,
            &Device::Cpu,
        )
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, student_tap: &Tensor) -> Result<Tensor> {
        let x = if self.pool > 1 {
            student_tap.avg_pool2d(self.pool)?
        } else {
            student_tap.clone()
        };
        self.conv.forward(&x)
    }
}
