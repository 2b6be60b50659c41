use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binding, ParamStore};
use crate::scalar::{lit, Scalar};

use super::ssmlp::{BlockConfig, DlBlock, Ssmlp, SsmlpConfig};

/// Number of encoder stages.
pub const STAGES: usize = 4;
/// Decoder blocks run from the coarsest feature map back to full resolution.
pub const DECODER_BLOCKS: usize = STAGES + 1;
/// Scale applied to the pose decoder output.
pub const POSE_SCALE: f64 = 0.01;

/// Architecture of the depth and pose networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub width: usize,
    pub height: usize,
    pub stem_width: usize,
    /// Output width of each encoder stage.
    pub widths: [usize; STAGES],
    /// Downsampling factor (1 or 2) of each encoder stage.
    pub strides: [usize; STAGES],
    /// Width of decoder block `i`, which produces scale `i`.
    pub decoder_widths: [usize; DECODER_BLOCKS],
    /// Scales with an output head (scale `s` is `1/2^s` resolution).
    pub scales: Vec<usize>,
    /// DLBlocks per encoder stage.
    pub blocks_per_stage: usize,
    /// Linformer blocks inside each DLBlock.
    pub linformer_depth: usize,
    pub hidden_divisor: usize,
    pub heads: usize,
    pub k_proj: usize,
    pub one_kv_heads: bool,
    pub share_kv: bool,
    pub activation: Activation,
    pub pose_width: usize,
    /// Reference frames on each side of the target.
    pub seq_half: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 64,
            stem_width: 8,
            widths: [16, 32, 64, 128],
            strides: [1, 2, 2, 2],
            decoder_widths: [8, 16, 32, 64, 128],
            scales: vec![0, 3],
            blocks_per_stage: 1,
            linformer_depth: 1,
            hidden_divisor: 1,
            heads: 4,
            k_proj: 32,
            one_kv_heads: true,
            share_kv: true,
            activation: Activation::Gelu,
            pose_width: 32,
            seq_half: 1,
        }
    }
}

const STEM: SsmlpShape = SsmlpShape {
    window: 3,
    stride: 2,
    pad: 1,
};
const SAME: SsmlpShape = SsmlpShape {
    window: 3,
    stride: 1,
    pad: 1,
};
const POINT: SsmlpShape = SsmlpShape {
    window: 1,
    stride: 1,
    pad: 0,
};

#[derive(Clone, Copy)]
struct SsmlpShape {
    window: usize,
    stride: usize,
    pad: usize,
}

impl SsmlpShape {
    fn with(self, d_in: usize, d_out: usize, act: Activation) -> SsmlpConfig {
        SsmlpConfig::new(self.window, self.stride, self.pad, d_in, d_out, act)
    }
}

impl NetworkConfig {
    /// Full-scale input resolution.
    pub fn full_scale() -> Self {
        Self {
            width: 416,
            height: 128,
            ..Self::default()
        }
    }

    /// Total downsampling from the input to the last encoder stage.
    pub fn reduction(&self) -> usize {
        4 * self.strides.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.reduction();
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config(format!("stage strides must be 1 or 2, got {:?}", self.strides)));
        }
        if r > 1 << DECODER_BLOCKS {
            return Err(Error::Config(format!("total reduction {r} exceeds the decoder depth")));
        }
        if self.width % r != 0 || self.height % r != 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {r}",
                self.width, self.height
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("no output scales".into()));
        }
        let finest_free = (r.trailing_zeros() as usize).saturating_sub(1);
        if let Some(&s) = self.scales.iter().find(|&&s| s > finest_free) {
            return Err(Error::Config(format!("output scale {s} beyond the decoder")));
        }
        let mut sorted = self.scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.scales.len() {
            return Err(Error::Config(format!("repeated output scale in {:?}", self.scales)));
        }
        let dims = [self.stem_width, self.pose_width, self.heads, self.k_proj, self.seq_half];
        if dims.contains(&0)
            || self.widths.contains(&0)
            || self.decoder_widths.contains(&0)
            || self.blocks_per_stage == 0
            || self.linformer_depth == 0
            || self.hidden_divisor == 0
        {
            return Err(Error::Config("network widths and counts must be positive".into()));
        }
        Ok(())
    }

    /// Number of 6-vectors the pose network emits.
    pub fn pose_count(&self) -> usize {
        2 * self.seq_half
    }

    /// Frames in one training sequence.
    pub fn seq_len(&self) -> usize {
        2 * self.seq_half + 1
    }

    fn block(&self, d_in: usize, d_out: usize, stride: usize, residual: bool) -> BlockConfig {
        BlockConfig {
            window: 3,
            stride,
            pad: 1,
            d_in,
            d_out,
            hidden_divisor: self.hidden_divisor,
            activation: self.activation,
            residual,
            depth: self.linformer_depth,
            heads: self.heads,
            k_proj: self.k_proj,
            one_kv_heads: self.one_kv_heads,
            share_kv: self.share_kv,
        }
    }

    fn stem(&self, channels: usize) -> SsmlpConfig {
        STEM.with(channels, self.stem_width, self.activation)
    }

    /// Encoder blocks with their input extents, in order.
    fn encoder_plan(&self) -> Vec<(BlockConfig, (usize, usize))> {
        let (mut h, mut w) = (self.height / 4, self.width / 4);
        let mut d = self.stem_width;
        let mut plan = Vec::new();
        for s in 0..STAGES {
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { self.strides[s] } else { 1 };
                plan.push((self.block(d, self.widths[s], stride, true), (h, w)));
                h /= stride;
                w /= stride;
                d = self.widths[s];
            }
        }
        plan
    }

    /// `(height, width, channels)` of each encoder feature map.
    pub fn feature_shapes(&self) -> [(usize, usize, usize); STAGES] {
        let mut out = [(0, 0, 0); STAGES];
        let (mut h, mut w) = (self.height / 4, self.width / 4);
        for s in 0..STAGES {
            h /= self.strides[s];
            w /= self.strides[s];
            out[s] = (h, w, self.widths[s]);
        }
        out
    }

    /// Encoder feature map at `1/2^scale` resolution, if one exists.
    fn skip_at(&self, scale: usize) -> Option<usize> {
        let f = 1 << scale;
        self.feature_shapes()
            .iter()
            .rposition(|&(h, _, _)| h * f == self.height)
    }

    /// Decoder blocks from coarsest to finest: `(block index, block, input extent, skip width)`.
    fn decoder_plan(&self) -> Vec<(usize, BlockConfig, (usize, usize), usize)> {
        let (h4, w4, d4) = self.feature_shapes()[STAGES - 1];
        let first = (self.reduction().trailing_zeros() as usize).saturating_sub(1);
        let (mut h, mut w, mut d) = (h4, w4, d4);
        let mut plan = Vec::new();
        for i in (0..=first).rev() {
            let block = self.block(d, self.decoder_widths[i], 1, false);
            let skip = self.skip_at(i).map_or(0, |s| self.widths[s]);
            plan.push((i, block, (h, w), skip));
            h *= 2;
            w *= 2;
            d = self.decoder_widths[i];
        }
        plan
    }

    fn head(&self, i: usize) -> SsmlpConfig {
        SAME.with(self.decoder_widths[i], 1, Activation::Identity)
    }

    fn compress(&self, i: usize, skip: usize) -> SsmlpConfig {
        SAME.with(self.decoder_widths[i] + skip, self.decoder_widths[i], self.activation)
    }

    fn pose_block(&self) -> BlockConfig {
        self.block(self.widths[STAGES - 1], self.pose_width, 1, false)
    }

    fn pose_out(&self) -> SsmlpConfig {
        POINT.with(self.pose_width, 6 * self.pose_count(), Activation::Identity)
    }

    fn encoder_params(&self, channels: usize) -> Result<usize> {
        let mut n = self.stem(channels).param_count();
        for (b, (h, w)) in self.encoder_plan() {
            n += b.param_count(h, w)?;
        }
        Ok(n)
    }

    /// Closed-form parameter count of [`DepthNet`].
    pub fn depth_params(&self) -> Result<usize> {
        self.validate()?;
        let mut n = self.encoder_params(3)?;
        for (i, b, (h, w), skip) in self.decoder_plan() {
            n += b.param_count(h, w)? + self.compress(i, skip).param_count();
            if self.scales.contains(&i) {
                n += self.head(i).param_count();
            }
        }
        Ok(n)
    }

    /// Closed-form parameter count of [`PoseNet`].
    pub fn pose_params(&self) -> Result<usize> {
        self.validate()?;
        let (h, w, _) = self.feature_shapes()[STAGES - 1];
        Ok(self.encoder_params(3 * self.seq_len())? + self.pose_block().param_count(h, w)? + self.pose_out().param_count())
    }

    fn encoder_macs(&self, channels: usize) -> Result<usize> {
        let mut n = self.stem(channels).macs(self.height, self.width)?;
        for (b, (h, w)) in self.encoder_plan() {
            n += b.macs(h, w)?;
        }
        Ok(n)
    }

    /// Multiply-accumulates of one depth forward.
    pub fn depth_macs(&self) -> Result<usize> {
        self.validate()?;
        let mut n = self.encoder_macs(3)?;
        for (i, b, (h, w), skip) in self.decoder_plan() {
            n += b.macs(h, w)? + self.compress(i, skip).macs(2 * h, 2 * w)?;
            if self.scales.contains(&i) {
                n += self.head(i).macs(2 * h, 2 * w)?;
            }
        }
        Ok(n)
    }

    /// Multiply-accumulates of one pose forward.
    pub fn pose_macs(&self) -> Result<usize> {
        self.validate()?;
        let (h, w, _) = self.feature_shapes()[STAGES - 1];
        Ok(self.encoder_macs(3 * self.seq_len())? + self.pose_block().macs(h, w)? + self.pose_out().macs(h, w)?)
    }
}

/// Soft-split stem, max pooling and the DLBlock stages.
#[derive(Debug)]
pub struct Encoder {
    pub channels: usize,
    pub stem: Ssmlp,
    pub blocks: Vec<DlBlock>,
    blocks_per_stage: usize,
    height: usize,
    width: usize,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &NetworkConfig,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = Ssmlp::new(store, &format!("{name}.stem"), &cfg.stem(channels), rng)?;
        let blocks = cfg
            .encoder_plan()
            .iter()
            .enumerate()
            .map(|(i, (b, hw))| DlBlock::new(store, &format!("{name}.block{i}"), b, *hw, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            stem,
            blocks,
            blocks_per_stage: cfg.blocks_per_stage,
            height: cfg.height,
            width: cfg.width,
        })
    }

    /// Feature maps of the four stages, finest first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, image: Var) -> Result<Vec<Var>> {
        let want = [self.height, self.width, self.channels];
        if g.shape(image) != want {
            return Err(Error::shape("encoder input", g.shape(image), &want));
        }
        let x = self.stem.forward(g, p, image)?;
        let mut x = g.max_pool2(x)?;
        let mut features = Vec::with_capacity(STAGES);
        for stage in self.blocks.chunks(self.blocks_per_stage) {
            for b in stage {
                x = b.forward(g, p, x)?;
            }
            features.push(x);
        }
        Ok(features)
    }
}

#[derive(Debug)]
struct DecoderBlock {
    scale: usize,
    block: DlBlock,
    skip: Option<usize>,
    compress: Ssmlp,
    head: Option<Ssmlp>,
}

/// Depth encoder plus a decoder with disparity heads at the configured scales.
#[derive(Debug)]
pub struct DepthNet {
    pub cfg: NetworkConfig,
    pub encoder: Encoder,
    decoder: Vec<DecoderBlock>,
    head_calls: AtomicUsize,
}

impl DepthNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(store, "depth.enc", cfg, 3, rng)?;
        let mut decoder = Vec::new();
        for (i, b, hw, skip) in cfg.decoder_plan() {
            let name = format!("depth.dec{i}");
            let block = DlBlock::new(store, &format!("{name}.block"), &b, hw, rng)?;
            let compress = Ssmlp::new(store, &format!("{name}.compress"), &cfg.compress(i, skip), rng)?;
            let head = if cfg.scales.contains(&i) {
                Some(Ssmlp::new(store, &format!("{name}.head"), &cfg.head(i), rng)?)
            } else {
                None
            };
            decoder.push(DecoderBlock {
                scale: i,
                block,
                skip: cfg.skip_at(i),
                compress,
                head,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head_calls: AtomicUsize::new(0),
        })
    }

    /// Number of disparity-head evaluations so far.
    pub fn head_calls(&self) -> usize {
        self.head_calls.load(Ordering::Relaxed)
    }

    /// Disparity maps in `(0, 1)` as `(scale, H/2^s x W/2^s)`, finest first.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, features: &[Var]) -> Result<Vec<(usize, Var)>> {
        if features.len() != STAGES {
            return Err(Error::Config(format!("decoder needs {STAGES} feature maps, got {}", features.len())));
        }
        let mut x = features[STAGES - 1];
        let mut out = Vec::new();
        for d in &self.decoder {
            let y = d.block.forward(g, p, x)?;
            let y = g.upsample_nearest(y, 2)?;
            let y = match d.skip {
                Some(s) => {
                    let f = features[s];
                    if g.shape(f)[..2] != g.shape(y)[..2] {
                        return Err(Error::shape("decoder skip", g.shape(f), g.shape(y)));
                    }
                    g.concat(&[y, f], 2)?
                }
                None => y,
            };
            x = d.compress.forward(g, p, y)?;
            if let Some(head) = &d.head {
                self.head_calls.fetch_add(1, Ordering::Relaxed);
                let logits = head.forward(g, p, x)?;
                let disp = g.activation(logits, Activation::Sigmoid);
                let s = g.shape(disp).to_vec();
                out.push((d.scale, g.reshape(disp, [s[0], s[1]])?));
            }
        }
        out.reverse();
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, image: Var) -> Result<Vec<(usize, Var)>> {
        let f = self.encoder.forward(g, p, image)?;
        self.decode(g, p, &f)
    }
}

/// Pose encoder over the channel-stacked sequence, a DLBlock and a pointwise
/// soft-split layer averaged over positions.
#[derive(Debug)]
pub struct PoseNet {
    pub cfg: NetworkConfig,
    pub encoder: Encoder,
    pub block: DlBlock,
    pub out: Ssmlp,
}

impl PoseNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(store, "pose.enc", cfg, 3 * cfg.seq_len(), rng)?;
        let (h, w, _) = cfg.feature_shapes()[STAGES - 1];
        let block = DlBlock::new(store, "pose.dec.block", &cfg.pose_block(), (h, w), rng)?;
        let out = Ssmlp::new(store, "pose.dec.out", &cfg.pose_out(), rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            block,
            out,
        })
    }

    /// Motions as `2 seq_half x 6` (axis-angle, translation), reference order.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, features: &[Var]) -> Result<Var> {
        let last = *features
            .last()
            .ok_or_else(|| Error::Config("pose decoder got no feature maps".into()))?;
        let x = self.block.forward(g, p, last)?;
        let t = self.out.tokens(g, p, x)?;
        let m = g.mean_axis(t, 0, false)?;
        let m = g.scale(m, lit(POSE_SCALE));
        let n = self.cfg.pose_count();
        if g.shape(m) != [6 * n] {
            return Err(Error::Config(format!("pose head emits {:?}, expected {}", g.shape(m), 6 * n)));
        }
        g.reshape(m, [n, 6])
    }

    /// `frames` is the sequence stacked along channels, `H x W x 3(2k+1)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, frames: Var) -> Result<Var> {
        let f = self.encoder.forward(g, p, frames)?;
        self.decode(g, p, &f)
    }
}
