use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{window_extent, Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::linattn::{AttentionConfig, LinformerBlock};
use crate::nn::{Binding, LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;

/// Soft-split layer: overlapping window unfold, layer norm, affine, activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmlpConfig {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
}

impl SsmlpConfig {
    pub fn new(window: usize, stride: usize, pad: usize, d_in: usize, d_out: usize, activation: Activation) -> Self {
        Self {
            window,
            stride,
            pad,
            d_in,
            d_out,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config(format!("degenerate soft-split layer {self:?}")));
        }
        if self.pad >= self.window {
            return Err(Error::Config(format!("pad {} not below window {}", self.pad, self.window)));
        }
        Ok(())
    }

    /// Whether neighbouring windows share pixels.
    pub fn overlaps(&self) -> bool {
        self.stride < self.window
    }

    /// Output extent along one axis of length `n`.
    pub fn extent(&self, n: usize) -> Result<usize> {
        window_extent(n, self.window, self.stride, self.pad)
            .ok_or_else(|| Error::Config(format!("window {} does not fit extent {n}", self.window)))
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.extent(h)?, self.extent(w)?))
    }

    pub fn unfolded(&self) -> usize {
        self.window * self.window * self.d_in
    }

    pub fn param_count(&self) -> usize {
        LayerNorm::param_count(self.unfolded()) + Linear::param_count(self.unfolded(), self.d_out, true)
    }

    /// Multiply-accumulates for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> Result<usize> {
        let (ho, wo) = self.out_hw(h, w)?;
        Ok(ho * wo * self.unfolded() * self.d_out)
    }
}

/// `min(d_in, d_out) / c`, floored at one.
pub fn hidden_width(d_in: usize, d_out: usize, divisor: usize) -> usize {
    (d_in.min(d_out) / divisor.max(1)).max(1)
}

#[derive(Clone, Debug)]
pub struct Ssmlp {
    pub cfg: SsmlpConfig,
    pub norm: LayerNorm,
    pub fc: Linear,
}

impl Ssmlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SsmlpConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let norm = LayerNorm::new(store, &format!("{name}.ln"), cfg.unfolded());
        let fc = Linear::new(store, &format!("{name}.fc"), cfg.unfolded(), cfg.d_out, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            norm,
            fc,
        })
    }

    /// `H x W x d_in` to the token sequence `(H' W') x d_out`.
    pub fn tokens<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.d_in {
            return Err(Error::shape("ssmlp input", s, &[0, 0, self.cfg.d_in]));
        }
        let u = g.unfold(x, self.cfg.window, self.cfg.stride, self.cfg.pad)?;
        let u = self.norm.forward(g, p, u)?;
        let u = self.fc.forward(g, p, u)?;
        Ok(g.activation(u, self.cfg.activation))
    }

    /// `H x W x d_in` to `H' x W' x d_out`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (ho, wo) = self.cfg.out_hw(s[0], s[1])?;
        let t = self.tokens(g, p, x)?;
        g.reshape(t, [ho, wo, self.cfg.d_out])
    }
}

/// Settings of one depth Linformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Divisor giving the hidden width from `min(d_in, d_out)`.
    pub hidden_divisor: usize,
    pub activation: Activation,
    pub residual: bool,
    /// Number of stacked Linformer blocks.
    pub depth: usize,
    pub heads: usize,
    pub k_proj: usize,
    pub one_kv_heads: bool,
    pub share_kv: bool,
}

impl BlockConfig {
    pub fn d_hidden(&self) -> usize {
        hidden_width(self.d_in, self.d_out, self.hidden_divisor)
    }

    pub fn split(&self) -> SsmlpConfig {
        SsmlpConfig::new(self.window, self.stride, self.pad, self.d_in, self.d_hidden(), self.activation)
    }

    fn shortcut(&self) -> SsmlpConfig {
        SsmlpConfig::new(self.window, self.stride, self.pad, self.d_in, self.d_out, self.activation)
    }

    /// Attention settings for an `h x w` input; the projected length is
    /// capped at the token count.
    pub fn attention(&self, h: usize, w: usize) -> Result<AttentionConfig> {
        let (ho, wo) = self.split().out_hw(h, w)?;
        let n = ho * wo;
        Ok(AttentionConfig {
            d_model: self.d_hidden(),
            k_proj: self.k_proj.min(n),
            heads: self.heads,
            one_kv_heads: self.one_kv_heads,
            share_kv: self.share_kv,
            seq_len: n,
        })
    }

    /// Whether the input can be added to the main path unchanged.
    pub fn identity_shortcut(&self, h: usize, w: usize) -> Result<bool> {
        Ok(self.split().out_hw(h, w)? == (h, w) && self.d_in == self.d_out)
    }

    pub fn param_count(&self, h: usize, w: usize) -> Result<usize> {
        let att = self.attention(h, w)?;
        let dh = self.d_hidden();
        let mut n = self.split().param_count()
            + self.depth * att.block_params()
            + LayerNorm::param_count(dh)
            + Linear::param_count(dh, self.d_out, true);
        if self.residual && !self.identity_shortcut(h, w)? {
            n += self.shortcut().param_count();
        }
        Ok(n)
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<usize> {
        let att = self.attention(h, w)?;
        let mut n = self.split().macs(h, w)? + self.depth * att.block_macs() + att.seq_len * self.d_hidden() * self.d_out;
        if self.residual && !self.identity_shortcut(h, w)? {
            n += self.shortcut().macs(h, w)?;
        }
        Ok(n)
    }
}

/// Soft split, Linformer blocks, layer norm and a widening affine map, plus an
/// optional residual that passes through a soft-split layer when the shapes
/// differ.
#[derive(Debug)]
pub struct DlBlock {
    pub cfg: BlockConfig,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub split: Ssmlp,
    pub linformer: Vec<LinformerBlock>,
    pub norm: LayerNorm,
    pub widen: Linear,
    pub shortcut: Option<Ssmlp>,
    shortcut_calls: AtomicUsize,
}

impl DlBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BlockConfig,
        in_hw: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("block needs at least one Linformer layer".into()));
        }
        let split_cfg = cfg.split();
        let split = Ssmlp::new(store, &format!("{name}.split"), &split_cfg, rng)?;
        let out_hw = split_cfg.out_hw(in_hw.0, in_hw.1)?;
        let att = cfg.attention(in_hw.0, in_hw.1)?;
        let linformer = (0..cfg.depth)
            .map(|i| LinformerBlock::new(store, &format!("{name}.lf{i}"), &att, rng))
            .collect::<Result<Vec<_>>>()?;
        let dh = cfg.d_hidden();
        let norm = LayerNorm::new(store, &format!("{name}.ln"), dh);
        let widen = Linear::new(store, &format!("{name}.widen"), dh, cfg.d_out, true, rng);
        let shortcut = if cfg.residual && !cfg.identity_shortcut(in_hw.0, in_hw.1)? {
            Some(Ssmlp::new(store, &format!("{name}.shortcut"), &cfg.shortcut(), rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            in_hw,
            out_hw,
            split,
            linformer,
            norm,
            widen,
            shortcut,
            shortcut_calls: AtomicUsize::new(0),
        })
    }

    /// Number of times the shortcut soft-split layer has run.
    pub fn shortcut_calls(&self) -> usize {
        self.shortcut_calls.load(Ordering::Relaxed)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let want = [self.in_hw.0, self.in_hw.1, self.cfg.d_in];
        if g.shape(x) != want {
            return Err(Error::shape("block input", g.shape(x), &want));
        }
        let mut t = self.split.tokens(g, p, x)?;
        for lf in &self.linformer {
            t = lf.forward(g, p, t)?;
        }
        let t = self.norm.forward(g, p, t)?;
        let t = self.widen.forward(g, p, t)?;
        let main = g.reshape(t, [self.out_hw.0, self.out_hw.1, self.cfg.d_out])?;
        if !self.cfg.residual {
            return Ok(g.activation(main, self.cfg.activation));
        }
        let skip = match &self.shortcut {
            Some(s) => {
                self.shortcut_calls.fetch_add(1, Ordering::Relaxed);
                s.forward(g, p, x)?
            }
            None => x,
        };
        if g.shape(skip) != g.shape(main) {
            return Err(Error::Config(format!(
                "residual {:?} does not match main path {:?}",
                g.shape(skip),
                g.shape(main)
            )));
        }
        let sum = g.add(main, skip)?;
        Ok(g.activation(sum, self.cfg.activation))
    }
}
