//! Training objective: photometric and structural reconstruction terms with
//! minimum reprojection and automasking, first-order and surface-normal
//! smoothness, and the multi-scale combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dlnet::depth::{disparity_to_depth, MAX_DEPTH, MIN_DEPTH};
use crate::error::{Error, Result};
use crate::geometry::{backproject, estimate_normals, sine_distance, warp_coords, Intrinsics};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Stand-in for an unusable reference when taking the per-pixel minimum.
const EXCLUDED: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessKind {
    /// Edge-aware first-order disparity smoothness.
    NaiveC0,
    /// Surface-normal smoothness plus the first-order term.
    Threedgs,
}

/// What a reference contributes at pixels its automask rejects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedFill {
    /// Its identity loss, held constant.
    Identity,
    /// Zero.
    Zero,
}

impl std::str::FromStr for MaskedFill {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!("unknown masked fill `{other}`"))),
        }
    }
}

impl std::str::FromStr for SmoothnessKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive_c0" => Ok(Self::NaiveC0),
            "threedgs" => Ok(Self::Threedgs),
            other => Err(Error::Config(format!("unknown smoothness `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the L1 term in the pairwise loss (SSIM gets `1 - alpha`).
    pub alpha: f64,
    /// Put `alpha` on SSIM instead, the convention of earlier work.
    pub alpha_on_ssim: bool,
    pub beta: f64,
    pub scales: Vec<usize>,
    pub smoothness: SmoothnessKind,
    #[serde(default = "default_fill")]
    pub masked_fill: MaskedFill,
    /// Range of image values; sets the SSIM stabilizers.
    pub data_range: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

fn default_fill() -> MaskedFill {
    MaskedFill::Identity
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            alpha_on_ssim: false,
            beta: 0.001,
            scales: vec![0, 3],
            smoothness: SmoothnessKind::Threedgs,
            masked_fill: MaskedFill::Identity,
            data_range: 1.0,
            min_depth: MIN_DEPTH,
            max_depth: MAX_DEPTH,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} is negative", self.beta)));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("no loss scales".into()));
        }
        if !(self.data_range > 0.0) {
            return Err(Error::Config("data_range must be positive".into()));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        1e-4 * self.data_range * self.data_range
    }

    fn c2(&self) -> f64 {
        9e-4 * self.data_range * self.data_range
    }
}

/// Per-term values of one evaluation of [`final_loss`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean L1 over valid pixels and references at the finest scale.
    pub photometric: f64,
    /// Mean SSIM loss over valid pixels and references at the finest scale.
    pub ssim: f64,
    /// `(scale, reconstruction loss)`.
    pub reconstruction: Vec<(usize, f64)>,
    /// `(scale, smoothness loss)`, before weighting.
    pub smoothness: Vec<(usize, f64)>,
    pub total: f64,
    /// Fraction of pixels counted by the finest-scale reconstruction mean.
    pub coverage: f64,
}

impl LossReport {
    /// `sum_s recon_s + beta smooth_s / 2^s`.
    pub fn recombine(&self, beta: f64) -> f64 {
        self.reconstruction
            .iter()
            .zip(&self.smoothness)
            .map(|(&(s, r), &(_, m))| r + beta * m / (1u64 << s) as f64)
            .sum()
    }

    /// Elementwise mean of several reports.
    pub fn average(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = reports.first().cloned().unwrap_or_default();
        let mean = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        out.photometric = mean(&|r| r.photometric);
        out.ssim = mean(&|r| r.ssim);
        out.total = mean(&|r| r.total);
        out.coverage = mean(&|r| r.coverage);
        for i in 0..out.reconstruction.len() {
            out.reconstruction[i].1 = mean(&|r| r.reconstruction[i].1);
            out.smoothness[i].1 = mean(&|r| r.smoothness[i].1);
        }
        out
    }
}

fn check_image<T: Scalar>(g: &Graph<T>, a: Var, b: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = g.shape(a);
    if s.len() != 3 || s != g.shape(b) {
        return Err(Error::shape(op, s, g.shape(b)));
    }
    Ok((s[0], s[1], s[2]))
}

fn mask_var<T: Scalar>(g: &mut Graph<T>, mask: &Tensor<T>) -> Var {
    g.constant(mask.clone())
}

/// Channel-mean absolute difference, times `mask` when given. `H x W`.
pub fn photometric_l1<T: Scalar>(g: &mut Graph<T>, recon: Var, target: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
    check_image(g, recon, target, "photometric_l1")?;
    let d = g.sub(recon, target)?;
    let d = g.abs(d);
    let m = g.mean_axis(d, 2, false)?;
    match mask {
        Some(mask) => {
            let mv = mask_var(g, mask);
            g.mul(m, mv)
        }
        None => Ok(m),
    }
}

/// `(1 - SSIM) / 2` per pixel from 3x3 box statistics with reflect padding,
/// averaged over channels and clamped to `[0, 1]`. `H x W`.
pub fn ssim_loss<T: Scalar>(g: &mut Graph<T>, recon: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    check_image(g, recon, target, "ssim_loss")?;
    let (x, y) = (recon, target);
    let mu_x = g.box_filter3(x)?;
    let mu_y = g.box_filter3(y)?;
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y)?;
    let exx = g.box_filter3(xx)?;
    let eyy = g.box_filter3(yy)?;
    let exy = g.box_filter3(xy)?;
    let mu_x2 = g.square(mu_x);
    let mu_y2 = g.square(mu_y);
    let mu_xy = g.mul(mu_x, mu_y)?;
    let sigma_x = g.sub(exx, mu_x2)?;
    let sigma_y = g.sub(eyy, mu_y2)?;
    let sigma_xy = g.sub(exy, mu_xy)?;
    let (c1, c2) = (lit::<T>(cfg.c1()), lit::<T>(cfg.c2()));
    let two = lit::<T>(2.0);
    let n1 = g.affine(mu_xy, two, c1);
    let n2 = g.affine(sigma_xy, two, c2);
    let num = g.mul(n1, n2)?;
    let d1 = g.add(mu_x2, mu_y2)?;
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(sigma_x, sigma_y)?;
    let d2 = g.add_scalar(d2, c2);
    let den = g.mul(d1, d2)?;
    let ssim = g.div(num, den)?;
    let loss = g.affine(ssim, lit(-0.5), lit(0.5));
    let loss = g.clamp(loss, T::zero(), T::one());
    g.mean_axis(loss, 2, false)
}

/// `alpha L1 + (1 - alpha) SSIM` (weights swapped with `alpha_on_ssim`).
pub fn pairwise_loss<T: Scalar>(
    g: &mut Graph<T>,
    recon: Var,
    target: Var,
    mask: Option<&Tensor<T>>,
    cfg: &LossConfig,
) -> Result<Var> {
    let l1 = photometric_l1(g, recon, target, mask)?;
    let ss = ssim_loss(g, recon, target, cfg)?;
    let (wl1, wss) = if cfg.alpha_on_ssim {
        (1.0 - cfg.alpha, cfg.alpha)
    } else {
        (cfg.alpha, 1.0 - cfg.alpha)
    };
    let a = g.scale(l1, lit(wl1));
    let b = g.scale(ss, lit(wss));
    g.add(a, b)
}

/// Elementwise minimum over equally shaped maps.
pub fn min_reprojection<T: Scalar>(g: &mut Graph<T>, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::Config("minimum over no reprojection maps".into()))?;
    rest.iter().try_fold(first, |acc, &m| g.min_pair(acc, m))
}

/// `1` where the warped loss is strictly below the identity loss.
pub fn automask<T: Scalar>(pair: &Tensor<T>, identity: &Tensor<T>) -> Result<Tensor<T>> {
    if pair.shape() != identity.shape() {
        return Err(Error::shape("automask", pair.shape(), identity.shape()));
    }
    Tensor::new(
        pair.shape().to_vec(),
        pair.data()
            .iter()
            .zip(identity.data())
            .map(|(&a, &b)| if a < b { T::one() } else { T::zero() })
            .collect(),
    )
}

/// One reference view prepared for reconstruction at some scale.
pub struct Reprojection<T> {
    /// Pairwise loss of the warped reference against the target, `H x W`.
    pub loss: Var,
    /// Pixels where the warp and the sampling support are valid.
    pub valid: Tensor<T>,
    /// Pairwise loss of the unwarped reference against the target.
    pub identity: Tensor<T>,
}

/// Minimum over references of the automasked loss, averaged over pixels where
/// at least one reference is valid. Invalid references never win the minimum.
/// A rejected pixel contributes according to `fill`.
///
/// Returns the scalar and the number of pixels averaged.
pub fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    refs: &[Reprojection<T>],
    fill: MaskedFill,
) -> Result<(Var, usize)> {
    if refs.is_empty() {
        return Err(Error::Config("reconstruction needs at least one reference".into()));
    }
    let shape = g.shape(refs[0].loss).to_vec();
    let n = refs[0].valid.numel();
    let mut any = vec![T::zero(); n];
    let mut terms = Vec::with_capacity(refs.len());
    for r in refs {
        let mu = automask(g.value(r.loss), &r.identity)?;
        let keep = Tensor::new(
            shape.clone(),
            mu.data().iter().zip(r.valid.data()).map(|(&m, &v)| m * v).collect(),
        )?;
        let excluded = Tensor::new(
            shape.clone(),
            r.valid
                .data()
                .iter()
                .zip(mu.data())
                .zip(r.identity.data())
                .map(|((&v, &m), &id)| {
                    if v <= T::zero() {
                        lit(EXCLUDED)
                    } else if m > T::zero() || fill == MaskedFill::Zero {
                        T::zero()
                    } else {
                        id
                    }
                })
                .collect(),
        )?;
        for (a, &v) in any.iter_mut().zip(r.valid.data()) {
            if v > T::zero() {
                *a = T::one();
            }
        }
        let kv = g.constant(keep);
        let ev = g.constant(excluded);
        let t = g.mul(r.loss, kv)?;
        terms.push(g.add(t, ev)?);
    }
    let min = min_reprojection(g, &terms)?;
    let count = any.iter().filter(|&&a| a > T::zero()).count();
    if count == 0 {
        return Err(Error::DegenerateBatch("no pixel is valid in any reference".into()));
    }
    let av = g.constant(Tensor::new(shape, any)?);
    let masked = g.mul(min, av)?;
    let s = g.sum(masked);
    Ok((g.scale(s, lit(1.0 / count as f64)), count))
}

/// `exp(-|forward difference|)` of the channel-mean image along columns
/// (`axis = 1`, `H x (W-1)`) or rows (`axis = 0`, `(H-1) x W`).
fn edge_weights<T: Scalar>(image: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (ho, wo) = if axis == 1 { (h, w - 1) } else { (h - 1, w) };
    let d = image.data();
    let cn = lit::<T>(c as f64);
    Tensor::from_fn([ho, wo], |p| {
        let (y, x) = (p / wo, p % wo);
        let (y2, x2) = if axis == 1 { (y, x + 1) } else { (y + 1, x) };
        let mut s = T::zero();
        for ch in 0..c {
            s += (d[(y2 * w + x2) * c + ch] - d[(y * w + x) * c + ch]).abs();
        }
        (-(s / cn)).exp()
    })
}

fn forward_diff<T: Scalar>(g: &mut Graph<T>, x: Var, axis: usize) -> Result<Var> {
    let n = g.shape(x)[axis];
    let a = g.narrow(x, axis, 1, n - 1)?;
    let b = g.narrow(x, axis, 0, n - 1)?;
    g.sub(a, b)
}

fn check_disp_image<T: Scalar>(g: &Graph<T>, disp: Var, image: &Tensor<T>) -> Result<(usize, usize)> {
    let s = g.shape(disp);
    let is = image.shape();
    if s.len() != 2 || is.len() != 3 || s != &is[..2] || s[0] < 2 || s[1] < 2 {
        return Err(Error::shape("smoothness", s, is));
    }
    Ok((s[0], s[1]))
}

/// Edge-aware first-order smoothness of mean-normalized disparity:
/// `mean(e^{-|dI/dx|} |dd/dx|) + mean(e^{-|dI/dy|} |dd/dy|)`.
pub fn naive_smoothness<T: Scalar>(g: &mut Graph<T>, disp: Var, image: &Tensor<T>) -> Result<Var> {
    check_disp_image(g, disp, image)?;
    let mean = g.mean(disp);
    let dn = g.div(disp, mean)?;
    let mut total = None;
    for axis in [1, 0] {
        let d = forward_diff(g, dn, axis)?;
        let d = g.abs(d);
        let w = g.constant(edge_weights(image, axis));
        let wd = g.mul(d, w)?;
        let m = g.mean(wd);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    total.ok_or_else(|| Error::Config("empty smoothness".into()))
}

/// Edge-weighted sine distance between adjacent estimated surface normals,
/// averaged over pairs where both normals are valid, summed over both axes.
pub fn normal_smoothness<T: Scalar>(
    g: &mut Graph<T>,
    disp: Var,
    image: &Tensor<T>,
    k: &Intrinsics,
    cfg: &LossConfig,
) -> Result<Var> {
    let (h, w) = check_disp_image(g, disp, image)?;
    let depth = disparity_to_depth(g, disp, cfg.min_depth, cfg.max_depth)?;
    let cloud = backproject(g, depth, k)?;
    let (normals, mask) = estimate_normals(g, &cloud)?;
    let md = mask.data();
    let mut total = None;
    for axis in [1, 0] {
        let (ho, wo) = if axis == 1 { (h, w - 1) } else { (h - 1, w) };
        let n = g.shape(normals)[axis];
        let a = g.narrow(normals, axis, 0, n - 1)?;
        let b = g.narrow(normals, axis, 1, n - 1)?;
        let s = sine_distance(g, a, b)?;
        let weights = edge_weights(image, axis);
        let mut count = 0usize;
        let pair_w = Tensor::from_fn([ho, wo], |p| {
            let (y, x) = (p / wo, p % wo);
            let (y2, x2) = if axis == 1 { (y, x + 1) } else { (y + 1, x) };
            if md[y * w + x] > T::zero() && md[y2 * w + x2] > T::zero() {
                count += 1;
                weights.data()[p]
            } else {
                T::zero()
            }
        });
        let wv = g.constant(pair_w);
        let ws = g.mul(s, wv)?;
        let sum = g.sum(ws);
        let term = g.scale(sum, lit(1.0 / count.max(1) as f64));
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::Config("empty smoothness".into()))
}

/// Surface-normal term plus the first-order term; returns `(total, normal term)`.
pub fn threedgs<T: Scalar>(
    g: &mut Graph<T>,
    disp: Var,
    image: &Tensor<T>,
    k: &Intrinsics,
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let normal = normal_smoothness(g, disp, image, k, cfg)?;
    let c0 = naive_smoothness(g, disp, image)?;
    Ok((g.add(normal, c0)?, normal))
}

/// One training sample as seen by the loss.
pub struct LossInputs<'a, T> {
    /// Target image, `H x W x 3`.
    pub target: &'a Tensor<T>,
    /// Reference images in the same order as `poses`.
    pub refs: &'a [Tensor<T>],
    /// Disparity `H/2^s x W/2^s` for each configured scale, in config order.
    pub disparities: &'a [Var],
    /// Target-to-reference motions as 6-vectors.
    pub poses: &'a [Var],
    pub k: &'a Intrinsics,
}

/// `sum_s [recon_s + beta smooth_s / 2^s]`, each scale's disparity first
/// upsampled bilinearly to full resolution.
pub fn final_loss<T: Scalar>(g: &mut Graph<T>, inp: &LossInputs<'_, T>, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    if inp.disparities.len() != cfg.scales.len() {
        return Err(Error::Config(format!(
            "{} disparity maps for {} scales",
            inp.disparities.len(),
            cfg.scales.len()
        )));
    }
    if inp.refs.len() != inp.poses.len() || inp.refs.is_empty() {
        return Err(Error::Config("each reference needs exactly one pose".into()));
    }
    let ts = inp.target.shape().to_vec();
    if ts.len() != 3 {
        return Err(Error::shape("final_loss target", &ts, &[3]));
    }
    let (h, w) = (ts[0], ts[1]);
    let target = g.constant(inp.target.clone());
    let mut ref_vars = Vec::new();
    let mut identity = Vec::new();
    for r in inp.refs {
        if r.shape() != ts.as_slice() {
            return Err(Error::shape("final_loss reference", r.shape(), &ts));
        }
        let rv = g.constant(r.clone());
        let id = pairwise_loss(g, rv, target, None, cfg)?;
        identity.push(g.value(id).clone());
        ref_vars.push(rv);
    }

    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let finest = *cfg.scales.iter().min().unwrap_or(&0);
    for (&s, &disp) in cfg.scales.iter().zip(inp.disparities) {
        let f = 1usize << s;
        let ds = g.shape(disp).to_vec();
        if ds != [h / f, w / f] || h % f != 0 || w % f != 0 {
            return Err(Error::shape("final_loss disparity", &ds, &[h / f, w / f]));
        }
        let full = if f == 1 {
            disp
        } else {
            let d3 = g.reshape(disp, [h / f, w / f, 1])?;
            let up = g.upsample_bilinear(d3, f)?;
            g.reshape(up, [h, w])?
        };
        let depth = disparity_to_depth(g, full, cfg.min_depth, cfg.max_depth)?;
        let mut reps = Vec::new();
        let (mut l1_sum, mut ss_sum, mut n_sum) = (0.0f64, 0.0f64, 0.0f64);
        for ((&rv, &pose), id) in ref_vars.iter().zip(inp.poses).zip(&identity) {
            let (coords, warp_mask) = warp_coords(g, depth, pose, inp.k)?;
            let (warped, sample_mask) = g.bilinear_sample(rv, coords)?;
            let valid = Tensor::new(
                [h, w],
                warp_mask.data().iter().zip(sample_mask.data()).map(|(&a, &b)| a * b).collect(),
            )?;
            let loss = pairwise_loss(g, warped, target, Some(&valid), cfg)?;
            if s == finest {
                let l1 = photometric_l1(g, warped, target, Some(&valid))?;
                let ss = ssim_loss(g, warped, target, cfg)?;
                let (lv, sv) = (g.value(l1).to_f64_vec(), g.value(ss).to_f64_vec());
                for (p, v) in valid.to_f64_vec().into_iter().enumerate() {
                    if v > 0.0 {
                        l1_sum += lv[p];
                        ss_sum += sv[p];
                        n_sum += 1.0;
                    }
                }
            }
            reps.push(Reprojection {
                loss,
                valid,
                identity: id.clone(),
            });
        }
        let (recon, count) = reconstruction_loss(g, &reps, cfg.masked_fill)?;
        if s == finest {
            report.photometric = l1_sum / n_sum.max(1.0);
            report.ssim = ss_sum / n_sum.max(1.0);
            report.coverage = count as f64 / (h * w) as f64;
        }
        let smooth = match cfg.smoothness {
            SmoothnessKind::NaiveC0 => naive_smoothness(g, full, inp.target)?,
            SmoothnessKind::Threedgs => threedgs(g, full, inp.target, inp.k, cfg)?.0,
        };
        report.reconstruction.push((s, value_f64(g, recon)?));
        report.smoothness.push((s, value_f64(g, smooth)?));
        let weighted = g.scale(smooth, lit(cfg.beta / f as f64));
        let term = g.add(recon, weighted)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no loss scales".into()))?;
    report.total = value_f64(g, total)?;
    Ok((total, report))
}

fn value_f64<T: Scalar>(g: &Graph<T>, v: Var) -> Result<f64> {
    Ok(g.value(v).item()?.to_f64().unwrap_or(f64::NAN))
}
