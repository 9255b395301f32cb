//! Self-supervised losses: photometric reprojection with automasking,
//! edge-aware smoothness, and the teacher-to-student consistency terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ssim_alpha: f64,
    pub smoothness_lambda: f64,
    pub consistency_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssim_alpha: 0.85, smoothness_lambda: 1e-3, consistency_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.ssim_alpha) || !unit(self.consistency_weight) || !(self.smoothness_lambda >= 0.0) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-pixel SSIM over 3x3 reflect-padded windows.
pub fn ssim<'t, F: Scalar>(a: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    let mu_a = a.avg_pool3_reflect()?;
    let mu_b = b.avg_pool3_reflect()?;
    let var_a = a.square()?.avg_pool3_reflect()?.sub(mu_a.square()?)?;
    let var_b = b.square()?.avg_pool3_reflect()?.sub(mu_b.square()?)?;
    let cov = a.mul(b)?.avg_pool3_reflect()?.sub(mu_a.mul(mu_b)?)?;
    let num = mu_a.mul(mu_b)?.mul_scalar(2.0)?.add_scalar(SSIM_C1)?.mul(cov.mul_scalar(2.0)?.add_scalar(SSIM_C2)?)?;
    let den = mu_a
        .square()?
        .add(mu_b.square()?)?
        .add_scalar(SSIM_C1)?
        .mul(var_a.add(var_b)?.add_scalar(SSIM_C2)?)?;
    num.div(den)
}

/// `α/2·(1−SSIM) + (1−α)·|pred−target|`, averaged over channels: `[B,1,H,W]`.
pub fn photometric_error<'t, F: Scalar>(pred: Var<'t, F>, target: Var<'t, F>, alpha: f64) -> Result<Var<'t, F>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("photometric: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let l1 = pred.sub(target)?.abs()?.mean_dim(1)?;
    if alpha == 0.0 {
        return Ok(l1);
    }
    let dssim = ssim(pred, target)?.neg()?.add_scalar(1.0)?.mul_scalar(0.5)?.clamp(0.0, 1.0)?.mean_dim(1)?;
    dssim.mul_scalar(alpha)?.add(l1.mul_scalar(1.0 - alpha)?)
}

/// Masked sum and count of the automasked minimum reprojection error.
/// `keep[i] == false` removes pixel `i` before automasking is applied.
pub struct Reprojection<'t, F: Scalar> {
    pub sum: Var<'t, F>,
    pub count: usize,
    /// Per-pixel flag: true where a warped error beat every identity error
    /// and the pixel was not excluded.
    pub used: Vec<bool>,
}

impl<'t, F: Scalar> Reprojection<'t, F> {
    /// Mean over used pixels; zero (constant) when none remain.
    pub fn mean_or_zero(&self) -> Result<Var<'t, F>> {
        if self.count == 0 {
            return Ok(self.sum.tape().scalar(F::zero()));
        }
        self.sum.mul_scalar(1.0 / self.count as f64)
    }
}

pub fn reprojection_terms<'t, F: Scalar>(
    warped: &[Var<'t, F>],
    identity: &[Var<'t, F>],
    keep: Option<&[bool]>,
) -> Result<Reprojection<'t, F>> {
    let first = *warped.first().ok_or_else(|| Error::InvalidArgument("no warped source frames".into()))?;
    let shape = first.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Shape(format!("per-pixel errors must be [B,1,H,W], got {shape:?}")));
    }
    for e in warped.iter().chain(identity) {
        if e.shape() != shape {
            return Err(Error::Shape(format!("error maps {:?} vs {:?}", e.shape(), shape)));
        }
    }
    let n = first.numel();
    if let Some(k) = keep {
        if k.len() != n {
            return Err(Error::Shape(format!("mask has {} entries, expected {n}", k.len())));
        }
    }
    // identity errors first so that ties resolve to "no motion" and drop the pixel
    let all: Vec<Var<'t, F>> = identity.iter().chain(warped).copied().collect();
    let (min, arg) = Var::concat(&all, 1)?.min_dim(1)?;
    let used: Vec<bool> = (0..n).map(|i| arg[i] >= identity.len() && keep.map_or(true, |k| k[i])).collect();
    let count = used.iter().filter(|&&u| u).count();
    let mask = Tensor::new(&shape, used.iter().map(|&u| if u { F::one() } else { F::zero() }).collect())?;
    let sum = min.mul(first.tape().constant(mask))?.sum()?;
    Ok(Reprojection { sum, count, used })
}

/// Mean over valid pixels of the per-pixel minimum over warped and identity
/// errors; pixels won by an identity error, or marked in `exclude`, are
/// dropped.
pub fn reprojection_loss<'t, F: Scalar>(
    warped: &[Var<'t, F>],
    identity: &[Var<'t, F>],
    exclude: Option<&[bool]>,
) -> Result<Var<'t, F>> {
    let keep: Option<Vec<bool>> = exclude.map(|e| e.iter().map(|&x| !x).collect());
    let r = reprojection_terms(warped, identity, keep.as_deref())?;
    if r.count == 0 {
        return Err(Error::EmptyValidSet);
    }
    r.mean_or_zero()
}

/// Edge-aware first-order smoothness of the mean-normalized disparity.
pub fn smoothness_loss<'t, F: Scalar>(disp: Var<'t, F>, image: Var<'t, F>) -> Result<Var<'t, F>> {
    let [b, c, h, w] = disp.dims4()?;
    let [bi, _, hi, wi] = image.dims4()?;
    if c != 1 || (b, h, w) != (bi, hi, wi) {
        return Err(Error::Shape(format!("smoothness: {:?} vs {:?}", disp.shape(), image.shape())));
    }
    if h < 2 || w < 2 {
        return Err(Error::Shape("smoothness needs at least 2x2 pixels".into()));
    }
    let mean = disp.mean_dim(3)?.mean_dim(2)?.add_scalar(1e-7)?;
    let d = disp.div(mean)?;
    let dx = d.narrow(3, 0, w - 1)?.sub(d.narrow(3, 1, w - 1)?)?.abs()?;
    let dy = d.narrow(2, 0, h - 1)?.sub(d.narrow(2, 1, h - 1)?)?.abs()?;
    let ix = image.narrow(3, 0, w - 1)?.sub(image.narrow(3, 1, w - 1)?)?.abs()?.mean_dim(1)?;
    let iy = image.narrow(2, 0, h - 1)?.sub(image.narrow(2, 1, h - 1)?)?.abs()?.mean_dim(1)?;
    let sx = dx.mul(ix.neg()?.exp()?)?.mean()?;
    let sy = dy.mul(iy.neg()?.exp()?)?.mean()?;
    sx.add(sy)
}

/// Pixels where teacher and student depths disagree by more than a factor
/// of two (true = unreliable).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsistencyMask {
    pub shape: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ConsistencyMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.mask.len() as f64
        }
    }

    pub fn empty(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), mask: vec![false; shape.iter().product()] }
    }
}

/// `max((s−t)/t, (t−s)/s) > 1`, elementwise.
pub fn consistency_mask_values(student: &[f64], teacher: &[f64], shape: &[usize]) -> Result<ConsistencyMask> {
    if student.len() != teacher.len() || student.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!("mask inputs {} / {} for {shape:?}", student.len(), teacher.len())));
    }
    let mut mask = Vec::with_capacity(student.len());
    for (&s, &t) in student.iter().zip(teacher) {
        if !(s > 0.0 && t > 0.0) || !s.is_finite() || !t.is_finite() {
            return Err(Error::InvalidDepth(if s > 0.0 { t } else { s }));
        }
        mask.push(((s - t) / t).max((t - s) / s) > 1.0);
    }
    Ok(ConsistencyMask { shape: shape.to_vec(), mask })
}

/// Mask from the values of two depth maps; no gradient is involved.
pub fn consistency_mask<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>) -> Result<ConsistencyMask> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!("mask: {:?} vs {:?}", student.shape(), teacher.shape())));
    }
    consistency_mask_values(&student.to_f64_vec(), &teacher.to_f64_vec(), student.shape())
}

/// Mean of `|D_s − stopgrad(D_t)|` over masked pixels (zero if none).
pub fn distillation_loss<'t, F: Scalar>(
    student: Var<'t, F>,
    teacher: Var<'t, F>,
    mask: &ConsistencyMask,
) -> Result<Var<'t, F>> {
    if student.shape() != teacher.shape() || student.shape() != mask.shape {
        return Err(Error::Shape(format!(
            "distillation: {:?} / {:?} / {:?}",
            student.shape(),
            teacher.shape(),
            mask.shape
        )));
    }
    let count = mask.count();
    let tape = student.tape();
    if count == 0 {
        return Ok(tape.scalar(F::zero()));
    }
    let m = Tensor::new(&mask.shape, mask.mask.iter().map(|&v| if v { F::one() } else { F::zero() }).collect())?;
    student.sub(teacher.detach())?.abs()?.mul(tape.constant(m))?.sum()?.mul_scalar(1.0 / count as f64)
}

/// Loss value plus its parts (as plain numbers, for logging).
pub struct LossTerms<'t, F: Scalar> {
    pub total: Var<'t, F>,
    pub reprojection: f64,
    pub distillation: f64,
    pub smoothness: f64,
    /// Fraction of pixels marked unreliable (student only).
    pub masked_fraction: f64,
}

/// Per-pixel error maps of one depth network against its target frame.
pub struct PhotometricInputs<'t, F: Scalar> {
    pub warped: Vec<Var<'t, F>>,
    pub identity: Vec<Var<'t, F>>,
}

/// Teacher objective: reprojection plus weighted smoothness.
pub fn teacher_total_loss<'t, F: Scalar>(
    photo: &PhotometricInputs<'t, F>,
    exclude: Option<&[bool]>,
    disp: Var<'t, F>,
    image: Var<'t, F>,
    weights: &LossWeights,
) -> Result<LossTerms<'t, F>> {
    let keep: Option<Vec<bool>> = exclude.map(|e| e.iter().map(|&x| !x).collect());
    let reproj = reprojection_terms(&photo.warped, &photo.identity, keep.as_deref())?.mean_or_zero()?;
    let smooth = smoothness_loss(disp, image)?;
    let total = reproj.add(smooth.mul_scalar(weights.smoothness_lambda)?)?;
    Ok(LossTerms {
        total,
        reprojection: reproj.item().f64(),
        distillation: 0.0,
        smoothness: smooth.item().f64(),
        masked_fraction: 0.0,
    })
}

/// Student objective: reprojection over reliable pixels, distillation over
/// the unreliable ones, plus smoothness.
pub fn student_total_loss<'t, F: Scalar>(
    photo: &PhotometricInputs<'t, F>,
    exclude: Option<&[bool]>,
    depth_student: Var<'t, F>,
    depth_teacher: Var<'t, F>,
    disp: Var<'t, F>,
    image: Var<'t, F>,
    weights: &LossWeights,
) -> Result<LossTerms<'t, F>> {
    let mask = consistency_mask(&depth_student.to_tensor(), &depth_teacher.to_tensor())?;
    if exclude.is_some_and(|e| e.len() != mask.mask.len()) {
        return Err(Error::Shape("exclusion mask does not match the depth map".into()));
    }
    let keep: Vec<bool> = mask
        .mask
        .iter()
        .enumerate()
        .map(|(i, &m)| !m && exclude.map_or(true, |e| !e[i]))
        .collect();
    let reproj = reprojection_terms(&photo.warped, &photo.identity, Some(&keep))?.mean_or_zero()?;
    let distill = distillation_loss(depth_student, depth_teacher, &mask)?;
    let smooth = smoothness_loss(disp, image)?;
    let total = reproj
        .add(distill.mul_scalar(weights.consistency_weight)?)?
        .add(smooth.mul_scalar(weights.smoothness_lambda)?)?;
    Ok(LossTerms {
        total,
        reprojection: reproj.item().f64(),
        distillation: distill.item().f64(),
        smoothness: smooth.item().f64(),
        masked_fraction: mask.fraction(),
    })
}
