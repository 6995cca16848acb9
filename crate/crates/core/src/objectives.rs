//! Scalar objectives: Charbonnier data term, hyper-Laplacian gradient prior,
//! kernel L2 norm, their weighted composition, and a finite-difference
//! gradient checker.
//!
//! Reductions accumulate in `f64`; tensors stay `f32`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::kernel_space::BlurKernel;
use crate::tensor::Tensor;

/// Smoothing added inside the hyper-Laplacian penalty.
pub const HYPER_LAPLACIAN_DELTA: f64 = 1e-8;

pub const CHARBONNIER: &str = "charbonnier";
pub const KERNEL_L2: &str = "kernel_l2";
pub const HYPER_LAPLACIAN: &str = "hyper_laplacian";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorWeights {
    /// Weight of the kernel L2 norm.
    pub lambda_k: f64,
    /// Weight of the gradient prior.
    pub gamma: f64,
    /// Hyper-Laplacian exponent.
    pub alpha: f64,
    pub eps_charbonnier: f64,
}

impl Default for PriorWeights {
    fn default() -> Self {
        Self {
            lambda_k: 6e-4,
            gamma: 2e-2,
            alpha: 2.0 / 3.0,
            eps_charbonnier: 1e-3,
        }
    }
}

impl PriorWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_k >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("lambda_k and gamma must be ≥ 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.eps_charbonnier > 0.0) {
            return Err(Error::Config("eps_charbonnier must be > 0".into()));
        }
        Ok(())
    }
}

/// A scalar objective together with its unweighted terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub breakdown: IndexMap<String, f64>,
    pub weights: IndexMap<String, f64>,
}

impl LossValue {
    /// Build from `(name, unweighted value, weight)` triples.
    pub fn from_terms<'a>(terms: impl IntoIterator<Item = (&'a str, f64, f64)>) -> Self {
        let mut breakdown = IndexMap::new();
        let mut weights = IndexMap::new();
        let mut value = 0.0;
        for (name, raw, w) in terms {
            value += w * raw;
            breakdown.insert(name.to_string(), raw);
            weights.insert(name.to_string(), w);
        }
        Self {
            value,
            breakdown,
            weights,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.breakdown.get(name).copied()
    }

    /// First non-finite entry, if any.
    pub fn non_finite_term(&self) -> Option<(&str, f64)> {
        self.breakdown
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, v)| (k.as_str(), *v))
            .or_else(|| (!self.value.is_finite()).then_some(("total", self.value)))
    }

    pub(crate) fn check_finite(&self, step: usize) -> Result<()> {
        match self.non_finite_term() {
            Some((term, value)) => Err(Error::NonFinite {
                step,
                term: term.to_string(),
                value,
            }),
            None => Ok(()),
        }
    }
}

pub(crate) fn charbonnier_slices(a: &[f32], b: &[f32], eps: f64) -> f64 {
    let eps2 = eps * eps;
    // accumulate the excess over eps so equal inputs give eps exactly
    let excess: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let d = *p as f64 - *q as f64;
            (d * d + eps2).sqrt() - eps
        })
        .sum();
    eps + excess / a.len() as f64
}

/// Mean of `sqrt((a - b)² + eps²)`.
pub fn charbonnier(a: &ImageTensor, b: &ImageTensor, eps: f64) -> Result<f64> {
    a.same_shape(b, "charbonnier")?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    Ok(charbonnier_slices(a.data(), b.data(), eps))
}

fn hl_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!(
            "hyper-Laplacian needs at least 2×2 pixels, got {h}×{w}"
        )));
    }
    Ok((c, h, w))
}

pub(crate) fn hyper_laplacian_tensor(x: &Tensor, alpha: f64, delta: f64) -> Result<f64> {
    let (c, h, w) = hl_dims(x)?;
    let d = x.data();
    let half = alpha / 2.0;
    let mut sum = 0.0f64;
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for u in 0..h - 1 {
            for v in 0..w - 1 {
                let here = p[u * w + v] as f64;
                let gu = p[(u + 1) * w + v] as f64 - here;
                let gv = p[u * w + v + 1] as f64 - here;
                sum += (gu * gu + gv * gv + delta).powf(half);
            }
        }
    }
    Ok(sum / (c * (h - 1) * (w - 1)) as f64)
}

/// Accumulate `upstream · ∂/∂x` of the hyper-Laplacian mean into `out`.
pub(crate) fn hyper_laplacian_grad_into(
    x: &Tensor,
    alpha: f64,
    delta: f64,
    upstream: f64,
    out: &mut [f32],
) -> Result<()> {
    let (c, h, w) = hl_dims(x)?;
    let d = x.data();
    let scale = upstream * alpha / (c * (h - 1) * (w - 1)) as f64;
    let half = alpha / 2.0;
    for ch in 0..c {
        let base = ch * h * w;
        let p = &d[base..base + h * w];
        for u in 0..h - 1 {
            for v in 0..w - 1 {
                let here = p[u * w + v] as f64;
                let gu = p[(u + 1) * w + v] as f64 - here;
                let gv = p[u * w + v + 1] as f64 - here;
                let t = scale * (gu * gu + gv * gv + delta).powf(half - 1.0);
                out[base + (u + 1) * w + v] += (t * gu) as f32;
                out[base + u * w + v + 1] += (t * gv) as f32;
                out[base + u * w + v] -= (t * (gu + gv)) as f32;
            }
        }
    }
    Ok(())
}

/// Mean over interior positions of `(g_u² + g_v² + δ)^(α/2)` with forward
/// differences along height (`g_u`) and width (`g_v`).
pub fn hyper_laplacian(x: &ImageTensor, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    hyper_laplacian_tensor(&x.to_tensor(), alpha, HYPER_LAPLACIAN_DELTA)
}

pub(crate) fn l2_norm_slice(v: &[f32]) -> f64 {
    v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt()
}

/// Euclidean norm over all kernel elements.
pub fn kernel_l2(k: &BlurKernel) -> f64 {
    l2_norm_slice(k.tensor().data())
}

/// `charbonnier(y, fake) + λ·‖k‖₂ + γ·hyper_laplacian(x)`, where `fake` is
/// the caller's `F(x, k)`.
pub fn deblur_objective(
    y: &ImageTensor,
    x: &ImageTensor,
    k: &BlurKernel,
    fake: &ImageTensor,
    w: &PriorWeights,
) -> Result<LossValue> {
    y.same_shape(fake, "deblur objective")?;
    let data = charbonnier(y, fake, w.eps_charbonnier)?;
    let reg = kernel_l2(k);
    let prior = hyper_laplacian_tensor(&x.to_tensor(), w.alpha, HYPER_LAPLACIAN_DELTA)?;
    Ok(LossValue::from_terms([
        (CHARBONNIER, data, 1.0),
        (KERNEL_L2, reg, w.lambda_k),
        (HYPER_LAPLACIAN, prior, w.gamma),
    ]))
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f32 = 1e-3;

/// A scalar function with an analytic gradient.
pub trait Differentiable {
    fn value(&mut self, point: &[f32]) -> Result<f64>;
    fn gradient(&mut self, point: &[f32]) -> Result<Vec<f32>>;
}

/// Adapter turning a pair of closures into a [`Differentiable`].
pub struct ScalarFn<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Differentiable for ScalarFn<V, G>
where
    V: FnMut(&[f32]) -> Result<f64>,
    G: FnMut(&[f32]) -> Result<Vec<f32>>,
{
    fn value(&mut self, point: &[f32]) -> Result<f64> {
        (self.value)(point)
    }

    fn gradient(&mut self, point: &[f32]) -> Result<Vec<f32>> {
        (self.gradient)(point)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub rel_tol: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare the analytic gradient with central differences (`h = 1e-3`) at
/// every coordinate of `point`.
pub fn grad_check<F: Differentiable + ?Sized>(f: &mut F, point: &[f32], rel_tol: f64) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, &coords, rel_tol)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F: Differentiable + ?Sized>(
    f: &mut F,
    point: &[f32],
    coords: &[usize],
    rel_tol: f64,
) -> Result<GradCheckReport> {
    let non_finite = |step: usize, term: &str, value: f64| Error::NonFinite {
        step,
        term: term.to_string(),
        value,
    };
    let analytic = f.gradient(point)?;
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for a point of {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut report = GradCheckReport {
        passed: true,
        rel_tol,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    let mut p = point.to_vec();
    for &i in coords {
        let a = analytic[i] as f64;
        if !a.is_finite() {
            return Err(non_finite(i, "analytic gradient", a));
        }
        let orig = p[i];
        let (hi, lo) = (orig + GRAD_CHECK_STEP, orig - GRAD_CHECK_STEP);
        p[i] = hi;
        let f_hi = f.value(&p)?;
        p[i] = lo;
        let f_lo = f.value(&p)?;
        p[i] = orig;
        for v in [f_hi, f_lo] {
            if !v.is_finite() {
                return Err(non_finite(i, "function value", v));
            }
        }
        let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let err = (a - numeric).abs() / denom;
        if err > report.max_rel_error || i == coords[0] {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= rel_tol;
    Ok(report)
}
