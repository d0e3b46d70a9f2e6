//! Similarity and softmax primitives plus the central-difference gradient
//! checker that every analytic gradient in the crate is tested against.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::model::ParamId;
use crate::tensor::{dot, DenseTensor};

/// A scalar objective value together with its parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult<K: Ord = ParamId> {
    pub value: f64,
    pub grads: BTreeMap<K, DenseTensor>,
}

impl<K: Ord + Clone> GradResult<K> {
    /// Linear combination `Σ w_i · r_i` of results sharing the same keys.
    pub fn combine(parts: &[(f64, &GradResult<K>)]) -> Self {
        let mut value = 0.0;
        let mut grads: BTreeMap<K, DenseTensor> = BTreeMap::new();
        for (w, part) in parts {
            value += w * part.value;
            for (k, g) in &part.grads {
                match grads.get_mut(k) {
                    Some(acc) => acc.add_scaled_assign(g, *w),
                    None => {
                        grads.insert(k.clone(), g.scaled(*w));
                    }
                }
            }
        }
        Self { value, grads }
    }

    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(self.grads.values().flat_map(|g| g.data()).map(|v| v * v).sum())
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(shape_err("cosine_similarity", format!("lengths {} and {}", u.len(), v.len())));
    }
    let nu = libm::sqrt(dot(u, u));
    let nv = libm::sqrt(dot(v, v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `exp(x_i/τ) / Σ_k exp(x_k/τ)`, evaluated after subtracting the maximum.
pub fn softmax(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("softmax temperature must be positive, got {tau}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(x, tau))
}

pub(crate) fn softmax_unchecked(x: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = x.iter().map(|v| v / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| libm::exp(v - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A collection of named tensors that can be perturbed one coordinate at a
/// time.
pub trait ParamSet: Clone {
    type Key: Ord + Clone + core::fmt::Debug;

    fn entries(&self) -> Vec<(Self::Key, &DenseTensor)>;
    fn coord_mut(&mut self, key: &Self::Key, index: usize) -> &mut f64;
}

impl<K: Ord + Clone + core::fmt::Debug> ParamSet for BTreeMap<K, DenseTensor> {
    type Key = K;

    fn entries(&self) -> Vec<(K, &DenseTensor)> {
        self.iter().map(|(k, v)| (k.clone(), v)).collect()
    }

    fn coord_mut(&mut self, key: &K, index: usize) -> &mut f64 {
        &mut self.get_mut(key).expect("unknown parameter key").data_mut()[index]
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Domain(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    Ok(())
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every
/// coordinate of every parameter.
pub fn finite_diff_grad<P, F>(mut f: F, params: &P, h: f64) -> Result<BTreeMap<P::Key, DenseTensor>>
where
    P: ParamSet,
    F: FnMut(&P) -> Result<f64>,
{
    check_step(h)?;
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    for (key, tensor) in params.entries() {
        let mut grad = DenseTensor::zeros(tensor.shape());
        for i in 0..tensor.len() {
            let d = central_difference(&mut work, &key, i, h, |p| f(p).map(|v| (v, 0)))?.0;
            grad.data_mut()[i] = d;
        }
        out.insert(key, grad);
    }
    Ok(out)
}

/// Objective value plus a signature of every discrete choice (argmax picks,
/// clamp activity) made while computing it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub branch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateDerivative<K> {
    pub key: K,
    pub index: usize,
    pub derivative: f64,
    /// False when `θ ± h` selects a different branch of a piecewise
    /// function than `θ`; the difference quotient then straddles a kink.
    pub smooth: bool,
}

/// Central differences at selected coordinates, flagging probes that cross
/// a non-differentiable point.
pub fn finite_diff_probe<P, F>(
    mut f: F,
    params: &P,
    coords: &[(P::Key, usize)],
    h: f64,
) -> Result<Vec<CoordinateDerivative<P::Key>>>
where
    P: ParamSet,
    F: FnMut(&P) -> Result<Probe>,
{
    check_step(h)?;
    let base = f(params)?.branch;
    let mut work = params.clone();
    coords
        .iter()
        .map(|(key, index)| {
            let (derivative, plus, minus) =
                central_difference(&mut work, key, *index, h, |p| f(p).map(|pr| (pr.value, pr.branch)))?;
            Ok(CoordinateDerivative {
                key: key.clone(),
                index: *index,
                derivative,
                smooth: plus == base && minus == base,
            })
        })
        .collect()
}

fn central_difference<P: ParamSet>(
    work: &mut P,
    key: &P::Key,
    index: usize,
    h: f64,
    mut f: impl FnMut(&P) -> Result<(f64, u64)>,
) -> Result<(f64, u64, u64)> {
    let original = *work.coord_mut(key, index);
    *work.coord_mut(key, index) = original + h;
    let plus = f(work);
    *work.coord_mut(key, index) = original - h;
    let minus = f(work);
    *work.coord_mut(key, index) = original;
    let (fp, bp) = plus?;
    let (fm, bm) = minus?;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NonFinite(format!("objective while probing {key:?}[{index}]")));
    }
    Ok(((fp - fm) / (2.0 * h), bp, bm))
}

/// `|a − n| / max(|a|, |n|)`, or zero when both are below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}
