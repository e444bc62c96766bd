//! Alpha compositing of density and color samples along rays.
//!
//! `α_i = 1 - exp(-σ_i δ_i)` with `δ_i = z_{i+1} - z_i` and the last gap
//! running to the ray's far bound; `T_i = exp(-Σ_{j<i} σ_j δ_j)`.

use std::rc::Rc;

use crate::diff::{Graph, Var};
use crate::error::{check_len, Error, Result};

/// Added to the accumulated opacity before normalizing the expected depth.
pub const DEPTH_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub alphas: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub accumulated: f64,
}

/// Gaps between consecutive depths, the last one reaching `far`.
pub fn deltas(depths: &[f64], far: f64) -> Result<Vec<f64>> {
    if depths.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::NonAscendingDepths);
    }
    let Some(&last) = depths.last() else {
        return Err(Error::InvalidSampleCount(0));
    };
    if !(far >= last) {
        return Err(Error::NonAscendingDepths);
    }
    let mut d: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    d.push(far - last);
    Ok(d)
}

pub fn composite(densities: &[f64], colors: &[[f64; 3]], depths: &[f64], far: f64) -> Result<RenderResult> {
    check_len(densities.len(), depths.len())?;
    check_len(colors.len(), depths.len())?;
    let delta = deltas(depths, far)?;
    let mut optical = 0.0f64;
    let mut color = [0.0; 3];
    let mut acc = 0.0;
    let mut zsum = 0.0;
    let mut alphas = Vec::with_capacity(depths.len());
    let mut transmittance = Vec::with_capacity(depths.len());
    for i in 0..depths.len() {
        let t = (-optical).exp();
        let sd = densities[i] * delta[i];
        let a = if sd.is_infinite() { 1.0 } else { -(-sd).exp_m1() };
        let w = t * a;
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        acc += w;
        zsum += w * depths[i];
        optical += sd;
        alphas.push(a);
        transmittance.push(t);
    }
    Ok(RenderResult {
        color,
        depth: zsum / (acc + DEPTH_EPS),
        alphas,
        transmittance,
        accumulated: acc,
    })
}

/// Taped compositing outputs for a batch of rays.
pub struct RenderVars {
    /// `[R, 3]`
    pub color: Var,
    /// `[R]`
    pub depth: Var,
    /// `[R, S]`
    pub alpha: Var,
    /// `[R, S]`
    pub transmittance: Var,
    /// `[R]`
    pub accumulated: Var,
}

/// `sigma: [R, S]`, `rgb: [R, S, 3]`; `deltas` and `depths` are `R·S` row-major.
pub fn composite_tape(g: &mut Graph, sigma: Var, rgb: Var, deltas: &[f64], depths: &[f64]) -> Result<RenderVars> {
    let s = g.shape(sigma).to_vec();
    if s.len() != 2 || g.shape(rgb) != [s[0], s[1], 3] {
        return Err(Error::ShapeMismatch(format!(
            "composite: sigma {s:?}, rgb {:?}",
            g.shape(rgb)
        )));
    }
    let (r, n) = (s[0], s[1]);
    check_len(deltas.len(), r * n)?;
    check_len(depths.len(), r * n)?;
    let sd = g.mul_const(sigma, Rc::from(deltas))?;
    let neg = g.neg(sd);
    let survive = g.exp(neg);
    let flipped = g.neg(survive);
    let alpha = g.add_scalar(flipped, 1.0);
    let optical = g.cumsum_exclusive(sd);
    let neg_optical = g.neg(optical);
    let trans = g.exp(neg_optical);
    let weights = g.mul(trans, alpha)?;
    let flat_w = g.reshape(weights, vec![r * n])?;
    let flat_rgb = g.reshape(rgb, vec![r * n, 3])?;
    let weighted = g.scale_rows(flat_rgb, flat_w)?;
    let weighted = g.reshape(weighted, vec![r, n, 3])?;
    let color = g.sum_axis(weighted, 1)?;
    let acc = g.sum_axis(weights, 1)?;
    let wz = g.mul_const(weights, Rc::from(depths))?;
    let zsum = g.sum_axis(wz, 1)?;
    let den = g.add_scalar(acc, DEPTH_EPS);
    let depth = g.div(zsum, den)?;
    Ok(RenderVars {
        color,
        depth,
        alpha,
        transmittance: trans,
        accumulated: acc,
    })
}

/// Mean squared error over rays and channels.
pub fn photometric_loss(g: &mut Graph, rendered: Var, target: &[f64]) -> Result<Var> {
    check_len(g.value(rendered).len(), target.len())?;
    let neg: Vec<f64> = target.iter().map(|t| -t).collect();
    let diff = g.add_const(rendered, &neg)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

pub fn photometric_loss_value(rendered: &[f64], target: &[f64]) -> Result<f64> {
    check_len(rendered.len(), target.len())?;
    if rendered.is_empty() {
        return Ok(0.0);
    }
    Ok(rendered.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / rendered.len() as f64)
}

/// Masked mean absolute depth error. The flag is set when the mask is empty,
/// in which case the loss is a constant 0.
pub fn depth_loss(g: &mut Graph, depth: Var, target: &[f64], mask: &[bool]) -> Result<(Var, bool)> {
    check_len(g.value(depth).len(), target.len())?;
    check_len(mask.len(), target.len())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok((g.scalar(0.0), true));
    }
    let neg: Vec<f64> = target.iter().zip(mask).map(|(t, &m)| if m { -t } else { 0.0 }).collect();
    let m: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
    let diff = g.add_const(depth, &neg)?;
    let masked = g.mul_const(diff, m.into())?;
    let abs = g.abs(masked);
    Ok((g.sum(abs), false))
}

pub fn depth_loss_value(depth: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, bool)> {
    check_len(depth.len(), target.len())?;
    check_len(mask.len(), target.len())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok((0.0, true));
    }
    let s: f64 = depth
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((d, t), _)| (d - t).abs())
        .sum();
    Ok((s / count as f64, false))
}

/// Peak signal-to-noise ratio for values in `[0, 1]`.
pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.max(1e-12).log10()
}
