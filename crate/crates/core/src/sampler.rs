//! Depth sampling along rays: a uniform pass, then importance resampling from
//! a blend of network density and proximity to occupied voxels.
//!
//! Inverse-CDF bins: `n` weights own `n` equal-width bins tiling
//! `[near, far]`. Bin `i` contains the uniform depth `near + iΔ` with
//! `Δ = (far - near) / (n - 1)`, and also every stratified depth drawn for
//! slot `i`, so a weight always sits in the bin it describes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{Ray, Vec3, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Render the uniform depths.
    #[serde(rename = "uniform")]
    Uniform,
    /// Render only the importance samples; the uniform pass only feeds the weights.
    #[serde(rename = "dis")]
    Dis,
    /// Render the sorted union of both.
    #[serde(rename = "uniform+dis")]
    UniformDis,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Uniform => "uniform",
            SamplingMode::Dis => "dis",
            SamplingMode::UniformDis => "uniform+dis",
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplingMode::Uniform),
            "dis" => Ok(SamplingMode::Dis),
            "uniform+dis" => Ok(SamplingMode::UniformDis),
            _ => Err(Error::ConfigInvalid(format!("unknown sampler mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Weight of the network density term.
    pub alpha: f64,
    /// Weight of the voxel-proximity term.
    pub beta: f64,
    /// Neighbors averaged for the proximity density.
    pub k: usize,
    pub stratified: bool,
    pub eps: f64,
    /// Floor on the mean neighbor distance.
    pub eps_d: f64,
    /// Opacity above which a voxel counts as occupied.
    pub tau_occ: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplingMode::UniformDis,
            n_coarse: 64,
            n_fine: 64,
            alpha: 0.5,
            beta: 0.5,
            k: 3,
            stratified: true,
            eps: 1e-8,
            eps_d: 1e-3,
            tau_occ: 0.5,
        }
    }
}

impl SamplerConfig {
    /// The named regimes of the sampling comparison: `"Us 64"`, `"Us 128"`,
    /// `"DIS 64"`, `"Us 64 + DIS 64"`, `"DIS 128"`. DIS-only regimes keep a
    /// 64-sample uniform pass for density estimation.
    pub fn regime(name: &str) -> Option<SamplerConfig> {
        let (mode, n_coarse, n_fine) = match name {
            "Us 64" => (SamplingMode::Uniform, 64, 0),
            "Us 128" => (SamplingMode::Uniform, 128, 0),
            "DIS 64" => (SamplingMode::Dis, 64, 64),
            "DIS 128" => (SamplingMode::Dis, 64, 128),
            "Us 64 + DIS 64" => (SamplingMode::UniformDis, 64, 64),
            _ => return None,
        };
        Some(SamplerConfig {
            mode,
            n_coarse,
            n_fine,
            ..SamplerConfig::default()
        })
    }

    pub const REGIMES: [&'static str; 5] = ["Us 64", "Us 128", "DIS 64", "Us 64 + DIS 64", "DIS 128"];

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::InvalidSampleCount(self.n_coarse));
        }
        if self.mode != SamplingMode::Uniform && self.n_fine == 0 {
            return Err(Error::ConfigInvalid("importance sampling needs n_fine ≥ 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::ConfigInvalid("sampler alpha, beta must be ≥ 0 with a positive sum".into()));
        }
        if self.k == 0 {
            return Err(Error::ConfigInvalid("sampler k must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Samples rendered per ray.
    pub fn rendered_per_ray(&self) -> usize {
        match self.mode {
            SamplingMode::Uniform => self.n_coarse,
            SamplingMode::Dis => self.n_fine,
            SamplingMode::UniformDis => self.n_coarse + self.n_fine,
        }
    }
}

/// `n` depths from `near` to `far`. Without `jitter` they are evenly spaced
/// and include both ends; with it, depth `i` is uniform within bin `i`.
pub fn uniform_depths<R: Rng>(near: f64, far: f64, n: usize, jitter: Option<&mut R>) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidSampleCount(n));
    }
    if !(far > near) || !near.is_finite() || !far.is_finite() {
        return Err(Error::NonAscendingDepths);
    }
    Ok(match jitter {
        None => {
            let step = (far - near) / (n - 1) as f64;
            (0..n).map(|i| (near + i as f64 * step).min(far)).collect()
        }
        Some(rng) => {
            let w = (far - near) / n as f64;
            (0..n)
                .map(|i| (near + (i as f64 + rng.gen::<f64>()) * w).min(far))
                .collect()
        }
    })
}

/// Per-ray sampling record. The first block is the uniform pass; the
/// `fine_*` fields hold the importance samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySampleSet {
    pub near: f64,
    pub far: f64,
    pub depths: Vec<f64>,
    pub points: Vec<Vec3>,
    pub mlp_density: Vec<f64>,
    pub voxel_density: Vec<f64>,
    pub norm_mlp: Vec<f64>,
    pub norm_voxel: Vec<f64>,
    pub weights: Vec<f64>,
    pub cdf: Vec<f64>,
    pub fine_depths: Vec<f64>,
    pub fine_points: Vec<Vec3>,
    /// The weights summed to at most ε and uniform fine sampling was used.
    pub degenerate: bool,
}

impl RaySampleSet {
    /// Depths to composite for `mode`, ascending.
    pub fn render_depths(&self, mode: SamplingMode) -> Vec<f64> {
        match mode {
            SamplingMode::Uniform => self.depths.clone(),
            SamplingMode::Dis => self.fine_depths.clone(),
            SamplingMode::UniformDis => {
                let mut all: Vec<f64> = self.depths.iter().chain(&self.fine_depths).copied().collect();
                all.sort_by(f64::total_cmp);
                all
            }
        }
    }
}

pub fn uniform_sample<R: Rng>(ray: &Ray, n: usize, jitter: Option<&mut R>) -> Result<RaySampleSet> {
    let depths = uniform_depths(ray.near, ray.far, n, jitter)?;
    Ok(RaySampleSet {
        near: ray.near,
        far: ray.far,
        points: depths.iter().map(|&z| ray.at(z)).collect(),
        depths,
        ..Default::default()
    })
}

/// Occupied voxel set with a lattice lookup for nearest-center queries.
#[derive(Clone, Debug)]
pub struct OccupiedSet {
    grid: VoxelGrid,
    occupied: Vec<bool>,
    count: usize,
}

impl OccupiedSet {
    pub fn all(grid: &VoxelGrid) -> Self {
        OccupiedSet {
            grid: grid.clone(),
            occupied: vec![true; grid.len()],
            count: grid.len(),
        }
    }

    /// Voxels with opacity strictly above `tau`.
    pub fn from_opacity(grid: &VoxelGrid, opacity: &[f64], tau: f64) -> Result<Self> {
        check_len(opacity.len(), grid.len())?;
        let occupied: Vec<bool> = opacity.iter().map(|&o| o > tau).collect();
        let count = occupied.iter().filter(|&&o| o).count();
        Ok(OccupiedSet {
            grid: grid.clone(),
            occupied,
            count,
        })
    }

    pub fn from_mask(grid: &VoxelGrid, occupied: Vec<bool>) -> Result<Self> {
        check_len(occupied.len(), grid.len())?;
        let count = occupied.iter().filter(|&&o| o).count();
        Ok(OccupiedSet {
            grid: grid.clone(),
            occupied,
            count,
        })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_occupied(&self, idx: usize) -> bool {
        self.occupied[idx]
    }

    /// Ascending distances from `p` to its `min(k, len)` nearest occupied
    /// centers. Cells are visited in Chebyshev shells around the cell holding
    /// `p`; every center outside shell `r` is at least `(r + ½)·s` away, which
    /// bounds when the search can stop.
    pub fn nearest_distances(&self, p: &Vec3, k: usize) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyGrid);
        }
        let k = k.min(self.count);
        let dims = self.grid.dims;
        let s = self.grid.voxel_size;
        let l = self.grid.lattice_coords(p);
        let c = [l[0].floor() as i64, l[1].floor() as i64, l[2].floor() as i64];
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let consider = |i: i64, j: i64, kk: i64, best: &mut Vec<f64>| {
            let idx = self.grid.index(i as usize, j as usize, kk as usize);
            if !self.occupied[idx] {
                return;
            }
            let d = (self.grid.center(i as usize, j as usize, kk as usize) - p).norm();
            if best.len() == k && d >= best[k - 1] {
                return;
            }
            let pos = best.partition_point(|&b| b <= d);
            best.insert(pos, d);
            best.truncate(k);
        };
        let lo = |a: usize, r: i64| (c[a] - r).max(0);
        let hi = |a: usize, r: i64| (c[a] + r).min(dims[a] as i64 - 1);
        let mut r = 0i64;
        loop {
            let (i0, i1, j0, j1, k0, k1) = (lo(0, r), hi(0, r), lo(1, r), hi(1, r), lo(2, r), hi(2, r));
            if i0 <= i1 && j0 <= j1 && k0 <= k1 {
                for i in i0..=i1 {
                    let on_i = (i - c[0]).abs() == r;
                    for j in j0..=j1 {
                        if on_i || (j - c[1]).abs() == r {
                            for kk in k0..=k1 {
                                consider(i, j, kk, &mut best);
                            }
                        } else {
                            for kk in [c[2] - r, c[2] + r] {
                                if kk >= k0 && kk <= k1 && (r > 0 || kk == c[2]) {
                                    consider(i, j, kk, &mut best);
                                }
                                if r == 0 {
                                    break;
                                }
                            }
                        }
                    }
                }
            }
            if best.len() == k && best[k - 1] <= (r as f64 + 0.5) * s {
                break;
            }
            let covered = (0..3).all(|a| c[a] - r <= 0 && c[a] + r >= dims[a] as i64 - 1);
            if covered {
                break;
            }
            r += 1;
        }
        Ok(best)
    }

    /// Inverse of the mean distance to the `k` nearest occupied centers,
    /// with the mean floored at `eps_d`.
    pub fn proximity_density(&self, p: &Vec3, k: usize, eps_d: f64) -> Result<f64> {
        let d = self.nearest_distances(p, k)?;
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        Ok(1.0 / mean.max(eps_d))
    }
}

pub fn voxel_proximity_density(points: &[Vec3], occupied: &OccupiedSet, k: usize, eps_d: f64) -> Result<Vec<f64>> {
    if k == 0 || k > occupied.grid.len() {
        return Err(Error::ConfigInvalid(format!("k = {k} out of range")));
    }
    points
        .iter()
        .map(|p| occupied.proximity_density(p, k, eps_d))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedWeights {
    pub norm_mlp: Vec<f64>,
    pub norm_voxel: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Each density is normalized by `(sum + eps)`, then blended `α·m + β·v`.
pub fn combine_weights(rho_m: &[f64], rho_v: &[f64], alpha: f64, beta: f64, eps: f64) -> Result<CombinedWeights> {
    check_len(rho_m.len(), rho_v.len())?;
    let norm = |x: &[f64]| {
        let s: f64 = x.iter().sum::<f64>() + eps;
        x.iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (nm, nv) = (norm(rho_m), norm(rho_v));
    let weights = nm.iter().zip(&nv).map(|(m, v)| alpha * m + beta * v).collect();
    Ok(CombinedWeights {
        norm_mlp: nm,
        norm_voxel: nv,
        weights,
    })
}

/// Running sum of `weights`.
pub fn cdf(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineSamples {
    pub depths: Vec<f64>,
    pub cdf: Vec<f64>,
    pub degenerate: bool,
}

/// Draws `n_fine` depths from the piecewise-constant density that gives bin
/// `i` of `[near, far]` mass `w_i / Σw`. Falls back to uniform on `[near, far]`
/// when `Σw ≤ eps`. Output is sorted.
pub fn inverse_cdf_sample<R: Rng>(
    weights: &[f64],
    near: f64,
    far: f64,
    n_fine: usize,
    eps: f64,
    rng: &mut R,
) -> Result<FineSamples> {
    if weights.is_empty() {
        return Err(Error::InvalidSampleCount(0));
    }
    if !(far > near) {
        return Err(Error::NonAscendingDepths);
    }
    let c = cdf(weights);
    let total = *c.last().unwrap();
    let n = weights.len();
    let width = (far - near) / n as f64;
    let degenerate = !(total > eps) || weights.iter().any(|w| !(*w >= 0.0));
    let mut depths: Vec<f64> = (0..n_fine)
        .map(|_| {
            let u: f64 = rng.gen();
            if degenerate {
                return near + u * (far - near);
            }
            let t = u * total;
            // first bin whose right-edge CDF exceeds t, skipping empty bins
            let b = c.partition_point(|&x| x <= t).min(n - 1);
            let below = if b == 0 { 0.0 } else { c[b - 1] };
            let frac = if weights[b] > 0.0 {
                ((t - below) / weights[b]).clamp(0.0, 1.0)
            } else {
                0.5
            };
            (near + (b as f64 + frac) * width).min(far)
        })
        .collect();
    depths.sort_by(f64::total_cmp);
    Ok(FineSamples {
        depths,
        cdf: c,
        degenerate,
    })
}

/// Uniform pass of [`dis_sample`], stratified when configured.
pub fn coarse_pass<R: Rng>(ray: &Ray, cfg: &SamplerConfig, rng: &mut R) -> Result<RaySampleSet> {
    if cfg.stratified {
        uniform_sample(ray, cfg.n_coarse, Some(rng))
    } else {
        uniform_sample::<R>(ray, cfg.n_coarse, None)
    }
}

/// True when the importance stage needs network densities at the coarse points.
pub fn needs_mlp_density(cfg: &SamplerConfig) -> bool {
    cfg.mode != SamplingMode::Uniform && cfg.n_fine > 0 && cfg.alpha > 0.0
}

/// Importance stage of [`dis_sample`] on a coarse set. `mlp_density` holds
/// the network density at `set.points` (ignored when `alpha` is 0).
pub fn importance_pass<R: Rng>(
    set: &mut RaySampleSet,
    ray: &Ray,
    occupied: &OccupiedSet,
    mlp_density: Vec<f64>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<()> {
    if cfg.mode == SamplingMode::Uniform || cfg.n_fine == 0 {
        return Ok(());
    }
    set.mlp_density = if cfg.alpha > 0.0 {
        check_len(mlp_density.len(), set.points.len())?;
        mlp_density
    } else {
        vec![0.0; set.points.len()]
    };
    set.voxel_density = if cfg.beta > 0.0 {
        voxel_proximity_density(&set.points, occupied, cfg.k, cfg.eps_d)?
    } else {
        vec![0.0; set.points.len()]
    };
    let w = combine_weights(&set.mlp_density, &set.voxel_density, cfg.alpha, cfg.beta, cfg.eps)?;
    let fine = inverse_cdf_sample(&w.weights, ray.near, ray.far, cfg.n_fine, cfg.eps, rng)?;
    set.norm_mlp = w.norm_mlp;
    set.norm_voxel = w.norm_voxel;
    set.weights = w.weights;
    set.cdf = fine.cdf;
    set.fine_points = fine.depths.iter().map(|&z| ray.at(z)).collect();
    set.fine_depths = fine.depths;
    set.degenerate = fine.degenerate;
    Ok(())
}

/// Full chain on one ray: uniform pass, both densities, blended weights,
/// inverse-CDF resampling. `mlp_density` evaluates the network density at a
/// batch of points. In `Uniform` mode the importance stage is skipped.
pub fn dis_sample<R, F>(
    ray: &Ray,
    occupied: &OccupiedSet,
    mlp_density: F,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<RaySampleSet>
where
    R: Rng,
    F: FnOnce(&[Vec3]) -> Result<Vec<f64>>,
{
    let mut set = coarse_pass(ray, cfg, rng)?;
    let density = if needs_mlp_density(cfg) {
        mlp_density(&set.points)?
    } else {
        Vec::new()
    };
    importance_pass(&mut set, ray, occupied, density, cfg, rng)?;
    Ok(set)
}
