//! Multi-view opacity observations per voxel: a cross-view consistency loss,
//! inverse-distance weighted density, and feature modulation.
//!
//! Ray samples are binned to the voxel that contains them. Samples of one
//! view inside one voxel collapse into a single observation, their
//! transmittance-weighted mean (weights `T + 1e-10`).

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::diff::{Graph, Var};
use crate::error::{check_len, Error, Result};
use crate::exec;
use crate::geometry::{Vec3, VoxelGrid};

/// Added to transmittance weights so fully occluded voxels still average.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-10;
/// Added to distances in the inverse-distance weights.
pub const DISTANCE_EPS: f64 = 1e-6;
/// Opacity of voxels no ray sample reached.
pub const UNOBSERVED_OPACITY: f64 = 1.0;

/// Sample → observation → voxel bookkeeping, shared by the taped and plain
/// paths. Observations and voxel slots are numbered in first-seen order.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationPlan {
    pub n_samples: usize,
    /// Flat sample indices that fell inside the grid.
    pub sample_idx: Vec<usize>,
    /// Observation of each kept sample.
    pub sample_obs: Vec<usize>,
    pub obs_view: Vec<usize>,
    /// Voxel slot of each observation.
    pub obs_slot: Vec<usize>,
    /// Camera-center to voxel-center distance of each observation.
    pub obs_distance: Vec<f64>,
    /// Flat voxel index of each slot.
    pub slot_voxel: Vec<usize>,
    /// Observations (views) per slot.
    pub slot_views: Vec<usize>,
}

impl ObservationPlan {
    /// `points[s]` was sampled by view `views[s]`, whose camera sits at
    /// `centers[views[s]]`.
    pub fn build(points: &[Vec3], views: &[usize], centers: &[Vec3], grid: &VoxelGrid) -> Result<Self> {
        check_len(points.len(), views.len())?;
        if let Some(&v) = views.iter().find(|&&v| v >= centers.len()) {
            return Err(Error::ShapeMismatch(format!("view {v} has no camera center")));
        }
        let voxel: Vec<Option<usize>> = exec::map_range(points.len(), |s| grid.containing(&points[s]));
        let mut plan = ObservationPlan {
            n_samples: points.len(),
            sample_idx: Vec::new(),
            sample_obs: Vec::new(),
            obs_view: Vec::new(),
            obs_slot: Vec::new(),
            obs_distance: Vec::new(),
            slot_voxel: Vec::new(),
            slot_views: Vec::new(),
        };
        let mut obs_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut slot_of: HashMap<usize, usize> = HashMap::new();
        for (s, vox) in voxel.into_iter().enumerate() {
            let Some(j) = vox else { continue };
            let view = views[s];
            let o = *obs_of.entry((view, j)).or_insert_with(|| {
                let next_slot = slot_of.len();
                let slot = *slot_of.entry(j).or_insert(next_slot);
                if slot == plan.slot_voxel.len() {
                    plan.slot_voxel.push(j);
                    plan.slot_views.push(0);
                }
                plan.slot_views[slot] += 1;
                plan.obs_view.push(view);
                plan.obs_slot.push(slot);
                plan.obs_distance.push((centers[view] - grid.center_of(j)).norm());
                plan.obs_view.len() - 1
            });
            plan.sample_idx.push(s);
            plan.sample_obs.push(o);
        }
        Ok(plan)
    }

    pub fn n_obs(&self) -> usize {
        self.obs_view.len()
    }

    /// Number of observed voxels.
    pub fn n_voxels(&self) -> usize {
        self.slot_voxel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs_view.is_empty()
    }

    /// Per-observation transmittance-weighted means of `alpha` and `density`
    /// given per-sample values.
    pub fn aggregate(&self, alpha: &[f64], density: &[f64], transmittance: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len(alpha.len(), self.n_samples)?;
        check_len(density.len(), self.n_samples)?;
        check_len(transmittance.len(), self.n_samples)?;
        let n = self.n_obs();
        let (mut a, mut d, mut w) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (&s, &o) in self.sample_idx.iter().zip(&self.sample_obs) {
            let ws = transmittance[s] + TRANSMITTANCE_FLOOR;
            a[o] += ws * alpha[s];
            d[o] += ws * density[s];
            w[o] += ws;
        }
        for o in 0..n {
            a[o] /= w[o];
            d[o] /= w[o];
        }
        Ok((a, d))
    }

    /// Taped version of [`aggregate`](Self::aggregate) over `[.., S]`-shaped
    /// per-sample tensors flattened in the same order as the plan's points.
    pub fn aggregate_tape(&self, g: &mut Graph, alpha: Var, density: Var, transmittance: Var) -> Result<(Var, Var)> {
        for v in [alpha, density, transmittance] {
            check_len(g.value(v).len(), self.n_samples)?;
        }
        let n = self.n_samples;
        let flat = |g: &mut Graph, v: Var| g.reshape(v, vec![n]);
        let (a, d, t) = (flat(g, alpha)?, flat(g, density)?, flat(g, transmittance)?);
        let a = g.gather(a, &self.sample_idx)?;
        let d = g.gather(d, &self.sample_idx)?;
        let t = g.gather(t, &self.sample_idx)?;
        let w = g.add_scalar(t, TRANSMITTANCE_FLOOR);
        let wa = g.mul(w, a)?;
        let wd = g.mul(w, d)?;
        let n_obs = self.n_obs();
        let num_a = g.segment_sum(wa, &self.sample_obs, n_obs)?;
        let num_d = g.segment_sum(wd, &self.sample_obs, n_obs)?;
        let den = g.segment_sum(w, &self.sample_obs, n_obs)?;
        Ok((g.div(num_a, den)?, g.div(num_d, den)?))
    }
}

/// One aggregated (view, voxel) observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub view: usize,
    pub voxel: usize,
    pub alpha: f64,
    pub density: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpacityObservationTable {
    pub entries: Vec<Observation>,
}

impl OpacityObservationTable {
    pub fn from_plan(plan: &ObservationPlan, alpha: &[f64], density: &[f64], transmittance: &[f64]) -> Result<Self> {
        let (a, d) = plan.aggregate(alpha, density, transmittance)?;
        Ok(OpacityObservationTable {
            entries: (0..plan.n_obs())
                .map(|o| Observation {
                    view: plan.obs_view[o],
                    voxel: plan.slot_voxel[plan.obs_slot[o]],
                    alpha: a[o],
                    density: d[o],
                    distance: plan.obs_distance[o],
                })
                .collect(),
        })
    }

    /// Entries grouped by voxel, in first-seen voxel order.
    pub fn by_voxel(&self) -> Vec<(usize, Vec<Observation>)> {
        let mut order: Vec<usize> = Vec::new();
        let mut groups: HashMap<usize, Vec<Observation>> = HashMap::new();
        for e in &self.entries {
            groups
                .entry(e.voxel)
                .or_insert_with(|| {
                    order.push(e.voxel);
                    Vec::new()
                })
                .push(*e);
        }
        order
            .into_iter()
            .map(|v| (v, groups.remove(&v).unwrap()))
            .collect()
    }

    /// `(1/M) Σ_j Σ_i (α_ij − ᾱ_j)²`. Returns `(0, true)` for an empty table.
    pub fn consistency_loss(&self) -> (f64, bool) {
        let groups = self.by_voxel();
        if groups.is_empty() {
            return (0.0, true);
        }
        let mut total = 0.0;
        for (_, obs) in &groups {
            let mean = obs.iter().map(|o| o.alpha).sum::<f64>() / obs.len() as f64;
            total += obs.iter().map(|o| (o.alpha - mean).powi(2)).sum::<f64>();
        }
        (total / groups.len() as f64, false)
    }

    /// Per observed voxel: `Σ w ρ / Σ w` with `w = 1/(d + eps)`, or the plain
    /// mean when `inverse_distance` is off. Unsquashed.
    pub fn weighted_density(&self, eps: f64, inverse_distance: bool) -> Vec<(usize, f64)> {
        self.by_voxel()
            .into_iter()
            .map(|(v, obs)| {
                let (mut num, mut den) = (0.0, 0.0);
                for o in &obs {
                    let w = if inverse_distance { 1.0 / (o.distance + eps) } else { 1.0 };
                    num += w * o.density;
                    den += w;
                }
                (v, num / den)
            })
            .collect()
    }

    pub fn weighted_opacity(&self, grid: &VoxelGrid, eps: f64, inverse_distance: bool) -> OpacityGrid {
        let mut out = OpacityGrid::unobserved(grid);
        let groups = self.by_voxel();
        for ((v, rho), (_, obs)) in self.weighted_density(eps, inverse_distance).into_iter().zip(groups) {
            out.values[v] = squash(rho, grid.voxel_size);
            out.counts[v] = obs.len();
        }
        out
    }
}

/// Density to opacity over one voxel edge: `1 − exp(−ρ·s)`.
pub fn squash(density: f64, voxel_size: f64) -> f64 {
    -(-density * voxel_size).exp_m1()
}

/// Taped consistency loss over per-observation alphas.
pub fn consistency_loss_tape(g: &mut Graph, plan: &ObservationPlan, obs_alpha: Var) -> Result<(Var, bool)> {
    check_len(g.value(obs_alpha).len(), plan.n_obs())?;
    let m = plan.n_voxels();
    if m == 0 {
        return Ok((g.scalar(0.0), true));
    }
    let sums = g.segment_sum(obs_alpha, &plan.obs_slot, m)?;
    let inv_k: Vec<f64> = plan.slot_views.iter().map(|&k| 1.0 / k as f64).collect();
    let means = g.mul_const(sums, inv_k.into())?;
    let per_obs = g.gather(means, &plan.obs_slot)?;
    let diff = g.sub(obs_alpha, per_obs)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok((g.scale(total, 1.0 / m as f64), false))
}

/// Taped opacity for every voxel of `grid`, `[N]`. Observed voxels get the
/// squashed weighted density; the rest take `fallback` (a constant).
pub fn weighted_opacity_tape(
    g: &mut Graph,
    plan: &ObservationPlan,
    obs_density: Var,
    grid: &VoxelGrid,
    inverse_distance: bool,
    fallback: &[f64],
) -> Result<Var> {
    check_len(g.value(obs_density).len(), plan.n_obs())?;
    check_len(fallback.len(), grid.len())?;
    let m = plan.n_voxels();
    let w: Vec<f64> = plan
        .obs_distance
        .iter()
        .map(|&d| if inverse_distance { 1.0 / (d + DISTANCE_EPS) } else { 1.0 })
        .collect();
    let mut den = vec![0.0; m];
    for (o, &s) in plan.obs_slot.iter().enumerate() {
        den[s] += w[o];
    }
    let wd = g.mul_const(obs_density, w.into())?;
    let num = g.segment_sum(wd, &plan.obs_slot, m)?;
    let inv_den: Vec<f64> = den.iter().map(|d| 1.0 / d).collect();
    let rho = g.mul_const(num, inv_den.into())?;
    // 1 − exp(−ρ s)
    let scaled = g.scale(rho, -grid.voxel_size);
    let e = g.exp(scaled);
    let ne = g.neg(e);
    let opacity = g.add_scalar(ne, 1.0);
    let full = g.segment_sum(opacity, &plan.slot_voxel, grid.len())?;
    let mut base = fallback.to_vec();
    for &v in &plan.slot_voxel {
        base[v] = 0.0;
    }
    g.add_const(full, &base)
}

/// Scales each voxel's feature row by its opacity: `[N, C] ⊙ [N]`.
pub fn adjust_features(g: &mut Graph, features: Var, opacity: Var) -> Result<Var> {
    g.scale_rows(features, opacity)
}

/// Per-voxel opacity in `[0, 1]` with the number of views that observed it.
#[derive(Clone, Debug, PartialEq)]
pub struct OpacityGrid {
    pub grid: VoxelGrid,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

const RASTER_MAGIC: &str = "VOXOPACITY";
pub const RASTER_VERSION: u32 = 1;

impl OpacityGrid {
    pub fn unobserved(grid: &VoxelGrid) -> Self {
        OpacityGrid {
            grid: grid.clone(),
            values: vec![UNOBSERVED_OPACITY; grid.len()],
            counts: vec![0; grid.len()],
        }
    }

    /// Text header line `VOXOPACITY <version> nx ny nz voxel_size ox oy oz`,
    /// then `nx·ny·nz` little-endian f32 values in flat-index order.
    pub fn write_raster(&self, path: &Path) -> Result<()> {
        let g = &self.grid;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "{RASTER_MAGIC} {RASTER_VERSION} {} {} {} {} {} {} {}",
            g.dims[0], g.dims[1], g.dims[2], g.voxel_size, g.origin.x, g.origin.y, g.origin.z
        )?;
        for &v in &self.values {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a raster written by [`write_raster`](Self::write_raster). Counts
    /// are not stored and come back as zero.
    pub fn read_raster(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::corrupt(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 9 || parts[0] != RASTER_MAGIC {
            return Err(Error::corrupt(path, "bad opacity raster header"));
        }
        let version: u32 = parts[1].parse().map_err(|e| Error::corrupt(path, e))?;
        if version != RASTER_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: RASTER_VERSION,
                found: version,
            });
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::corrupt(path, e));
        let dims = [
            parts[2].parse().map_err(|e| Error::corrupt(path, e))?,
            parts[3].parse().map_err(|e| Error::corrupt(path, e))?,
            parts[4].parse().map_err(|e| Error::corrupt(path, e))?,
        ];
        let grid = VoxelGrid::new(dims, Vec3::new(num(parts[6])?, num(parts[7])?, num(parts[8])?), num(parts[5])?)?;
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut r, &mut bytes)?;
        if bytes.len() != grid.len() * 4 {
            return Err(Error::corrupt(path, format!("expected {} values", grid.len())));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(OpacityGrid {
            counts: vec![0; grid.len()],
            grid,
            values,
        })
    }

    /// Centers of voxels with opacity below `tau`, as an ASCII PLY point cloud
    /// with an `opacity` property.
    pub fn write_free_space_ply(&self, path: &Path, tau: f64) -> Result<usize> {
        let free: Vec<usize> = (0..self.values.len()).filter(|&i| self.values[i] < tau).collect();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "ply\nformat ascii 1.0")?;
        writeln!(f, "element vertex {}", free.len())?;
        writeln!(f, "property float x\nproperty float y\nproperty float z\nproperty float opacity")?;
        writeln!(f, "end_header")?;
        for &i in &free {
            let c = self.grid.center_of(i);
            writeln!(f, "{} {} {} {}", c.x, c.y, c.z, self.values[i])?;
        }
        f.flush()?;
        Ok(free.len())
    }
}
