//! Radiance-field branch: per-point features from the views and the voxel
//! volume, a density MLP and a view-conditioned color MLP.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Activation, Graph, Init, Mlp, ParamStore, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{BilinearTaps, Camera, Vec3, VoxelGrid};

/// Bilinear taps of one point in every view it lands inside, texel indices
/// offset into the stacked `[V·h·w]` rows.
pub fn project_points(points: &[Vec3], cameras: &[Camera]) -> Vec<Vec<BilinearTaps>> {
    exec::map_range(points.len(), |i| {
        let mut taps = Vec::with_capacity(cameras.len());
        let mut base = 0;
        for cam in cameras {
            if let Ok(p) = cam.project(&points[i]) {
                if let Some(mut t) = BilinearTaps::new(cam.height(), cam.width(), p.u, p.v) {
                    t.texels.iter_mut().for_each(|x| *x += base);
                    taps.push(t);
                }
            }
            base += cam.height() * cam.width();
        }
        taps
    })
}

/// Eight corner voxels and weights for trilinear interpolation between voxel
/// centers, clamped at the grid faces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrilinearTaps {
    pub voxels: [usize; 8],
    pub weights: [f64; 8],
}

pub fn trilinear_taps(grid: &VoxelGrid, p: &Vec3) -> TrilinearTaps {
    let l = grid.lattice_coords(p);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let n = grid.dims[a];
        let x = (l[a] - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n.saturating_sub(2));
        lo[a] = i0;
        hi[a] = (i0 + 1).min(n - 1);
        f[a] = if hi[a] == lo[a] { 0.0 } else { x - i0 as f64 };
    }
    let mut voxels = [0; 8];
    let mut weights = [0.0; 8];
    for c in 0..8 {
        let pick = [c & 4 != 0, c & 2 != 0, c & 1 != 0];
        let mut w = 1.0;
        let mut ijk = [0; 3];
        for a in 0..3 {
            ijk[a] = if pick[a] { hi[a] } else { lo[a] };
            w *= if pick[a] { f[a] } else { 1.0 - f[a] };
        }
        voxels[c] = grid.index(ijk[0], ijk[1], ijk[2]);
        weights[c] = w;
    }
    TrilinearTaps { voxels, weights }
}

impl Graph {
    /// Per point, mean and population variance over its views of the
    /// bilinearly read rows of `feat: [T, C]` → `[P, 2C]` (mean ‖ var).
    /// Points seen by no view get zeros.
    pub fn multiview_mean_var(&mut self, feat: Var, taps: Rc<[Vec<BilinearTaps>]>) -> Result<Var> {
        let s = self.shape(feat).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("multiview_mean_var expects [T, C], got {s:?}")));
        }
        let (n_tex, c) = (s[0], s[1]);
        if taps.iter().flatten().any(|t| t.texels.iter().any(|&x| x >= n_tex)) {
            return Err(Error::ShapeMismatch("tap outside the feature rows".into()));
        }
        let p = taps.len();
        let fv = self.value_rc(feat);
        let mut out = vec![0.0; p * 2 * c];
        {
            let (fv, taps): (&[f64], &[Vec<BilinearTaps>]) = (&fv, &taps);
            exec::for_each_chunk_mut(&mut out, 2 * c * 128, |ci, chunk| {
                let mut row = vec![0.0; c];
                for (r, o) in chunk.chunks_mut(2 * c).enumerate() {
                    let views = &taps[ci * 128 + r];
                    if views.is_empty() {
                        continue;
                    }
                    let k = views.len() as f64;
                    let (mean, var) = o.split_at_mut(c);
                    for t in views {
                        row.iter_mut().for_each(|x| *x = 0.0);
                        read(fv, c, t, &mut row);
                        for ch in 0..c {
                            mean[ch] += row[ch];
                            var[ch] += row[ch] * row[ch];
                        }
                    }
                    for ch in 0..c {
                        mean[ch] /= k;
                        var[ch] = (var[ch] / k - mean[ch] * mean[ch]).max(0.0);
                    }
                }
            });
        }
        let means: Rc<[f64]> = out.clone().into();
        Ok(self.push(vec![p, 2 * c], out, &[feat], move |g, pg| {
            let Some(gf) = pg[0].as_deref_mut() else { return };
            let mut row = vec![0.0; c];
            let mut up = vec![0.0; c];
            for (r, views) in taps.iter().enumerate() {
                if views.is_empty() {
                    continue;
                }
                let k = views.len() as f64;
                let gm = &g[r * 2 * c..r * 2 * c + c];
                let gv = &g[r * 2 * c + c..(r + 1) * 2 * c];
                let mean = &means[r * 2 * c..r * 2 * c + c];
                for t in views {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    read(&fv, c, t, &mut row);
                    for ch in 0..c {
                        up[ch] = (gm[ch] + 2.0 * gv[ch] * (row[ch] - mean[ch])) / k;
                    }
                    for tap in 0..4 {
                        let base = t.texels[tap] * c;
                        let w = t.weights[tap];
                        for ch in 0..c {
                            gf[base + ch] += w * up[ch];
                        }
                    }
                }
            }
        }))
    }

    /// Trilinear reads of `x: [N, C]` → `[P, C]` at fixed taps.
    pub fn trilinear_gather(&mut self, x: Var, taps: Rc<[TrilinearTaps]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("trilinear_gather expects [N, C], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if taps.iter().any(|t| t.voxels.iter().any(|&v| v >= n)) {
            return Err(Error::ShapeMismatch("trilinear tap outside the volume".into()));
        }
        let p = taps.len();
        let xv = self.value_rc(x);
        let mut out = vec![0.0; p * c];
        {
            let (xv, taps): (&[f64], &[TrilinearTaps]) = (&xv, &taps);
            exec::for_each_chunk_mut(&mut out, c * 256, |ci, chunk| {
                for (r, o) in chunk.chunks_mut(c).enumerate() {
                    let t = &taps[ci * 256 + r];
                    for k in 0..8 {
                        let base = t.voxels[k] * c;
                        for ch in 0..c {
                            o[ch] += t.weights[k] * xv[base + ch];
                        }
                    }
                }
            });
        }
        Ok(self.push(vec![p, c], out, &[x], move |g, pg| {
            if let Some(gx) = pg[0].as_deref_mut() {
                for (r, t) in taps.iter().enumerate() {
                    for k in 0..8 {
                        let base = t.voxels[k] * c;
                        for ch in 0..c {
                            gx[base + ch] += t.weights[k] * g[r * c + ch];
                        }
                    }
                }
            }
        }))
    }
}

fn read(feat: &[f64], c: usize, t: &BilinearTaps, out: &mut [f64]) {
    for tap in 0..4 {
        let base = t.texels[tap] * c;
        for ch in 0..c {
            out[ch] += t.weights[tap] * feat[base + ch];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadianceConfig {
    pub density_hidden: usize,
    pub latent: usize,
    pub color_hidden: usize,
    pub activation: DensityActivation,
    /// Densities are `activation(raw) · density_scale / voxel_size`.
    pub density_scale: f64,
}

/// Map from the density MLP's raw output to a non-negative density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityActivation {
    Softplus,
    Exp,
}

impl Default for RadianceConfig {
    fn default() -> Self {
        RadianceConfig {
            density_hidden: 64,
            latent: 16,
            color_hidden: 32,
            activation: DensityActivation::Softplus,
            density_scale: 18.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RadianceField {
    pub config: RadianceConfig,
    density: Mlp,
    color: Mlp,
}

/// Inputs shared by every batch of points in one scene step.
pub struct SceneInputs<'a> {
    /// `[V·h·w, C]` pixel features.
    pub features: Var,
    /// `[V·h·w, 3]` images.
    pub images: Var,
    /// `[N, C]` voxel volume.
    pub volume: Var,
    pub cameras: &'a [Camera],
    pub grid: &'a VoxelGrid,
}

pub struct FieldOutput {
    /// `[P]`
    pub sigma: Var,
    /// `[P, 3]`
    pub rgb: Option<Var>,
}

impl RadianceField {
    pub fn new(store: &mut ParamStore, channels: usize, config: RadianceConfig, rng: &mut impl Rng) -> Self {
        let density = Mlp::new(
            store,
            "nerf.density",
            &[3 * channels + 3, config.density_hidden, 1 + config.latent],
            Activation::Relu,
            Activation::Identity,
            Init::Default,
            rng,
        );
        let color = Mlp::new(
            store,
            "nerf.color",
            &[config.latent + 6, config.color_hidden, 3],
            Activation::Relu,
            Activation::Sigmoid,
            Init::Default,
            rng,
        );
        RadianceField { config, density, color }
    }

    /// Densities at `points`, and colors when `dirs` (unit, one per point) is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &SceneInputs,
        points: &[Vec3],
        dirs: Option<&[Vec3]>,
    ) -> Result<FieldOutput> {
        let p = points.len();
        let c = g.shape(inputs.features)[1];
        let taps: Rc<[Vec<BilinearTaps>]> = project_points(points, inputs.cameras).into();
        let stats = g.multiview_mean_var(inputs.features, taps.clone())?;
        let rgb_stats = g.multiview_mean_var(inputs.images, taps)?;
        let rgb_mean = g.narrow(rgb_stats, 1, 0, 3)?;
        let rgb_var = g.narrow(rgb_stats, 1, 3, 3)?;
        let tri: Vec<TrilinearTaps> = points.iter().map(|q| trilinear_taps(inputs.grid, q)).collect();
        let vol = g.trilinear_gather(inputs.volume, tri.into())?;
        let x = g.concat(&[stats, vol, rgb_var], 1)?;
        debug_assert_eq!(g.shape(x), &[p, 3 * c + 3]);
        let h = self.density.forward(g, store, x)?;
        let raw = g.narrow(h, 1, 0, 1)?;
        let raw = g.reshape(raw, vec![p])?;
        let sp = match self.config.activation {
            DensityActivation::Softplus => g.softplus(raw),
            DensityActivation::Exp => g.exp(raw),
        };
        let sigma = g.scale(sp, self.config.density_scale / inputs.grid.voxel_size);
        let rgb = match dirs {
            None => None,
            Some(d) => {
                crate::error::check_len(d.len(), p)?;
                let latent = g.narrow(h, 1, 1, self.config.latent)?;
                let dv = g.constant(vec![p, 3], d.iter().flat_map(|v| [v.x, v.y, v.z]).collect())?;
                let y = g.concat(&[latent, rgb_mean, dv], 1)?;
                Some(self.color.forward(g, store, y)?)
            }
        };
        Ok(FieldOutput { sigma, rgb })
    }
}
