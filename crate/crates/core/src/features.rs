//! Multi-view voxel features: per-pixel featurizer, projection of voxel
//! centers into every view, learned pixel offsets, fusion over views and a
//! positional code of the winning back-projected point.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Activation, Graph, Init, Mlp, ParamStore, Var};
use crate::error::{check_len, Error, Result};
use crate::exec;
use crate::geometry::{BilinearTaps, Camera, FeatureMap, Vec3, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub channels: usize,
    pub featurizer_hidden: usize,
    pub offset_hidden: Vec<usize>,
    /// Offset budget in pixels.
    pub delta_max: f64,
    pub encoder_bands: usize,
    pub pooling: Pooling,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            channels: 16,
            featurizer_hidden: 32,
            offset_hidden: vec![32, 32],
            delta_max: 4.0,
            encoder_bands: 4,
            pooling: Pooling::Max,
        }
    }
}

/// One in-bounds projection of a voxel center into a view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeQuery {
    pub view: usize,
    pub voxel: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Voxel-center projections for a fixed grid and camera set, view-major.
/// Projections behind a camera or outside its image are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeQueries {
    pub n_views: usize,
    pub n_voxels: usize,
    pub height: usize,
    pub width: usize,
    pub rows: Vec<VolumeQuery>,
}

impl VolumeQueries {
    pub fn build(grid: &VoxelGrid, cameras: &[Camera]) -> Result<Self> {
        let Some(first) = cameras.first() else {
            return Err(Error::InvalidCamera("no cameras".into()));
        };
        let (h, w) = (first.height(), first.width());
        if cameras.iter().any(|c| c.height() != h || c.width() != w) {
            return Err(Error::InvalidCamera("all views must share one image size".into()));
        }
        let centers = grid.centers();
        let per_view: Vec<Vec<VolumeQuery>> = exec::map_range(cameras.len(), |view| {
            let cam = &cameras[view];
            centers
                .iter()
                .enumerate()
                .filter_map(|(voxel, c)| {
                    let p = cam.project(c).ok()?;
                    cam.in_image(p.u, p.v).then_some(VolumeQuery {
                        view,
                        voxel,
                        u: p.u,
                        v: p.v,
                        depth: p.depth,
                    })
                })
                .collect()
        });
        Ok(VolumeQueries {
            n_views: cameras.len(),
            n_voxels: grid.len(),
            height: h,
            width: w,
            rows: per_view.into_iter().flatten().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Taps at the unadjusted pixel of each row, texel indices offset into the
    /// stacked `[V·h·w]` feature rows.
    pub fn taps(&self) -> Vec<BilinearTaps> {
        self.rows
            .iter()
            .map(|q| {
                let mut t = BilinearTaps::new(self.height, self.width, q.u, q.v).expect("query rows are in bounds");
                offset_taps(&mut t, q.view * self.height * self.width);
                t
            })
            .collect()
    }

    pub fn voxel_of_row(&self) -> Vec<usize> {
        self.rows.iter().map(|q| q.voxel).collect()
    }

    /// Views seeing each voxel.
    pub fn views_per_voxel(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_voxels];
        for q in &self.rows {
            n[q.voxel] += 1;
        }
        n
    }
}

fn offset_taps(t: &mut BilinearTaps, base: usize) {
    t.texels.iter_mut().for_each(|x| *x += base);
}

/// `Σ_t w_t · feat[texel_t]`, accumulated in tap order from zero.
fn interpolate_row(feat: &[f64], c: usize, taps: &BilinearTaps, out: &mut [f64]) {
    for t in 0..4 {
        let base = taps.texels[t] * c;
        let w = taps.weights[t];
        for ch in 0..c {
            out[ch] += w * feat[base + ch];
        }
    }
}

fn scatter_row(grad_feat: &mut [f64], c: usize, taps: &BilinearTaps, g: &[f64]) {
    for t in 0..4 {
        let base = taps.texels[t] * c;
        let w = taps.weights[t];
        for ch in 0..c {
            grad_feat[base + ch] += w * g[ch];
        }
    }
}

impl Graph {
    /// Bilinear reads at fixed taps from `feat: [T, C]` → `[Q, C]`.
    pub fn bilinear_gather(&mut self, feat: Var, taps: Rc<[BilinearTaps]>) -> Result<Var> {
        let s = self.shape(feat).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("bilinear_gather expects [T, C], got {s:?}")));
        }
        let (n_tex, c) = (s[0], s[1]);
        if taps.iter().any(|t| t.texels.iter().any(|&x| x >= n_tex)) {
            return Err(Error::ShapeMismatch("bilinear tap outside the feature rows".into()));
        }
        let q = taps.len();
        let fv = self.value_rc(feat);
        let mut out = vec![0.0; q * c];
        {
            let (fv, taps): (&[f64], &[BilinearTaps]) = (&fv, &taps);
            exec::for_each_chunk_mut(&mut out, c * 256, |ci, chunk| {
                for (r, row) in chunk.chunks_mut(c).enumerate() {
                    interpolate_row(fv, c, &taps[ci * 256 + r], row);
                }
            });
        }
        Ok(self.push(vec![q, c], out, &[feat], move |g, p| {
            if let Some(gf) = p[0].as_deref_mut() {
                for (r, t) in taps.iter().enumerate() {
                    scatter_row(gf, c, t, &g[r * c..(r + 1) * c]);
                }
            }
        }))
    }

    /// Bilinear reads at differentiable pixel coordinates. `uv: [Q, 2]` holds
    /// `(u, v)` on view `views[q]`'s `h × w` raster inside the stacked
    /// `feat: [V·h·w, C]`. Out-of-bounds rows read zero and are reported in
    /// the returned mask.
    pub fn bilinear_gather_uv(
        &mut self,
        feat: Var,
        uv: Var,
        views: &[usize],
        height: usize,
        width: usize,
    ) -> Result<(Var, Vec<bool>)> {
        let s = self.shape(feat).to_vec();
        let q = views.len();
        if s.len() != 2 || self.shape(uv) != [q, 2] {
            return Err(Error::ShapeMismatch(format!(
                "bilinear_gather_uv: feat {s:?}, uv {:?}, {q} views",
                self.shape(uv)
            )));
        }
        let c = s[1];
        let per_view = height * width;
        if views.iter().any(|&v| (v + 1) * per_view > s[0]) {
            return Err(Error::ShapeMismatch("view index beyond the stacked feature rows".into()));
        }
        let uvv = self.value(uv);
        let taps: Vec<Option<BilinearTaps>> = (0..q)
            .map(|r| {
                BilinearTaps::new(height, width, uvv[2 * r], uvv[2 * r + 1]).map(|mut t| {
                    offset_taps(&mut t, views[r] * per_view);
                    t
                })
            })
            .collect();
        let valid: Vec<bool> = taps.iter().map(Option::is_some).collect();
        let fv = self.value_rc(feat);
        let mut out = vec![0.0; q * c];
        {
            let (fv_, taps_): (&[f64], &[Option<BilinearTaps>]) = (&fv, &taps);
            exec::for_each_chunk_mut(&mut out, c * 256, |ci, chunk| {
                for (r, row) in chunk.chunks_mut(c).enumerate() {
                    if let Some(t) = &taps_[ci * 256 + r] {
                        interpolate_row(fv_, c, t, row);
                    }
                }
            });
        }
        let taps: Rc<[Option<BilinearTaps>]> = taps.into();
        let var = self.push(vec![q, c], out, &[feat, uv], move |g, p| {
            if let Some(gf) = p[0].as_deref_mut() {
                for (r, t) in taps.iter().enumerate() {
                    if let Some(t) = t {
                        scatter_row(gf, c, t, &g[r * c..(r + 1) * c]);
                    }
                }
            }
            if let Some(guv) = p[1].as_deref_mut() {
                let (fv, taps): (&[f64], &[Option<BilinearTaps>]) = (&fv, &taps);
                exec::for_each_chunk_mut(guv, 2 * 256, |ci, chunk| {
                    for (k, d) in chunk.chunks_mut(2).enumerate() {
                        let r = ci * 256 + k;
                        let Some(t) = &taps[r] else { continue };
                        let gr = &g[r * c..(r + 1) * c];
                        for tap in 0..4 {
                            let base = t.texels[tap] * c;
                            let dot: f64 = (0..c).map(|ch| fv[base + ch] * gr[ch]).sum();
                            d[0] += t.d_du[tap] * dot;
                            d[1] += t.d_dv[tap] * dot;
                        }
                    }
                });
            }
        });
        Ok((var, valid))
    }

    /// Fuses rows `x: [Q, C]` into `[N, C]` over the rows of each voxel
    /// (`voxel_of_row`), skipping rows with `valid[q] == false`. `Max` is per
    /// channel with the earliest row winning ties; `Mean` averages. Voxels
    /// without valid rows are zero.
    pub fn pool_rows(&mut self, x: Var, voxel_of_row: &[usize], valid: &[bool], n: usize, pooling: Pooling) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("pool_rows expects [Q, C], got {s:?}")));
        }
        check_len(voxel_of_row.len(), s[0])?;
        check_len(valid.len(), s[0])?;
        if voxel_of_row.iter().any(|&v| v >= n) {
            return Err(Error::ShapeMismatch("voxel index out of range".into()));
        }
        let c = s[1];
        let xv = self.value(x);
        match pooling {
            Pooling::Max => {
                let mut best: Vec<Option<usize>> = vec![None; n * c];
                for (r, (&vox, &ok)) in voxel_of_row.iter().zip(valid).enumerate() {
                    if !ok {
                        continue;
                    }
                    for ch in 0..c {
                        let slot = &mut best[vox * c + ch];
                        match *slot {
                            Some(b) if xv[b * c + ch] >= xv[r * c + ch] => {}
                            _ => *slot = Some(r),
                        }
                    }
                }
                let out: Vec<f64> = best
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.map_or(0.0, |r| xv[r * c + i % c]))
                    .collect();
                Ok(self.push(vec![n, c], out, &[x], move |g, p| {
                    if let Some(gx) = p[0].as_deref_mut() {
                        for (i, b) in best.iter().enumerate() {
                            if let Some(r) = b {
                                gx[r * c + i % c] += g[i];
                            }
                        }
                    }
                }))
            }
            Pooling::Mean => {
                let mut count = vec![0usize; n];
                for (&vox, &ok) in voxel_of_row.iter().zip(valid) {
                    if ok {
                        count[vox] += 1;
                    }
                }
                let mut out = vec![0.0; n * c];
                for (r, (&vox, &ok)) in voxel_of_row.iter().zip(valid).enumerate() {
                    if ok {
                        for ch in 0..c {
                            out[vox * c + ch] += xv[r * c + ch];
                        }
                    }
                }
                for (vox, &k) in count.iter().enumerate() {
                    if k > 0 {
                        out[vox * c..(vox + 1) * c].iter_mut().for_each(|x| *x /= k as f64);
                    }
                }
                let rows: Rc<[(usize, bool)]> = voxel_of_row.iter().copied().zip(valid.iter().copied()).collect();
                Ok(self.push(vec![n, c], out, &[x], move |g, p| {
                    if let Some(gx) = p[0].as_deref_mut() {
                        for (r, &(vox, ok)) in rows.iter().enumerate() {
                            if ok {
                                let inv = 1.0 / count[vox] as f64;
                                for ch in 0..c {
                                    gx[r * c + ch] += g[vox * c + ch] * inv;
                                }
                            }
                        }
                    }
                }))
            }
        }
    }
}

/// Sinusoidal code of `p` normalized to the grid box: per axis and band `b`,
/// `sin(2^b π x)` and `cos(2^b π x)`.
pub fn sinusoidal_code(grid: &VoxelGrid, p: &Vec3, bands: usize) -> Vec<f64> {
    let b = grid.bounds();
    let ext = b.max - b.min;
    let mut out = Vec::with_capacity(6 * bands);
    for a in 0..3 {
        let x = (p[a] - b.min[a]) / ext[a];
        for k in 0..bands {
            let f = (1u64 << k) as f64 * std::f64::consts::PI * x;
            out.push(f.sin());
            out.push(f.cos());
        }
    }
    out
}

/// Trainable parts of the feature volume.
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    pub config: FeatureConfig,
    pub featurizer: Mlp,
    pub offsets: Option<Mlp>,
    pub encoder: Option<Mlp>,
}

/// Output of [`FeatureVolume::forward`].
pub struct FusedVolume {
    /// `[N, C]`
    pub pooled: Var,
    /// `[N, C]`; equals `pooled` when the positional path is off.
    pub encoded: Var,
    /// Winning back-projected point per voxel (voxel center when unseen).
    pub positions: Vec<Vec3>,
    pub winner: Vec<Option<usize>>,
    /// Pixel offsets per query row, `[Q, 2]` flattened (empty without offsets).
    pub offsets: Vec<f64>,
    /// Rows still in bounds after the offsets.
    pub row_valid: Vec<bool>,
    /// `[Q, C]` features at the adjusted pixels.
    pub rows: Var,
}

impl FeatureVolume {
    /// `peom` adds the offset network and the positional encoder. Both start
    /// at zero output.
    pub fn new(store: &mut ParamStore, config: FeatureConfig, peom: bool, rng: &mut impl Rng) -> Self {
        let c = config.channels;
        let featurizer = Mlp::new(
            store,
            "featurizer",
            &[3, config.featurizer_hidden, c],
            Activation::Relu,
            Activation::Identity,
            Init::Default,
            rng,
        );
        let (offsets, encoder) = if peom {
            let mut widths = vec![c + 3];
            widths.extend(&config.offset_hidden);
            widths.push(2);
            let off = Mlp::new(store, "offset", &widths, Activation::Relu, Activation::Tanh, Init::ZeroLast, rng);
            let enc = Mlp::new(
                store,
                "pos_encoder",
                &[6 * config.encoder_bands, c],
                Activation::Identity,
                Activation::Identity,
                Init::Zero,
                rng,
            );
            (Some(off), Some(enc))
        } else {
            (None, None)
        };
        FeatureVolume {
            config,
            featurizer,
            offsets,
            encoder,
        }
    }

    /// Featurizes all views at once: `images[v]` is `h × w × 3` → `[V·h·w, C]`.
    pub fn featurize(&self, g: &mut Graph, store: &ParamStore, images: &[FeatureMap]) -> Result<Var> {
        let mut data = Vec::with_capacity(images.iter().map(|m| m.data.len()).sum());
        for m in images {
            if m.channels != 3 {
                return Err(Error::ShapeMismatch("images must have 3 channels".into()));
            }
            data.extend_from_slice(&m.data);
        }
        let n = data.len() / 3;
        let x = g.constant(vec![n, 3], data)?;
        self.featurizer.forward(g, store, x)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: Var,
        queries: &VolumeQueries,
        grid: &VoxelGrid,
        cameras: &[Camera],
    ) -> Result<FusedVolume> {
        self.forward_at(g, store, feat, queries, grid, cameras, None)
    }

    /// [`forward`](Self::forward), optionally encoding the given per-voxel
    /// positions instead of the back-projected winners. Used to replay a step
    /// with the argmax selection held fixed.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_at(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feat: Var,
        queries: &VolumeQueries,
        grid: &VoxelGrid,
        cameras: &[Camera],
        fixed_positions: Option<&[Vec3]>,
    ) -> Result<FusedVolume> {
        let c = self.config.channels;
        let n = grid.len();
        let voxel_of_row = queries.voxel_of_row();
        let v0 = g.bilinear_gather(feat, queries.taps().into())?;
        let Some(offset_mlp) = &self.offsets else {
            let valid = vec![true; queries.len()];
            let pooled = g.pool_rows(v0, &voxel_of_row, &valid, n, self.config.pooling)?;
            let winner = winners(g.value(v0), c, queries, &valid);
            let positions = (0..n).map(|j| grid.center_of(j)).collect();
            return Ok(FusedVolume {
                pooled,
                encoded: pooled,
                positions,
                winner,
                offsets: Vec::new(),
                row_valid: valid,
                rows: v0,
            });
        };
        let b = grid.bounds();
        let ext = b.max - b.min;
        let mut coords = Vec::with_capacity(queries.len() * 3);
        for q in &queries.rows {
            let p = grid.center_of(q.voxel);
            for a in 0..3 {
                coords.push((p[a] - b.min[a]) / ext[a]);
            }
        }
        let coords = g.constant(vec![queries.len(), 3], coords)?;
        let input = g.concat(&[v0, coords], 1)?;
        let raw = offset_mlp.forward(g, store, input)?;
        let offsets = g.scale(raw, self.config.delta_max);
        let base: Vec<f64> = queries.rows.iter().flat_map(|q| [q.u, q.v]).collect();
        let uv = g.add_const(offsets, &base)?;
        let views: Vec<usize> = queries.rows.iter().map(|q| q.view).collect();
        let (vnew, valid) = g.bilinear_gather_uv(feat, uv, &views, queries.height, queries.width)?;
        let pooled = g.pool_rows(vnew, &voxel_of_row, &valid, n, self.config.pooling)?;
        let winner = winners(g.value(vnew), c, queries, &valid);
        let uvv = g.value(uv).to_vec();
        let positions: Vec<Vec3> = match fixed_positions {
            Some(p) => {
                check_len(p.len(), n)?;
                p.to_vec()
            }
            None => (0..n)
                .map(|j| match winner[j] {
                    Some(r) => {
                        let q = &queries.rows[r];
                        cameras[q.view]
                            .backproject(uvv[2 * r], uvv[2 * r + 1], q.depth)
                            .unwrap_or_else(|_| grid.center_of(j))
                    }
                    None => grid.center_of(j),
                })
                .collect(),
        };
        let encoder = self.encoder.as_ref().expect("encoder exists with offsets");
        let bands = self.config.encoder_bands;
        let code: Vec<f64> = positions.iter().flat_map(|p| sinusoidal_code(grid, p, bands)).collect();
        let code = g.constant(vec![n, 6 * bands], code)?;
        let enc = encoder.forward(g, store, code)?;
        let seen: Vec<f64> = winner.iter().map(|w| if w.is_some() { 1.0 } else { 0.0 }).collect();
        let seen = g.constant(vec![n], seen)?;
        let enc = g.scale_rows(enc, seen)?;
        let encoded = g.add(pooled, enc)?;
        Ok(FusedVolume {
            pooled,
            encoded,
            positions,
            winner,
            offsets: g.value(offsets).to_vec(),
            row_valid: valid,
            rows: vnew,
        })
    }
}

/// Per voxel, the valid row with the largest feature norm; earliest wins ties.
fn winners(rows: &[f64], c: usize, queries: &VolumeQueries, valid: &[bool]) -> Vec<Option<usize>> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; queries.n_voxels];
    for (r, q) in queries.rows.iter().enumerate() {
        if !valid[r] {
            continue;
        }
        let norm = rows[r * c..(r + 1) * c].iter().map(|x| x * x).sum::<f64>();
        match best[q.voxel] {
            Some((_, b)) if b >= norm => {}
            _ => best[q.voxel] = Some((r, norm)),
        }
    }
    best.into_iter().map(|b| b.map(|(r, _)| r)).collect()
}

pub const VOLUME_FILE_VERSION: u32 = 1;

/// Writes a `[nx, ny, nz, C]` volume: header line
/// `VOXFEATURES <version> nx ny nz C f32`, then little-endian f32 values.
pub fn write_volume(path: &Path, grid: &VoxelGrid, channels: usize, values: &[f64]) -> Result<()> {
    check_len(values.len(), grid.len() * channels)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "VOXFEATURES {VOLUME_FILE_VERSION} {} {} {} {channels} f32",
        grid.dims[0], grid.dims[1], grid.dims[2]
    )?;
    for &v in values {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bilinear_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VoxelGrid, Vec<Camera>) {
        let grid = VoxelGrid::new([4, 4, 2], Vec3::new(-0.5, -0.5, 0.0), 0.25).unwrap();
        let target = Vec3::new(0.0, 0.0, 0.25);
        let cams = (0..3)
            .map(|i| {
                let a = i as f64 * 2.1;
                Camera::look_at(
                    Vec3::new(1.5 * a.cos(), 1.5 * a.sin(), 1.0),
                    target,
                    Vec3::z(),
                    1.0,
                    12,
                    14,
                )
                .unwrap()
            })
            .collect();
        (grid, cams)
    }

    #[test]
    fn volume_matches_per_voxel_loop() {
        let (grid, cams) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 3;
        let maps: Vec<FeatureMap> = (0..3)
            .map(|_| FeatureMap::new(12, 14, c, (0..12 * 14 * c).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let q = VolumeQueries::build(&grid, &cams).unwrap();
        let mut g = Graph::no_grad();
        let stacked: Vec<f64> = maps.iter().flat_map(|m| m.data.clone()).collect();
        let feat = g.constant(vec![3 * 12 * 14, c], stacked).unwrap();
        let v = g.bilinear_gather(feat, q.taps().into()).unwrap();
        let got = g.value(v);
        let mut dense = vec![0.0; 3 * grid.len() * c];
        for (r, row) in q.rows.iter().enumerate() {
            dense[(row.view * grid.len() + row.voxel) * c..][..c].copy_from_slice(&got[r * c..(r + 1) * c]);
        }
        let mut seen = 0;
        for (view, cam) in cams.iter().enumerate() {
            for j in 0..grid.len() {
                let want = match cam.project(&grid.center_of(j)) {
                    Ok(p) => bilinear_sample(&maps[view], p.u, p.v).values,
                    Err(_) => vec![0.0; c],
                };
                if want.iter().any(|&x| x != 0.0) {
                    seen += 1;
                }
                assert_eq!(&dense[(view * grid.len() + j) * c..][..c], &want[..]);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn voxel_behind_every_camera_is_unseen() {
        let grid = VoxelGrid::new([1, 1, 1], Vec3::new(0.0, 0.0, -5.0), 0.1).unwrap();
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0), Vec3::y(), 1.0, 8, 8).unwrap();
        let q = VolumeQueries::build(&grid, &[cam]).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn pooling_against_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, c, n) = (40, 3, 7);
        let x: Vec<f64> = (0..q * c).map(|_| (rng.gen_range(0..5) as f64) * 0.5).collect();
        let vox: Vec<usize> = (0..q).map(|_| rng.gen_range(0..n - 1)).collect();
        let valid: Vec<bool> = (0..q).map(|_| rng.gen_bool(0.8)).collect();
        let mut g = Graph::no_grad();
        let xv = g.constant(vec![q, c], x.clone()).unwrap();
        let mx = g.pool_rows(xv, &vox, &valid, n, Pooling::Max).unwrap();
        let mn = g.pool_rows(xv, &vox, &valid, n, Pooling::Mean).unwrap();
        for j in 0..n {
            let rows: Vec<usize> = (0..q).filter(|&r| vox[r] == j && valid[r]).collect();
            for ch in 0..c {
                let want_max = rows.iter().map(|&r| x[r * c + ch]).fold(f64::NEG_INFINITY, f64::max);
                let want_mean = rows.iter().map(|&r| x[r * c + ch]).sum::<f64>() / rows.len() as f64;
                if rows.is_empty() {
                    assert_eq!(g.value(mx)[j * c + ch], 0.0);
                    assert_eq!(g.value(mn)[j * c + ch], 0.0);
                } else {
                    assert_eq!(g.value(mx)[j * c + ch], want_max);
                    assert!((g.value(mn)[j * c + ch] - want_mean).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_image_and_zero_featurizer_give_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Mlp::new(&mut store, "f", &[3, 8, 5], Activation::Relu, Activation::Identity, Init::Zero, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(vec![6 * 7, 3], vec![0.0; 6 * 7 * 3]).unwrap();
        let y = f.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[42, 5]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }
}
