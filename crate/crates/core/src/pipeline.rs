//! End-to-end model: pixel features fused into a voxel volume, a radiance
//! field rendered along sampled rays, multi-view opacity aggregation, and the
//! detection head, all trained under one tape.

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detection::{decode_and_nms, detection_loss, evaluate_ap, Box3D, DetectionHead, NUM_CLASSES};
use crate::diff::{checkpoint, Graph, Optimizer, ParamStore, Var};
use crate::error::Result;
use crate::exec;
use crate::features::{FeatureVolume, VolumeQueries};
use crate::geometry::{Camera, Ray, Vec3, VoxelGrid};
use crate::nerf::{RadianceField, SceneInputs};
use crate::opacity::{
    adjust_features, consistency_loss_tape, weighted_opacity_tape, ObservationPlan, OpacityGrid,
    OpacityObservationTable, DISTANCE_EPS, UNOBSERVED_OPACITY,
};
use crate::render::{self, composite_tape, depth_loss, photometric_loss, RenderResult};
use crate::sampler::{
    coarse_pass, importance_pass, needs_mlp_density, OccupiedSet, RaySampleSet, SamplerConfig,
};
use crate::scene::SceneSample;

/// Every trainable part plus the parameters they share.
pub struct Model {
    pub store: ParamStore,
    pub volume: FeatureVolume,
    pub field: RadianceField,
    pub head: DetectionHead,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.features.channels;
        let volume = FeatureVolume::new(&mut store, cfg.features.clone(), cfg.ablation.peom, &mut rng);
        let field = RadianceField::new(&mut store, c, cfg.radiance.clone(), &mut rng);
        let head = DetectionHead::new(&mut store, c, cfg.head.clone(), &mut rng);
        Model {
            store,
            volume,
            field,
            head,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Builds the architecture described by `cfg` and loads its weights.
    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut m = Model::new(cfg);
        checkpoint::load_into(&mut m.store, path)?;
        Ok(m)
    }
}

/// A scene with the per-scene constants a training step needs and the
/// running opacity estimate used for unobserved voxels.
pub struct PreparedScene {
    pub sample: SceneSample,
    pub grid: VoxelGrid,
    pub queries: VolumeQueries,
    pub centers: Vec<Vec3>,
    /// All views stacked, `[V·h·w, 3]`.
    pub pixels: Vec<f64>,
    /// `(view, pixel)` pairs whose rays cross the grid.
    pub candidates: Vec<(usize, usize)>,
    pub opacity: Vec<f64>,
}

impl PreparedScene {
    pub fn new(sample: SceneSample) -> Result<Self> {
        let grid = sample.grid();
        let queries = VolumeQueries::build(&grid, &sample.cameras)?;
        let centers = sample.cameras.iter().map(Camera::center).collect();
        let pixels = sample.images.iter().flat_map(|m| m.data.iter().copied()).collect();
        let bounds = grid.bounds();
        let mut candidates = Vec::new();
        for (view, cam) in sample.cameras.iter().enumerate() {
            for p in 0..cam.height() * cam.width() {
                if pixel_ray(cam, p).clipped(&bounds).is_some() {
                    candidates.push((view, p));
                }
            }
        }
        Ok(PreparedScene {
            opacity: vec![UNOBSERVED_OPACITY; grid.len()],
            sample,
            grid,
            queries,
            centers,
            pixels,
            candidates,
        })
    }
}

/// Unbounded ray through pixel `p` (row-major) of `cam`.
pub fn pixel_ray(cam: &Camera, p: usize) -> Ray {
    let w = cam.width();
    Ray {
        origin: cam.center(),
        direction: cam.pixel_direction((p % w) as f64, (p / w) as f64),
        near: 0.0,
        far: f64::INFINITY,
    }
}

fn ray_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Plain values feeding the radiance field outside the training tape.
pub struct FieldInputs<'a> {
    pub features: &'a [f64],
    pub images: &'a [f64],
    pub volume: &'a [f64],
    pub channels: usize,
    pub cameras: &'a [Camera],
    pub grid: &'a VoxelGrid,
}

impl FieldInputs<'_> {
    /// Densities, and colors when `dirs` is given, on a throwaway no-grad tape.
    pub fn query(&self, model: &Model, points: &[Vec3], dirs: Option<&[Vec3]>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut g = Graph::no_grad();
        let c = self.channels;
        let inputs = SceneInputs {
            features: g.constant(vec![self.features.len() / c, c], self.features.to_vec())?,
            images: g.constant(vec![self.images.len() / 3, 3], self.images.to_vec())?,
            volume: g.constant(vec![self.volume.len() / c, c], self.volume.to_vec())?,
            cameras: self.cameras,
            grid: self.grid,
        };
        let out = model.field.forward(&mut g, &model.store, &inputs, points, dirs)?;
        Ok((g.value(out.sigma).to_vec(), out.rgb.map(|v| g.value(v).to_vec())))
    }
}

/// Proximity sampling needs at least one occupied voxel; without one the
/// proximity term is dropped.
fn sampler_for(cfg: &SamplerConfig, occupied: &OccupiedSet) -> SamplerConfig {
    let mut s = cfg.clone();
    if occupied.is_empty() && s.beta > 0.0 {
        s.beta = 0.0;
        if s.alpha == 0.0 {
            s.alpha = 1.0;
        }
    }
    s
}

/// Coarse pass on every ray, one batched network-density query, then the
/// importance pass. Ray `i` draws from stream `first + i` of `seed`.
pub fn sample_rays(
    model: &Model,
    inputs: &FieldInputs,
    rays: &[Ray],
    cfg: &SamplerConfig,
    occupied: &OccupiedSet,
    seed: u64,
    first: usize,
) -> Result<Vec<RaySampleSet>> {
    let cfg = sampler_for(cfg, occupied);
    let coarse: Vec<(RaySampleSet, ChaCha8Rng)> = exec::map_range(rays.len(), |i| {
        let mut rng = ray_rng(seed, first + i);
        coarse_pass(&rays[i], &cfg, &mut rng).map(|s| (s, rng))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let density: Vec<Vec<f64>> = if needs_mlp_density(&cfg) {
        let points: Vec<Vec3> = coarse.iter().flat_map(|(s, _)| s.points.iter().copied()).collect();
        let (sigma, _) = inputs.query(model, &points, None)?;
        sigma.chunks(cfg.n_coarse).map(<[f64]>::to_vec).collect()
    } else {
        vec![Vec::new(); rays.len()]
    };
    exec::map_range(rays.len(), |i| {
        let (mut set, mut rng) = coarse[i].clone();
        importance_pass(&mut set, &rays[i], occupied, density[i].clone(), &cfg, &mut rng)?;
        Ok(set)
    })
    .into_iter()
    .collect()
}

/// Rays and depths of one step, drawn once so the loss can be rebuilt with
/// identical samples.
#[derive(Clone, Debug)]
pub struct StepSamples {
    pub views: Vec<usize>,
    pub rays: Vec<Ray>,
    /// `R·S` render depths, row-major.
    pub depths: Vec<f64>,
    pub per_ray: usize,
    pub target_rgb: Vec<f64>,
    pub target_depth: Vec<f64>,
    pub depth_mask: Vec<bool>,
    pub degenerate: usize,
    /// Per-voxel positions the encoder saw. Empty until the step is built.
    pub encoded_positions: Vec<Vec3>,
}

/// Taped loss terms of one step.
pub struct StepLosses {
    pub cls: Var,
    pub loc: Var,
    pub photometric: Var,
    pub depth: Var,
    pub opacity: Var,
    pub total: Var,
    /// `[N]` opacity used for the head and the fallback cache.
    pub voxel_opacity: Var,
    pub observed_voxels: Vec<usize>,
    pub positives: usize,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub loc: f64,
    pub photometric: f64,
    pub depth: f64,
    pub opacity: f64,
    pub total: f64,
}

impl LossTerms {
    fn read(g: &Graph, l: &StepLosses) -> Self {
        LossTerms {
            cls: g.item(l.cls),
            loc: g.item(l.loc),
            photometric: g.item(l.photometric),
            depth: g.item(l.depth),
            opacity: g.item(l.opacity),
            total: g.item(l.total),
        }
    }

    fn add(&mut self, o: &LossTerms, w: f64) {
        self.cls += w * o.cls;
        self.loc += w * o.loc;
        self.photometric += w * o.photometric;
        self.depth += w * o.depth;
        self.opacity += w * o.opacity;
        self.total += w * o.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.loc, self.photometric, self.depth, self.opacity, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

fn draw_samples(
    model: &Model,
    scene: &PreparedScene,
    cfg: &RunConfig,
    inputs: &FieldInputs,
    seed: u64,
) -> Result<StepSamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.train.rays_per_step.min(scene.candidates.len());
    let mut picks: Vec<(usize, usize)> = sample_indices(&mut rng, scene.candidates.len(), n)
        .into_iter()
        .map(|i| scene.candidates[i])
        .collect();
    picks.sort_unstable();
    let bounds = scene.grid.bounds();
    let rays: Vec<Ray> = picks
        .iter()
        .map(|&(v, p)| pixel_ray(&scene.sample.cameras[v], p).clipped(&bounds).expect("candidate crosses grid"))
        .collect();
    let sampler = cfg.effective_sampler();
    let occupied = OccupiedSet::from_opacity(&scene.grid, &scene.opacity, sampler.tau_occ)?;
    let sets = sample_rays(model, inputs, &rays, &sampler, &occupied, rng.gen(), 0)?;
    let per_ray = sampler.rendered_per_ray();
    let mut depths = Vec::with_capacity(rays.len() * per_ray);
    for s in &sets {
        depths.extend(s.render_depths(sampler.mode));
    }
    let mut target_rgb = Vec::with_capacity(3 * n);
    let mut target_depth = Vec::with_capacity(n);
    let mut depth_mask = Vec::with_capacity(n);
    let hw = scene.sample.images[0].height * scene.sample.images[0].width;
    for &(v, p) in &picks {
        target_rgb.extend_from_slice(&scene.pixels[(v * hw + p) * 3..(v * hw + p) * 3 + 3]);
        let d = scene.sample.depths[v][p];
        depth_mask.push(d.is_finite());
        target_depth.push(if d.is_finite() { d } else { 0.0 });
    }
    Ok(StepSamples {
        views: picks.iter().map(|p| p.0).collect(),
        rays,
        depths,
        per_ray,
        target_rgb,
        target_depth,
        depth_mask,
        degenerate: sets.iter().filter(|s| s.degenerate).count(),
        encoded_positions: Vec::new(),
    })
}

/// Builds the full training objective for one step on `g`. Samples are drawn
/// from the current weights unless `fixed` supplies them.
pub fn build_step(
    g: &mut Graph,
    model: &Model,
    scene: &PreparedScene,
    cfg: &RunConfig,
    seed: u64,
    fixed: Option<&StepSamples>,
) -> Result<(StepLosses, StepSamples)> {
    let store = &model.store;
    let grid = &scene.grid;
    let cams = &scene.sample.cameras;
    let c = cfg.features.channels;
    let feat = model.volume.featurize(g, store, &scene.sample.images)?;
    let replay = fixed.map(|s| s.encoded_positions.as_slice()).filter(|p| !p.is_empty());
    let fused = model.volume.forward_at(g, store, feat, &scene.queries, grid, cams, replay)?;
    let images = g.constant(vec![scene.pixels.len() / 3, 3], scene.pixels.clone())?;
    let mut samples = match fixed {
        Some(s) => s.clone(),
        None => {
            let inputs = FieldInputs {
                features: g.value(feat),
                images: &scene.pixels,
                volume: g.value(fused.encoded),
                channels: c,
                cameras: cams,
                grid,
            };
            draw_samples(model, scene, cfg, &inputs, seed)?
        }
    };
    samples.encoded_positions = fused.positions.clone();
    let (r, s) = (samples.rays.len(), samples.per_ray);
    let mut points = Vec::with_capacity(r * s);
    let mut dirs = Vec::with_capacity(r * s);
    let mut deltas = Vec::with_capacity(r * s);
    let mut views = Vec::with_capacity(r * s);
    for (i, ray) in samples.rays.iter().enumerate() {
        let z = &samples.depths[i * s..(i + 1) * s];
        points.extend(z.iter().map(|&t| ray.at(t)));
        dirs.extend(std::iter::repeat_n(ray.direction, s));
        deltas.extend(render::deltas(z, ray.far)?);
        views.extend(std::iter::repeat_n(samples.views[i], s));
    }
    let inputs = SceneInputs {
        features: feat,
        images,
        volume: fused.encoded,
        cameras: cams,
        grid,
    };
    let out = model.field.forward(g, store, &inputs, &points, Some(&dirs))?;
    let sigma = g.reshape(out.sigma, vec![r, s])?;
    let rgb = g.reshape(out.rgb.expect("colors requested"), vec![r, s, 3])?;
    let rv = composite_tape(g, sigma, rgb, &deltas, &samples.depths)?;
    let photometric = photometric_loss(g, rv.color, &samples.target_rgb)?;
    let depth = if cfg.ablation.depth_supervision {
        depth_loss(g, rv.depth, &samples.target_depth, &samples.depth_mask)?.0
    } else {
        g.scalar(0.0)
    };

    let plan = ObservationPlan::build(&points, &views, &scene.centers, grid)?;
    let (obs_alpha, obs_density) = plan.aggregate_tape(g, rv.alpha, sigma, rv.transmittance)?;
    let opacity = if cfg.ablation.oom {
        let (l, empty) = consistency_loss_tape(g, &plan, obs_alpha)?;
        if empty {
            log::warn!("no ray sample landed in the grid");
        }
        l
    } else {
        g.scalar(0.0)
    };
    let voxel_opacity = weighted_opacity_tape(g, &plan, obs_density, grid, cfg.ablation.oom, &scene.opacity)?;
    let head_in = if cfg.ablation.adjust {
        adjust_features(g, fused.encoded, voxel_opacity)?
    } else {
        fused.encoded
    };
    let det = model.head.forward(g, store, head_in, grid)?;
    let dl = detection_loss(g, &det, &scene.sample.boxes, grid, &cfg.head)?;

    let w = &cfg.loss;
    let terms = [
        (dl.cls, w.cls),
        (dl.loc, w.loc),
        (photometric, w.photometric),
        (depth, w.depth),
        (opacity, w.opacity),
    ];
    let mut total = g.scalar(0.0);
    for (t, wt) in terms {
        let scaled = g.scale(t, wt);
        total = g.add(total, scaled)?;
    }
    Ok((
        StepLosses {
            cls: dl.cls,
            loc: dl.loc,
            photometric,
            depth,
            opacity,
            total,
            voxel_opacity,
            observed_voxels: plan.slot_voxel.clone(),
            positives: dl.positives,
        },
        samples,
    ))
}

/// One optimizer step on `scene`; refreshes its opacity cache at the voxels
/// this step observed.
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizer,
    scene: &mut PreparedScene,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(LossTerms, usize)> {
    let mut g = Graph::new();
    let (losses, samples) = build_step(&mut g, model, scene, cfg, seed, None)?;
    let terms = LossTerms::read(&g, &losses);
    let grads = g.backward(losses.total)?;
    model.store.accumulate(&grads);
    opt.step(&mut model.store);
    let rho = g.value(losses.voxel_opacity);
    for &v in &losses.observed_voxels {
        scene.opacity[v] = rho[v];
    }
    Ok((terms, samples.degenerate))
}

/// Per-ray result of marching through the field without a tape.
#[derive(Clone, Debug)]
pub struct Marched {
    pub depths: Vec<f64>,
    pub sigma: Vec<f64>,
    pub render: RenderResult,
    pub degenerate: bool,
}

/// Samples and composites `rays` in batches of `batch`.
#[allow(clippy::too_many_arguments)]
pub fn march(
    model: &Model,
    inputs: &FieldInputs,
    rays: &[Ray],
    sampler: &SamplerConfig,
    occupied: &OccupiedSet,
    seed: u64,
    batch: usize,
    with_color: bool,
) -> Result<Vec<Marched>> {
    let mut out = Vec::with_capacity(rays.len());
    for (b, chunk) in rays.chunks(batch.max(1)).enumerate() {
        let sets = sample_rays(model, inputs, chunk, sampler, occupied, seed, b * batch)?;
        let s = sampler.rendered_per_ray();
        let mut points = Vec::with_capacity(chunk.len() * s);
        let mut dirs = Vec::with_capacity(chunk.len() * s);
        let depths: Vec<Vec<f64>> = sets.iter().map(|x| x.render_depths(sampler.mode)).collect();
        for (ray, z) in chunk.iter().zip(&depths) {
            points.extend(z.iter().map(|&t| ray.at(t)));
            dirs.extend(std::iter::repeat_n(ray.direction, z.len()));
        }
        let (sigma, rgb) = inputs.query(model, &points, with_color.then_some(&dirs[..]))?;
        let marched: Vec<Result<Marched>> = exec::map_range(chunk.len(), |i| {
            let sig = sigma[i * s..(i + 1) * s].to_vec();
            let colors: Vec<[f64; 3]> = match &rgb {
                Some(c) => (i * s..(i + 1) * s).map(|k| [c[3 * k], c[3 * k + 1], c[3 * k + 2]]).collect(),
                None => vec![[0.0; 3]; s],
            };
            let render = render::composite(&sig, &colors, &depths[i], chunk[i].far)?;
            Ok(Marched {
                depths: depths[i].clone(),
                sigma: sig,
                render,
                degenerate: sets[i].degenerate,
            })
        });
        for m in marched {
            out.push(m?);
        }
    }
    Ok(out)
}

/// Opacity grid from every `stride`-th pixel of every view. Occupancy for
/// proximity sampling comes from `prior`.
pub fn estimate_opacity(
    model: &Model,
    inputs: &FieldInputs,
    sample: &SceneSample,
    cfg: &RunConfig,
    prior: &[f64],
) -> Result<(OpacityGrid, usize)> {
    let grid = inputs.grid;
    let bounds = grid.bounds();
    let stride = cfg.train.eval_pixel_stride;
    let mut rays = Vec::new();
    let mut views = Vec::new();
    for (v, cam) in sample.cameras.iter().enumerate() {
        for row in (0..cam.height()).step_by(stride) {
            for col in (0..cam.width()).step_by(stride) {
                if let Some(r) = pixel_ray(cam, row * cam.width() + col).clipped(&bounds) {
                    rays.push(r);
                    views.push(v);
                }
            }
        }
    }
    let sampler = cfg.effective_sampler();
    let occupied = OccupiedSet::from_opacity(grid, prior, sampler.tau_occ)?;
    let marched = march(model, inputs, &rays, &sampler, &occupied, sample.spec.seed, cfg.train.eval_batch, false)?;
    let mut points = Vec::new();
    let mut sample_views = Vec::new();
    let (mut alpha, mut density, mut trans) = (Vec::new(), Vec::new(), Vec::new());
    for ((m, ray), &v) in marched.iter().zip(&rays).zip(&views) {
        points.extend(m.depths.iter().map(|&t| ray.at(t)));
        sample_views.extend(std::iter::repeat_n(v, m.depths.len()));
        alpha.extend_from_slice(&m.render.alphas);
        density.extend_from_slice(&m.sigma);
        trans.extend_from_slice(&m.render.transmittance);
    }
    let centers: Vec<Vec3> = sample.cameras.iter().map(Camera::center).collect();
    let plan = ObservationPlan::build(&points, &sample_views, &centers, grid)?;
    let table = OpacityObservationTable::from_plan(&plan, &alpha, &density, &trans)?;
    let degenerate = marched.iter().filter(|m| m.degenerate).count();
    Ok((table.weighted_opacity(grid, DISTANCE_EPS, cfg.ablation.oom), degenerate))
}

/// Detections and opacity grid of one scene.
#[derive(Clone, Debug)]
pub struct SceneEval {
    pub detections: Vec<Box3D>,
    pub opacity: OpacityGrid,
    pub degenerate: usize,
    /// Requested views as `(view, rgb h·w·3, depth h·w)`.
    pub renders: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Runs the model on a scene and renders `views`. The opacity grid is
/// estimated twice: first with every voxel treated as occupied, then with the
/// first estimate as the occupancy prior.
pub fn evaluate_scene(model: &Model, sample: &SceneSample, cfg: &RunConfig, views: &[usize]) -> Result<SceneEval> {
    let grid = sample.grid();
    if let Some(&v) = views.iter().find(|&&v| v >= sample.cameras.len()) {
        return Err(crate::Error::InvalidCamera(format!("view {v} of {}", sample.cameras.len())));
    }
    let queries = VolumeQueries::build(&grid, &sample.cameras)?;
    let pixels: Vec<f64> = sample.images.iter().flat_map(|m| m.data.iter().copied()).collect();
    let mut g = Graph::no_grad();
    let feat = model.volume.featurize(&mut g, &model.store, &sample.images)?;
    let fused = model.volume.forward(&mut g, &model.store, feat, &queries, &grid, &sample.cameras)?;
    let (opacity, degenerate, renders) = {
        let inputs = FieldInputs {
            features: g.value(feat),
            images: &pixels,
            volume: g.value(fused.encoded),
            channels: cfg.features.channels,
            cameras: &sample.cameras,
            grid: &grid,
        };
        let first = vec![UNOBSERVED_OPACITY; grid.len()];
        let (rough, _) = estimate_opacity(model, &inputs, sample, cfg, &first)?;
        let (opacity, degenerate) = estimate_opacity(model, &inputs, sample, cfg, &rough.values)?;
        let renders = views
            .iter()
            .map(|&v| render_view(model, &inputs, sample, cfg, v, &opacity.values).map(|(c, d)| (v, c, d)))
            .collect::<Result<Vec<_>>>()?;
        (opacity, degenerate, renders)
    };
    let head_in = if cfg.ablation.adjust {
        let o = g.constant(vec![grid.len()], opacity.values.clone())?;
        adjust_features(&mut g, fused.encoded, o)?
    } else {
        fused.encoded
    };
    let det = model.head.forward(&mut g, &model.store, head_in, &grid)?;
    let detections = decode_and_nms(g.value(det.logits), g.value(det.regression), &grid, &cfg.head);
    Ok(SceneEval {
        detections,
        opacity,
        degenerate,
        renders,
    })
}

/// Renders every pixel of `view`: colors `h·w·3` and depths `h·w` (NaN for
/// rays that miss the grid, which stay black).
pub fn render_view(
    model: &Model,
    inputs: &FieldInputs,
    sample: &SceneSample,
    cfg: &RunConfig,
    view: usize,
    opacity: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cam = &sample.cameras[view];
    let n = cam.height() * cam.width();
    let bounds = inputs.grid.bounds();
    let clipped: Vec<Option<Ray>> = (0..n).map(|p| pixel_ray(cam, p).clipped(&bounds)).collect();
    let rays: Vec<Ray> = clipped.iter().flatten().copied().collect();
    let sampler = cfg.effective_sampler();
    let occupied = OccupiedSet::from_opacity(inputs.grid, opacity, sampler.tau_occ)?;
    let seed = sample.spec.seed ^ (view as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let marched = march(model, inputs, &rays, &sampler, &occupied, seed, cfg.train.eval_batch, true)?;
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![f64::NAN; n];
    let mut it = marched.iter();
    for (p, r) in clipped.iter().enumerate() {
        if r.is_some() {
            let m = it.next().expect("one result per ray");
            rgb[3 * p..3 * p + 3].copy_from_slice(&m.render.color);
            depth[p] = m.render.depth;
        }
    }
    Ok((rgb, depth))
}

/// Balanced accuracy of `opacity ≥ tau` against voxel centers with nonzero
/// analytic density.
pub fn opacity_balanced_accuracy(opacity: &[f64], sample: &SceneSample, tau: f64) -> f64 {
    let grid = sample.grid();
    let (mut tp, mut fnn, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (j, &o) in opacity.iter().enumerate() {
        let truth = sample.density(&grid.center_of(j)) > 0.0;
        match (truth, o >= tau) {
            (true, true) => tp += 1,
            (true, false) => fnn += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let rates: Vec<f64> = [(tp, tp + fnn), (tn, tn + fp)]
        .iter()
        .filter(|(_, d)| *d > 0)
        .map(|&(n, d)| n as f64 / d as f64)
        .collect();
    rates.iter().sum::<f64>() / rates.len().max(1) as f64
}

pub const OPACITY_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: usize,
    pub map_25: f64,
    pub map_50: f64,
    pub ap_25: Vec<Option<f64>>,
    pub ap_50: Vec<Option<f64>>,
    /// Mean over scenes, at [`OPACITY_TAU`].
    pub opacity_balanced_accuracy: f64,
    /// Mean PSNR of each scene's first view, when rendered.
    pub psnr: Option<f64>,
    pub degenerate_rays: usize,
}

/// Scores the model on `scenes`. Also returns each scene's detections.
pub fn evaluate(model: &Model, scenes: &[SceneSample], cfg: &RunConfig, with_render: bool) -> Result<(EvalSummary, Vec<SceneEval>)> {
    let evals: Vec<SceneEval> = scenes
        .iter()
        .map(|s| evaluate_scene(model, s, cfg, if with_render { &[0] } else { &[] }))
        .collect::<Result<_>>()?;
    let preds: Vec<Vec<Box3D>> = evals.iter().map(|e| e.detections.clone()).collect();
    let gts: Vec<Vec<Box3D>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let t25 = evaluate_ap(&preds, &gts, 0.25)?;
    let t50 = evaluate_ap(&preds, &gts, 0.5)?;
    let n = scenes.len().max(1) as f64;
    let ba = scenes
        .iter()
        .zip(&evals)
        .map(|(s, e)| opacity_balanced_accuracy(&e.opacity.values, s, OPACITY_TAU))
        .sum::<f64>()
        / n;
    let psnr = with_render.then(|| {
        scenes
            .iter()
            .zip(&evals)
            .map(|(s, e)| {
                let img = &e.renders[0].1;
                render::psnr(render::photometric_loss_value(img, &s.images[0].data).unwrap_or(f64::INFINITY))
            })
            .sum::<f64>()
            / n
    });
    debug_assert_eq!(t25.per_class.len(), NUM_CLASSES);
    Ok((
        EvalSummary {
            scenes: scenes.len(),
            map_25: t25.mean,
            map_50: t50.mean,
            ap_25: t25.per_class,
            ap_50: t50.per_class,
            opacity_balanced_accuracy: ba,
            psnr,
            degenerate_rays: evals.iter().map(|e| e.degenerate).sum(),
        },
        evals,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's steps.
    pub losses: LossTerms,
    /// Training-split mAP, on evaluated epochs.
    pub map_25: Option<f64>,
    pub map_50: Option<f64>,
    /// Rays whose importance weights collapsed and fell back to uniform.
    pub degenerate_rays: usize,
    pub steps: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub version: String,
    /// Training split before the first step.
    pub initial: EvalSummary,
    pub epochs: Vec<EpochRecord>,
    pub final_train: EvalSummary,
    pub final_val: Option<EvalSummary>,
    pub wall_seconds: f64,
}

impl RunReport {
    /// Equality of everything except wall-clock times.
    pub fn metrics_eq(&self, other: &RunReport) -> bool {
        self.untimed() == other.untimed()
    }

    fn untimed(&self) -> RunReport {
        let mut r = self.clone();
        r.wall_seconds = 0.0;
        for e in &mut r.epochs {
            e.wall_seconds = 0.0;
        }
        r
    }
}

/// Trains a fresh model on `train` and scores it on `train` and `val`.
pub fn run_training(cfg: &RunConfig, train: &[SceneSample], val: &[SceneSample]) -> Result<(Model, RunReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = Model::new(cfg);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut scenes: Vec<PreparedScene> = train.iter().cloned().map(PreparedScene::new).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let (initial, _) = evaluate(&model, train, cfg, false)?;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut sum = LossTerms::default();
        let mut degenerate = 0;
        let mut steps = 0;
        for &s in &order {
            for _ in 0..cfg.train.steps_per_scene {
                let (terms, d) = train_step(&mut model, &mut opt, &mut scenes[s], cfg, rng.gen())?;
                sum.add(&terms, 1.0);
                degenerate += d;
                steps += 1;
            }
        }
        let mut losses = LossTerms::default();
        losses.add(&sum, 1.0 / steps.max(1) as f64);
        let evaluated = cfg.train.eval_every > 0 && (epoch % cfg.train.eval_every == 0);
        let (map_25, map_50) = if evaluated {
            let (e, _) = evaluate(&model, train, cfg, false)?;
            (Some(e.map_25), Some(e.map_50))
        } else {
            (None, None)
        };
        log::info!(
            "epoch {epoch}: total {:.4} cls {:.4} loc {:.4} rgb {:.5} depth {:.4} opacity {:.5} mAP@0.25 {:?} ({:.1}s)",
            losses.total,
            losses.cls,
            losses.loc,
            losses.photometric,
            losses.depth,
            losses.opacity,
            map_25,
            t0.elapsed().as_secs_f64()
        );
        epochs.push(EpochRecord {
            epoch,
            losses,
            map_25,
            map_50,
            degenerate_rays: degenerate,
            steps,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let (final_train, _) = evaluate(&model, train, cfg, true)?;
    let final_val = if val.is_empty() {
        None
    } else {
        Some(evaluate(&model, val, cfg, true)?.0)
    };
    let report = RunReport {
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        initial,
        epochs,
        final_train,
        final_val,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
