//! Toy anchor-free detection head over the voxel volume: per-voxel class
//! logits and box regressions, focal and L1 losses, decoding, NMS and AP.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Conv3d, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::{Vec3, VoxelGrid};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["box", "sphere", "cylinder"];
/// Regression channels: center offset (3, in voxels), log size (3), yaw.
pub const REG_CHANNELS: usize = 7;

/// Oriented box. `size` is `(w, h, l)`: `w` along the box's local x axis,
/// `l` along its local y axis, `h` vertical. `yaw` rotates about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: usize) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidSpec(format!("box sizes must be positive, got {size:?}")));
        }
        if class >= NUM_CLASSES {
            return Err(Error::InvalidSpec(format!("class id {class} out of range")));
        }
        Ok(Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
            class,
            score: None,
        })
    }

    pub fn center_vec(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let d = p - self.center_vec();
        let (s, c) = self.yaw.sin_cos();
        let lx = c * d.x + s * d.y;
        let ly = -s * d.x + c * d.y;
        lx.abs() <= self.size[0] / 2.0 && ly.abs() <= self.size[2] / 2.0 && d.z.abs() <= self.size[1] / 2.0
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Axis-aligned box enclosing the rotated footprint: `(min, max)`.
    pub fn enclosing_aabb(&self) -> ([f64; 3], [f64; 3]) {
        let (s, c) = self.yaw.sin_cos();
        let (hw, hl) = (self.size[0] / 2.0, self.size[2] / 2.0);
        let ex = (c * hw).abs() + (s * hl).abs();
        let ey = (s * hw).abs() + (c * hl).abs();
        let ez = self.size[1] / 2.0;
        let [x, y, z] = self.center;
        ([x - ex, y - ey, z - ez], [x + ex, y + ey, z + ez])
    }
}

/// IoU of the enclosing axis-aligned boxes.
pub fn aabb_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (amin, amax) = a.enclosing_aabb();
    let (bmin, bmax) = b.enclosing_aabb();
    let mut inter = 1.0;
    let (mut va, mut vb) = (1.0, 1.0);
    for k in 0..3 {
        inter *= (amax[k].min(bmax[k]) - amin[k].max(bmin[k])).max(0.0);
        va *= amax[k] - amin[k];
        vb *= bmax[k] - bmin[k];
    }
    let union = va + vb - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub width: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Initial foreground probability of the class logits.
    pub prior: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Highest-scoring candidates kept before NMS.
    pub max_candidates: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            width: 32,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            prior: 0.01,
            score_thresh: 0.05,
            nms_iou: 0.25,
            max_candidates: 500,
        }
    }
}

/// Per-voxel outputs, `[N, NUM_CLASSES]` and `[N, REG_CHANNELS]`.
pub struct DetectionOutput {
    pub logits: Var,
    pub regression: Var,
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub config: HeadConfig,
    cls: [Conv3d; 2],
    reg: [Conv3d; 2],
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, channels: usize, config: HeadConfig, rng: &mut impl Rng) -> Self {
        let w = config.width;
        let cls = [
            Conv3d::new(store, "head.cls0", channels, w, false, rng),
            Conv3d::new(store, "head.cls1", w, NUM_CLASSES, false, rng),
        ];
        let reg = [
            Conv3d::new(store, "head.reg0", channels, w, false, rng),
            Conv3d::new(store, "head.reg1", w, REG_CHANNELS, true, rng),
        ];
        let bias = -((1.0 - config.prior) / config.prior).ln();
        store.get_mut(cls[1].bias_id()).values.iter_mut().for_each(|b| *b = bias);
        DetectionHead { config, cls, reg }
    }

    /// `volume: [N, C]` laid out in grid order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, volume: Var, grid: &VoxelGrid) -> Result<DetectionOutput> {
        let s = g.shape(volume).to_vec();
        if s.len() != 2 || s[0] != grid.len() {
            return Err(Error::ShapeMismatch(format!("head input {s:?} for a {:?} grid", grid.dims)));
        }
        let [x, y, z] = grid.dims;
        let v = g.reshape(volume, vec![x, y, z, s[1]])?;
        let branch = |g: &mut Graph, convs: &[Conv3d; 2], out: usize| -> Result<Var> {
            let h = convs[0].forward(g, store, v)?;
            let h = g.relu(h);
            let o = convs[1].forward(g, store, h)?;
            g.reshape(o, vec![x * y * z, out])
        };
        Ok(DetectionOutput {
            logits: branch(g, &self.cls, NUM_CLASSES)?,
            regression: branch(g, &self.reg, REG_CHANNELS)?,
        })
    }
}

/// Positive voxels: centers inside a box. Overlaps go to the smallest box,
/// then the earliest.
pub fn assign(grid: &VoxelGrid, boxes: &[Box3D]) -> Vec<Option<usize>> {
    (0..grid.len())
        .map(|j| {
            let p = grid.center_of(j);
            let mut best: Option<usize> = None;
            for (b, bx) in boxes.iter().enumerate() {
                if bx.contains(&p) && best.is_none_or(|o| bx.volume() < boxes[o].volume()) {
                    best = Some(b);
                }
            }
            best
        })
        .collect()
}

/// Regression target of `b` at voxel center `p`; yaw is kept as an angle.
pub fn encode(b: &Box3D, p: &Vec3, voxel_size: f64) -> [f64; REG_CHANNELS] {
    [
        (b.center[0] - p.x) / voxel_size,
        (b.center[1] - p.y) / voxel_size,
        (b.center[2] - p.z) / voxel_size,
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw,
    ]
}

pub fn decode(r: &[f64], p: &Vec3, voxel_size: f64, class: usize, score: f64) -> Box3D {
    Box3D {
        center: [p.x + r[0] * voxel_size, p.y + r[1] * voxel_size, p.z + r[2] * voxel_size],
        size: [r[3].exp(), r[4].exp(), r[5].exp()],
        yaw: wrap_angle(r[6]),
        class,
        score: Some(score),
    }
}

impl Graph {
    /// Summed sigmoid focal loss of `logits` against 0/1 `targets`.
    pub fn sigmoid_focal_loss(&mut self, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let x = self.value_rc(logits);
        crate::error::check_len(targets.len(), x.len())?;
        let sp = |z: f64| z.max(0.0) + (-z.abs()).exp().ln_1p();
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(x.len());
        for (&xi, &t) in x.iter().zip(targets) {
            let p = 1.0 / (1.0 + (-xi).exp());
            if t > 0.5 {
                let log_p = -sp(-xi);
                let m = (1.0 - p).powf(gamma);
                total += -alpha * m * log_p;
                grad.push(alpha * m * (gamma * p * log_p - (1.0 - p)));
            } else {
                let log_q = -sp(xi);
                let m = p.powf(gamma);
                total += -(1.0 - alpha) * m * log_q;
                grad.push((1.0 - alpha) * m * (p - gamma * (1.0 - p) * log_q));
            }
        }
        Ok(self.push(vec![], vec![total], &[logits], move |g, p| {
            if let Some(gx) = p[0].as_deref_mut() {
                for (d, gi) in gx.iter_mut().zip(&grad) {
                    *d += g[0] * gi;
                }
            }
        }))
    }
}

pub struct DetectionLosses {
    pub cls: Var,
    pub loc: Var,
    pub positives: usize,
}

/// Focal loss over all voxel-class logits divided by `max(1, positives)`,
/// and mean L1 over positives of (center offset, log size, sin yaw, cos yaw).
pub fn detection_loss(
    g: &mut Graph,
    out: &DetectionOutput,
    gt: &[Box3D],
    grid: &VoxelGrid,
    cfg: &HeadConfig,
) -> Result<DetectionLosses> {
    let assignment = assign(grid, gt);
    let n = grid.len();
    let mut targets = vec![0.0; n * NUM_CLASSES];
    let mut pos = Vec::new();
    let mut reg_targets = Vec::new();
    for (j, a) in assignment.iter().enumerate() {
        if let Some(b) = a {
            let bx = &gt[*b];
            targets[j * NUM_CLASSES + bx.class] = 1.0;
            pos.push(j);
            let e = encode(bx, &grid.center_of(j), grid.voxel_size);
            reg_targets.extend_from_slice(&e[..6]);
            reg_targets.push(bx.yaw.sin());
            reg_targets.push(bx.yaw.cos());
        }
    }
    let focal = g.sigmoid_focal_loss(out.logits, &targets, cfg.focal_alpha, cfg.focal_gamma)?;
    let cls = g.scale(focal, 1.0 / pos.len().max(1) as f64);
    let loc = if pos.is_empty() {
        log::warn!("no positive voxels; localisation loss is zero");
        g.scalar(0.0)
    } else {
        let r = g.gather(out.regression, &pos)?;
        let lin = g.narrow(r, 1, 0, 6)?;
        let yaw = g.narrow(r, 1, 6, 1)?;
        let (s, c) = (g.sin(yaw), g.cos(yaw));
        let pred = g.concat(&[lin, s, c], 1)?;
        let neg: Vec<f64> = reg_targets.iter().map(|t| -t).collect();
        let diff = g.add_const(pred, &neg)?;
        let l1 = g.abs(diff);
        let total = g.sum(l1);
        g.scale(total, 1.0 / pos.len() as f64)
    };
    Ok(DetectionLosses {
        cls,
        loc,
        positives: pos.len(),
    })
}

/// Greedy NMS: highest score first (earlier index on ties), dropping any box
/// whose IoU with a kept box of the same class exceeds `iou`.
pub fn nms(boxes: &[Box3D], iou: f64) -> Vec<Box3D> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (boxes[a].score.unwrap_or(0.0), boxes[b].score.unwrap_or(0.0));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    let mut kept: Vec<Box3D> = Vec::new();
    for i in order {
        let b = &boxes[i];
        if kept.iter().all(|k| k.class != b.class || aabb_iou(k, b) <= iou) {
            kept.push(*b);
        }
    }
    kept
}

/// Decodes per-voxel predictions (argmax class, sigmoid score), thresholds,
/// keeps the top candidates and applies NMS.
pub fn decode_and_nms(logits: &[f64], regression: &[f64], grid: &VoxelGrid, cfg: &HeadConfig) -> Vec<Box3D> {
    let mut cands: Vec<Box3D> = (0..grid.len())
        .filter_map(|j| {
            let l = &logits[j * NUM_CLASSES..(j + 1) * NUM_CLASSES];
            let (class, &best) = l
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (c, v)| if *v > *acc.1 { (c, v) } else { acc });
            let score = 1.0 / (1.0 + (-best).exp());
            (score >= cfg.score_thresh).then(|| {
                decode(
                    &regression[j * REG_CHANNELS..(j + 1) * REG_CHANNELS],
                    &grid.center_of(j),
                    grid.voxel_size,
                    class,
                    score,
                )
            })
        })
        .collect();
    cands.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    cands.truncate(cfg.max_candidates);
    nms(&cands, cfg.nms_iou)
}

/// Area under the monotone precision envelope over all recall points.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub iou: f64,
    /// Per class; `None` without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class AP at `iou` over all scenes, with predictions matched greedily
/// by descending score to the best-overlapping unmatched ground truth.
pub fn evaluate_ap(preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], iou: f64) -> Result<ApTable> {
    crate::error::check_len(preds.len(), gts.len())?;
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let n_gt: usize = gts.iter().map(|s| s.iter().filter(|b| b.class == class).count()).sum();
        if n_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut dets: Vec<(f64, usize, usize)> = preds
            .iter()
            .enumerate()
            .flat_map(|(s, ps)| {
                ps.iter()
                    .enumerate()
                    .filter(move |(_, b)| b.class == class)
                    .map(move |(i, b)| (b.score.unwrap_or(0.0), s, i))
            })
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|s| vec![false; s.len()]).collect();
        let tp: Vec<bool> = dets
            .iter()
            .map(|&(_, s, i)| {
                let p = &preds[s][i];
                let mut best: Option<(usize, f64)> = None;
                for (k, gt) in gts[s].iter().enumerate() {
                    if gt.class != class || used[s][k] {
                        continue;
                    }
                    let o = aabb_iou(p, gt);
                    if o >= iou && best.is_none_or(|(_, b)| o > b) {
                        best = Some((k, o));
                    }
                }
                best.map(|(k, _)| used[s][k] = true).is_some()
            })
            .collect();
        per_class.push(Some(average_precision(&tp, n_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(ApTable { iou, per_class, mean })
}
