//! Property and oracle checks shared by the per-module tests and the
//! acceptance report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdet::diff::{DiffTensor, Graph, Optimizer, OptimizerConfig, ParamStore};
use voxdet::opacity::{self, Observation, ObservationPlan, OpacityObservationTable};
use voxdet::detection::{self, aabb_iou, Box3D, NUM_CLASSES};
use voxdet::features::{FeatureConfig, FeatureVolume, VolumeQueries};
use voxdet::geometry::{Camera, FeatureMap, Ray, Vec3, VoxelGrid};
use voxdet::render;
use voxdet::scene::{self, generate_scene, DatasetInfo, Primitive, Profile, SceneObject, SceneSpec};
use voxdet::sampler::{self, OccupiedSet, SamplerConfig, SamplingMode};

use super::Check;

/// Sup-norm distance between the empirical CDF of `xs` and `cdf`.
pub fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Exhaustive scan: ascending distances to every occupied center, first `k`.
pub fn brute_knn(grid: &VoxelGrid, occupied: &[bool], p: &Vec3, k: usize) -> Vec<f64> {
    let mut d: Vec<f64> = (0..grid.len())
        .filter(|&i| occupied[i])
        .map(|i| (grid.center_of(i) - p).norm())
        .collect();
    d.sort_by(f64::total_cmp);
    d.truncate(k);
    d
}

fn brute_density(grid: &VoxelGrid, occupied: &[bool], p: &Vec3, k: usize, eps_d: f64) -> f64 {
    let d = brute_knn(grid, occupied, p, k);
    1.0 / (d.iter().sum::<f64>() / d.len() as f64).max(eps_d)
}

const DRAWS: usize = 100_000;

fn draw(weights: &[f64], near: f64, far: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sampler::inverse_cdf_sample(weights, near, far, DRAWS, 1e-8, &mut rng)
        .unwrap()
        .depths
}

pub fn ks_uniform() -> Check {
    let mut xs = draw(&[1.0; 64], 0.0, 1.0, 11);
    let ks = ks_statistic(&mut xs, |x| x.clamp(0.0, 1.0));
    Check::new(ks < 0.02, format!("uniform KS {ks:.4}"))
}

pub fn ks_single_bin() -> Check {
    let mut w = vec![0.0; 32];
    w[13] = 0.7;
    let (near, far) = (1.0, 5.0);
    let width = (far - near) / 32.0;
    let (lo, hi) = (near + 13.0 * width, near + 14.0 * width);
    let mut xs = draw(&w, near, far, 12);
    let inside = xs.iter().all(|&x| x >= lo && x <= hi);
    let ks = ks_statistic(&mut xs, |x| ((x - lo) / width).clamp(0.0, 1.0));
    Check::new(inside && ks < 0.02, format!("single-bin all inside {inside}, KS {ks:.4}"))
}

/// Density `2z` on `[0, 1]`, with bin weights equal to the bin masses.
pub fn ks_triangular() -> Check {
    let n = 64;
    let w: Vec<f64> = (0..n)
        .map(|i| (((i + 1) * (i + 1) - i * i) as f64) / (n * n) as f64)
        .collect();
    let mut xs = draw(&w, 0.0, 1.0, 13);
    let ks = ks_statistic(&mut xs, |x| x.clamp(0.0, 1.0).powi(2));
    // the point-sampled variant w_i ∝ z_i also has to land close
    let z = sampler::uniform_depths::<ChaCha8Rng>(0.0, 1.0, n, None).unwrap();
    let mut ys = draw(&z, 0.0, 1.0, 14);
    let ks2 = ks_statistic(&mut ys, |x| x.clamp(0.0, 1.0).powi(2));
    Check::new(
        ks < 0.02 && ks2 < 0.02,
        format!("triangular KS {ks:.4} (bin masses), {ks2:.4} (point weights)"),
    )
}

/// Random weight vectors against the piecewise-linear CDF they define.
pub fn ks_random_weights() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for trial in 0..5 {
        let n = rng.gen_range(4..80);
        let w: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let total: f64 = w.iter().sum();
        let c = sampler::cdf(&w);
        let (near, far) = (0.5, 2.5);
        let width = (far - near) / n as f64;
        let mut xs = draw(&w, near, far, 100 + trial);
        let ks = ks_statistic(&mut xs, |x| {
            let t = ((x - near) / width).clamp(0.0, n as f64);
            let b = (t.floor() as usize).min(n - 1);
            let below = if b == 0 { 0.0 } else { c[b - 1] };
            (below + w[b] * (t - b as f64)) / total
        });
        worst = worst.max(ks);
    }
    Check::new(worst < 0.02, format!("random-weight KS max {worst:.4}"))
}

pub fn knn_matches_brute_force() -> Check {
    let grid = VoxelGrid::new([6, 6, 4], Vec3::new(-0.3, 0.2, 0.0), 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut mismatches = 0;
    let mut queries = 0;
    for fill in [1.0, 0.3, 0.05] {
        let mut occ: Vec<bool> = (0..grid.len()).map(|_| rng.gen_bool(fill)).collect();
        occ[rng.gen_range(0..grid.len())] = true;
        let set = OccupiedSet::from_mask(&grid, occ.clone()).unwrap();
        let b = grid.bounds();
        for _ in 0..200 {
            // include points outside the grid
            let p = Vec3::new(
                rng.gen_range(b.min.x - 1.0..b.max.x + 1.0),
                rng.gen_range(b.min.y - 1.0..b.max.y + 1.0),
                rng.gen_range(b.min.z - 1.0..b.max.z + 1.0),
            );
            for k in [1, 3, 5] {
                queries += 1;
                let got = set.proximity_density(&p, k, 1e-3).unwrap();
                let want = brute_density(&grid, &occ, &p, k, 1e-3);
                if got != want {
                    mismatches += 1;
                }
            }
        }
    }
    Check::new(
        mismatches == 0,
        format!("k-NN density vs exhaustive scan: {mismatches}/{queries} mismatches"),
    )
}

/// Geometry of the mid-ray cluster check: a 20×5×5 grid of 0.25 voxels, a
/// ray along the long axis, and an occupied 8×3×3 block in the middle.
pub struct ClusterScene {
    pub grid: VoxelGrid,
    pub occupied: Vec<bool>,
    pub ray: Ray,
    pub interval: (f64, f64),
}

pub fn cluster_scene() -> ClusterScene {
    let grid = VoxelGrid::new([20, 5, 5], Vec3::new(0.0, -0.625, -0.625), 0.25).unwrap();
    let occupied: Vec<bool> = (0..grid.len())
        .map(|idx| {
            let [i, j, k] = grid.unflatten(idx);
            (6..14).contains(&i) && (1..4).contains(&j) && (1..4).contains(&k)
        })
        .collect();
    let ray = Ray {
        origin: Vec3::new(-1.0, 0.0, 0.0),
        direction: Vec3::new(1.0, 0.0, 0.0),
        near: 0.0,
        far: f64::INFINITY,
    }
    .clipped(&grid.bounds())
    .unwrap();
    // cluster spans x ∈ [1.5, 3.5], i.e. depth [2.5, 4.5]
    ClusterScene {
        grid,
        occupied,
        ray,
        interval: (2.5, 4.5),
    }
}

/// Fraction of importance samples inside the cluster (α=0, β=1, 128 fine
/// samples per ray), and the same mass under the continuous proximity
/// density integrated with the exhaustive oracle.
pub fn dis_cluster_fraction() -> (f64, f64) {
    let sc = cluster_scene();
    let set = OccupiedSet::from_mask(&sc.grid, sc.occupied.clone()).unwrap();
    let cfg = SamplerConfig {
        mode: SamplingMode::Dis,
        n_coarse: 64,
        n_fine: 128,
        alpha: 0.0,
        beta: 1.0,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut inside, mut total) = (0usize, 0usize);
    for _ in 0..800 {
        let s = sampler::dis_sample(&sc.ray, &set, |p| Ok(vec![0.0; p.len()]), &cfg, &mut rng).unwrap();
        total += s.fine_depths.len();
        inside += s
            .fine_depths
            .iter()
            .filter(|&&z| z >= sc.interval.0 && z <= sc.interval.1)
            .count();
    }
    let steps = 20_000;
    let h = (sc.ray.far - sc.ray.near) / steps as f64;
    let (mut m_in, mut m_all) = (0.0, 0.0);
    for i in 0..steps {
        let z = sc.ray.near + (i as f64 + 0.5) * h;
        let rho = brute_density(&sc.grid, &sc.occupied, &sc.ray.at(z), cfg.k, cfg.eps_d);
        m_all += rho;
        if z >= sc.interval.0 && z <= sc.interval.1 {
            m_in += rho;
        }
    }
    (inside as f64 / total as f64, m_in / m_all)
}

pub fn dis_cluster() -> Check {
    let (frac, analytic) = dis_cluster_fraction();
    let sc = cluster_scene();
    let share = (sc.interval.1 - sc.interval.0) / (sc.ray.far - sc.ray.near);
    Check::new(
        frac >= 0.70 && (frac - analytic).abs() < 0.03,
        format!(
            "DIS cluster mass {:.1}% (continuous density {:.1}%, interval is {:.0}% of the ray)",
            frac * 100.0,
            analytic * 100.0,
            share * 100.0
        ),
    )
}

pub fn sampler_statistics() -> Check {
    Check::all(vec![
        ks_uniform(),
        ks_single_bin(),
        ks_triangular(),
        ks_random_weights(),
        dis_cluster(),
    ])
}

pub fn beer_lambert() -> Check {
    let mut worst: f64 = 0.0;
    for &(sigma, near, far) in &[(0.5, 0.0, 2.0), (3.0, 1.0, 2.5), (0.05, 0.2, 6.0), (10.0, 0.0, 0.3)] {
        let z = sampler::uniform_depths::<ChaCha8Rng>(near, far, 256, None).unwrap();
        let r = render::composite(&vec![sigma; 256], &vec![[1.0; 3]; 256], &z, far).unwrap();
        let want: f64 = 1.0 - (-sigma * (far - near)).exp();
        worst = worst.max((r.accumulated - want).abs() / want);
    }
    Check::new(worst <= 0.01, format!("Beer-Lambert rel. err {worst:.2e}"))
}

pub fn segment_splitting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(2..30);
        let mut z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        z.sort_by(f64::total_cmp);
        let far = 5.0 + rng.gen_range(0.0..1.0);
        let sig: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
        let col: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let base = render::composite(&sig, &col, &z, far).unwrap();
        // split segment i at a random point, keeping σ and color
        let i = rng.gen_range(0..n);
        let end = if i + 1 < n { z[i + 1] } else { far };
        let mid = z[i] + rng.gen_range(0.0..1.0) * (end - z[i]);
        let mut z2 = z.clone();
        let mut s2 = sig.clone();
        let mut c2 = col.clone();
        z2.insert(i + 1, mid);
        s2.insert(i + 1, sig[i]);
        c2.insert(i + 1, col[i]);
        let split = render::composite(&s2, &c2, &z2, far).unwrap();
        for c in 0..3 {
            worst = worst.max((base.color[c] - split.color[c]).abs());
        }
        worst = worst.max((base.accumulated - split.accumulated).abs());
        let t_end_base = base.transmittance.last().unwrap() * (1.0 - base.alphas.last().unwrap());
        let t_end_split = split.transmittance.last().unwrap() * (1.0 - split.alphas.last().unwrap());
        worst = worst.max((t_end_base - t_end_split).abs());
    }
    Check::new(worst <= 1e-9, format!("segment splitting max diff {worst:.1e}"))
}

pub fn renderer_physics() -> Check {
    Check::all(vec![beer_lambert(), segment_splitting()])
}


fn random_table(rng: &mut ChaCha8Rng, n_vox: usize, max_views: usize) -> OpacityObservationTable {
    let mut entries = Vec::new();
    for voxel in 0..n_vox {
        let k = rng.gen_range(1..=max_views);
        for view in 0..k {
            entries.push(Observation {
                view,
                voxel,
                alpha: rng.gen(),
                density: rng.gen_range(0.0..10.0),
                distance: rng.gen_range(0.1..8.0),
            });
        }
    }
    OpacityObservationTable { entries }
}

pub fn opacity_hand_examples() -> Check {
    let two = OpacityObservationTable {
        entries: vec![
            Observation { view: 0, voxel: 0, alpha: 0.0, density: 4.0, distance: 1.0 },
            Observation { view: 1, voxel: 0, alpha: 1.0, density: 0.0, distance: 3.0 },
        ],
    };
    let (loss, _) = two.consistency_loss();
    let rho = two.weighted_density(0.0, true)[0].1;
    Check::new(
        loss == 0.5 && rho == 3.0,
        format!("hand examples: loss {loss} (want 0.5), weighted density {rho} (want 3)"),
    )
}

pub fn opacity_table_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (mut hull, mut scale, mut nearer) = (0, 0, 0);
    let (mut worst_scale, mut comparisons) = (0.0f64, 0);
    let tables = 10_000;
    for _ in 0..tables {
        let t = random_table(&mut rng, 1, 5);
        let rho = t.weighted_density(0.0, true)[0].1;
        let lo = t.entries.iter().map(|o| o.density).fold(f64::INFINITY, f64::min);
        let hi = t.entries.iter().map(|o| o.density).fold(f64::NEG_INFINITY, f64::max);
        if rho < lo - 1e-12 || rho > hi + 1e-12 {
            hull += 1;
        }
        let c = rng.gen_range(0.01..100.0);
        let mut scaled = t.clone();
        scaled.entries.iter_mut().for_each(|o| o.distance *= c);
        let rho_s = scaled.weighted_density(0.0, true)[0].1;
        let rel = (rho - rho_s).abs() / rho.abs().max(1e-12);
        worst_scale = worst_scale.max(rel);
        if rel > 1e-12 {
            scale += 1;
        }
        // influence of each view: response of ρ̄ to a unit bump of its density
        let eps = opacity::DISTANCE_EPS;
        let base = t.weighted_density(eps, true)[0].1;
        let influence: Vec<f64> = (0..t.entries.len())
            .map(|i| {
                let mut b = t.clone();
                b.entries[i].density += 1.0;
                b.weighted_density(eps, true)[0].1 - base
            })
            .collect();
        for i in 0..t.entries.len() {
            for j in 0..t.entries.len() {
                if t.entries[i].distance < t.entries[j].distance {
                    comparisons += 1;
                    if !(influence[i] > influence[j]) {
                        nearer += 1;
                    }
                }
            }
        }
    }
    Check::new(
        hull == 0 && scale == 0 && nearer == 0,
        format!(
            "{tables} random tables: {hull} convex-hull violations, {scale} scale-invariance violations (max rel {worst_scale:.1e}), {nearer}/{comparisons} nearer-view influence violations"
        ),
    )
}

/// Containing-voxel binning against a per-sample bounds test.
pub fn binning_matches_brute_force() -> Check {
    let grid = VoxelGrid::new([5, 4, 3], Vec3::new(-0.2, 0.1, 0.0), 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let b = grid.bounds();
    let pts: Vec<Vec3> = (0..10_000)
        .map(|_| {
            Vec3::new(
                rng.gen_range(b.min.x - 0.3..b.max.x + 0.3),
                rng.gen_range(b.min.y - 0.3..b.max.y + 0.3),
                rng.gen_range(b.min.z - 0.3..b.max.z + 0.3),
            )
        })
        .collect();
    let views: Vec<usize> = (0..pts.len()).map(|_| rng.gen_range(0..3)).collect();
    let centers = [Vec3::new(0.0, 0.0, 2.0), Vec3::new(2.0, 0.0, 1.0), Vec3::new(0.5, 3.0, 0.5)];
    let plan = ObservationPlan::build(&pts, &views, &centers, &grid).unwrap();
    let mut mismatches = 0;
    let mut kept = 0;
    let mut next = 0;
    for (s, p) in pts.iter().enumerate() {
        let want = (0..grid.len()).find(|&v| {
            let c = grid.center_of(v);
            let h = grid.voxel_size / 2.0;
            (0..3).all(|a| p[a] >= c[a] - h && p[a] < c[a] + h)
        });
        let got = if next < plan.sample_idx.len() && plan.sample_idx[next] == s {
            let o = plan.sample_obs[next];
            next += 1;
            kept += 1;
            if plan.obs_view[o] != views[s] {
                mismatches += 1;
            }
            Some(plan.slot_voxel[plan.obs_slot[o]])
        } else {
            None
        };
        if got != want {
            mismatches += 1;
        }
    }
    Check::new(
        mismatches == 0,
        format!("binning of 10000 samples ({kept} inside): {mismatches} mismatches"),
    )
}

/// Minimizing only the consistency loss over free per-observation opacities.
pub fn consistency_overfit() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let t = random_table(&mut rng, 20, 4);
    let grid = VoxelGrid::new([20, 1, 1], Vec3::zeros(), 1.0).unwrap();
    let pts: Vec<Vec3> = t.entries.iter().map(|o| grid.center_of(o.voxel)).collect();
    let views: Vec<usize> = t.entries.iter().map(|o| o.view).collect();
    let plan = ObservationPlan::build(&pts, &views, &[Vec3::new(0.0, 0.0, 5.0); 4], &grid).unwrap();
    let mut store = ParamStore::new();
    let id = store.add(
        DiffTensor::new("alpha", vec![plan.n_obs()], t.entries.iter().map(|o| o.alpha).collect()).unwrap(),
    );
    let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 1.0 });
    let mut variance = f64::INFINITY;
    let mut steps = 0;
    for step in 0..2000 {
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let (loss, _) = opacity::consistency_loss_tape(&mut g, &plan, a).unwrap();
        let m = plan.n_voxels() as f64;
        // loss·M is the summed squared deviation, an upper bound on the worst per-voxel variance
        variance = g.item(loss) * m;
        steps = step;
        if variance < 1e-6 {
            break;
        }
        store.accumulate(&g.backward(loss).unwrap());
        opt.step(&mut store);
    }
    Check::new(
        variance < 1e-6,
        format!("consistency-only training: per-voxel variance bound {variance:.1e} after {steps} steps"),
    )
}

pub fn opacity_units() -> Check {
    Check::all(vec![opacity_hand_examples(), opacity_table_properties()])
}

/// Small ring of cameras around a 4×4×2 grid with random images.
pub fn feature_rig(seed: u64) -> (VoxelGrid, Vec<Camera>, Vec<FeatureMap>) {
    let grid = VoxelGrid::new([4, 4, 2], Vec3::new(-0.5, -0.5, 0.0), 0.25).unwrap();
    let target = Vec3::new(0.0, 0.0, 0.25);
    let cams: Vec<Camera> = (0..4)
        .map(|i| {
            let a = i as f64 * 1.6;
            Camera::look_at(Vec3::new(1.6 * a.cos(), 1.6 * a.sin(), 1.1), target, Vec3::z(), 0.9, 16, 20).unwrap()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = cams
        .iter()
        .map(|c| {
            let n = c.height() * c.width() * 3;
            FeatureMap::new(c.height(), c.width(), 3, (0..n).map(|_| rng.gen()).collect()).unwrap()
        })
        .collect();
    (grid, cams, images)
}

/// With the offset network and positional encoder at their zero init, the
/// adjusted volume equals the plain max-pooled one bit for bit.
pub fn zero_offset_identity() -> Check {
    let (grid, cams, images) = feature_rig(11);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let full = FeatureVolume::new(&mut store, FeatureConfig::default(), true, &mut rng);
    let naive = FeatureVolume {
        offsets: None,
        encoder: None,
        ..full.clone()
    };
    let queries = VolumeQueries::build(&grid, &cams).unwrap();
    let mut g = Graph::new();
    let feat = full.featurize(&mut g, &store, &images).unwrap();
    let a = full.forward(&mut g, &store, feat, &queries, &grid, &cams).unwrap();
    let b = naive.forward(&mut g, &store, feat, &queries, &grid, &cams).unwrap();
    let (va, vb) = (g.value(a.encoded), g.value(b.encoded));
    let differing = va.iter().zip(vb).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    let offsets_zero = a.offsets.iter().all(|&o| o == 0.0);
    let nonzero = vb.iter().filter(|&&x| x != 0.0).count();
    Check::new(
        differing == 0 && offsets_zero && nonzero > 0 && va.len() == vb.len(),
        format!(
            "zero-offset identity: {differing} of {} values differ bitwise, offsets all zero {offsets_zero}, {} query rows",
            va.len(),
            queries.len()
        ),
    )
}

/// Gathered per-view volume against a per-voxel, per-view projection loop.
pub fn volume_matches_brute_force() -> Check {
    let (grid, cams, images) = feature_rig(13);
    let c = 3;
    let queries = VolumeQueries::build(&grid, &cams).unwrap();
    let mut g = Graph::no_grad();
    let stacked: Vec<f64> = images.iter().flat_map(|m| m.data.clone()).collect();
    let rows = stacked.len() / c;
    let feat = g.constant(vec![rows, c], stacked).unwrap();
    let v = g.bilinear_gather(feat, queries.taps().into()).unwrap();
    let got = g.value(v);
    let n = grid.len();
    let mut dense = vec![0.0; cams.len() * n * c];
    for (r, q) in queries.rows.iter().enumerate() {
        dense[(q.view * n + q.voxel) * c..][..c].copy_from_slice(&got[r * c..(r + 1) * c]);
    }
    let mut mismatches = 0;
    for (view, cam) in cams.iter().enumerate() {
        for j in 0..n {
            let mut want = vec![0.0; c];
            if let Ok(p) = cam.project(&grid.center_of(j)) {
                let s = voxdet::geometry::bilinear_sample(&images[view], p.u, p.v);
                if s.in_bounds {
                    want = s.values;
                }
            }
            if dense[(view * n + j) * c..][..c] != want[..] {
                mismatches += 1;
            }
        }
    }
    Check::new(
        mismatches == 0,
        format!("volume construction: {mismatches} of {} (view, voxel) cells differ from the projection loop", cams.len() * n),
    )
}

fn random_box(rng: &mut ChaCha8Rng, class: Option<usize>) -> Box3D {
    let c = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..1.0)];
    let s = [rng.gen_range(0.2..1.2), rng.gen_range(0.2..1.2), rng.gen_range(0.2..1.2)];
    let class = class.unwrap_or_else(|| rng.gen_range(0..NUM_CLASSES));
    Box3D::new(c, s, rng.gen_range(-3.0..3.0), class).unwrap()
}

/// Repeatedly keeps the best remaining box and strikes every same-class box
/// overlapping it.
fn brute_nms(boxes: &[Box3D], thr: f64) -> Vec<Box3D> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].score.unwrap() > boxes[b].score.unwrap()) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(boxes[b]);
        for i in 0..boxes.len() {
            if alive[i] && boxes[i].class == boxes[b].class && aabb_iou(&boxes[i], &boxes[b]) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

pub fn nms_matches_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut bad = 0;
    let trials = 20;
    for _ in 0..trials {
        let boxes: Vec<Box3D> = (0..100)
            .map(|_| {
                let mut b = random_box(&mut rng, None);
                b.score = Some(rng.gen());
                b
            })
            .collect();
        for thr in [0.1, 0.25, 0.5] {
            if detection::nms(&boxes, thr) != brute_nms(&boxes, thr) {
                bad += 1;
            }
        }
    }
    Check::new(bad == 0, format!("nms: {bad} of {} runs on 100 random boxes differ from brute force", trials * 3))
}

/// Reference AP: for each recall level reached, the best precision at that
/// recall or beyond times the recall step.
fn reference_ap(preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], iou: f64) -> f64 {
    let mut aps = Vec::new();
    for class in 0..NUM_CLASSES {
        let total: usize = gts.iter().map(|s| s.iter().filter(|b| b.class == class).count()).sum();
        if total == 0 {
            continue;
        }
        let mut all: Vec<(usize, Box3D)> = Vec::new();
        for (s, ps) in preds.iter().enumerate() {
            all.extend(ps.iter().filter(|b| b.class == class).map(|b| (s, *b)));
        }
        all.sort_by(|a, b| b.1.score.unwrap().partial_cmp(&a.1.score.unwrap()).unwrap());
        let mut taken: std::collections::HashSet<(usize, usize)> = Default::default();
        let mut points = Vec::new();
        let mut tp = 0.0;
        for (rank, (s, p)) in all.iter().enumerate() {
            let cand = gts[*s]
                .iter()
                .enumerate()
                .filter(|(k, g)| g.class == class && !taken.contains(&(*s, *k)))
                .map(|(k, g)| (k, aabb_iou(p, g)))
                .filter(|&(_, o)| o >= iou)
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            if let Some((k, _)) = cand {
                taken.insert((*s, k));
                tp += 1.0;
            }
            points.push((tp / total as f64, tp / (rank + 1) as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.dedup();
        for r in levels {
            if r <= prev {
                continue;
            }
            let pmax = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * pmax;
            prev = r;
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn map_matches_reference() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst: f64 = 0.0;
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..20 {
        let gt: Vec<Box3D> = (0..rng.gen_range(1..6)).map(|_| random_box(&mut rng, None)).collect();
        let mut p = Vec::new();
        for b in &gt {
            for _ in 0..rng.gen_range(0..3) {
                let mut q = *b;
                for k in 0..3 {
                    q.center[k] += rng.gen_range(-0.15..0.15);
                    q.size[k] *= rng.gen_range(0.8..1.25);
                }
                q.score = Some(rng.gen());
                p.push(q);
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let mut q = random_box(&mut rng, None);
            q.score = Some(rng.gen());
            p.push(q);
        }
        gts.push(gt);
        preds.push(p);
    }
    for iou in [0.25, 0.5] {
        let got = detection::evaluate_ap(&preds, &gts, iou).unwrap().mean;
        worst = worst.max((got - reference_ap(&preds, &gts, iou)).abs());
    }
    Check::new(worst <= 1e-9, format!("mAP: max |Δ| {worst:.1e} against the reference on 20 random scenes"))
}

/// Midpoint quadrature of the hard density along a ray crossing a box
/// through two opposite faces against `sigma_high · thickness`.
pub fn density_quadrature() -> Check {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10 {
        let mut spec = SceneSpec::empty(0, Profile::Small);
        let yaw: f64 = rng.gen_range(-1.5..1.5);
        let thick = rng.gen_range(0.1..0.5);
        spec.objects.push(SceneObject {
            kind: Primitive::Box,
            center: [0.0, 0.0, 0.4],
            size: [thick, 0.6, 0.5],
            yaw,
            albedo: [1.0; 3],
        });
        // along the box's local x axis, offset inside the other faces
        let dir = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        let side = Vec3::new(-yaw.sin(), yaw.cos(), 0.0) * rng.gen_range(-0.2..0.2);
        let origin = Vec3::new(0.0, 0.0, 0.4 + rng.gen_range(-0.2..0.2)) + side - dir * 1.0;
        let n = 200_000;
        let step = 2.0 / n as f64;
        let integral: f64 = (0..n).map(|i| spec.density(&(origin + dir * ((i as f64 + 0.5) * step))) * step).sum();
        let want = spec.sigma_high * thick;
        worst = worst.max((integral - want).abs() / want);
    }
    Check::new(worst <= 1e-3, format!("density quadrature: worst relative gap {worst:.2e} over 10 boxes"))
}

/// Expected depth from rendering the hard density with 512 uniform samples
/// against the exact depth, over all rays that hit something.
pub fn oracle_depth_consistency() -> Check {
    let mut total = 0;
    let mut close = 0;
    for seed in 0..3 {
        let s = generate_scene(&SceneSpec::random(100 + seed, Profile::Small)).unwrap();
        let room = s.spec.room;
        let tol = 0.02 * (room.max - room.min).norm();
        for (v, cam) in s.cameras.iter().enumerate() {
            let w = cam.width();
            for (i, &d) in s.depths[v].iter().enumerate() {
                if !d.is_finite() {
                    continue;
                }
                let dir = cam.pixel_direction((i % w) as f64, (i / w) as f64);
                let ray = Ray {
                    origin: cam.center(),
                    direction: dir,
                    near: 0.0,
                    far: f64::INFINITY,
                };
                let Some(r) = ray.clipped(&room) else { continue };
                let z = sampler::uniform_depths::<ChaCha8Rng>(r.near, r.far, 512, None).unwrap();
                let sigma: Vec<f64> = z.iter().map(|&t| s.density(&r.at(t))).collect();
                let out = render::composite(&sigma, &vec![[0.0; 3]; z.len()], &z, r.far).unwrap();
                total += 1;
                if (out.depth - d).abs() <= tol {
                    close += 1;
                }
            }
        }
    }
    let frac = close as f64 / total as f64;
    Check::new(frac >= 0.95, format!("oracle depth: {:.1}% of {total} rays within 2% of the room diagonal", 100.0 * frac))
}

/// Two generations of the same seeded dataset hash identically, and loading
/// returns exactly what was generated.
pub fn dataset_determinism() -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let info = DatasetInfo {
        seed: 77,
        profile: Profile::Small,
        scenes: 3,
    };
    let mut hashes = Vec::new();
    let mut first = None;
    for d in &dirs {
        let scenes = scene::generate_dataset(info.seed, info.scenes, info.profile).unwrap();
        scene::save_dataset(d.path(), &info, &scenes).unwrap();
        hashes.push(scene::dataset_hash(d.path()).unwrap());
        first.get_or_insert(scenes);
    }
    let (loaded_info, loaded) = scene::load_dataset(dirs[0].path()).unwrap();
    let generated = first.unwrap();
    let same_depths = generated
        .iter()
        .zip(&loaded)
        .all(|(a, b)| a.depths.iter().flatten().zip(b.depths.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let round_trip = loaded_info == info
        && generated.iter().zip(&loaded).all(|(a, b)| {
            a.spec == b.spec && a.cameras == b.cameras && a.images == b.images && a.boxes == b.boxes
        })
        && same_depths;
    Check::new(
        hashes[0] == hashes[1] && round_trip,
        format!(
            "dataset: hash {} twice {}, save/load exact {round_trip}",
            &hashes[0][..12],
            if hashes[0] == hashes[1] { "identical" } else { "DIFFERENT" }
        ),
    )
}
