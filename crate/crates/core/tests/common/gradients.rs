//! Central finite-difference probes over every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxdet::diff::gradcheck;
use voxdet::diff::{Graph, Var};
use voxdet::Result;

pub const H: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-4;
pub const PROBES: usize = 100;

pub struct Outcome {
    pub name: String,
    pub probes: usize,
    pub worst: f64,
}

#[derive(Default)]
pub struct Suite {
    pub outcomes: Vec<Outcome>,
}

impl Suite {
    /// Projects the op's output onto random weights so every output element
    /// contributes to the scalar being differentiated.
    pub fn run<F>(&mut self, name: &str, seed: u64, inputs: Vec<(Vec<usize>, Vec<f64>)>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = std::cell::RefCell::new(Vec::<f64>::new());
        let wrng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef));
        let report = gradcheck::check(&inputs, PROBES, H, &mut rng, |g, vars| {
            let y = f(g, vars)?;
            let n = g.value(y).len();
            let mut w = weights.borrow_mut();
            while w.len() < n {
                w.push(wrng.borrow_mut().gen_range(-1.0..1.0));
            }
            let wy = g.mul_const(y, w[..n].to_vec().into())?;
            Ok(g.sum(wy))
        })
        .unwrap();
        self.outcomes.push(Outcome {
            name: name.to_string(),
            probes: report.probes.len(),
            worst: report.max_rel_err(),
        });
    }

    pub fn total_probes(&self) -> usize {
        self.outcomes.iter().map(|o| o.probes).sum()
    }

    pub fn failures(&self, tol: f64) -> Vec<String> {
        self.outcomes
            .iter()
            .filter(|o| !(o.worst <= tol))
            .map(|o| format!("{} rel {:.2e}", o.name, o.worst))
            .collect()
    }

    pub fn assert_within(&self, tol: f64) {
        let bad = self.failures(tol);
        assert!(bad.is_empty(), "{}", bad.join(", "));
    }
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for ops with a kink or pole there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn one(shape: &[usize], v: Vec<f64>) -> Vec<(Vec<usize>, Vec<f64>)> {
    vec![(shape.to_vec(), v)]
}

pub fn elementwise_binary(suite: &mut Suite) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (rand_vec(&mut r, 12, -2.0, 2.0), rand_vec(&mut r, 12, -2.0, 2.0));
    let inputs = vec![(vec![3, 4], a.clone()), (vec![3, 4], b.clone())];
    suite.run("add", 1, inputs.clone(), |g, v| g.add(v[0], v[1]));
    suite.run("sub", 2, inputs.clone(), |g, v| g.sub(v[0], v[1]));
    suite.run("mul", 3, inputs.clone(), |g, v| g.mul(v[0], v[1]));
    let den = away_from_zero(&mut r, 12);
    suite.run("div", 4, vec![(vec![3, 4], a), (vec![3, 4], den)], |g, v| g.div(v[0], v[1]));
    // the same leaf on both sides
    suite.run("mul_self", 5, one(&[12], b), |g, v| g.mul(v[0], v[0]));
}

pub fn broadcasts_and_constants(suite: &mut Suite) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = rand_vec(&mut r, 15, -2.0, 2.0);
    let b = rand_vec(&mut r, 3, -1.0, 1.0);
    let s = rand_vec(&mut r, 5, -1.0, 1.0);
    suite.run("add_bias", 6, vec![(vec![5, 3], x.clone()), (vec![3], b)], |g, v| {
        g.add_bias(v[0], v[1])
    });
    suite.run("scale_rows", 7, vec![(vec![5, 3], x.clone()), (vec![5], s)], |g, v| {
        g.scale_rows(v[0], v[1])
    });
    suite.run("scale", 8, one(&[15], x.clone()), |g, v| Ok(g.scale(v[0], -1.7)));
    suite.run("add_scalar", 9, one(&[15], x.clone()), |g, v| Ok(g.add_scalar(v[0], 0.3)));
    let c = rand_vec(&mut r, 15, -1.0, 1.0);
    suite.run("mul_const", 10, one(&[15], x.clone()), move |g, v| {
        g.mul_const(v[0], c.clone().into())
    });
    let c = rand_vec(&mut r, 15, -1.0, 1.0);
    suite.run("add_const", 11, one(&[15], x), move |g, v| g.add_const(v[0], &c));
}

pub fn unary(suite: &mut Suite) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = rand_vec(&mut r, 120, -3.0, 3.0);
    let nz = away_from_zero(&mut r, 120);
    let pos = rand_vec(&mut r, 120, 0.1, 3.0);
    let s = [120];
    suite.run("relu", 12, one(&s, nz.clone()), |g, v| Ok(g.relu(v[0])));
    suite.run("sigmoid", 13, one(&s, x.clone()), |g, v| Ok(g.sigmoid(v[0])));
    suite.run("softplus", 14, one(&s, x.clone()), |g, v| Ok(g.softplus(v[0])));
    suite.run("exp", 15, one(&s, x.clone()), |g, v| Ok(g.exp(v[0])));
    suite.run("log", 16, one(&s, pos.clone()), |g, v| Ok(g.log(v[0])));
    suite.run("tanh", 17, one(&s, x.clone()), |g, v| Ok(g.tanh(v[0])));
    suite.run("sin", 18, one(&s, x.clone()), |g, v| Ok(g.sin(v[0])));
    suite.run("cos", 19, one(&s, x.clone()), |g, v| Ok(g.cos(v[0])));
    suite.run("abs", 20, one(&s, nz), |g, v| Ok(g.abs(v[0])));
    suite.run("square", 21, one(&s, x.clone()), |g, v| Ok(g.square(v[0])));
    suite.run("sqrt", 22, one(&s, pos), |g, v| Ok(g.sqrt(v[0])));
    suite.run("neg", 23, one(&s, x), |g, v| Ok(g.neg(v[0])));
}

pub fn reductions(suite: &mut Suite) {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = rand_vec(&mut r, 60, -2.0, 2.0);
    let shape = [3, 4, 5];
    suite.run("sum", 24, one(&shape, x.clone()), |g, v| Ok(g.sum(v[0])));
    suite.run("mean", 25, one(&shape, x.clone()), |g, v| Ok(g.mean(v[0])));
    for axis in 0..3 {
        suite.run("sum_axis", 26 + axis as u64, one(&shape, x.clone()), move |g, v| {
            g.sum_axis(v[0], axis)
        });
    }
    // distinct values spaced well beyond 2h so the argmax is stable under probing
    let mut spaced: Vec<f64> = (0..60).map(|i| i as f64 * 0.01).collect();
    for i in (1..60).rev() {
        spaced.swap(i, r.gen_range(0..=i));
    }
    for axis in 0..3 {
        suite.run("max_over_axis", 30 + axis as u64, one(&shape, spaced.clone()), move |g, v| {
            g.max_over_axis(v[0], axis)
        });
    }
}

pub fn shape_ops(suite: &mut Suite) {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let a = rand_vec(&mut r, 24, -2.0, 2.0);
    let b = rand_vec(&mut r, 12, -2.0, 2.0);
    suite.run("concat0", 34, vec![(vec![4, 2, 3], a.clone()), (vec![2, 2, 3], b.clone())], |g, v| {
        g.concat(&[v[0], v[1]], 0)
    });
    suite.run("concat2", 35, vec![(vec![2, 2, 6], a.clone()), (vec![2, 2, 3], b.clone())], |g, v| {
        g.concat(&[v[0], v[1], v[0]], 2)
    });
    suite.run("narrow", 36, one(&[4, 6], a.clone()), |g, v| g.narrow(v[0], 1, 2, 3));
    suite.run("gather", 37, one(&[6, 4], a.clone()), |g, v| g.gather(v[0], &[5, 0, 0, 3, 5, 2]));
    suite.run("segment_sum", 38, one(&[6, 4], a.clone()), |g, v| {
        g.segment_sum(v[0], &[2, 0, 2, 1, 4, 2], 5)
    });
    suite.run("reshape", 39, one(&[6, 4], a.clone()), |g, v| g.reshape(v[0], vec![3, 8]));
    suite.run("cumsum_exclusive", 40, one(&[4, 6], a), |g, v| Ok(g.cumsum_exclusive(v[0])));
}

pub fn matmul_and_conv(suite: &mut Suite) {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    // more rows than one parallel chunk
    let a = rand_vec(&mut r, 70 * 3, -1.0, 1.0);
    let b = rand_vec(&mut r, 3 * 4, -1.0, 1.0);
    suite.run("matmul", 41, vec![(vec![70, 3], a), (vec![3, 4], b)], |g, v| g.matmul(v[0], v[1]));
    let x = rand_vec(&mut r, 4 * 3 * 5 * 2, -1.0, 1.0);
    let w = rand_vec(&mut r, 27 * 2 * 3, -0.5, 0.5);
    suite.run("conv3d", 42, vec![(vec![4, 3, 5, 2], x), (vec![27, 2, 3], w)], |g, v| {
        g.conv3d(v[0], v[1])
    });
}

pub fn feature_ops(suite: &mut Suite) {
    use voxdet::features::Pooling;
    use voxdet::geometry::BilinearTaps;
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let (v, h, w, c) = (2usize, 5usize, 6usize, 3usize);
    let feat = rand_vec(&mut r, v * h * w * c, -1.0, 1.0);
    // pixel coordinates kept off texel lines so the cell stays fixed under probing
    let mut uv = Vec::new();
    let mut views = Vec::new();
    for q in 0..9 {
        uv.push(r.gen_range(0..w - 1) as f64 + r.gen_range(0.1..0.9));
        uv.push(r.gen_range(0..h - 1) as f64 + r.gen_range(0.1..0.9));
        views.push(q % v);
    }
    let taps: Vec<BilinearTaps> = (0..9)
        .map(|q| {
            let mut t = BilinearTaps::new(h, w, uv[2 * q], uv[2 * q + 1]).unwrap();
            t.texels.iter_mut().for_each(|x| *x += views[q] * h * w);
            t
        })
        .collect();
    let taps: std::rc::Rc<[BilinearTaps]> = taps.into();
    suite.run("bilinear_gather", 50, one(&[v * h * w, c], feat.clone()), move |g, x| {
        g.bilinear_gather(x[0], taps.clone())
    });
    let views2 = views.clone();
    suite.run(
        "bilinear_gather_uv",
        51,
        vec![(vec![v * h * w, c], feat), (vec![9, 2], uv)],
        move |g, x| Ok(g.bilinear_gather_uv(x[0], x[1], &views2, h, w)?.0),
    );
    let mut spaced: Vec<f64> = (0..30).map(|i| i as f64 * 0.01).collect();
    for i in (1..30).rev() {
        spaced.swap(i, r.gen_range(0..=i));
    }
    let vox = [0, 2, 0, 1, 2, 0, 3, 1, 0, 2];
    let valid = [true, true, false, true, true, true, false, true, true, true];
    for (k, pooling) in [Pooling::Max, Pooling::Mean].into_iter().enumerate() {
        suite.run(&format!("pool_rows_{pooling:?}").to_lowercase(), 52 + k as u64, one(&[10, 3], spaced.clone()), move |g, x| {
            g.pool_rows(x[0], &vox, &valid, 5, pooling)
        });
    }
}

pub fn nerf_ops(suite: &mut Suite) {
    use voxdet::geometry::{BilinearTaps, Vec3, VoxelGrid};
    use voxdet::nerf::trilinear_taps;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let (h, w, c) = (4usize, 5usize, 3usize);
    let feat = rand_vec(&mut r, 3 * h * w * c, -1.0, 1.0);
    let taps: Vec<Vec<BilinearTaps>> = (0..12)
        .map(|i| {
            let (u, v) = (r.gen_range(0.0..(w - 1) as f64), r.gen_range(0.0..(h - 1) as f64));
            (0..3)
                .filter(|view| (i + view) % 4 != 0)
                .map(|view| {
                    let mut t = BilinearTaps::new(h, w, u, v).unwrap();
                    t.texels.iter_mut().for_each(|x| *x += view * h * w);
                    t
                })
                .collect()
        })
        .collect();
    let taps: std::rc::Rc<[Vec<BilinearTaps>]> = taps.into();
    suite.run("multiview_mean_var", 60, one(&[3 * h * w, c], feat), move |g, x| {
        g.multiview_mean_var(x[0], taps.clone())
    });
    let grid = VoxelGrid::new([3, 4, 2], Vec3::new(0.0, 0.0, 0.0), 0.5).unwrap();
    let tri: Vec<_> = (0..15)
        .map(|_| trilinear_taps(&grid, &Vec3::new(r.gen_range(0.0..1.5), r.gen_range(0.0..2.0), r.gen_range(0.0..1.0))))
        .collect();
    let tri: std::rc::Rc<[_]> = tri.into();
    let vol = rand_vec(&mut r, grid.len() * 4, -1.0, 1.0);
    suite.run("trilinear_gather", 61, one(&[grid.len(), 4], vol), move |g, x| {
        g.trilinear_gather(x[0], tri.clone())
    });
}

/// Each term of the training objective, differentiated alone.
pub fn loss_terms(suite: &mut Suite) {
    use voxdet::detection::{self, Box3D, DetectionOutput, HeadConfig};
    use voxdet::geometry::{Vec3, VoxelGrid};
    use voxdet::opacity::{self, ObservationPlan};
    use voxdet::render;
    let mut r = ChaCha8Rng::seed_from_u64(10);

    let logits = rand_vec(&mut r, 30 * 3, -3.0, 3.0);
    let targets: Vec<f64> = (0..90).map(|_| if r.gen_bool(0.2) { 1.0 } else { 0.0 }).collect();
    suite.run("L_cls", 70, one(&[30, 3], logits), move |g, x| g.sigmoid_focal_loss(x[0], &targets, 0.25, 2.0));

    let grid = VoxelGrid::new([4, 4, 3], Vec3::new(-0.5, -0.5, 0.0), 0.25).unwrap();
    let gt = vec![
        Box3D::new([-0.1, 0.0, 0.35], [0.5, 0.5, 0.4], 0.3, 1).unwrap(),
        Box3D::new([0.3, 0.3, 0.2], [0.2, 0.3, 0.2], 0.0, 0).unwrap(),
    ];
    let n = grid.len();
    let reg = rand_vec(&mut r, n * 7, -2.0, 2.0);
    let gr = grid.clone();
    suite.run("L_loc", 71, one(&[n, 7], reg), move |g, x| {
        let grid = &gr;
        let logits = g.constant(vec![n, 3], vec![0.0; n * 3])?;
        let out = DetectionOutput { logits, regression: x[0] };
        Ok(detection::detection_loss(g, &out, &gt, grid, &HeadConfig::default())?.loc)
    });

    let (rays, s) = (4usize, 6usize);
    let sigma = rand_vec(&mut r, rays * s, 0.1, 3.0);
    let rgb = rand_vec(&mut r, rays * s * 3, 0.0, 1.0);
    let mut depths = Vec::new();
    let mut deltas = Vec::new();
    for _ in 0..rays {
        let mut z: Vec<f64> = rand_vec(&mut r, s, 0.5, 2.0);
        z.sort_by(f64::total_cmp);
        deltas.extend(render::deltas(&z, 2.2).unwrap());
        depths.extend(z);
    }
    let target = rand_vec(&mut r, rays * 3, 0.0, 1.0);
    let inputs = vec![(vec![rays, s], sigma), (vec![rays, s, 3], rgb)];
    let (dl, dp) = (deltas.clone(), depths.clone());
    suite.run("L_c", 72, inputs.clone(), move |g, x| {
        let out = render::composite_tape(g, x[0], x[1], &dl, &dp)?;
        render::photometric_loss(g, out.color, &target)
    });
    let target = rand_vec(&mut r, rays, 0.0, 3.0);
    let mask = vec![true, false, true, true];
    let (dl, dp) = (deltas.clone(), depths.clone());
    suite.run("L_d", 73, inputs.clone(), move |g, x| {
        let out = render::composite_tape(g, x[0], x[1], &dl, &dp)?;
        Ok(render::depth_loss(g, out.depth, &target, &mask)?.0)
    });

    // samples from three views landing in a handful of shared voxels
    let centers = vec![Vec3::new(2.0, 0.0, 1.0), Vec3::new(0.0, 2.0, 1.0), Vec3::new(-2.0, -1.0, 1.0)];
    let (pts, views): (Vec<Vec3>, Vec<usize>) = (0..rays * s)
        .map(|i| {
            let j = r.gen_range(0..5);
            let p = grid.center_of(j * 7) + Vec3::new(r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1));
            (p, i % 3)
        })
        .unzip();
    let plan = std::rc::Rc::new(ObservationPlan::build(&pts, &views, &centers, &grid).unwrap());
    let (dl, dp, pl) = (deltas.clone(), depths.clone(), plan.clone());
    suite.run("L_opacity", 74, inputs.clone(), move |g, x| {
        let out = render::composite_tape(g, x[0], x[1], &dl, &dp)?;
        let (a, _) = pl.aggregate_tape(g, out.alpha, x[0], out.transmittance)?;
        Ok(opacity::consistency_loss_tape(g, &pl, a)?.0)
    });
    let fallback = vec![1.0; grid.len()];
    for (k, inverse) in [true, false].into_iter().enumerate() {
        let (dl, dp, pl, fb, gr) = (deltas.clone(), depths.clone(), plan.clone(), fallback.clone(), grid.clone());
        suite.run(&format!("weighted_opacity(inverse_distance={inverse})"), 75 + k as u64, inputs.clone(), move |g, x| {
            let out = render::composite_tape(g, x[0], x[1], &dl, &dp)?;
            let (_, d) = pl.aggregate_tape(g, out.alpha, x[0], out.transmittance)?;
            opacity::weighted_opacity_tape(g, &pl, d, &gr, inverse, &fb)
        });
    }
}

pub fn all_ops() -> Suite {
    let mut s = Suite::default();
    elementwise_binary(&mut s);
    broadcasts_and_constants(&mut s);
    unary(&mut s);
    reductions(&mut s);
    shape_ops(&mut s);
    matmul_and_conv(&mut s);
    feature_ops(&mut s);
    nerf_ops(&mut s);
    s
}

pub const PIPELINE_TOL: f64 = 1e-3;
pub const PIPELINE_H: f64 = 1e-5;
pub const PIPELINE_PROBES_PER_TERM: usize = 20;

/// Parameter gradients of each training-loss term through the whole model,
/// with the step's ray samples held fixed, against central differences in
/// the parameters. Probed coordinates are drawn among those the term reaches.
pub fn pipeline_terms() -> Suite {
    use voxdet::config::RunConfig;
    use voxdet::pipeline::{build_step, Model, PreparedScene, StepLosses};
    use voxdet::scene::{generate_dataset, Profile};

    let cfg = RunConfig::default()
        .with_overrides(&["train.rays_per_step=32", "sampler.n_coarse=12", "sampler.n_fine=12"])
        .unwrap();
    let sample = generate_dataset(31, 1, Profile::Small).unwrap().remove(0);
    let scene = PreparedScene::new(sample).unwrap();
    let mut model = Model::new(&cfg);
    // Zero-initialized biases and the zero-initialized encoder put ReLU units
    // exactly on their kinks; probe at a generic point instead.
    let mut jitter = ChaCha8Rng::seed_from_u64(78);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let t = model.store.get_mut(id);
        if t.name.ends_with(".bias") || t.name.starts_with("pos_encoder") {
            t.values.iter_mut().for_each(|v| *v += jitter.gen_range(-0.05..0.05));
        }
    }
    let terms: [(&str, fn(&StepLosses) -> Var); 6] = [
        ("pipeline L_cls", |l| l.cls),
        ("pipeline L_loc", |l| l.loc),
        ("pipeline L_c", |l| l.photometric),
        ("pipeline L_d", |l| l.depth),
        ("pipeline L_opacity", |l| l.opacity),
        ("pipeline total", |l| l.total),
    ];
    let mut g = Graph::new();
    let (losses, samples) = build_step(&mut g, &model, &scene, &cfg, 5, None).unwrap();
    let mut suite = Suite::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (name, pick) in &terms {
        let grads = g.backward(pick(&losses)).unwrap();
        model.store.zero_grad();
        model.store.accumulate(&grads);
        let reached: Vec<(voxdet::diff::ParamId, usize)> = model
            .store
            .iter()
            .flat_map(|(id, t)| t.grad.iter().enumerate().filter(|(_, d)| d.abs() > 1e-8).map(move |(j, _)| (id, j)))
            .collect();
        assert!(!reached.is_empty(), "{name} reaches no parameter");
        let analytic: Vec<f64> = reached.iter().map(|&(id, j)| model.store.get(id).grad[j]).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..PIPELINE_PROBES_PER_TERM {
            let i = rng.gen_range(0..reached.len());
            let (id, j) = reached[i];
            let x0 = model.store.get(id).values[j];
            let mut at = |x: f64| {
                model.store.get_mut(id).values[j] = x;
                let mut gn = Graph::no_grad();
                let (l, _) = build_step(&mut gn, &model, &scene, &cfg, 5, Some(&samples)).unwrap();
                gn.item(pick(&l))
            };
            let numeric = (at(x0 + PIPELINE_H) - at(x0 - PIPELINE_H)) / (2.0 * PIPELINE_H);
            model.store.get_mut(id).values[j] = x0;
            worst = worst.max(gradcheck::relative_error(analytic[i], numeric));
        }
        suite.outcomes.push(Outcome {
            name: name.to_string(),
            probes: PIPELINE_PROBES_PER_TERM,
            worst,
        });
    }
    model.store.zero_grad();
    suite
}
