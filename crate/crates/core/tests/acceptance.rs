//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sonarslam::config::PipelineConfig;
use sonarslam::features::{extract_oriented_surface_points, VoxelKey};
use sonarslam::geometry::{PointCloud, RigidPose, Twist, Vec3};
use sonarslam::io::Dataset;
use sonarslam::pipeline::{run_dataset, RunOptions};
use sonarslam::posegraph::{optimize, Factor, FactorGraph, FactorKind, SolverConfig};
use sonarslam::registration::{register, RegConfig};
use sonarslam::simkit::{generate_dataset, Scenario};
use sonarslam::tsdf::{GlobalMapState, ReprocessThresholds, TsdfConfig, TsdfVolume};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, elapsed: Duration, o: &Outcome) -> bool {
    println!(
        "criterion {id} {}: {name}: {} ({:.1} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    o.pass
}

fn random_pose(rng: &mut ChaCha8Rng, trans: f64, rot: f64) -> RigidPose {
    let mut v = || rng.random_range(-1.0..1.0);
    let r = Vec3::new(v(), v(), v()) * rot;
    let t = Vec3::new(v(), v(), v()) * trans;
    RigidPose::from_rotation_vector(r, t)
}

// ---------------------------------------------------------------- 1

fn random_submap(rng: &mut ChaCha8Rng) -> TsdfVolume {
    let mut v = TsdfVolume::from_config(&TsdfConfig::default()).unwrap();
    let center = Vec3::new(rng.random_range(0.8..1.5), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let pts: Vec<Vec3> = (0..80)
        .map(|_| center + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
        .collect();
    v.integrate_frame(&Vec3::zeros(), &PointCloud::new(pts).unwrap()).unwrap();
    v
}

/// From-scratch global field: every global voxel center in the bounding box
/// of each placed submap is sampled directly.
fn brute_force_field(
    parts: &[(Arc<TsdfVolume>, RigidPose, RigidPose)],
    vs: f64,
) -> BTreeMap<VoxelKey, (f64, f64)> {
    let mut acc: BTreeMap<VoxelKey, (f64, f64)> = BTreeMap::new();
    for (vol, odom, world) in parts {
        let theta = odom.compose(&world.inverse());
        let to_world = theta.inverse();
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for (k, _) in vol.cells() {
            let w = to_world.transform_point(&vol.center(k));
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
        let first = ((lo - Vec3::repeat(2.0 * vs)) / vs).map(|v| v.floor() as i32);
        let last = ((hi + Vec3::repeat(2.0 * vs)) / vs).map(|v| v.ceil() as i32);
        for x in first.x..=last.x {
            for y in first.y..=last.y {
                for z in first.z..=last.z {
                    let key = VoxelKey([x, y, z]);
                    if let Some(c) = vol.sample_trilinear(&theta.transform_point(&key.center(vs))) {
                        let e = acc.entry(key).or_insert((0.0, 0.0));
                        e.0 += c.w * c.d;
                        e.1 += c.w;
                    }
                }
            }
        }
    }
    acc.into_iter()
        .filter(|(_, (_, w))| *w >= 1e-6)
        .map(|(k, (psi, w))| (k, (psi / w, w)))
        .collect()
}

fn merge_algebra_seed(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TsdfConfig::default();
    let th = ReprocessThresholds::default();
    let mut g = GlobalMapState::new(&cfg).unwrap();
    let count = rng.random_range(1..=5usize);
    let mut vols = Vec::new();
    let mut poses: Vec<Vec<RigidPose>> = Vec::new();
    let mut n = 0;
    for k in 0..count {
        let vol = Arc::new(random_submap(&mut rng));
        let odom = random_pose(&mut rng, 2.0, 0.5);
        let world = odom.compose(&random_pose(&mut rng, 0.2, 0.05));
        g.insert_submap(k, vol.clone(), odom).unwrap();
        vols.push((vol, odom));
        poses.push(Vec::new());
        // A new optimization index records every submap placed so far.
        for (j, p) in poses.iter_mut().enumerate() {
            let next = if j == k {
                world
            } else {
                let last = *p.last().unwrap();
                if rng.random_bool(0.3) {
                    last.compose(&random_pose(&mut rng, 0.05, 0.02))
                } else {
                    last
                }
            };
            p.push(next);
            g.record_pose(j, n, next).unwrap();
        }
        let moved: Vec<usize> = g.moved_submaps(n, &th).into_iter().filter(|&j| j != k).collect();
        g.global_update(&[k], &moved, n).unwrap();
        n += 1;
    }
    let moves = rng.random_range(0..=3usize);
    for _ in 0..moves {
        for (j, p) in poses.iter_mut().enumerate() {
            let last = *p.last().unwrap();
            let next = if rng.random_bool(0.5) {
                last.compose(&random_pose(&mut rng, 0.3, 0.1))
            } else {
                last
            };
            p.push(next);
            g.record_pose(j, n, next).unwrap();
        }
        let moved = g.moved_submaps(n, &th);
        g.global_update(&[], &moved, n).unwrap();
        n += 1;
    }
    let parts: Vec<_> = g
        .integrated()
        .map(|(k, q)| (vols[k].0.clone(), vols[k].1, *g.pose_at(k, q).unwrap()))
        .collect();
    let oracle = brute_force_field(&parts, cfg.voxel_size);
    let inc = g.volume();
    if inc.len() != oracle.len() {
        return Err(format!("seed {seed}: {} cells vs {} in rebuild", inc.len(), oracle.len()));
    }
    for (k, (d, w)) in &oracle {
        let c = inc.get(k).ok_or_else(|| format!("seed {seed}: cell {k:?} missing"))?;
        if (c.d - d).abs() > 1e-9 || (c.w - w).abs() > 1e-9 {
            return Err(format!("seed {seed}: cell {k:?} ({}, {}) vs ({d}, {w})", c.d, c.w));
        }
    }
    Ok(())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let failures: Vec<String> = (0..100).filter_map(|s| merge_algebra_seed(s).err()).collect();
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: failures.is_empty() && secs < 60.0,
        detail: match failures.first() {
            None => format!("100 seeds match the brute-force rebuild within 1e-9 in {secs:.1} s (limit 60 s)"),
            Some(f) => format!("{} seeds differ, first {f}", failures.len()),
        },
    }
}

// ---------------------------------------------------------------- 2

/// Three non-parallel planar patches and a sphere in a random orientation.
fn random_scene(rng: &mut ChaCha8Rng) -> PointCloud {
    let frame = random_pose(rng, 0.0, std::f64::consts::PI);
    let size = rng.random_range(4.0..7.0);
    let mut pts = Vec::new();
    for _ in 0..3000 {
        let a = rng.random_range(1.0..size);
        let b = rng.random_range(1.0..size);
        pts.push(Vec3::new(a, b, 0.0));
        pts.push(Vec3::new(a, 0.0, b));
        pts.push(Vec3::new(0.0, a, b));
    }
    let c = Vec3::new(size * 0.6, size * 0.6, rng.random_range(1.0..2.0));
    let radius = rng.random_range(0.5..1.0);
    for _ in 0..2000 {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 {
            pts.push(c + v.normalize() * radius);
        }
    }
    PointCloud::new(pts).unwrap().transformed(&frame)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let r = 0.5;
    let cfg = RegConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_t, mut worst_r, mut failures) = (0.0f64, 0.0f64, 0);
    for _ in 0..200 {
        let scene = random_scene(&mut rng);
        let truth = random_pose(&mut rng, 1.0, 0.3);
        let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let perturb = RigidPose::from_rotation_vector(
            axis.normalize() * rng.random_range(0.0..5f64.to_radians()),
            dir.normalize() * rng.random_range(0.0..0.2 * r),
        );
        let source = extract_oriented_surface_points(&scene, r).unwrap();
        let target = extract_oriented_surface_points(&scene.transformed(&truth), r).unwrap();
        let res = register(&source, &target, &truth.compose(&perturb), r, &cfg).unwrap();
        let (dt, dr) = res.transform.distance_to(&truth);
        worst_t = worst_t.max(dt);
        worst_r = worst_r.max(dr.to_degrees());
        if !res.converged || dt > r / 50.0 || dr.to_degrees() > 0.2 {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: failures == 0 && secs < 120.0,
        detail: format!(
            "{failures}/200 outside tolerance; worst {worst_t:.4} m (limit {:.3}), {worst_r:.3} deg (limit 0.2); {secs:.1} s (limit 120 s)",
            r / 50.0
        ),
    }
}

// ---------------------------------------------------------------- 3

fn info(rng: &mut ChaCha8Rng) -> Matrix6<f64> {
    let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    a * a.transpose() + Matrix6::identity() * 2.0
}

fn numeric_jacobian(f: &Factor, pi: &RigidPose, pj: Option<&RigidPose>, which: usize) -> Matrix6<f64> {
    let h = 1e-6;
    let mut jac = Matrix6::zeros();
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = h;
        let plus = RigidPose::exp(&Twist::from_vector(&d));
        let minus = RigidPose::exp(&Twist::from_vector(&-d));
        let (rp, rm) = if which == 0 {
            (f.residual(&pi.compose(&plus), pj), f.residual(&pi.compose(&minus), pj))
        } else {
            let pj = pj.unwrap();
            (f.residual(pi, Some(&pj.compose(&plus))), f.residual(pi, Some(&pj.compose(&minus))))
        };
        jac.set_column(k, &((rp - rm) / (2.0 * h)));
    }
    jac
}

fn rel_diff(a: &Matrix6<f64>, b: &Matrix6<f64>) -> f64 {
    (a - b).abs().max() / b.abs().max().max(1.0)
}

/// Gauss-Newton over `[t; rotation vector]` coordinates with numeric
/// Jacobians of the whitened residual and a dense LU solve.
fn dense_oracle_cost(g: &FactorGraph) -> f64 {
    let ids: Vec<usize> = g.nodes().iter().map(|n| n.0).collect();
    let n = ids.len();
    let to_pose = |x: &[f64], k: usize| {
        RigidPose::from_rotation_vector(
            Vec3::new(x[6 * k + 3], x[6 * k + 4], x[6 * k + 5]),
            Vec3::new(x[6 * k], x[6 * k + 1], x[6 * k + 2]),
        )
    };
    let slot = |id: usize| ids.iter().position(|&v| v == id).unwrap();
    let residuals = |x: &[f64]| -> Vec<f64> {
        let mut out = Vec::new();
        for f in g.factors() {
            let sqrt_w = f.information().cholesky().unwrap().l().transpose();
            let r = match f.kind() {
                FactorKind::Prior(i) => {
                    let e = f.measurement().inverse().to_homogeneous() * to_pose(x, slot(i)).to_homogeneous();
                    RigidPose::from_homogeneous(&e).log_unchecked().to_vector()
                }
                FactorKind::Between(i, j) => {
                    let e = f.measurement().inverse().to_homogeneous()
                        * to_pose(x, slot(i)).to_homogeneous().try_inverse().unwrap()
                        * to_pose(x, slot(j)).to_homogeneous();
                    RigidPose::from_homogeneous(&e).log_unchecked().to_vector()
                }
            };
            out.extend((sqrt_w * r).iter());
        }
        out
    };
    let mut x: Vec<f64> = Vec::with_capacity(6 * n);
    for (_, p) in g.nodes() {
        let rv = p.log_unchecked().rotation;
        let t = p.translation();
        x.extend([t.x, t.y, t.z, rv.x, rv.y, rv.z]);
    }
    let cost_of = |x: &[f64]| residuals(x).iter().map(|v| v * v).sum::<f64>();
    for _ in 0..200 {
        let r0 = residuals(&x);
        let m = r0.len();
        let mut jac = DMatrix::zeros(m, 6 * n);
        let h = 1e-7;
        for c in 0..6 * n {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[c] += h;
            xm[c] -= h;
            let (rp, rm) = (residuals(&xp), residuals(&xm));
            for row in 0..m {
                jac[(row, c)] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        let r = DVector::from_vec(r0);
        let dx = (jac.transpose() * &jac).lu().solve(&-(jac.transpose() * r)).unwrap();
        let before = cost_of(&x);
        let mut step = 1.0;
        loop {
            let cand: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, d)| a + step * d).collect();
            if cost_of(&cand) <= before || step < 1e-6 {
                x = cand;
                break;
            }
            step *= 0.5;
        }
        if dx.norm() * step < 1e-12 {
            break;
        }
    }
    cost_of(&x)
}

/// A ring of poses with noisy odometry edges, a loop edge and a prior.
fn loop_graph(rng: &mut ChaCha8Rng, n: usize, consistent: bool) -> (FactorGraph, Vec<RigidPose>) {
    let truth: Vec<RigidPose> = (0..n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            RigidPose::from_yaw(a + std::f64::consts::FRAC_PI_2, Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.1 * i as f64))
        })
        .collect();
    let noise = |rng: &mut ChaCha8Rng| if consistent { RigidPose::identity() } else { random_pose(rng, 0.05, 0.02) };
    let mut g = FactorGraph::new();
    for (i, p) in truth.iter().enumerate() {
        let init = if consistent { *p } else { p.compose(&random_pose(rng, 0.2, 0.05)) };
        g.add_node(i, init).unwrap();
    }
    g.add_factor(Factor::prior(0, truth[0], Matrix6::identity() * 1e4).unwrap()).unwrap();
    for i in 1..n {
        let z = truth[i - 1].between(&truth[i]).compose(&noise(rng));
        g.add_factor(Factor::between(i - 1, i, z, info(rng)).unwrap()).unwrap();
    }
    let z = truth[n - 1].between(&truth[0]).compose(&noise(rng));
    g.add_factor(Factor::between(n - 1, 0, z, info(rng)).unwrap()).unwrap();
    (g, truth)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = SolverConfig::default();
    let mut problems = Vec::new();

    let mut worst_zero = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(3..10);
        let (g, truth) = loop_graph(&mut rng, n, true);
        let sol = optimize(&g, &cfg).unwrap();
        for (i, t) in truth.iter().enumerate() {
            worst_zero = worst_zero.max(sol.poses[&i].max_abs_diff(t));
        }
    }
    if worst_zero > 1e-9 {
        problems.push(format!("zero-residual graph moved by {worst_zero:e}"));
    }

    let mut worst_jac = 0.0f64;
    for _ in 0..200 {
        let pi = random_pose(&mut rng, 5.0, 2.0);
        let pj = random_pose(&mut rng, 5.0, 2.0);
        let noise = random_pose(&mut rng, 0.3, 0.3);
        let f = Factor::between(0, 1, pi.between(&pj).compose(&noise), info(&mut rng)).unwrap();
        let (_, ji, jj) = f.linearize(&pi, Some(&pj));
        worst_jac = worst_jac.max(rel_diff(&ji, &numeric_jacobian(&f, &pi, Some(&pj), 0)));
        worst_jac = worst_jac.max(rel_diff(&jj.unwrap(), &numeric_jacobian(&f, &pi, Some(&pj), 1)));
        let p = Factor::prior(0, pj.compose(&noise), info(&mut rng)).unwrap();
        let (_, jp, _) = p.linearize(&pi, None);
        worst_jac = worst_jac.max(rel_diff(&jp, &numeric_jacobian(&p, &pi, None, 0)));
    }
    if worst_jac > 1e-5 {
        problems.push(format!("Jacobian mismatch {worst_jac:e}"));
    }

    let mut worst_cost = 0.0f64;
    for _ in 0..5 {
        let n = rng.random_range(4..8);
        let (g, _) = loop_graph(&mut rng, n, false);
        let sol = optimize(&g, &cfg).unwrap();
        let oracle = dense_oracle_cost(&g);
        worst_cost = worst_cost.max((sol.final_cost - oracle).abs() / oracle.max(1e-300));
    }
    if worst_cost > 1e-6 {
        problems.push(format!("loop cost differs from dense oracle by {worst_cost:e} relative"));
    }
    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("zero-residual drift {worst_zero:.1e}, Jacobian {worst_jac:.1e} rel, loop cost {worst_cost:.1e} rel")
        } else {
            problems.join("; ")
        },
    }
}

// ---------------------------------------------------------------- 4-8

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn simulate(name: &str, dir: &Path) -> Dataset {
    let s = Scenario::load(&scenario(name)).expect("scenario loads");
    generate_dataset(&s, dir).expect("dataset generates")
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut all = true;

    let checks: [(&str, fn() -> Outcome); 3] = [
        ("merge algebra", criterion_1),
        ("registration recovery", criterion_2),
        ("pose-graph correctness", criterion_3),
    ];
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let t = Instant::now();
        let o = check();
        all &= report(i + 1, name, t.elapsed(), &o);
    }

    let quarry = simulate("quarry_wall.toml", &tmp.path().join("quarry"));
    let cfg = PipelineConfig::default();
    let sync = RunOptions { sync: true };
    let run_a = tmp.path().join("quarry_a");
    let t = Instant::now();
    let (out, metrics) = run_dataset(&quarry, &cfg, sync, &run_a).expect("quarry run");
    let quarry_time = t.elapsed();
    let m = metrics.expect("ground truth present");
    let ape = m.slam.ape_rms;
    let odom = m.odometry.ape_rms;
    let limit = 3.0 * cfg.tsdf.voxel_size;
    all &= report(
        4,
        "drift correction",
        quarry_time,
        &Outcome {
            pass: ape < 0.5 * odom && ape < limit && quarry_time.as_secs_f64() < 600.0,
            detail: format!(
                "APE {ape:.4} m vs odometry {odom:.4} m (need < {:.4}) and < {limit:.2} m; {} frames, {} submaps, {} loop closures; limit 600 s",
                0.5 * odom,
                out.trajectory.len(),
                out.submaps.len(),
                out.loop_closures.len()
            ),
        },
    );
    let map_limit = 1.5 * cfg.tsdf.voxel_size;
    all &= report(
        5,
        "map accuracy",
        Duration::ZERO,
        &match &m.map {
            Some(map) => Outcome {
                pass: map.e_map < map_limit,
                detail: format!("mean mesh distance {:.4} m (std {:.4}) vs limit {map_limit:.3} m", map.e_map, map.e_std_map),
            },
            None => Outcome {
                pass: false,
                detail: "no map error (empty mesh or no reference)".into(),
            },
        },
    );

    let tank = simulate("tank.toml", &tmp.path().join("tank"));
    let t = Instant::now();
    let (_, tm) = run_dataset(&tank, &cfg, sync, &tmp.path().join("tank_run")).expect("tank run");
    let tank_time = t.elapsed();
    let tm = tm.expect("ground truth present");
    all &= report(
        6,
        "tank yaw",
        tank_time,
        &Outcome {
            pass: tm.slam.final_yaw_error_deg.abs() < 5.0 && tank_time.as_secs_f64() < 300.0,
            detail: format!(
                "final yaw error {:.3} deg (odometry {:.3} deg), limit 5 deg and 300 s",
                tm.slam.final_yaw_error_deg, tm.odometry.final_yaw_error_deg
            ),
        },
    );

    let fe = out.timings.frontend_mean_ms();
    all &= report(
        7,
        "frontend throughput",
        Duration::ZERO,
        &Outcome {
            pass: fe < 160.0,
            detail: format!("{fe:.1} ms per frame on the quarry run, limit 160 ms"),
        },
    );

    let run_b = tmp.path().join("quarry_b");
    let t = Instant::now();
    run_dataset(&quarry, &cfg, sync, &run_b).expect("second quarry run");
    let same = |f: &str| std::fs::read(run_a.join(f)).ok() == std::fs::read(run_b.join(f)).ok();
    let files = ["est.tum", "metrics.json"];
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    all &= report(
        8,
        "determinism",
        t.elapsed(),
        &Outcome {
            pass: differing.is_empty(),
            detail: if differing.is_empty() {
                "est.tum and metrics.json are byte-identical across two sync runs".into()
            } else {
                format!("differing files: {}", differing.join(", "))
            },
        },
    );

    if !all {
        std::process::exit(1);
    }
}
