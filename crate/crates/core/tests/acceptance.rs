//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=2,3,10` restricts the run to the listed criteria.

mod common;

use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use skinsplat::autodiff::check::check_gradient;
use skinsplat::autodiff::{Shape, Tape, Var};
use skinsplat::camera::{PinholeCamera, TrajectoryKind, TrajectorySampler};
use skinsplat::datagen::{
    estimator_source, generate_clip, procedural_gait, ClipBundle, ClipConfig, EstimatorSource, GaitKind, OracleNoise,
    TextureSpec,
};
use skinsplat::gaussian::{deform_lbs, init_bound_set, BoundGaussianSet};
use skinsplat::losses::LossWeights;
use skinsplat::metrics::{accel, chamfer, pck, procrustes_align, psnr, ssim, PSNR_CAP};
use skinsplat::model::{forward, keypoints_3d, make_toy_quadruped, subdivide, KeypointAnchor, ModelCard, PoseState};
use skinsplat::optim::{
    fit_avatar, fit_motion, motion_objective, stitch_windows, AvatarFitConfig, FrameParams, FrameVars, MotionFitConfig,
    MotionProblem,
};
use skinsplat::render::{splat_render, Image, SplatConfig};

type Outcome = Result<String, String>;

fn toy() -> &'static ModelCard {
    static CARD: OnceLock<ModelCard> = OnceLock::new();
    CARD.get_or_init(|| make_toy_quadruped(0))
}

fn within(what: &str, value: f64, limit: f64) -> Outcome {
    if value <= limit {
        Ok(format!("{what} {value:.3e} <= {limit:.0e}"))
    } else {
        Err(format!("{what} {value:.3e} exceeds {limit:.0e}"))
    }
}

fn in_time(detail: String, elapsed: Duration, budget: Duration) -> Outcome {
    if elapsed <= budget {
        Ok(detail)
    } else {
        Err(format!("{detail}; took {:.1} s, budget {} s", elapsed.as_secs_f64(), budget.as_secs()))
    }
}

fn small_clip(card: &ModelCard, frames: usize, size: u32, seed: u64) -> ClipBundle {
    let motion = procedural_gait(card, GaitKind::Walk, frames, 60.0, seed, 1.0).unwrap();
    let cfg = ClipConfig { width: size, height: size, ..ClipConfig::default() };
    generate_clip(card, &motion, &TextureSpec::from_id(seed), None, frames, seed, &cfg).unwrap()
}

/// Full motion objective with stage-one weights and every parameter group
/// free, checked against central differences.
fn autodiff_gradient() -> Outcome {
    let card = Arc::new(toy().clone());
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let clip = small_clip(&card, 2, 64, seed);
        let noise = OracleNoise { sigma_beta: 0.1, sigma_theta: 0.1, sigma_gamma: 0.02, seed };
        let init = estimator_source(&card, &EstimatorSource::NoisyOracle(noise), Some(&clip)).unwrap();
        let problem = MotionProblem::new(card.clone(), clip.evidence(), Default::default(), 1).unwrap();
        let mut rng = common::rng(1000 + seed);
        let params: Vec<FrameParams> = init
            .iter()
            .map(|s| {
                let mut p = FrameParams::from_state(s);
                p.cam_delta = std::array::from_fn(|_| rng.random_range(-0.02..0.02));
                p.log_focal = rng.random_range(-0.05..0.05);
                p
            })
            .collect();
        let mut inputs = Vec::new();
        for p in &params {
            inputs.push((p.beta.clone(), Shape::Vector(p.beta.len())));
            inputs.push((p.theta.clone(), Shape::Matrix(p.theta.len() / 3, 3)));
            inputs.push((p.gamma.to_vec(), Shape::Vector(3)));
            inputs.push((p.cam_delta.to_vec(), Shape::Vector(3)));
            inputs.push((p.cam_translation.to_vec(), Shape::Vector(3)));
            inputs.push((vec![p.log_focal], Shape::Scalar));
        }
        let bases: Vec<&PinholeCamera> = params.iter().map(|p| &p.base_camera).collect();
        let weights = LossWeights::motion_stage1();
        let check = check_gradient(&inputs, 1e-6, |tape: &mut Tape, vars: &[Var]| {
            let frames: Vec<FrameVars> = vars
                .chunks_exact(6)
                .map(|v| FrameVars {
                    beta: v[0],
                    theta: v[1],
                    gamma: v[2],
                    cam_delta: v[3],
                    cam_translation: v[4],
                    log_focal: v[5],
                })
                .collect();
            Ok(motion_objective(tape, &problem, &frames, &bases, &weights)?.0)
        })
        .unwrap();
        worst = worst.max(check.max_rel_err);
    }
    let detail = within("max relative error over 20 seeds", worst, 1e-4)?;
    in_time(format!("{detail}, {:.1} s", start.elapsed().as_secs_f64()), start.elapsed(), Duration::from_secs(120))
}

fn random_state(card: &ModelCard, rng: &mut rand_chacha::ChaCha8Rng) -> PoseState {
    let n = Normal::new(0.0, 1.0).unwrap();
    let cam = PinholeCamera::look_at([0.0, 1.0, 6.0], [0.0, 1.0, 0.0], 64, 64).unwrap();
    PoseState {
        beta: (0..card.n_shape).map(|_| n.sample(rng)).collect(),
        theta: (0..card.n_joints()).map(|_| std::array::from_fn(|_| 0.4 * n.sample(rng))).collect(),
        gamma: std::array::from_fn(|_| n.sample(rng)),
        camera: cam,
    }
}

fn max_vertex_error(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f64::max)
}

fn lbs_oracle() -> Outcome {
    let card = toy();
    let mut rng = common::rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let state = random_state(card, &mut rng);
        let ours = forward(card, &state).unwrap().vertices;
        worst = worst.max(max_vertex_error(&ours, &common::naive_lbs(card, &state)));
    }
    let rest = PoseState::rest(card, random_state(card, &mut rng).camera);
    let identity = max_vertex_error(&forward(card, &rest).unwrap().vertices, &card.vertices);
    let a = within("max error over 100 random states", worst, 1e-9)?;
    let b = within("identity pose vs template", identity, 1e-12)?;
    Ok(format!("{a}; {b}"))
}

fn splat_oracle() -> Outcome {
    let mut rng = common::rng(3);
    let cfg = SplatConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let eye = [rng.random_range(-1.5..1.5), rng.random_range(-0.5..1.0), 5.0];
        let cam = PinholeCamera::look_at(eye, [0.0; 3], 64, 64).unwrap();
        let n = rng.random_range(1..=200);
        let g = common::random_scene(&mut rng, n);
        let bg = [rng.random(), rng.random(), rng.random()];
        let ours = splat_render(&g, &cam, bg, &cfg).unwrap();
        worst = worst.max(common::splat_oracle_error(&ours, &common::brute_force_splat(&g, &cam, bg, &cfg)));
    }
    within("max per-channel error over 50 scenes", worst, 1e-5)
}

fn projected_keypoints(card: &ModelCard, states: &[PoseState]) -> (Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; 3]>>) {
    states
        .iter()
        .map(|s| {
            let kp = keypoints_3d(card, &forward(card, s).unwrap());
            (kp.iter().map(|&p| s.camera.project_point(p).pixel).collect(), kp)
        })
        .unzip()
}

/// Body-length-normalized 3-D keypoint acceleration.
fn accel_3d(card: &ModelCard, tracks: &[Vec<[f64; 3]>]) -> f64 {
    accel(tracks).unwrap() / card.body_length()
}

fn motion_round_trip() -> Outcome {
    let card = toy();
    let clip = small_clip(card, 16, 256, 7);
    let noise = OracleNoise { sigma_theta: 0.1, seed: 7, ..Default::default() };
    let init = estimator_source(card, &EstimatorSource::NoisyOracle(noise), Some(&clip)).unwrap();
    let (init_2d, init_3d) = projected_keypoints(card, &init);
    let pck_init = pck(&init_2d, &clip.keypoints_2d, &clip.visible, 0.05).unwrap().percent;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let fit = pool
        .install(|| fit_motion(Arc::new(card.clone()), &clip.evidence(), &init, &MotionFitConfig::default()))
        .map_err(|e| format!("fit failed: {e}"))?;
    let elapsed = start.elapsed();
    if fit.trace.rows.iter().any(|r| !r.total.is_finite()) {
        return Err("non-finite loss in trace".into());
    }
    let (fit_2d, fit_3d) = projected_keypoints(card, &fit.states);
    let pck_fit = pck(&fit_2d, &clip.keypoints_2d, &clip.visible, 0.05).unwrap().percent;
    let (a0, a1) = (accel_3d(card, &init_3d), accel_3d(card, &fit_3d));
    let detail = format!(
        "PCK@0.05 {pck_init:.1} -> {pck_fit:.1} (need >= 95); 3-D Accel {a0:.3e} -> {a1:.3e} body lengths/frame^2; {:.1} s single-threaded",
        elapsed.as_secs_f64()
    );
    if pck_fit < 95.0 || a1 > a0 {
        return Err(detail);
    }
    in_time(detail, elapsed, Duration::from_secs(20 * 60))
}

struct AvatarRun {
    scene: common::AvatarScene,
    fitted: BoundGaussianSet,
    elapsed: Duration,
}

/// Avatar fitted once to eight views of gait frame 0 and shared by the
/// novel-view and novel-pose checks.
fn avatar_run() -> &'static AvatarRun {
    static RUN: OnceLock<AvatarRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let card = toy();
        let scene = common::AvatarScene::new(card, 1, 256);
        let views = scene.training_views(card, 0);
        let set = init_bound_set(Arc::new(subdivide(card).unwrap()));
        let start = Instant::now();
        let fit = fit_avatar(&set, &views, &AvatarFitConfig::default()).unwrap();
        assert!(fit.trace.rows.iter().all(|r| r.total.is_finite()), "non-finite avatar loss");
        AvatarRun { scene, fitted: fit.set, elapsed: start.elapsed() }
    })
}

fn render_avatar(set: &BoundGaussianSet, state: &PoseState) -> Image {
    let g = deform_lbs(set, state).unwrap();
    splat_render(&g, &state.camera, [0.0; 3], &SplatConfig::default()).unwrap().color
}

fn avatar_novel_view() -> Outcome {
    let card = toy();
    let run = avatar_run();
    let held = run.scene.view(card, 0, run.scene.camera(card, 22.5, 3.0));
    let img = render_avatar(&run.fitted, &held.state);
    let (p, s) = (psnr(&img, &held.image).unwrap(), ssim(&img, &held.image).unwrap());
    let detail = format!(
        "held-out view PSNR {p:.2} dB (need >= 25), SSIM {s:.4} (need >= 0.85); fit {:.1} s",
        run.elapsed.as_secs_f64()
    );
    if p < 25.0 || s < 0.85 {
        return Err(detail);
    }
    in_time(detail, run.elapsed, Duration::from_secs(30 * 60))
}

fn avatar_novel_pose() -> Outcome {
    let card = toy();
    let run = avatar_run();
    let trot = procedural_gait(card, GaitKind::Trot, 16, 60.0, 11, 1.0).unwrap();
    let cam = run.scene.camera(card, 22.5, 3.0);
    let state_b = PoseState { beta: vec![0.0; card.n_shape], theta: trot.theta[6].clone(), gamma: trot.gamma[6], camera: cam };
    let mut scene_b = common::AvatarScene::new(card, 1, 256);
    scene_b.motion = trot;
    let gt = scene_b.view(card, 6, state_b.camera.clone());
    let img = render_avatar(&run.fitted, &state_b);
    let p = psnr(&img, &gt.image).unwrap();
    let pose_a = run.scene.view(card, 0, state_b.camera.clone()).state;
    let moved = forward(card, &pose_a).unwrap().vertices;
    let shift = max_vertex_error(&moved, &forward(card, &state_b).unwrap().vertices) / card.body_length();
    let detail = format!("unseen pose PSNR {p:.2} dB (need >= 20); max vertex shift A->B {shift:.3} body lengths");
    if p >= 20.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sampler_statistics() -> Outcome {
    let sampler = TrajectorySampler::default();
    let mut rng = common::rng(7);
    let mut counts = [0usize; 3];
    let n = 10_000;
    for _ in 0..n {
        let t = sampler.sample(&mut rng, 16, 1.0);
        counts[match t.kind {
            TrajectoryKind::Fix => 0,
            TrajectoryKind::Dolly => 1,
            TrajectoryKind::Orbit => 2,
        }] += 1;
        if !(t.pitch_deg > -15.0 && t.pitch_deg < 15.0) {
            return Err(format!("pitch {} outside (-15, 15)", t.pitch_deg));
        }
        if !(t.azimuth_deg > -180.0 && t.azimuth_deg < 180.0) {
            return Err(format!("azimuth {} outside (-180, 180)", t.azimuth_deg));
        }
    }
    let freq = counts.map(|c| c as f64 / n as f64);
    let detail = format!("fix/dolly/orbit {:.4}/{:.4}/{:.4}; all angles inside the open ranges", freq[0], freq[1], freq[2]);
    if freq.iter().zip([0.4, 0.3, 0.3]).all(|(f, p)| (f - p).abs() <= 0.03) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn exact(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, expected {want}"))
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = common::rng(8);
    let mut worst_cd: f64 = 0.0;
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..=500), rng.random_range(1..=500));
        let (a, b) = (common::random_cloud(&mut rng, n), common::random_cloud(&mut rng, m));
        worst_cd = worst_cd.max((chamfer(&a, &b).unwrap() - common::brute_chamfer(&a, &b)).abs());
    }
    let cd = within("chamfer vs brute force", worst_cd, 1e-9)?;

    let src = common::random_cloud(&mut rng, 40);
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let rot = Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.1..3.0));
    let shift = Vector3::new(0.3, -1.2, 2.5);
    let dst: Vec<[f64; 3]> = src.iter().map(|p| (rot * Vector3::from(*p) * 2.0 + shift).into()).collect();
    let sim = procrustes_align(&src, &dst).unwrap();
    let aligned: Vec<[f64; 3]> = src.iter().map(|&p| sim.apply(p)).collect();
    let residual = max_vertex_error(&aligned, &dst);
    let pa = within("Procrustes residual", residual, 1e-9)?;
    exact("Procrustes scale", sim.scale, 2.0, 1e-9)?;

    // Threshold 0.05 * 100 px = 5 px: offsets 3 and 5 pass, 5.5 and 8 fail.
    let gt = vec![vec![[0.0, 0.0], [100.0, 0.0], [100.0, 50.0], [0.0, 50.0]]];
    let pred = vec![vec![[3.0, 0.0], [100.0, 5.0], [94.5, 50.0], [0.0, 42.0]]];
    exact("PCK", pck(&pred, &gt, &[vec![true; 4]], 0.05).unwrap().percent, 50.0, 0.0)?;

    let a = [0.5, -1.25, 2.0];
    let quad: Vec<Vec<[f64; 3]>> = (0..6).map(|t| vec![a.map(|x| x * (t * t) as f64)]).collect();
    let norm = 2.0 * a.iter().map(|x| x * x).sum::<f64>().sqrt();
    exact("Accel of a t^2", accel(&quad).unwrap(), norm, 1e-12)?;
    let linear: Vec<Vec<[f64; 3]>> = (0..6).map(|t| vec![a.map(|x| x * t as f64 + 1.0)]).collect();
    exact("Accel of a linear track", accel(&linear).unwrap(), 0.0, 0.0)?;

    let data: Vec<f64> = (0..32 * 24 * 3).map(|_| rng.random_range(0.1..0.9)).collect();
    let x = Image::from_data(32, 24, 3, data.clone()).unwrap();
    let shifted = Image::from_data(32, 24, 3, data.iter().map(|v| v + 0.1).collect()).unwrap();
    exact("PSNR at constant offset 0.1", psnr(&shifted, &x).unwrap(), 20.0, 1e-9)?;
    exact("PSNR of identical images", psnr(&x, &x).unwrap(), PSNR_CAP, 0.0)?;
    exact("SSIM of identical images", ssim(&x, &x).unwrap(), 1.0, 1e-12)?;
    Ok(format!("{cd}; {pa}; PCK, Accel, PSNR and SSIM closed forms match"))
}

/// Unit tetrahedron skinned to the toy's root joint.
fn tetrahedron() -> ModelCard {
    let mut card = make_toy_quadruped(0);
    card.vertices = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    card.faces = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
    let nj = card.n_joints();
    card.skin_weights = (0..4).flat_map(|_| (0..nj).map(|j| if j == 0 { 1.0 } else { 0.0 })).collect();
    card.shape_basis = vec![0.0; 4 * 3 * card.n_shape];
    card.muscle_regions.clear();
    card.keypoint_anchors = vec![KeypointAnchor::Joint(0)];
    card.keypoint_names.truncate(1);
    card
}

fn subdivision_counts() -> Outcome {
    let mut notes = Vec::new();
    for (name, card) in [("tetrahedron", tetrahedron()), ("toy", toy().clone())] {
        let (v, e, f) = (card.n_vertices(), common::count_edges(&card.faces), card.faces.len());
        let fine = subdivide(&card).map_err(|err| format!("{name}: {err}"))?;
        if fine.n_vertices() != v + e || fine.faces.len() != 4 * f {
            return Err(format!(
                "{name}: V'={} F'={}, expected {} and {}",
                fine.n_vertices(),
                fine.faces.len(),
                v + e,
                4 * f
            ));
        }
        let nj = fine.n_joints();
        let unity = (0..fine.n_vertices())
            .map(|i| ((0..nj).map(|j| fine.weight(i, j)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        notes.push(within(&format!("{name} V'={} F'={} weight-sum error", fine.n_vertices(), fine.faces.len()), unity, 1e-6)?);
    }
    Ok(notes.join("; "))
}

fn stitching_ramp() -> Outcome {
    let card = toy();
    let cam = PinholeCamera::look_at([0.0, 1.0, 6.0], [0.0, 1.0, 0.0], 64, 64).unwrap();
    let mut base = PoseState::rest(card, cam);
    base.theta.iter_mut().enumerate().for_each(|(j, w)| *w = [0.01 * j as f64, -0.2, 0.3]);
    base.beta.iter_mut().for_each(|b| *b = 0.5);
    let offset = 0.25;
    let mut later = base.clone();
    later.beta.iter_mut().for_each(|b| *b += offset);
    later.theta.iter_mut().flatten().for_each(|x| *x += offset);
    later.gamma.iter_mut().for_each(|x| *x += offset);
    later.camera.translation.iter_mut().for_each(|x| *x += offset);
    later.camera.fx += offset;
    later.camera.fy += offset;
    let (window, stride, total) = (16, 8, 24);
    let out = stitch_windows(&[vec![base.clone(); window], vec![later; window]], window, stride, total)
        .map_err(|e| e.to_string())?;
    let overlap = window - stride;
    let mut worst: f64 = 0.0;
    for (t, s) in out.iter().enumerate() {
        let ramp = if t < stride {
            0.0
        } else if t < window {
            (t - stride + 1) as f64 / (overlap + 1) as f64
        } else {
            1.0
        };
        let want = offset * ramp;
        let diffs = s
            .beta
            .iter()
            .zip(&base.beta)
            .chain(s.theta.iter().flatten().zip(base.theta.iter().flatten()))
            .chain(s.gamma.iter().zip(&base.gamma))
            .chain(s.camera.translation.iter().zip(&base.camera.translation))
            .chain([(&s.camera.fx, &base.camera.fx), (&s.camera.fy, &base.camera.fy)]);
        for (x, b) in diffs {
            worst = worst.max((x - b - want).abs());
        }
        if s.camera.rotation != base.camera.rotation {
            return Err(format!("frame {t}: camera rotation changed"));
        }
    }
    within(&format!("deviation from the (i+1)/{} ramp", overlap + 1), worst, 1e-12)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("autodiff gradient check", autodiff_gradient),
        ("LBS oracle", lbs_oracle),
        ("splat rasterizer oracle", splat_oracle),
        ("motion round trip", motion_round_trip),
        ("avatar novel view", avatar_novel_view),
        ("avatar novel pose", avatar_novel_pose),
        ("trajectory sampler statistics", sampler_statistics),
        ("metric oracles", metric_oracles),
        ("subdivision counting", subdivision_counts),
        ("sliding-window stitching", stitching_ramp),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // The default test runner passes flags such as `--nocapture`; a bare
    // word narrows the run to criteria whose name contains it.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with("--"));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) || filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
