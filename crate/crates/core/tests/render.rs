mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skinsplat::camera::PinholeCamera;
use skinsplat::model::{forward, make_toy_quadruped, PoseState};
use skinsplat::render::mesh::point_in_triangle;
use skinsplat::render::{mesh_raster, soft_silhouette, splat_render, SilhouetteConfig, SplatConfig};

#[test]
fn tiled_splatting_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = SplatConfig::default();
    let mut worst: f64 = 0.0;
    for scene in 0..10 {
        let cam = PinholeCamera::look_at([rng.random_range(-1.0..1.0), 0.3, 5.0], [0.0; 3], 64, 64).unwrap();
        let g = common::random_scene(&mut rng, 40 + scene * 16);
        let bg = [rng.random(), rng.random(), rng.random()];
        let ours = splat_render(&g, &cam, bg, &cfg).unwrap();
        let oracle = common::brute_force_splat(&g, &cam, bg, &cfg);
        worst = worst.max(common::splat_oracle_error(&ours, &oracle));
    }
    assert!(worst <= 1e-5, "max channel error {worst}");
}

#[test]
fn mask_matches_point_in_triangle_scan() {
    let card = make_toy_quadruped(0);
    let cam = PinholeCamera::look_at([0.2, 1.1, 5.0], [0.2, 1.0, 0.0], 96, 80).unwrap();
    let state = PoseState::rest(&card, cam.clone());
    let mesh = forward(&card, &state).unwrap();
    let colors = vec![[0.7, 0.5, 0.3]; card.n_vertices()];
    let out = mesh_raster(&mesh.vertices, &card.faces, &colors, &cam, [0.3, 1.0, 0.6], [0.0; 3]).unwrap();
    let proj: Vec<[f64; 2]> = mesh.vertices.iter().map(|&p| cam.project_point(p).pixel).collect();
    let mut count = 0;
    for y in 0..80 {
        for x in 0..96 {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            if card.faces.iter().any(|f| point_in_triangle(proj[f[0] as usize], proj[f[1] as usize], proj[f[2] as usize], p)) {
                count += 1;
            }
        }
    }
    let ours = out.mask.data.iter().filter(|&&m| m == 1.0).count();
    assert!(count > 500);
    assert_eq!(ours, count);
    assert!(out.mask.data.iter().all(|&m| m == 0.0 || m == 1.0));
}

fn soft_vs_hard_iou(cfg: &SilhouetteConfig) {
    let card = make_toy_quadruped(0);
    for eye in [[0.2, 1.1, 5.0], [4.0, 2.0, 2.0]] {
        let cam = PinholeCamera::look_at(eye, [0.1, 1.0, 0.0], 128, 128).unwrap();
        let mesh = forward(&card, &PoseState::rest(&card, cam.clone())).unwrap();
        let hard = mesh_raster(&mesh.vertices, &card.faces, &vec![[1.0; 3]; card.n_vertices()], &cam, [0.0, 1.0, 0.0], [0.0; 3])
            .unwrap()
            .mask;
        let soft = soft_silhouette(&mesh.vertices, &card.faces, &cam, cfg).unwrap();
        let (mut inter, mut union) = (0.0, 0.0);
        for (s, h) in soft.data.iter().zip(&hard.data) {
            assert!((0.0..=1.0).contains(s));
            let s = if *s >= 0.5 { 1.0 } else { 0.0 };
            inter += s * h;
            union += f64::max(s, *h);
        }
        let iou = inter / union;
        assert!(iou >= 0.95, "IoU {iou}");
    }
}

#[test]
fn soft_silhouette_thresholds_to_hard_mask() {
    soft_vs_hard_iou(&SilhouetteConfig::default());
}

#[test]
fn sharp_silhouette_approaches_hard_coverage() {
    soft_vs_hard_iou(&SilhouetteConfig { sharpness: 50.0, ..SilhouetteConfig::default() });
}
