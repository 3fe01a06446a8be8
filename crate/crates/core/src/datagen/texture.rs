//! Procedural per-vertex coat colors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelCard;

/// Base coat colors, linear RGB in `[0, 1]`.
pub const COAT_PALETTE: [[f64; 3]; 6] = [
    [0.55, 0.33, 0.18], // bay
    [0.72, 0.45, 0.22], // chestnut
    [0.20, 0.15, 0.12], // dark brown
    [0.82, 0.78, 0.70], // grey
    [0.85, 0.70, 0.45], // palomino
    [0.40, 0.38, 0.36], // dun
];

/// A textured appearance. `id` selects the palette entry and seeds the
/// noise field, so equal specs give equal colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    pub id: u64,
    /// Amplitude of the low-frequency brightness noise.
    pub noise: f64,
    /// Number of plane waves in the noise field.
    pub waves: usize,
    /// White lower legs instead of dark points.
    pub socks: bool,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            id: 0,
            noise: 0.08,
            waves: 6,
            socks: false,
        }
    }
}

impl TextureSpec {
    pub fn from_id(id: u64) -> Self {
        TextureSpec {
            id,
            socks: id % 3 == 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("texture noise must lie in [0, 0.5], got {}", self.noise)));
        }
        Ok(())
    }

    pub fn coat(&self) -> [f64; 3] {
        COAT_PALETTE[(self.id % COAT_PALETTE.len() as u64) as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Body,
    Belly,
    Mane,
    Tail,
    LowerLeg,
}

fn scale(c: [f64; 3], s: f64) -> [f64; 3] {
    c.map(|x| x * s)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|k| a[k] + t * (b[k] - a[k]))
}

/// Region of each vertex from its dominant skinning joint. Lower legs are
/// the last two joints of each `leg*` chain; the belly is the underside of
/// vertices dominated by the `spine` chain.
fn regions(card: &ModelCard) -> Vec<Region> {
    let nj = card.n_joints();
    let mut joint_region = vec![Region::Body; nj];
    for (name, chain) in &card.chains {
        if name.starts_with("leg") {
            for &j in chain.iter().skip(1) {
                joint_region[j] = Region::LowerLeg;
            }
        } else if name == "tail" {
            for &j in chain {
                joint_region[j] = Region::Tail;
            }
        } else if name == "neck" {
            // the last neck-chain joint is the head, which keeps the coat color
            for &j in chain.iter().take(chain.len().saturating_sub(1)) {
                joint_region[j] = Region::Mane;
            }
        }
    }
    let spine: Vec<usize> = card.chains.get("spine").cloned().unwrap_or_default();
    let center_y = card.center()[1];
    (0..card.n_vertices())
        .map(|v| {
            let j = (0..nj)
                .max_by(|&a, &b| card.weight(v, a).total_cmp(&card.weight(v, b)))
                .unwrap_or(0);
            match joint_region[j] {
                Region::Body if spine.contains(&j) && card.vertices[v][1] < center_y => Region::Belly,
                r => r,
            }
        })
        .collect()
}

/// Per-vertex RGB for `card` under `spec`, each channel in `[0, 1]`.
pub fn vertex_colors(card: &ModelCard, spec: &TextureSpec) -> Result<Vec<[f64; 3]>> {
    spec.validate()?;
    let coat = spec.coat();
    let points = if spec.socks { [0.92, 0.90, 0.86] } else { scale(coat, 0.35) };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.id ^ 0x7e47_u64);
    let length = card.body_length().max(f64::MIN_POSITIVE);
    // wavelengths between roughly a third and a whole body length
    let waves: Vec<([f64; 3], f64, f64)> = (0..spec.waves)
        .map(|_| {
            let d: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
            let k = std::f64::consts::TAU * rng.random_range(1.0..3.0) / length;
            (d.map(|x| x * k / n), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.2).sum::<f64>().max(1.0);
    let colors = regions(card)
        .iter()
        .zip(&card.vertices)
        .map(|(&region, p)| {
            let base = match region {
                Region::Body => coat,
                Region::Belly => mix(coat, [0.95, 0.92, 0.85], 0.35),
                Region::Mane | Region::Tail => scale(coat, 0.4),
                Region::LowerLeg => points,
            };
            let field: f64 = waves
                .iter()
                .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
                .sum::<f64>()
                / norm;
            base.map(|c| (c * (1.0 + spec.noise * field)).clamp(0.0, 1.0))
        })
        .collect();
    Ok(colors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_toy_quadruped;

    #[test]
    fn colors_are_deterministic_and_in_range() {
        let card = make_toy_quadruped(1);
        let a = vertex_colors(&card, &TextureSpec::from_id(4)).unwrap();
        let b = vertex_colors(&card, &TextureSpec::from_id(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), card.n_vertices());
        assert!(a.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        let c = vertex_colors(&card, &TextureSpec::from_id(5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn legs_differ_from_the_coat() {
        let card = make_toy_quadruped(0);
        let spec = TextureSpec { noise: 0.0, ..TextureSpec::from_id(0) };
        let colors = vertex_colors(&card, &spec).unwrap();
        let r = regions(&card);
        let leg = r.iter().position(|&x| x == Region::LowerLeg).expect("toy has lower legs");
        let body = r.iter().position(|&x| x == Region::Body).expect("toy has a body");
        assert_eq!(colors[body], spec.coat());
        assert_ne!(colors[leg], colors[body]);
        assert!(r.contains(&Region::Belly) && r.contains(&Region::Tail) && r.contains(&Region::Mane));
    }
}
