//! Synthetic multi-sequence phantoms with known ground truth.
//!
//! Each slice holds an LV blood-pool disc inside a myocardial annulus, a
//! crescent-shaped RV, an edema wedge of the annulus and a scar sub-wedge
//! inside it. Each sequence renders the classes with its own contrast plus
//! Gaussian noise and a random gain.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::Grid;
use crate::preprocess::Sequence;
use crate::volume_io::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Body,
    LvBp,
    RvBp,
    Normal,
    Edema,
    Scar,
}

impl Tissue {
    fn code(self) -> f64 {
        match self {
            Tissue::Background | Tissue::Body => 0.0,
            Tissue::LvBp => 500.0,
            Tissue::RvBp => 600.0,
            Tissue::Normal => 200.0,
            Tissue::Edema => 1220.0,
            Tissue::Scar => 2221.0,
        }
    }

    /// Mean intensity per sequence.
    fn contrast(self, seq: Sequence) -> f64 {
        use Tissue::*;
        match (seq, self) {
            (_, Background) => 0.0,
            (Sequence::Bssfp, Body) => 0.35,
            (Sequence::Bssfp, LvBp) => 0.9,
            (Sequence::Bssfp, RvBp) => 0.85,
            (Sequence::Bssfp, _) => 0.15,
            (Sequence::Lge, Body) => 0.3,
            (Sequence::Lge, LvBp) => 0.45,
            (Sequence::Lge, RvBp) => 0.4,
            (Sequence::Lge, Normal) => 0.05,
            (Sequence::Lge, _) => 0.85,
            (Sequence::T2, Body) => 0.3,
            (Sequence::T2, LvBp | RvBp) => 0.2,
            (Sequence::T2, Normal) => 0.25,
            (Sequence::T2, Edema) => 0.5,
            (Sequence::T2, Scar) => 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cx: f64,
    cy: f64,
    r_bp: f64,
    r_epi: f64,
    rv_cx: f64,
    rv_cy: f64,
    r_rv: f64,
    body_rx: f64,
    body_ry: f64,
    edema_angle: f64,
    edema_half: f64,
    scar_half: f64,
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        TAU - d
    } else {
        d
    }
}

impl Geometry {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cx = size / 2.0 + rng.gen_range(-0.06..0.06) * size;
        let cy = size / 2.0 + rng.gen_range(-0.06..0.06) * size;
        let r_bp = rng.gen_range(0.11..0.15) * size;
        let r_epi = r_bp + rng.gen_range(0.07..0.09) * size;
        let rv_angle = PI + rng.gen_range(-0.4..0.4);
        let r_rv = rng.gen_range(0.13..0.17) * size;
        let rv_dist = r_epi + 0.35 * r_rv;
        let edema_half = rng.gen_range(0.7..1.0);
        Geometry {
            cx,
            cy,
            r_bp,
            r_epi,
            rv_cx: cx + rv_dist * rv_angle.cos(),
            rv_cy: cy + rv_dist * rv_angle.sin(),
            r_rv,
            body_rx: rng.gen_range(0.38..0.44) * size,
            body_ry: rng.gen_range(0.32..0.40) * size,
            edema_angle: rng.gen_range(0.0..TAU),
            edema_half,
            scar_half: edema_half * rng.gen_range(0.5..0.7),
        }
    }

    /// Per-slice variation: radii shrink towards the apex, wedges drift.
    fn for_slice(&self, z: usize, rng: &mut ChaCha8Rng) -> Self {
        let shrink = 1.0 - 0.04 * z as f64;
        let mut g = *self;
        g.r_bp *= shrink;
        g.r_epi = g.r_bp + (self.r_epi - self.r_bp) * rng.gen_range(0.95..1.05);
        g.r_rv *= shrink;
        g.edema_angle += rng.gen_range(-0.15..0.15);
        g
    }

    fn tissue(&self, x: f64, y: f64) -> Tissue {
        let r = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt();
        if r < self.r_bp {
            return Tissue::LvBp;
        }
        if r < self.r_epi {
            let theta = (y - self.cy).atan2(x - self.cx);
            let d = angle_diff(theta, self.edema_angle);
            return if d < self.scar_half {
                Tissue::Scar
            } else if d < self.edema_half {
                Tissue::Edema
            } else {
                Tissue::Normal
            };
        }
        let rv = ((x - self.rv_cx).powi(2) + (y - self.rv_cy).powi(2)).sqrt();
        // septal gap keeps the RV off the LV wall
        if rv < self.r_rv && r > self.r_epi + 1.5 {
            return Tissue::RvBp;
        }
        let ex = (x - self.cx) / self.body_rx;
        let ey = (y - self.cy) / self.body_ry;
        if ex * ex + ey * ey < 1.0 {
            Tissue::Body
        } else {
            Tissue::Background
        }
    }
}

/// One phantom case: three sequence volumes and the label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub images: BTreeMap<Sequence, Volume>,
    pub labels: Volume,
}

pub const NOISE_SIGMA: f64 = 0.04;

/// Generates case `index` of the phantom set for `seed`, `size × size × slices`.
pub fn phantom_case(seed: u64, index: u64, size: usize, slices: usize) -> PhantomCase {
    assert!(size >= 32, "phantom size must be at least 32");
    assert!(slices >= 1, "phantom needs at least one slice");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let base = Geometry::random(&mut rng, size as f64);
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let mut label_slices = Vec::with_capacity(slices);
    let mut image_slices: BTreeMap<Sequence, Vec<Grid<f64>>> = BTreeMap::new();
    for z in 0..slices {
        let g = base.for_slice(z, &mut rng);
        let tissue = Grid::from_fn(size, size, |y, x| g.tissue(x as f64 + 0.5, y as f64 + 0.5));
        label_slices.push(tissue.map(Tissue::code));
        for seq in Sequence::ALL {
            let gain = rng.gen_range(800.0..1200.0);
            let img = Grid::from_fn(size, size, |y, x| {
                let t = tissue.get(y, x);
                gain * (t.contrast(seq) + noise.sample(&mut rng)).max(0.0)
            });
            image_slices.entry(seq).or_default().push(img);
        }
    }
    PhantomCase {
        images: image_slices.into_iter().map(|(s, v)| (s, Volume::from_slices(&v, false))).collect(),
        labels: Volume::from_slices(&label_slices, true),
    }
}

pub fn phantom_set(seed: u64, n_cases: usize, size: usize, slices: usize) -> Vec<PhantomCase> {
    (0..n_cases as u64).map(|i| phantom_case(seed, i, size, slices)).collect()
}
