//! Digital brain phantom with deep grey nuclei, rendered in T1 and WMn
//! contrast through an arbitrary smooth spatial map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::image::{Grid, LabelVolume, Volume3D};
use crate::labels::LabelDictionary;
use crate::registration::AffineTransform;

/// Tissue class at a point of the canonical anatomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Csf,
    Gm,
    Wm,
    /// Deep structure with its label index.
    Nucleus(u16),
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Local coordinates; inside iff the squared norm is < 1.
    fn local(&self, u: [f64; 3], side: f64) -> [f64; 3] {
        [
            (u[0] - side * self.center[0]) / self.radii[0],
            (u[1] - self.center[1]) / self.radii[1],
            (u[2] - self.center[2]) / self.radii[2],
        ]
    }
}

fn norm2(v: [f64; 3]) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

const BRAIN: [f64; 3] = [0.9, 0.92, 0.80];
const THALAMUS: Ellipsoid = Ellipsoid {
    center: [0.15, -0.05, 0.05],
    radii: [0.13, 0.25, 0.16],
};
const LENTIFORM: Ellipsoid = Ellipsoid {
    center: [0.43, 0.03, 0.0],
    radii: [0.11, 0.22, 0.14],
};
const CAUDATE: Ellipsoid = Ellipsoid {
    center: [0.25, 0.36, 0.16],
    radii: [0.08, 0.15, 0.09],
};
const CLAUSTRUM: Ellipsoid = Ellipsoid {
    center: [0.65, 0.03, 0.0],
    radii: [0.07, 0.2, 0.13],
};
const RED_NUCLEUS: Ellipsoid = Ellipsoid {
    center: [0.12, -0.12, -0.23],
    radii: [0.1, 0.1, 0.1],
};
const VENTRICLE: Ellipsoid = Ellipsoid {
    center: [0.06, 0.22, 0.2],
    radii: [0.04, 0.2, 0.07],
};

/// Label indices that the phantom draws.
pub const PHANTOM_LABELS: [u16; 11] = [2, 6, 7, 8, 12, 27, 28, 29, 30, 31, 32];

/// Canonical anatomy at normalised coordinates `u` (brain half-width ≈ 1;
/// +x is the right hemisphere).
pub fn tissue_at(u: [f64; 3]) -> Tissue {
    let side = if u[0] < 0.0 { -1.0 } else { 1.0 };
    let m = |e: &Ellipsoid| e.local(u, side);
    let mirror = |v: [f64; 3]| [side * v[0], v[1], v[2]];

    let t = mirror(m(&THALAMUS));
    if norm2(t) < 1.0 {
        let label = if t[1] > 0.45 {
            2
        } else if t[1] < -0.4 {
            8
        } else if t[0] < -0.1 {
            12
        } else if t[2] > 0.0 {
            6
        } else {
            7
        };
        return Tissue::Nucleus(label);
    }
    let l = mirror(m(&LENTIFORM));
    if norm2(l) < 1.0 {
        let label = if l[0] > 0.0 {
            31
        } else if l[0] > -0.4 {
            29
        } else {
            30
        };
        return Tissue::Nucleus(label);
    }
    if norm2(m(&CAUDATE)) < 1.0 {
        return Tissue::Nucleus(27);
    }
    if norm2(m(&CLAUSTRUM)) < 1.0 {
        return Tissue::Nucleus(28);
    }
    if norm2(m(&RED_NUCLEUS)) < 1.0 {
        return Tissue::Nucleus(32);
    }
    if norm2(m(&VENTRICLE)) < 1.0 {
        return Tissue::Csf;
    }
    let rho = norm2([u[0] / BRAIN[0], u[1] / BRAIN[1], u[2] / BRAIN[2]]).sqrt();
    if rho < 0.86 {
        Tissue::Wm
    } else if rho < 1.0 {
        Tissue::Gm
    } else if rho < 1.07 {
        Tissue::Csf
    } else {
        Tissue::Background
    }
}

/// T1-weighted intensity (CSF < GM < WM).
pub fn t1_value(t: Tissue) -> f64 {
    match t {
        Tissue::Background => 0.0,
        Tissue::Csf => 0.20,
        Tissue::Gm => 0.50,
        Tissue::Wm => 0.85,
        Tissue::Nucleus(l) => match l {
            2 => 0.74,
            6 => 0.79,
            7 => 0.62,
            8 => 0.56,
            12 => 0.68,
            27 => 0.52,
            28 => 0.58,
            29 => 0.66,
            30 => 0.72,
            31 => 0.55,
            32 => 0.44,
            _ => 0.6,
        },
    }
}

/// Smooth decreasing map from T1 to WMn contrast on tissue.
fn inversion(t1: f64) -> f64 {
    1.05 - 1.1 * t1 + 0.1 * t1 * t1
}

/// White-matter-nulled intensity (WM dark, CSF bright).
pub fn wmn_value(t: Tissue) -> f64 {
    let offset = match t {
        Tissue::Background => return 0.0,
        Tissue::Nucleus(2) => 0.02,
        Tissue::Nucleus(8) => -0.02,
        Tissue::Nucleus(30) => 0.015,
        _ => 0.0,
    };
    inversion(t1_value(t)) + offset
}

/// Which rendering to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contrast {
    T1,
    Wmn,
}

/// Phantom geometry: maps world mm to normalised anatomy coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Frame {
    /// Frame filling `grid`: centred, half the smallest extent is unit length.
    pub fn for_grid(grid: &Grid) -> Frame {
        let d = grid.dims();
        let s = grid.spacing();
        let scale = (0..3).map(|a| d[a] as f64 * s[a] / 2.0).fold(f64::INFINITY, f64::min);
        Frame {
            center: grid.center_world(),
            scale,
        }
    }

    fn normalise(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }
}

/// Smooth subject→canonical world map: an affine plus a sum of sinusoids.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothWarp {
    pub affine: AffineTransform,
    /// Each wave adds `amplitude · sin(k · p + phase)` (mm).
    pub waves: Vec<Wave>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub amplitude: [f64; 3],
    pub k: [f64; 3],
    pub phase: f64,
}

impl SmoothWarp {
    pub fn identity() -> Self {
        SmoothWarp {
            affine: AffineTransform::identity(),
            waves: Vec::new(),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = self.affine.apply(p);
        for w in &self.waves {
            let s = (w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase).sin();
            for a in 0..3 {
                q[a] += w.amplitude[a] * s;
            }
        }
        q
    }

    /// Random warp about `center`: rotation up to `max_deg` about each axis,
    /// translation up to `max_shift` mm, scaling within `±max_scale`, and
    /// three waves of amplitude up to `amplitude` mm with wavelength at least
    /// `min_wavelength` mm.
    pub fn random(
        rng: &mut ChaCha8Rng,
        center: [f64; 3],
        max_deg: f64,
        max_shift: f64,
        max_scale: f64,
        amplitude: f64,
        min_wavelength: f64,
    ) -> Self {
        let mut sym = |m: f64| rng.random_range(-m..=m);
        let (ax, ay, az) = (sym(max_deg).to_radians(), sym(max_deg).to_radians(), sym(max_deg).to_radians());
        let rot = nalgebra::Rotation3::from_euler_angles(ax, ay, az).into_inner();
        let scale = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(
            1.0 + sym(max_scale),
            1.0 + sym(max_scale),
            1.0 + sym(max_scale),
        ));
        let lin = rot * scale;
        let c = nalgebra::Vector3::from(center);
        let shift = nalgebra::Vector3::new(sym(max_shift), sym(max_shift), sym(max_shift));
        let t = c + shift - lin * c;
        let affine = AffineTransform::from_parts(lin, [t[0], t[1], t[2]]);
        let kmax = 2.0 * std::f64::consts::PI / min_wavelength;
        let waves = (0..3)
            .map(|_| {
                let mut k = [sym(1.0), sym(1.0), sym(1.0)];
                let n = norm2(k).sqrt().max(1e-6);
                let mag = kmax * (0.5 + 0.5 * sym(1.0).abs());
                k.iter_mut().for_each(|v| *v *= mag / n);
                Wave {
                    amplitude: [sym(amplitude), sym(amplitude), sym(amplitude)],
                    k,
                    phase: sym(std::f64::consts::PI),
                }
            })
            .collect();
        SmoothWarp { affine, waves }
    }
}

/// Rendering options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Sub-samples per axis for partial-volume intensities.
    pub supersample: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Multiplicative intensity gain applied to foreground.
    pub gain: f64,
    /// Relative amplitude of an anatomy-attached intensity texture.
    pub texture: f64,
    /// Intensity given to background (before texture), in both contrasts.
    pub backdrop: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            supersample: 2,
            noise_sigma: 0.0,
            gain: 1.0,
            texture: 0.0,
            backdrop: 0.0,
        }
    }
}

const TEXTURE_WAVES: [([f64; 3], f64); 6] = [
    ([1.0, 0.3, -0.2], 0.3),
    ([-0.2, 1.0, 0.4], 1.1),
    ([0.3, -0.4, 1.0], 2.3),
    ([0.7, 0.7, 0.1], 0.7),
    ([-0.6, 0.2, 0.8], 1.9),
    ([0.1, -0.8, -0.6], 2.8),
];

/// Smooth pattern in [-1, 1] with wavelength about 0.25 normalised units.
fn texture_at(u: [f64; 3]) -> f64 {
    let f = 2.0 * std::f64::consts::PI / 0.25;
    TEXTURE_WAVES
        .iter()
        .map(|(k, ph)| {
            let n = norm2(*k).sqrt();
            (f * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2]) / n + ph).sin()
        })
        .sum::<f64>()
        / TEXTURE_WAVES.len() as f64
}

/// One rendered subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub t1: Volume3D,
    pub wmn: Volume3D,
    pub labels_left: LabelVolume,
    pub labels_right: LabelVolume,
}

/// Render the canonical anatomy (placed by `frame`) on `grid`, pulled back
/// through `warp` (subject world → canonical world).
pub fn render(grid: &Grid, frame: &Frame, warp: &(dyn Fn([f64; 3]) -> [f64; 3] + Sync), opts: &RenderOptions, seed: u64) -> Phantom {
    let ss = opts.supersample.max(1);
    let offsets: Vec<f64> = (0..ss).map(|i| (i as f64 + 0.5) / ss as f64 - 0.5).collect();
    let per_voxel: Vec<(f64, f64, u16, bool)> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let c = grid.coords(idx).map(|v| v as f64);
            let mut t1 = 0.0;
            let mut wm = 0.0;
            for oz in &offsets {
                for oy in &offsets {
                    for ox in &offsets {
                        let p = grid.voxel_to_world([c[0] + ox, c[1] + oy, c[2] + oz]);
                        let u = frame.normalise(warp(p));
                        let t = tissue_at(u);
                        let m = if opts.texture > 0.0 { 1.0 + opts.texture * texture_at(u) } else { 1.0 };
                        let (a, b) = match t {
                            Tissue::Background => (opts.backdrop, opts.backdrop),
                            _ => (t1_value(t), wmn_value(t)),
                        };
                        t1 += a * m;
                        wm += b * m;
                    }
                }
            }
            let n = (ss * ss * ss) as f64;
            let u = frame.normalise(warp(grid.voxel_to_world(c)));
            let label = match tissue_at(u) {
                Tissue::Nucleus(l) => l,
                _ => 0,
            };
            (t1 / n, wm / n, label, u[0] < 0.0)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, opts.noise_sigma.max(0.0)).expect("finite sigma");
    let mut noisy = |v: f64| {
        let base = v * opts.gain;
        if opts.noise_sigma > 0.0 && v > 0.0 {
            (base + normal.sample(&mut rng)).max(0.0)
        } else {
            base
        }
    };
    let t1: Vec<f64> = per_voxel.iter().map(|v| noisy(v.0)).collect();
    let wmn: Vec<f64> = per_voxel.iter().map(|v| noisy(v.1)).collect();
    let dict = LabelDictionary::standard();
    let left: Vec<u16> = per_voxel.iter().map(|v| if v.3 { v.2 } else { 0 }).collect();
    let right: Vec<u16> = per_voxel.iter().map(|v| if v.3 { 0 } else { v.2 }).collect();
    Phantom {
        t1: Volume3D::from_parts_unchecked(grid.clone(), t1),
        wmn: Volume3D::from_parts_unchecked(grid.clone(), wmn),
        labels_left: LabelVolume::from_parts_unchecked(grid.clone(), left, dict.clone()),
        labels_right: LabelVolume::from_parts_unchecked(grid.clone(), right, dict),
    }
}

/// Canonical phantom on `grid` without deformation or noise.
pub fn canonical(grid: &Grid) -> Phantom {
    let frame = Frame::for_grid(grid);
    render(grid, &frame, &|p| p, &RenderOptions::default(), 0)
}

/// Render `contrast` only.
pub fn render_contrast(
    grid: &Grid,
    warp: &(dyn Fn([f64; 3]) -> [f64; 3] + Sync),
    contrast: Contrast,
    opts: &RenderOptions,
) -> Volume3D {
    let frame = Frame::for_grid(grid);
    let p = render(grid, &frame, warp, opts, 0);
    match contrast {
        Contrast::T1 => p.t1,
        Contrast::Wmn => p.wmn,
    }
}
