//! Procedural brainstem phantoms and simulated multi-atlas label fusion.
//!
//! Geometry is written in a 96-voxel reference frame (x: left→right,
//! y: anterior→posterior, z: inferior→superior) and scaled to the requested
//! extent, so a 48³ phantom is the 96³ one at half resolution.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::labels::{Structure, NUM_CLASSES};
use crate::rng;
use crate::volume::{voxel_index, LabelVolume, Volume};

const REF: f64 = 96.0;

fn sq(x: f64) -> f64 {
    x * x
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaperedCylinder {
    /// Axis position `(x, y)`; the axis runs along z.
    pub axis: [f64; 2],
    pub z_range: [f64; 2],
    pub radius_bottom: f64,
    pub radius_top: f64,
}

impl TaperedCylinder {
    fn contains(&self, p: [f64; 3]) -> bool {
        let [z0, z1] = self.z_range;
        if p[2] < z0 || p[2] > z1 {
            return false;
        }
        let t = (p[2] - z0) / (z1 - z0);
        let r = self.radius_bottom + t * (self.radius_top - self.radius_bottom);
        let (dx, dy) = (p[0] - self.axis[0], p[1] - self.axis[1]);
        dx * dx + dy * dy <= r * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| sq((p[a] - self.center[a]) / self.radii[a])).sum()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }
}

/// Straight tube of constant radius between two points.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tube {
    pub from: [f64; 3],
    pub to: [f64; 3],
    pub radius: f64,
}

impl Tube {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|a| self.to[a] - self.from[a]);
        let v = [0, 1, 2].map(|a| p[a] - self.from[a]);
        let len2: f64 = d.iter().map(|x| x * x).sum();
        let t = if len2 > 0.0 { (v[0] * d[0] + v[1] * d[1] + v[2] * d[2]) / len2 } else { 0.0 };
        let t = t.clamp(0.0, 1.0);
        let dist2: f64 = (0..3).map(|a| sq(v[a] - t * d[a])).sum();
        dist2 <= self.radius * self.radius
    }
}

/// Shapes of the four structures in the 96-voxel reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Geometry {
    pub midbrain: TaperedCylinder,
    pub pons: Ellipsoid,
    pub medulla: TaperedCylinder,
    pub scp: [Tube; 2],
    /// Background anatomy posterior to the brainstem.
    pub cerebellum: Ellipsoid,
    /// Fluid space surrounding the brainstem.
    pub cistern: Ellipsoid,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            midbrain: TaperedCylinder { axis: [48.0, 50.0], z_range: [62.0, 84.0], radius_bottom: 15.5, radius_top: 19.0 },
            pons: Ellipsoid { center: [48.0, 42.0, 48.0], radii: [25.0, 19.5, 23.0] },
            medulla: TaperedCylinder { axis: [48.0, 50.0], z_range: [6.0, 38.0], radius_bottom: 10.0, radius_top: 13.5 },
            scp: [
                Tube { from: [41.0, 60.0, 76.0], to: [29.0, 80.0, 60.0], radius: 1.9 },
                Tube { from: [55.0, 60.0, 76.0], to: [67.0, 80.0, 60.0], radius: 1.9 },
            ],
            cerebellum: Ellipsoid { center: [48.0, 80.0, 46.0], radii: [38.0, 16.0, 20.0] },
            cistern: Ellipsoid { center: [48.0, 47.0, 48.0], radii: [30.0, 28.0, 46.0] },
        }
    }
}

impl Geometry {
    /// Label at a reference-frame point; overlaps resolve as
    /// SCP > midbrain > pons > medulla.
    pub fn label_at(&self, p: [f64; 3]) -> Structure {
        if self.scp.iter().any(|t| t.contains(p)) {
            Structure::Scp
        } else if self.midbrain.contains(p) {
            Structure::Midbrain
        } else if self.pons.contains(p) {
            Structure::Pons
        } else if self.medulla.contains(p) {
            Structure::Medulla
        } else {
            Structure::Background
        }
    }
}

/// Mean intensity of each tissue on a `[0, 1]` scale.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Intensities {
    /// Indexed by label code; the background entry is the outer tissue.
    pub class_means: [f64; NUM_CLASSES],
    pub cerebellum: f64,
    pub cistern: f64,
    /// Scales how far background anatomy (cerebellum, fluid, blobs)
    /// departs from the background mean; 0 makes the background uniform.
    pub background_contrast: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            class_means: [0.35, 0.72, 0.6, 0.5, 0.88],
            cerebellum: 0.45,
            cistern: 0.12,
            background_contrast: 1.0,
        }
    }
}

/// Per-subject random variation of pose and size.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Jitter {
    /// Isotropic scale drawn from `1 ± scale`.
    pub scale: f64,
    /// Rotation about each axis, up to ± this many degrees.
    pub rotation_deg: f64,
    /// Translation along each axis, up to ± this many reference voxels.
    pub translation: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter { scale: 0.08, rotation_deg: 6.0, translation: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PhantomSpec {
    pub extent: [usize; 3],
    pub spacing: [f64; 3],
    pub geometry: Geometry,
    pub intensities: Intensities,
    /// Gaussian noise standard deviation on the `[0, 1]` scale.
    pub noise_sigma: f64,
    /// Peak relative deviation of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
    pub jitter: Jitter,
    /// Stored intensity of a unit-scale voxel.
    pub intensity_scale: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: [96; 3],
            spacing: [1.0; 3],
            geometry: Geometry::default(),
            intensities: Intensities::default(),
            noise_sigma: 0.05,
            bias_amplitude: 0.15,
            jitter: Jitter::default(),
            intensity_scale: 1000.0,
        }
    }
}

impl PhantomSpec {
    pub fn with_extent(extent: usize) -> Self {
        let mm = REF / extent as f64;
        PhantomSpec { extent: [extent; 3], spacing: [mm; 3], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.contains(&0) {
            return Err(Error::Config("phantom extent must be positive".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("phantom spacing must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_amplitude >= 0.0) || self.bias_amplitude >= 1.0 {
            return Err(Error::Config("noise must be ≥ 0 and bias amplitude in [0, 1)".into()));
        }
        if !(self.jitter.scale >= 0.0 && self.jitter.scale < 1.0) {
            return Err(Error::Config("scale jitter must be in [0, 1)".into()));
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

fn rotation(angles: [f64; 3]) -> Mat3 {
    let (sx, cx) = (libm::sin(angles[0]), libm::cos(angles[0]));
    let (sy, cy) = (libm::sin(angles[1]), libm::cos(angles[1]));
    let (sz, cz) = (libm::sin(angles[2]), libm::cos(angles[2]));
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mul(&rz, &mul(&ry, &rx))
}

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Maps grid voxels of one subject back into the canonical reference frame.
struct Pose {
    /// Grid → reference units, per axis.
    to_ref: [f64; 3],
    inv_rot: Mat3,
    scale: f64,
    shift: [f64; 3],
}

impl Pose {
    fn draw(spec: &PhantomSpec, r: &mut ChaCha8Rng) -> Self {
        let j = spec.jitter;
        let sym = |r: &mut ChaCha8Rng, m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
        let scale = 1.0 + sym(r, j.scale);
        let deg = core::f64::consts::PI / 180.0;
        let angles = [0, 1, 2].map(|_| sym(r, j.rotation_deg) * deg);
        let shift = [0, 1, 2].map(|_| sym(r, j.translation));
        let rot = rotation(angles);
        let mut inv_rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                inv_rot[i][k] = rot[k][i];
            }
        }
        Pose { to_ref: spec.extent.map(|e| REF / e as f64), inv_rot, scale, shift }
    }

    fn canonical(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let g = [x, y, z];
        let c = REF / 2.0;
        let p = [0, 1, 2].map(|a| ((g[a] as f64 + 0.5) * self.to_ref[a] - c - self.shift[a]) / self.scale);
        [0, 1, 2].map(|i| (0..3).map(|k| self.inv_rot[i][k] * p[k]).sum::<f64>() + c)
    }
}

/// Sum of a few random plane cosines, each varying along one grid axis,
/// bounded by 1 in magnitude. Its gradient norm is at most
/// `2π / wavelength` (in grid voxels).
struct SmoothField {
    /// Per term: axis, angular frequency, phase and amplitude.
    terms: Vec<(usize, f64, f64, f64)>,
}

impl SmoothField {
    fn draw(r: &mut ChaCha8Rng, terms: usize, wavelength: f64) -> Self {
        let two_pi = 2.0 * core::f64::consts::PI;
        let terms = (0..terms)
            .map(|_| {
                let axis = r.random_range(0..3usize);
                let k = two_pi * r.random_range(0.5..1.0) / wavelength;
                (axis, k, r.random_range(0.0..two_pi), r.random_range(0.5..1.0))
            })
            .collect();
        SmoothField { terms }
    }

    /// Per-term lookup tables along each term's axis at voxel centers.
    fn tables(&self, dims: [usize; 3]) -> Vec<(usize, Vec<f64>)> {
        let total: f64 = self.terms.iter().map(|t| t.3).sum();
        self.terms
            .iter()
            .map(|&(axis, k, phase, amp)| {
                let table = (0..dims[axis]).map(|g| amp / total * libm::cos(k * (g as f64 + 0.5) + phase)).collect();
                (axis, table)
            })
            .collect()
    }
}

fn sample_tables(tables: &[(usize, Vec<f64>)], g: [usize; 3]) -> f64 {
    tables.iter().map(|(axis, t)| t[g[*axis]]).sum()
}

/// Subject stream seed: a hash of the master seed and the subject id, so it
/// does not depend on the order subjects are generated in.
pub fn subject_seed(master: u64, id: &str) -> u64 {
    rng::derive_seed(master, &[rng::tag("subject"), rng::tag(id)])
}

/// Renders one subject: image and ground-truth labels.
pub fn generate_subject(spec: &PhantomSpec, seed: u64) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let mut r = rng::stream(seed, "phantom", &[]);
    let pose = Pose::draw(spec, &mut r);
    let longest = *spec.extent.iter().max().unwrap_or(&1) as f64;
    let bias = SmoothField::draw(&mut r, 4, 2.0 * longest).tables(spec.extent);
    let blobs: Vec<(Ellipsoid, f64)> = (0..8)
        .map(|_| {
            let center = [0, 1, 2].map(|_| r.random_range(0.0..REF));
            let radii = [0, 1, 2].map(|_| r.random_range(4.0..12.0));
            (Ellipsoid { center, radii }, r.random_range(-0.15..0.15))
        })
        .collect();
    let mut noise_rng = rng::stream(seed, "phantom-noise", &[]);

    let g = &spec.geometry;
    let it = &spec.intensities;
    let [nx, ny, nz] = spec.extent;
    let n = nx * ny * nz;
    let mut labels = vec![0u8; n];
    let mut image = vec![0f32; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = pose.canonical(x, y, z);
                let s = g.label_at(q);
                let mean = if s == Structure::Background {
                    let bg = it.class_means[0];
                    let tissue = if g.cerebellum.contains(q) {
                        it.cerebellum
                    } else if g.cistern.contains(q) {
                        it.cistern
                    } else {
                        bg + blobs.iter().filter(|(e, _)| e.contains(q)).map(|(_, d)| d).sum::<f64>()
                    };
                    bg + it.background_contrast * (tissue - bg)
                } else {
                    it.class_means[s.index()]
                };
                let field = 1.0 + spec.bias_amplitude * sample_tables(&bias, [x, y, z]);
                let noise = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let i = voxel_index(spec.extent, x, y, z);
                labels[i] = s.code();
                image[i] = ((mean * field + noise).max(0.0) * spec.intensity_scale) as f32;
            }
        }
    }
    let labels = LabelVolume::new(spec.extent, spec.spacing, labels)?;
    let counts = labels.counts();
    if let Some(class) = (1..NUM_CLASSES).find(|&c| counts[c] == 0) {
        return Err(Error::EmptyPhantomClass { class });
    }
    Ok((Volume::new(spec.extent, spec.spacing, image)?, labels))
}

/// Parameters of the simulated atlas-based labeler. Lengths are in voxels
/// of the label grid.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FusionSpec {
    /// Number of deformed atlas copies voted over.
    pub atlases: usize,
    /// Peak displacement.
    pub magnitude: f64,
    /// Shortest spatial wavelength of the displacement field.
    pub wavelength: f64,
    /// Share of the displacement common to all atlases (a systematic
    /// registration error that voting cannot average out), in `[0, 1]`.
    pub shared: f64,
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec { atlases: 15, magnitude: 2.0, wavelength: 32.0, shared: 0.5 }
    }
}

impl FusionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.atlases == 0 {
            return Err(Error::Config("fusion needs at least one atlas".into()));
        }
        if !(self.magnitude >= 0.0) || !(self.wavelength > 0.0) || !(0.0..=1.0).contains(&self.shared) {
            return Err(Error::Config("fusion magnitude ≥ 0, wavelength > 0 and shared in [0, 1] required".into()));
        }
        // Frobenius bound on the displacement Jacobian; below 1 the map
        // p → p + d(p) is a bijection
        if libm::sqrt(3.0) * self.magnitude * 2.0 * core::f64::consts::PI / self.wavelength >= 1.0 {
            return Err(Error::Config("fusion deformation is too strong to stay invertible".into()));
        }
        Ok(())
    }
}

fn displacement_tables(seed: u64, word: u64, spec: &FusionSpec, dims: [usize; 3]) -> [Vec<(usize, Vec<f64>)>; 3] {
    let mut r = rng::stream(seed, "fusion", &[word]);
    [0, 1, 2].map(|_| SmoothField::draw(&mut r, 3, spec.wavelength).tables(dims))
}

/// Deforms `truth` `atlases` times and fuses the copies by per-voxel
/// majority vote; ties go to background.
pub fn simulate_atlas_fusion(truth: &LabelVolume, spec: &FusionSpec, seed: u64) -> Result<LabelVolume> {
    spec.validate()?;
    truth.validate()?;
    let dims = truth.dims;
    let [nx, ny, nz] = dims;

    let shared = displacement_tables(seed, u64::MAX, spec, dims);
    let mut common = vec![[0f64; 3]; truth.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = &mut common[voxel_index(dims, x, y, z)];
                for a in 0..3 {
                    c[a] = spec.magnitude * spec.shared * sample_tables(&shared[a], [x, y, z]);
                }
            }
        }
    }

    let own_gain = spec.magnitude * (1.0 - spec.shared);
    let mut votes = vec![[0u16; NUM_CLASSES]; truth.len()];
    for k in 0..spec.atlases {
        let own = displacement_tables(seed, k as u64, spec, dims);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = voxel_index(dims, x, y, z);
                    let g = [x, y, z];
                    let mut src = [0usize; 3];
                    let mut inside = true;
                    for a in 0..3 {
                        let d = common[i][a] + own_gain * sample_tables(&own[a], g);
                        let q = libm::round(g[a] as f64 + d);
                        if q < 0.0 || q >= dims[a] as f64 {
                            inside = false;
                            break;
                        }
                        src[a] = q as usize;
                    }
                    let label = if inside { truth.labels[voxel_index(dims, src[0], src[1], src[2])] } else { 0 };
                    votes[i][label as usize] += 1;
                }
            }
        }
    }
    let labels = votes
        .iter()
        .map(|v| {
            let best = *v.iter().max().unwrap_or(&0);
            let mut winners = v.iter().enumerate().filter(|(_, &c)| c == best);
            match (winners.next(), winners.next()) {
                (Some((c, _)), None) => c as u8,
                _ => 0,
            }
        })
        .collect();
    let mut out = LabelVolume::new(dims, truth.spacing, labels)?;
    out.affine = truth.affine;
    Ok(out)
}

/// `(train, val, test)` subject counts for `n` subjects under `ratio`.
///
/// Validation and test counts are `round(n · share)`; training receives
/// the remainder, so rounding never costs it a subject.
pub fn split_counts(n: usize, ratio: [u32; 3]) -> Result<(usize, usize, usize)> {
    let total: u32 = ratio.iter().sum();
    if total == 0 {
        return Err(Error::Config("split ratio must not be all zero".into()));
    }
    let share = |k: u32| libm::round(n as f64 * k as f64 / total as f64) as usize;
    let val = share(ratio[1]).min(n);
    let test = share(ratio[2]).min(n - val);
    Ok((n - val - test, val, test))
}
