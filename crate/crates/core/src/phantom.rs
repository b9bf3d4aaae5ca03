//! Synthetic cardiac-like phantoms with full masks and procedural scribbles.
//!
//! Class ids: 0 background, 1 "LV" disk, 2 "MYO" annulus around it,
//! 3 "RV" crescent hugging the annulus. Geometry ranges are given for a
//! 96-pixel frame and scale linearly with `size`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

use crate::distance::inside_distance;
use crate::error::{Error, Result};
use crate::mixture::MixtureRatios;
use crate::tensor::{Image, LabelMap, ScribbleMask, UNLABELED};

pub const BACKGROUND: u8 = 0;
pub const LV: u8 = 1;
pub const MYO: u8 = 2;
pub const RV: u8 = 3;

/// Frame size the geometry ranges refer to.
const REFERENCE_SIZE: f64 = 96.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    /// Foreground classes, 1..=3 (LV, then MYO, then RV).
    pub classes: usize,
    /// Mean intensity per class id `0..=classes`.
    pub means: Vec<f64>,
    /// Noise standard deviation per class id.
    pub sigmas: Vec<f64>,
    pub bias_amplitude: f64,
    pub lv_radius: (f64, f64),
    pub myo_thickness: (f64, f64),
    /// Radial thickness of the RV crescent at its widest point.
    pub rv_thickness: (f64, f64),
    /// RV disk center offset from the LV center, as a fraction of the MYO outer radius.
    pub rv_offset: (f64, f64),
    /// Direction of the RV (radians, image coordinates).
    pub rv_angle: (f64, f64),
    /// Upper bound on background distractor blobs per image.
    pub max_distractors: usize,
    pub distractor_radius: (f64, f64),
    pub distractor_intensity: f64,
    /// Minimum distance between the anatomy and the frame edge (pixels at the
    /// 96-pixel reference size, scaled with `size` like the anatomy).
    pub margin: f64,
    /// Width of the frame band that carries the background scribble.
    pub border_band: usize,
    /// Omit the RV structure (tests absent-class handling).
    pub degenerate: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 96,
            classes: 3,
            means: vec![0.1, 0.9, 0.45, 0.65],
            sigmas: vec![0.06, 0.06, 0.06, 0.06],
            bias_amplitude: 0.05,
            lv_radius: (11.0, 15.0),
            myo_thickness: (6.0, 9.0),
            rv_thickness: (8.0, 12.0),
            rv_offset: (0.5, 0.9),
            rv_angle: (0.75 * PI, 1.25 * PI),
            max_distractors: 2,
            distractor_radius: (3.0, 6.0),
            distractor_intensity: 0.45,
            margin: 10.0,
            border_band: 8,
            degenerate: false,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.classes) {
            return Err(Error::Phantom(format!(
                "classes must be 1..=3, got {}",
                self.classes
            )));
        }
        if self.means.len() != self.classes + 1 || self.sigmas.len() != self.classes + 1 {
            return Err(Error::Phantom(
                "need one mean and sigma per class including background".into(),
            ));
        }
        if self.sigmas.iter().any(|&s| s < 0.0) || self.bias_amplitude < 0.0 {
            return Err(Error::Phantom("negative noise or bias amplitude".into()));
        }
        for (name, (lo, hi)) in [
            ("lv_radius", self.lv_radius),
            ("myo_thickness", self.myo_thickness),
            ("rv_thickness", self.rv_thickness),
            ("rv_offset", self.rv_offset),
            ("distractor_radius", self.distractor_radius),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Phantom(format!(
                    "{name} range ({lo}, {hi}) is invalid"
                )));
            }
        }
        let lo = self.margin * self.scale() + self.max_extent();
        let hi = self.size as f64 - 1.0 - lo;
        if lo > hi {
            return Err(Error::Phantom(format!(
                "anatomy of radius {:.1} plus margin {:.1} does not fit a {} frame",
                self.max_extent(),
                self.margin * self.scale(),
                self.size
            )));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.size as f64 / REFERENCE_SIZE
    }

    /// Largest distance from the LV center to any anatomy pixel.
    fn max_extent(&self) -> f64 {
        let s = self.scale();
        let myo = (self.lv_radius.1
            + if self.classes >= 2 {
                self.myo_thickness.1
            } else {
                0.0
            })
            * s;
        if self.classes >= 3 && !self.degenerate {
            myo + (1.0 + self.rv_thickness.1) * s
        } else {
            myo
        }
    }
}

/// Continuous geometry of one phantom, in pixel units of the actual frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub center: (f64, f64),
    pub lv_radius: f64,
    pub myo_outer: f64,
    pub rv: Option<RvGeometry>,
    pub distractors: Vec<((f64, f64), f64)>,
    pub bias: BiasField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvGeometry {
    pub center: (f64, f64),
    pub radius: f64,
    /// Radius around the LV center that the crescent never enters.
    pub exclusion: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasField {
    pub freq: (f64, f64),
    pub phase: (f64, f64),
}

impl Geometry {
    /// Class of the point `(row, col)`.
    pub fn class_at(&self, row: f64, col: f64, classes: usize) -> u8 {
        let d = dist((row, col), self.center);
        if d <= self.lv_radius {
            return LV;
        }
        if classes >= 2 && d <= self.myo_outer {
            return MYO;
        }
        if let Some(rv) = &self.rv {
            if d > rv.exclusion && dist((row, col), rv.center) <= rv.radius {
                return RV;
            }
        }
        BACKGROUND
    }

    /// Additive smooth intensity bias at pixel `(row, col)` of a `size` frame.
    pub fn bias_at(&self, amplitude: f64, size: usize, row: usize, col: usize) -> f64 {
        let (fy, fx) = self.bias.freq;
        let (py, px) = self.bias.phase;
        let n = size as f64;
        amplitude * (PI * fy * row as f64 / n + py).sin() * (PI * fx * col as f64 / n + px).cos()
    }

    pub fn in_distractor(&self, row: usize, col: usize) -> bool {
        self.distractors
            .iter()
            .any(|&(ctr, rad)| dist((row as f64, col as f64), ctr) <= rad)
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministic RNG stream for `(seed, index, salt)`.
pub fn stream(seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

pub fn sample_geometry(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Geometry> {
    spec.validate()?;
    let s = spec.scale();
    let size = spec.size as f64;
    let lo = spec.margin * s + spec.max_extent();
    let hi = size - 1.0 - lo;
    let center = (uniform(rng, (lo, hi)), uniform(rng, (lo, hi)));
    let lv_radius = uniform(rng, spec.lv_radius) * s;
    let myo_outer = if spec.classes >= 2 {
        lv_radius + uniform(rng, spec.myo_thickness) * s
    } else {
        lv_radius
    };
    let rv = if spec.classes >= 3 && !spec.degenerate {
        let thickness = uniform(rng, spec.rv_thickness) * s;
        let offset = uniform(rng, spec.rv_offset) * myo_outer;
        let angle = uniform(rng, spec.rv_angle);
        let exclusion = myo_outer + s;
        Some(RvGeometry {
            center: (
                center.0 + offset * angle.sin(),
                center.1 + offset * angle.cos(),
            ),
            radius: exclusion + thickness - offset,
            exclusion,
        })
    } else {
        None
    };
    let extent = spec.max_extent();
    let n_distractors = rng.random_range(0..=spec.max_distractors);
    let mut distractors = Vec::new();
    for _ in 0..n_distractors {
        let radius = uniform(rng, spec.distractor_radius) * s;
        // rejection sampling outside the anatomy; give up quietly if crowded
        for _ in 0..50 {
            let c = (
                uniform(rng, (radius, size - 1.0 - radius)),
                uniform(rng, (radius, size - 1.0 - radius)),
            );
            if dist(c, center) > extent + radius + 2.0 {
                distractors.push((c, radius));
                break;
            }
        }
    }
    let bias = BiasField {
        freq: (uniform(rng, (0.5, 1.5)), uniform(rng, (0.5, 1.5))),
        phase: (uniform(rng, (0.0, 2.0 * PI)), uniform(rng, (0.0, 2.0 * PI))),
    };
    Ok(Geometry {
        center,
        lv_radius,
        myo_outer,
        rv,
        distractors,
        bias,
    })
}

/// Class of every pixel center.
pub fn rasterize(geometry: &Geometry, size: usize, classes: usize) -> LabelMap {
    LabelMap::from_fn(size, size, |r, c| {
        geometry.class_at(r as f64, c as f64, classes)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub index: u64,
    pub seed: u64,
    pub image: Image,
    pub mask: LabelMap,
    pub scribble: ScribbleMask,
    pub true_ratios: MixtureRatios,
}

/// Generates phantom `index` of the dataset described by `spec`.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<Sample> {
    let mut rng = stream(spec.seed, index, 0);
    let geometry = sample_geometry(spec, &mut rng)?;
    let mask = rasterize(&geometry, spec.size, spec.classes);
    let n = spec.size;
    let noise: Vec<Normal<f64>> = spec
        .sigmas
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated sigma"))
        .collect();
    let image = Image::from_fn(n, n, |r, c| {
        let class = *mask.get(r, c) as usize;
        let mean = if class == 0 && geometry.in_distractor(r, c) {
            spec.distractor_intensity
        } else {
            spec.means[class]
        };
        let bias = geometry.bias_at(spec.bias_amplitude, n, r, c);
        let eps = if spec.sigmas[class] > 0.0 {
            noise[class].sample(&mut rng)
        } else {
            0.0
        };
        mean + bias + eps
    });
    let mut scribble_rng = stream(spec.seed, index, 1);
    let scribble = draw_scribbles(&mask, spec.classes, spec.border_band, &mut scribble_rng);
    let true_ratios = true_unlabeled_ratios(&mask, &scribble, spec.classes)?;
    Ok(Sample {
        index,
        seed: spec.seed,
        image,
        mask,
        scribble,
        true_ratios,
    })
}

/// Bayes posteriors of the generative intensity model of phantom `index`:
/// `p(c | x) ∝ prior_c · N(x; mean_c + bias, sigma_c)`, with the bias field
/// known. The background likelihood mixes plain background and distractor
/// intensities by the share of background covered by distractors; class
/// membership itself is not revealed. Layout is `(classes + 1) x H x W`.
pub fn oracle_posteriors(
    spec: &PhantomSpec,
    index: u64,
    image: &Image,
    prior: &[f64],
) -> Result<Vec<f64>> {
    let k = spec.classes + 1;
    if prior.len() != k || image.height() != spec.size || image.width() != spec.size {
        return Err(Error::Phantom(
            "oracle inputs do not match the phantom spec".into(),
        ));
    }
    let geometry = sample_geometry(spec, &mut stream(spec.seed, index, 0))?;
    let mask = rasterize(&geometry, spec.size, spec.classes);
    let n = spec.size;
    let (mut bg, mut covered) = (0usize, 0usize);
    for r in 0..n {
        for c in 0..n {
            if *mask.get(r, c) == BACKGROUND {
                bg += 1;
                covered += geometry.in_distractor(r, c) as usize;
            }
        }
    }
    let w_distractor = covered as f64 / bg.max(1) as f64;
    let log_normal = |x: f64, mu: f64, sigma: f64| {
        let s = sigma.max(1e-6);
        -0.5 * ((x - mu) / s).powi(2) - s.ln()
    };
    let hw = n * n;
    let mut out = vec![0.0; k * hw];
    let mut logp = vec![0.0; k];
    for r in 0..n {
        for c in 0..n {
            let x = *image.get(r, c);
            let b = geometry.bias_at(spec.bias_amplitude, n, r, c);
            for (class, lp) in logp.iter_mut().enumerate() {
                let like = if class == 0 {
                    let plain = log_normal(x, spec.means[0] + b, spec.sigmas[0]);
                    let blob = log_normal(x, spec.distractor_intensity + b, spec.sigmas[0]);
                    let m = plain.max(blob);
                    m + ((1.0 - w_distractor) * (plain - m).exp() + w_distractor * (blob - m).exp())
                        .ln()
                } else {
                    log_normal(x, spec.means[class] + b, spec.sigmas[class])
                };
                *lp = prior[class].max(1e-300).ln() + like;
            }
            let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logp.iter().map(|l| (l - m).exp()).sum();
            for (class, l) in logp.iter().enumerate() {
                out[class * hw + r * n + c] = (l - m).exp() / z;
            }
        }
    }
    Ok(out)
}

/// Radius of the disk used to erode class regions before drawing scribbles.
pub const EROSION_RADIUS: f64 = 2.0;
/// Scribble length range as a fraction of the region's medial length.
pub const SCRIBBLE_FRACTION: (f64, f64) = (0.2, 0.6);

/// Length of a region's medial curve, estimated as area over twice the
/// largest inscribed radius (exact for annuli and bands).
pub fn medial_length(inside: &[f64]) -> f64 {
    let area = inside.iter().filter(|&&d| d > 0.0).count() as f64;
    let max = inside.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        area / (2.0 * max)
    } else {
        0.0
    }
}

/// Draws one scribble curve per class present in `mask`.
///
/// Background scribbles live in the `border_band`-pixel frame band. Each
/// curve is a self-avoiding walk inside the class region eroded by
/// [`EROSION_RADIUS`], steered along the medial ridge, with a target length
/// drawn from [`SCRIBBLE_FRACTION`] of the region's medial length. A region
/// that erodes away gets its single deepest pixel instead.
pub fn draw_scribbles(
    mask: &LabelMap,
    classes: usize,
    border_band: usize,
    rng: &mut impl Rng,
) -> ScribbleMask {
    let (h, w) = (mask.height(), mask.width());
    let mut scribble = ScribbleMask::filled(h, w, UNLABELED);
    for class in 0..=classes as u8 {
        let region: Vec<bool> = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                let edge = r.min(c).min(h - 1 - r).min(w - 1 - c);
                mask.data()[i] == class && (class != BACKGROUND || edge < border_band)
            })
            .collect();
        if !region.iter().any(|&b| b) {
            continue;
        }
        let inside = inside_distance(h, w, &region);
        let eroded: Vec<bool> = inside.iter().map(|&d| d > EROSION_RADIUS).collect();
        let target = (uniform(rng, SCRIBBLE_FRACTION) * medial_length(&inside))
            .round()
            .max(1.0) as usize;
        let path = if eroded.iter().any(|&b| b) {
            best_walk(&eroded, &inside, h, w, target, rng)
        } else {
            let deepest = (0..h * w)
                .max_by(|&a, &b| inside[a].total_cmp(&inside[b]).then(b.cmp(&a)))
                .expect("nonempty region");
            vec![deepest]
        };
        for p in path {
            scribble.data_mut()[p] = class;
        }
    }
    scribble
}

const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn best_walk(
    allowed: &[bool],
    ridge: &[f64],
    h: usize,
    w: usize,
    target: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let candidates: Vec<usize> = (0..h * w).filter(|&i| allowed[i]).collect();
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..30 {
        let start = candidates[rng.random_range(0..candidates.len())];
        let heading = uniform(rng, (0.0, 2.0 * PI));
        let path = walk(allowed, ridge, h, w, start, heading, target, rng);
        if path.len() > best.len() {
            best = path;
        }
        if best.len() >= target {
            break;
        }
    }
    best
}

/// Self-avoiding walk from `start`, first along `heading`, then (if stuck
/// early) from `start` in the opposite direction.
#[allow(clippy::too_many_arguments)]
fn walk(
    allowed: &[bool],
    ridge: &[f64],
    h: usize,
    w: usize,
    start: usize,
    heading: f64,
    target: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut on_path = vec![false; h * w];
    on_path[start] = true;
    let forward = extend(
        allowed,
        ridge,
        h,
        w,
        &mut on_path,
        vec![start],
        heading,
        target,
        rng,
    );
    if forward.len() >= target {
        return forward;
    }
    let backward = extend(
        allowed,
        ridge,
        h,
        w,
        &mut on_path,
        vec![start],
        heading + PI,
        target + 1 - forward.len(),
        rng,
    );
    let mut path: Vec<usize> = backward.into_iter().skip(1).rev().collect();
    path.extend(forward);
    path
}

#[allow(clippy::too_many_arguments)]
fn extend(
    allowed: &[bool],
    ridge: &[f64],
    h: usize,
    w: usize,
    on_path: &mut [bool],
    mut path: Vec<usize>,
    mut heading: f64,
    target: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let ridge_max = ridge.iter().cloned().fold(0.0, f64::max).max(1e-9);
    while path.len() < target {
        let cur = *path.last().expect("path starts nonempty");
        let (cr, cc) = ((cur / w) as isize, (cur % w) as isize);
        let mut best: Option<(f64, usize, f64)> = None;
        for (dr, dc) in NEIGHBOURS {
            let (nr, nc) = (cr + dr, cc + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let next = nr as usize * w + nc as usize;
            if !allowed[next] || on_path[next] || touches_path(next, cur, &path, on_path, h, w) {
                continue;
            }
            let angle = (dr as f64).atan2(dc as f64);
            let score = (angle - heading).cos()
                + 1.5 * ridge[next] / ridge_max
                + rng.random_range(0.0..0.6);
            if best.is_none_or(|(s, _, _)| score > s) {
                best = Some((score, next, angle));
            }
        }
        let Some((_, next, angle)) = best else { break };
        let (hy, hx) = (
            0.6 * heading.sin() + 0.4 * angle.sin(),
            0.6 * heading.cos() + 0.4 * angle.cos(),
        );
        heading = hy.atan2(hx) + rng.random_range(-0.15..0.15);
        on_path[next] = true;
        path.push(next);
    }
    path
}

/// Whether `next` is 8-adjacent to a path pixel other than the current tip
/// or the one before it (keeps the curve one pixel wide).
fn touches_path(
    next: usize,
    cur: usize,
    path: &[usize],
    on_path: &[bool],
    h: usize,
    w: usize,
) -> bool {
    let prev = if path.len() >= 2 {
        Some(path[path.len() - 2])
    } else {
        None
    };
    let (r, c) = ((next / w) as isize, (next % w) as isize);
    NEIGHBOURS.iter().any(|&(dr, dc)| {
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
            return false;
        }
        let p = nr as usize * w + nc as usize;
        on_path[p] && p != cur && Some(p) != prev
    })
}

/// Exact class frequencies of the full mask over unlabeled pixels.
pub fn true_unlabeled_ratios(
    mask: &LabelMap,
    scribble: &ScribbleMask,
    classes: usize,
) -> Result<MixtureRatios> {
    if !mask.same_dims(scribble) {
        return Err(Error::shape(
            "true_unlabeled_ratios",
            "mask and scribble differ in size",
        ));
    }
    let mut counts = vec![0u64; classes + 1];
    for (&m, &s) in mask.data().iter().zip(scribble.data()) {
        if s == UNLABELED {
            counts[m as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoUnlabeled);
    }
    MixtureRatios::from_weights(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
}
