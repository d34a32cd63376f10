//! Seeded generator of star-convex blob images with masks and centers.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{mask_to_indices, ContourIndices, Point, StarPattern};
use crate::grid::{Image, Mask};
use crate::pgm;

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Mean radius as a fraction of `min(H, W)`.
    pub radius_range: (f64, f64),
    /// Bound on each harmonic amplitude.
    pub max_amplitude: f64,
    pub harmonics: usize,
    pub background_range: (f64, f64),
    pub contrast_range: (f64, f64),
    /// Flip the contrast sign with probability 1/2.
    pub random_sign: bool,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Largest intensity change of the illumination ramp across the image.
    pub max_ramp: f64,
    /// Pixels kept between the blob and the image border.
    pub margin: f64,
    /// Star used for the contour-feasibility check.
    pub check_lines: usize,
    pub check_points: usize,
    pub check_radius: f64,
    pub check_delta: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            radius_range: (0.15, 0.35),
            max_amplitude: 0.15,
            harmonics: 4,
            background_range: (0.2, 0.4),
            contrast_range: (0.2, 0.5),
            random_sign: false,
            noise: 0.05,
            max_ramp: 0.1,
            margin: 2.0,
            check_lines: 50,
            check_points: 32,
            check_radius: 28.0,
            check_delta: 2,
        }
    }
}

/// A radial shape `r(θ) = r₀·(1 + Σ_k a_k cos(kθ + φ_k))` around `origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub origin: Point,
    pub r0: f64,
    /// `(a_k, φ_k)` for `k = 1, 2, …`.
    pub harmonics: Vec<(f64, f64)>,
}

impl Blob {
    pub fn radius_at(&self, theta: f64) -> f64 {
        let wave: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, phi))| a * ((k + 1) as f64 * theta + phi).cos())
            .sum();
        // floor keeps the radius positive whatever the amplitudes
        self.r0 * (1.0 + wave).max(0.05)
    }

    fn max_radius(&self) -> f64 {
        (0..720).map(|i| self.radius_at(TAU * i as f64 / 720.0)).fold(0.0, f64::max)
    }

    pub fn contains(&self, p: Point) -> bool {
        let (dx, dy) = (p.x - self.origin.x, p.y - self.origin.y);
        let d = dx.hypot(dy);
        d == 0.0 || d <= self.radius_at(dy.atan2(dx))
    }

    pub fn mask(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |x, y| self.contains(Point::new(x as f64, y as f64)))
    }
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: Mask,
    /// Mask centroid.
    pub center: Point,
    /// Shortest distance from the center to the background along 360 rays.
    pub object_radius: f64,
}

impl Sample {
    /// Builds a sample from an image and mask, taking the mask centroid as
    /// the center.
    pub fn from_parts(image: Image, mask: Mask) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(Error::Shape(format!("image {:?} with mask {:?}", image.shape(), mask.shape())));
        }
        let (cx, cy) = mask.centroid().ok_or(Error::EmptyMask("sample mask"))?;
        let center = Point::new(cx, cy);
        if !mask.at_point(cx, cy) {
            return Err(Error::CenterOutsideMask { x: cx, y: cy });
        }
        let object_radius = ray_scan(&mask, center, 360).into_iter().map(|r| r.first_exit).fold(f64::INFINITY, f64::min);
        Ok(Self { image, mask, center, object_radius })
    }

    /// Ground-truth indices on `star`.
    pub fn p_gt(&self, star: &StarPattern) -> Result<ContourIndices> {
        mask_to_indices(star, &self.mask)
    }
}

/// Result of marching one ray outward from a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayScan {
    /// Distance at which the ray first reaches background.
    pub first_exit: f64,
    /// Number of foreground-to-background transitions before leaving the image.
    pub exits: usize,
}

const RAY_STEP: f64 = 0.1;

/// Marches `rays` evenly spaced rays from `from` in steps of 0.1 px,
/// reading the mask at the rounded position.
pub fn ray_scan(mask: &Mask, from: Point, rays: usize) -> Vec<RayScan> {
    let (h, w) = mask.shape();
    let limit = (h + w) as f64;
    (0..rays)
        .map(|i| {
            let theta = TAU * i as f64 / rays as f64;
            let (c, s) = (theta.cos(), theta.sin());
            let mut inside = mask.at_point(from.x, from.y);
            let mut first_exit = if inside { f64::NAN } else { 0.0 };
            let mut exits = 0;
            let mut t = RAY_STEP;
            while t < limit {
                let now = mask.at_point(from.x + t * c, from.y + t * s);
                if inside && !now {
                    exits += 1;
                    if first_exit.is_nan() {
                        first_exit = t;
                    }
                }
                inside = now;
                t += RAY_STEP;
            }
            if first_exit.is_nan() {
                first_exit = limit;
            }
            RayScan { first_exit, exits }
        })
        .collect()
}

/// Every one of the rays leaves the foreground exactly once.
pub fn is_star_convex(mask: &Mask, center: Point, rays: usize) -> bool {
    mask.at_point(center.x, center.y) && ray_scan(mask, center, rays).iter().all(|r| r.exits == 1)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_blob<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &SynthConfig) -> Blob {
    let side = h.min(w) as f64;
    let r0 = uniform(rng, cfg.radius_range) * side;
    let harmonics = (1..=cfg.harmonics)
        .map(|_| (uniform(rng, (-cfg.max_amplitude, cfg.max_amplitude)), rng.random_range(0.0..TAU)))
        .collect();
    let mut blob = Blob { origin: Point::new(0.0, 0.0), r0, harmonics };
    // shrink until the blob fits inside the margins
    let room = (side - 1.0) / 2.0 - cfg.margin;
    let rmax = blob.max_radius();
    if rmax > room {
        blob.r0 *= room / rmax;
    }
    let reach = blob.max_radius() + cfg.margin;
    let pick = |rng: &mut R, n: usize| {
        let (lo, hi) = (reach, n as f64 - 1.0 - reach);
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            (n as f64 - 1.0) / 2.0
        }
    };
    blob.origin = Point::new(pick(rng, w), pick(rng, h));
    blob
}

fn box_blur(image: &Image) -> Image {
    let (h, w) = image.shape();
    Image::from_fn(h, w, |x, y| {
        let (mut sum, mut n) = (0.0, 0);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if let Some(v) = image.checked(x as i64 + dx, y as i64 + dy) {
                    sum += v;
                    n += 1;
                }
            }
        }
        sum / n as f64
    })
}

/// Renders `mask` as an image: background plus contrast inside, a 3×3 box
/// blur, a linear illumination ramp and Gaussian noise, clipped to `[0,1]`
/// and quantized to 8 bits.
pub fn render<R: Rng + ?Sized>(rng: &mut R, mask: &Mask, cfg: &SynthConfig) -> Image {
    let (h, w) = mask.shape();
    let background = uniform(rng, cfg.background_range);
    let mut contrast = uniform(rng, cfg.contrast_range);
    if cfg.random_sign && rng.random_bool(0.5) {
        contrast = -contrast;
    }
    let clean = mask.map(|&m| background + if m { contrast } else { 0.0 });
    let blurred = box_blur(&clean);
    let slope = uniform(rng, (0.0, cfg.max_ramp));
    let dir = rng.random_range(0.0..TAU);
    let (c, s) = (dir.cos(), dir.sin());
    // |c| + |s| ≤ √2, so divide to bound the total change by `slope`
    let scale = slope / std::f64::consts::SQRT_2;
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("positive noise"));
    let fx = |x: usize, n: usize| if n > 1 { x as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
    Image::from_fn(h, w, |x, y| {
        let mut v = *blurred.get(x, y) + scale * (c * fx(x, w) + s * fx(y, h));
        if let Some(n) = &noise {
            v += n.sample(rng);
        }
        (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
    })
}

fn feasible(sample: &Sample, cfg: &SynthConfig) -> bool {
    if !is_star_convex(&sample.mask, sample.center, 360) {
        return false;
    }
    let Ok(star) = StarPattern::new(sample.center, cfg.check_radius, cfg.check_lines, cfg.check_points, 0.0) else {
        return true;
    };
    sample.p_gt(&star).map(|v| v.is_feasible(cfg.check_delta)).unwrap_or(false)
}

/// Draws blobs until one passes the star-convexity and contour-feasibility
/// checks, then renders it.
pub fn gen_sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, cfg: &SynthConfig) -> Result<Sample> {
    if height < 32 || width < 32 {
        return Err(Error::InvalidArgument(format!("image size {height}x{width} is below 32x32")));
    }
    for _ in 0..1000 {
        let blob = draw_blob(rng, height, width, cfg);
        let mask = blob.mask(height, width);
        let image = render(rng, &mask, cfg);
        match Sample::from_parts(image, mask) {
            Ok(s) if feasible(&s, cfg) => return Ok(s),
            _ => continue,
        }
    }
    Err(Error::Data("generator failed to produce a valid sample in 1000 attempts".into()))
}

/// The stream for sample `index` of a dataset.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub image: String,
    pub mask: String,
    pub center: [f64; 2],
    pub object_radius: f64,
}

/// Dataset index. Train entries are listed in their shuffled order, so any
/// prefix is a training subset and smaller prefixes nest in larger ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub config: SynthConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates `n_train + n_val` samples into `dir` (created if missing) and
/// writes the manifest.
pub fn gen_dataset(
    exec: Exec,
    dir: impl AsRef<Path>,
    seed: u64,
    n_train: usize,
    n_val: usize,
    (height, width): (usize, usize),
    cfg: &SynthConfig,
) -> Result<Manifest> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument("both splits need at least one sample".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let total = n_train + n_val;
    let samples = exec.map(total, |i| gen_sample(&mut sample_rng(seed, i as u64), height, width, cfg));
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut sample_rng(seed, u64::MAX));
    order.extend(n_train..total);

    let mut entries = Vec::with_capacity(total);
    for id in order {
        let s = samples[id].as_ref().map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
        let image = format!("img_{id:05}.pgm");
        let mask = format!("mask_{id:05}.pgm");
        pgm::save_image(dir.join(&image), &s.image)?;
        pgm::save_mask(dir.join(&mask), &s.mask)?;
        entries.push(ManifestEntry {
            id,
            split: if id < n_train { Split::Train } else { Split::Val },
            image,
            mask,
            center: [s.center.x, s.center.y],
            object_radius: s.object_radius,
        });
    }
    let manifest = Manifest { seed, height, width, config: cfg.clone(), entries };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Both splits loaded from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for e in &manifest.entries {
            let image = pgm::load_image(dir.join(&e.image))?;
            let mask = pgm::load_mask(dir.join(&e.mask))?;
            if image.shape() != (manifest.height, manifest.width) || mask.shape() != image.shape() {
                return Err(Error::Data(format!("{} does not match the manifest size", e.image)));
            }
            let s = Sample {
                image,
                mask,
                center: Point::new(e.center[0], e.center[1]),
                object_radius: e.object_radius,
            };
            match e.split {
                Split::Train => train.push(s),
                Split::Val => val.push(s),
            }
        }
        Ok(Self { manifest, train, val })
    }

    /// The first `n` training samples.
    pub fn train_prefix(&self, n: usize) -> Result<&[Sample]> {
        self.train.get(..n).ok_or_else(|| {
            Error::InvalidArgument(format!("training size {n} exceeds the {} available samples", self.train.len()))
        })
    }
}
