//! Overlap and boundary-distance scores for binary masks, and the
//! connected-component rule used when scoring pixel classifiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("masks {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`, or 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_shapes(a, b)?;
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with a 4-neighbor in the background. Pixels outside the
/// image count as background.
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    Mask::from_fn(h, w, |x, y| {
        if !*mask.get(x, y) {
            return false;
        }
        let (x, y) = (x as i64, y as i64);
        [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|(dx, dy)| !mask.checked(x + dx, y + dy).copied().unwrap_or(false))
    })
}

// Squared Euclidean distance transform of a 1-D sampled function
// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first_finite = f[0].is_finite();
    for q in 1..n {
        if !f[q].is_finite() {
            continue;
        }
        if !first_finite {
            // replace the infinite seed
            v[0] = q;
            first_finite = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else if s <= z[k] {
                // k == 0 and z[0] = -inf cannot happen
                unreachable!()
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !first_finite {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest set pixel of `seeds`
/// (infinite when `seeds` is empty).
pub fn squared_distance_map(seeds: &Mask) -> Vec<f64> {
    let (h, w) = seeds.shape();
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    let mut d: Vec<f64> = seeds.data().iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for x in 0..w {
        for y in 0..h {
            col_in[y] = d[y * w + x];
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&d[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    d
}

/// Average symmetric surface distance and Hausdorff distance, in pixels.
pub fn surface_distances(a: &Mask, b: &Mask) -> Result<(f64, f64)> {
    check_shapes(a, b)?;
    if a.count() == 0 {
        return Err(Error::EmptyMask("first mask of a surface distance"));
    }
    if b.count() == 0 {
        return Err(Error::EmptyMask("second mask of a surface distance"));
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (squared_distance_map(&ba), squared_distance_map(&bb));
    let (mut sum, mut count, mut hd2) = (0.0, 0usize, 0.0f64);
    for (edge, dist) in [(&ba, &db), (&bb, &da)] {
        for (i, _) in edge.data().iter().enumerate().filter(|(_, &e)| e) {
            sum += dist[i].sqrt();
            hd2 = hd2.max(dist[i]);
            count += 1;
        }
    }
    Ok((sum / count as f64, hd2.sqrt()))
}

/// 4-connected component labels in raster order of first pixel, 0 for
/// background.
pub fn label_components(mask: &Mask) -> (Vec<usize>, usize) {
    let (h, w) = mask.shape();
    let mut labels = vec![0usize; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data()[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    (labels, next)
}

/// The 4-connected component containing the rounded point, or else the
/// largest one (earliest in raster order on ties).
pub fn select_component(mask: &Mask, point: (f64, f64)) -> Mask {
    let (h, w) = mask.shape();
    let (labels, n) = label_components(mask);
    if n == 0 {
        return mask.clone();
    }
    let (px, py) = (point.0.round(), point.1.round());
    let hit = if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h {
        labels[py as usize * w + px as usize]
    } else {
        0
    };
    let keep = if hit != 0 {
        hit
    } else {
        let mut sizes = vec![0usize; n + 1];
        labels.iter().for_each(|&l| sizes[l] += 1);
        // max_by_key keeps the last maximum, so scan in reverse
        (1..=n).rev().max_by_key(|&l| sizes[l]).expect("n > 0")
    };
    Mask::from_vec(h, w, labels.iter().map(|&l| l == keep).collect()).expect("same shape")
}

/// Scores for one prediction. Surface distances are absent when either mask
/// is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub dice: f64,
    pub assd: Option<f64>,
    pub hd: Option<f64>,
}

impl SampleMetrics {
    pub fn compute(pred: &Mask, truth: &Mask) -> Result<Self> {
        let dice = dice(pred, truth)?;
        let (assd, hd) = match surface_distances(pred, truth) {
            Ok((a, h)) => (Some(a), Some(h)),
            Err(Error::EmptyMask(_)) => (None, None),
            Err(e) => return Err(e),
        };
        Ok(Self { dice, assd, hd })
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), count: v.len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub dice: Summary,
    pub assd: Summary,
    pub hd: Summary,
    /// Samples whose surface distances could not be computed.
    pub failures: usize,
}

impl MetricReport {
    pub fn new(samples: Vec<SampleMetrics>) -> Self {
        let dice = Summary::of(samples.iter().map(|s| s.dice));
        let assd = Summary::of(samples.iter().filter_map(|s| s.assd));
        let hd = Summary::of(samples.iter().filter_map(|s| s.hd));
        let failures = samples.iter().filter(|s| s.assd.is_none()).count();
        Self { samples, dice, assd, hd, failures }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per sample: `index,dice,assd,hd`, with empty cells for failures.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("index,dice,assd,hd\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", s.dice, opt(s.assd), opt(s.hd)));
        }
        out
    }
}
