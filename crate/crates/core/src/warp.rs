//! Nearest-neighbour resampling of an output map onto a star pattern, and the
//! matching scatter-add adjoint used during backpropagation.

use crate::error::{Error, Result};
use crate::geometry::StarPattern;
use crate::grid::Image;

/// Output map values sampled on a star pattern, with the pixel each sample
/// was read from.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedMap {
    num_lines: usize,
    points_per_line: usize,
    /// `N × M`, line-major.
    g: Vec<f64>,
    /// Flat row-major pixel index per sample.
    source: Vec<usize>,
    shape: (usize, usize),
}

impl WarpedMap {
    pub fn num_lines(&self) -> usize {
        self.num_lines
    }

    pub fn points_per_line(&self) -> usize {
        self.points_per_line
    }

    pub fn values(&self) -> &[f64] {
        &self.g
    }

    pub fn into_values(self) -> Vec<f64> {
        self.g
    }

    /// Value at line `n` (0-based), sample `m` (1-based).
    pub fn at(&self, n: usize, m: usize) -> f64 {
        self.g[n * self.points_per_line + m - 1]
    }

    pub fn source(&self) -> &[usize] {
        &self.source
    }

    /// Source pixel `(x, y)` of line `n`, sample `m` (1-based).
    pub fn source_pixel(&self, n: usize, m: usize) -> (usize, usize) {
        let i = self.source[n * self.points_per_line + m - 1];
        (i % self.shape.1, i / self.shape.1)
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.shape
    }
}

/// Flat pixel index of every star sample: coordinates rounded to the nearest
/// pixel and clamped into the image.
pub fn source_indices(star: &StarPattern, shape: (usize, usize)) -> Vec<usize> {
    let (h, w) = shape;
    let clamp = |v: f64, hi: usize| v.round().clamp(0.0, (hi - 1) as f64) as usize;
    star.coords().iter().map(|p| clamp(p.y, h) * w + clamp(p.x, w)).collect()
}

pub fn warp_forward(map: &Image, star: &StarPattern) -> Result<WarpedMap> {
    let shape = map.shape();
    if shape.0 == 0 || shape.1 == 0 {
        return Err(Error::Shape("empty output map".into()));
    }
    let source = source_indices(star, shape);
    let data = map.data();
    let g = source.iter().map(|&i| data[i]).collect();
    Ok(WarpedMap {
        num_lines: star.num_lines(),
        points_per_line: star.points_per_line(),
        g,
        source,
        shape,
    })
}

/// Adjoint of [`warp_forward`]: every sample's gradient is added to the pixel
/// it was read from.
pub fn warp_backward(grad_g: &[f64], source: &[usize], shape: (usize, usize)) -> Result<Image> {
    let mut out = Image::filled(shape.0, shape.1, 0.0);
    scatter_add(grad_g, source, out.data_mut())?;
    Ok(out)
}

pub(crate) fn scatter_add(grad_g: &[f64], source: &[usize], out: &mut [f64]) -> Result<()> {
    if grad_g.len() != source.len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} samples",
            grad_g.len(),
            source.len()
        )));
    }
    if let Some(&bad) = source.iter().find(|&&i| i >= out.len()) {
        return Err(Error::Shape(format!("source pixel {bad} outside a map of {} pixels", out.len())));
    }
    for (&gv, &i) in grad_g.iter().zip(source) {
        out[i] += gv;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_star, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map() {
        let map = Image::filled(20, 20, 0.75);
        let s = build_star(Point::new(10.0, 10.0), 8.0, 9, 8, 0.4).unwrap();
        assert!(warp_forward(&map, &s).unwrap().values().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn column_ramp() {
        let map = Image::from_fn(40, 40, |x, _| x as f64);
        let s = build_star(Point::new(20.0, 20.0), 10.0, 8, 10, 0.0).unwrap();
        let w = warp_forward(&map, &s).unwrap();
        for n in 0..8 {
            let t = s.angle(n);
            for m in 1..=10 {
                let expect = (20.0 + m as f64 * t.cos()).round();
                assert_eq!(w.at(n, m), expect);
            }
        }
        // axis-aligned lines are exact
        for m in 1..=10 {
            assert_eq!(w.at(0, m), 20.0 + m as f64);
            assert_eq!(w.at(4, m), 20.0 - m as f64);
            assert_eq!(w.at(2, m), 20.0);
        }
    }

    #[test]
    fn clamps_at_borders() {
        let map = Image::from_fn(10, 10, |x, y| (x + 100 * y) as f64);
        let s = build_star(Point::new(8.0, 5.0), 6.0, 4, 6, 0.0).unwrap();
        let w = warp_forward(&map, &s).unwrap();
        assert_eq!(w.at(0, 6), map.get(9, 5).to_owned());
        assert_eq!(w.source_pixel(0, 6), (9, 5));
        assert_eq!(w.source_pixel(1, 6), (8, 9));
    }

    #[test]
    fn backward_basics() {
        let s = build_star(Point::new(6.0, 6.0), 5.0, 5, 4, 0.0).unwrap();
        let src = source_indices(&s, (12, 12));
        let zero = warp_backward(&[0.0; 20], &src, (12, 12)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mut onehot = vec![0.0; 20];
        onehot[7] = 1.0;
        let g = warp_backward(&onehot, &src, (12, 12)).unwrap();
        assert_eq!(g.data()[src[7]], 1.0);
        assert_eq!(g.data().iter().sum::<f64>(), 1.0);

        assert!(warp_backward(&[0.0; 19], &src, (12, 12)).is_err());
        assert!(warp_backward(&[0.0; 20], &src, (3, 3)).is_err());
    }

    #[test]
    fn directional_derivative_matches_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (24, 30);
        let s = build_star(Point::new(12.3, 14.8), 15.0, 7, 9, 0.3).unwrap();
        let a = Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
        let d = Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..63).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |eps: f64| {
            let m = Image::from_fn(h, w, |x, y| a.get(x, y) + eps * d.get(x, y));
            let g = warp_forward(&m, &s).unwrap();
            g.values().iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        };
        let eps = 1e-3;
        let fd = (objective(eps) - objective(-eps)) / (2.0 * eps);
        let adj = warp_backward(&b, &source_indices(&s, (h, w)), (h, w)).unwrap();
        let exact: f64 = adj.data().iter().zip(d.data()).map(|(x, y)| x * y).sum();
        assert!((fd - exact).abs() / exact.abs().max(1e-12) < 1e-6);
    }

    #[test]
    fn sub_pixel_center_shift_keeps_samples() {
        let map = Image::from_fn(30, 30, |x, y| (x * 31 + y) as f64);
        let a = build_star(Point::new(15.0, 15.0), 8.0, 4, 8, 0.0).unwrap();
        let b = build_star(Point::new(15.2, 14.9), 8.0, 4, 8, 0.0).unwrap();
        assert_eq!(warp_forward(&map, &a).unwrap().values(), warp_forward(&map, &b).unwrap().values());
    }
}
