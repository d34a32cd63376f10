use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgcontour::dp::EdgePolarity;
use sgcontour::geometry::{build_star, jitter_center, Point};
use sgcontour::synth::{gen_sample, is_star_convex, sample_rng, Sample, SynthConfig};
use sgcontour::trainer::{
    draw_views, edpcnn_step_with_views, outer_loss, Arm, ContourConfig, EdpcnnState, Model, TrainConfig,
};

fn samples(seed: u64, n: usize) -> Vec<Sample> {
    let cfg = SynthConfig::default();
    (0..n).map(|i| gen_sample(&mut sample_rng(seed, i as u64), 64, 64, &cfg).unwrap()).collect()
}

// Standard deviation of one coordinate of an isotropic normal with scale `sd`
// truncated to the disk of radius `r`, by Simpson integration over the radius.
fn truncated_coordinate_std(sd: f64, r: f64) -> f64 {
    let steps = 20_000;
    let h = r / steps as f64;
    let density = |t: f64| t * (-t * t / (2.0 * sd * sd)).exp();
    let (mut mass, mut second) = (0.0, 0.0);
    for k in 0..=steps {
        let t = k as f64 * h;
        let w = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        mass += w * density(t);
        second += w * t * t * density(t);
    }
    (second / mass / 2.0).sqrt()
}

#[test]
fn jitter_spread_matches_truncated_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = Point::new(5.0, -3.0);
    let draws = 100_000;
    let (mut sx, mut sxx, mut sy, mut syy) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        let p = jitter_center(c, 10.0, 0.2, &mut rng);
        let (dx, dy) = (p.x - c.x, p.y - c.y);
        sx += dx;
        sxx += dx * dx;
        sy += dy;
        syy += dy * dy;
    }
    let n = draws as f64;
    let expected = truncated_coordinate_std(2.0, 10.0);
    assert!(expected < 2.0 && expected > 1.99);
    for (s, ss) in [(sx, sxx), (sy, syy)] {
        let std = (ss / n - (s / n).powi(2)).sqrt();
        assert!((std / expected - 1.0).abs() < 0.05, "{std} vs {expected}");
    }
}

#[test]
fn generated_objects_fit_the_contour_model() {
    let set = samples(3, 200);
    let star_cfg = ContourConfig { num_lines: 50, ..Default::default() };
    let mut fraction = 0.0;
    for s in &set {
        let c = s.center;
        assert!(is_star_convex(&s.mask, c, 360));
        let star = build_star(c, star_cfg.radius, 50, star_cfg.points_per_line, 0.0).unwrap();
        assert!(s.p_gt(&star).unwrap().is_feasible(2));
        fraction += s.mask.count() as f64 / (64.0 * 64.0);
    }
    let mean = fraction / set.len() as f64;
    assert!((0.05..=0.35).contains(&mean), "{mean}");
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig { batch: 2, samples: 2, inner_steps: 1, seed, ..Default::default() }
}

#[test]
fn outer_step_descends() {
    let data = samples(5, 20);
    let mut wins = 0;
    for seed in 0..10u64 {
        let cfg = small_cfg(seed);
        let model = Model::init(Arm::Edpcnn, &cfg).unwrap();
        let mut state = EdpcnnState::new(model.seg, model.approx.unwrap());
        let k = 2 * seed as usize;
        let batch = [&data[k], &data[k + 1]];
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let views = draw_views(&batch, &cfg, &mut rng).unwrap();
        let before = edpcnn_step_with_views(&mut state, &batch, &views, &cfg, &mut rng).unwrap().outer;
        let after = outer_loss(&state.seg, &state.approx, &batch, &views, &cfg).unwrap();
        wins += usize::from(after < before);
    }
    assert!(wins >= 8, "{wins}/10");
}

// The outer objective sees the solver only through the ground-truth indices,
// so no solver setting can change it.
#[test]
fn outer_loss_ignores_solver_settings() {
    let data = samples(6, 2);
    let batch = [&data[0], &data[1]];
    let cfg = small_cfg(0);
    let model = Model::init(Arm::Edpcnn, &cfg).unwrap();
    let approx = model.approx.as_ref().unwrap();
    let views = draw_views(&batch, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let base = outer_loss(&model.seg, approx, &batch, &views, &cfg).unwrap();
    let mut other = cfg.clone();
    other.contour.delta = 1;
    other.contour.window = 1;
    other.contour.polarity = EdgePolarity::AsPrinted;
    other.sigma = 7.0;
    assert_eq!(outer_loss(&model.seg, approx, &batch, &views, &other).unwrap(), base);
}
