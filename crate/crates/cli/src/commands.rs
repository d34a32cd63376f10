use std::path::PathBuf;

use anyhow::{Context, Result};
use sgcontour::autodiff::Checkpoint;
use sgcontour::geometry::{indices_to_polygon, ContourRecord, Point};
use sgcontour::grid::{Grid, Image, Mask};
use sgcontour::metrics::boundary;
use sgcontour::nets::NetConfig;
use sgcontour::synth::{gen_dataset, Dataset, Sample, SynthConfig};
use sgcontour::trainer::{
    ablate, ablation_csv, decode, evaluate, jitter_csv, jitter_eval, telescopic_order, train, Arm, ContourConfig,
    Model, TrainConfig,
};
use sgcontour::{pgm, Exec};

use crate::config::{RunConfig, UsageError};

fn exec(c: &RunConfig) -> Result<Exec> {
    Ok(if c.get::<bool>("parallel")? { Exec::Parallel } else { Exec::Sequential })
}

fn contour(c: &RunConfig) -> Result<ContourConfig> {
    let cc = ContourConfig {
        num_lines: c.get("lines")?,
        points_per_line: c.get("points")?,
        radius: c.get("radius")?,
        delta: c.get("delta")?,
        window: c.get("window")?,
        polarity: c.raw("polarity").parse().map_err(|e| UsageError(format!("{e}")))?,
    };
    cc.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cc)
}

fn net(c: &RunConfig, prefix: &str) -> Result<NetConfig> {
    Ok(NetConfig {
        depth: c.get(&format!("{prefix}-depth"))?,
        base_channels: c.get(&format!("{prefix}-channels"))?,
        convs_per_block: c.get(&format!("{prefix}-convs"))?,
    })
}

fn train_config(c: &RunConfig) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        lr: c.get("lr")?,
        beta1: c.get("beta1")?,
        beta2: c.get("beta2")?,
        batch: c.get("batch")?,
        iters: c.get("iters")?,
        sigma: c.get("sigma")?,
        samples: c.get("samples")?,
        inner_steps: c.get("inner-steps")?,
        eval_every: c.get("eval-every")?,
        seed: c.get("seed")?,
        jitter: c.get("jitter")?,
        contour: contour(c)?,
        seg_net: net(c, "seg")?,
        approx_net: net(c, "approx")?,
        exec: exec(c)?,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

/// Settings for commands that only decode.
fn eval_config(c: &RunConfig) -> Result<TrainConfig> {
    Ok(TrainConfig { contour: contour(c)?, exec: exec(c)?, ..TrainConfig::default() })
}

fn out_dir(c: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(c.raw("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    c.write(&dir)?;
    Ok(dir)
}

fn load_model(c: &RunConfig) -> Result<Model> {
    let path = c.raw("checkpoint");
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {path}"))?;
    Ok(Model::from_checkpoint(&ck)?)
}

fn load_data(c: &RunConfig) -> Result<Dataset> {
    let dir = c.raw("data");
    Dataset::load(dir).with_context(|| format!("loading dataset {dir}"))
}

fn seeds(c: &RunConfig) -> Result<Vec<u64>> {
    let first: u64 = c.get("seed")?;
    let n: u64 = c.get("seeds")?;
    Ok((first..first + n).collect())
}

pub fn gen_data(c: &RunConfig) -> Result<()> {
    let dir = PathBuf::from(c.raw("data"));
    let synth = SynthConfig { noise: c.get("noise")?, ..SynthConfig::default() };
    let m = gen_dataset(
        exec(c)?,
        &dir,
        c.get("seed")?,
        c.get("n-train")?,
        c.get("n-val")?,
        (c.get("height")?, c.get("width")?),
        &synth,
    )?;
    c.write(&dir)?;
    println!("wrote {} samples to {}", m.entries.len(), dir.display());
    Ok(())
}

pub fn train_cmd(c: &RunConfig) -> Result<()> {
    let cfg = train_config(c)?;
    let arm: Arm = c.raw("arm").parse().map_err(|e| UsageError(format!("{e}")))?;
    let size: usize = c.get("train-size")?;
    let data = load_data(c)?;
    if size == 0 || size > data.train.len() {
        return Err(UsageError(format!("--train-size {size} outside 1..={}", data.train.len())).into());
    }
    let subset: Vec<Sample> =
        telescopic_order(data.train.len(), cfg.seed)[..size].iter().map(|&i| data.train[i].clone()).collect();
    let out = out_dir(c)?;
    let outcome = train(&subset, &data.val, arm, &cfg)?;
    outcome.model.to_checkpoint().save(out.join("best.ckpt"))?;
    std::fs::write(out.join("log.csv"), outcome.log.to_csv())?;
    std::fs::write(out.join("evals.json"), outcome.log.evals_json()? + "\n")?;
    let dice = outcome.log.best_dice.map_or("n/a".to_string(), |d| format!("{d:.4}"));
    println!(
        "arm={arm} train_size={size} iters={} best_iteration={} val_dice={dice}",
        cfg.iters, outcome.log.best_iteration
    );
    Ok(())
}

pub fn eval_cmd(c: &RunConfig) -> Result<()> {
    let cfg = eval_config(c)?;
    let model = load_model(c)?;
    let data = load_data(c)?;
    let samples = match c.raw("split") {
        "val" => &data.val,
        "train" => &data.train,
        other => return Err(UsageError(format!("--split must be train or val, got `{other}`")).into()),
    };
    let report = evaluate(&model, samples, &cfg)?;
    if c.raw("out") != "-" {
        let out = out_dir(c)?;
        std::fs::write(out.join("report.json"), report.to_json()? + "\n")?;
        std::fs::write(out.join("report.csv"), report.to_csv())?;
    }
    println!(
        "arm={} n={} dice={:.4} (std {:.4}) assd={:.3} hd={:.3} failures={}",
        model.arm,
        report.samples.len(),
        report.dice.mean,
        report.dice.std,
        report.assd.mean,
        report.hd.mean,
        report.failures
    );
    Ok(())
}

fn parse_center(raw: &str) -> Result<Point> {
    let bad = || UsageError(format!("--center must be x,y, got `{raw}`"));
    let (x, y) = raw.split_once(',').ok_or_else(bad)?;
    let x: f64 = x.trim().parse().map_err(|_| bad())?;
    let y: f64 = y.trim().parse().map_err(|_| bad())?;
    if !x.is_finite() || !y.is_finite() {
        return Err(bad().into());
    }
    Ok(Point::new(x, y))
}

/// Marks every pixel a closed polygon passes through.
fn trace_polygon(canvas: &mut Grid<u8>, polygon: &[Point]) {
    let n = polygon.len();
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        let steps = (a.dist(b) * 4.0).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let (x, y) = ((a.x + t * (b.x - a.x)).round(), (a.y + t * (b.y - a.y)).round());
            if x >= 0.0 && y >= 0.0 && (x as usize) < canvas.width() && (y as usize) < canvas.height() {
                canvas.set(x as usize, y as usize, 255);
            }
        }
    }
}

fn overlay(image: &Image, mask: &Mask, polygon: Option<&[Point]>) -> Grid<u8> {
    let (h, w) = image.shape();
    let mut canvas = Grid::from_vec(h, w, pgm::image_to_bytes(image)).expect("same shape");
    match polygon {
        Some(p) => trace_polygon(&mut canvas, p),
        None => {
            let edge = boundary(mask);
            for (v, &e) in canvas.data_mut().iter_mut().zip(edge.data()) {
                if e {
                    *v = 255;
                }
            }
        }
    }
    canvas
}

pub fn segment(c: &RunConfig) -> Result<()> {
    let cfg = eval_config(c)?;
    let center = parse_center(c.raw("center"))?;
    let model = load_model(c)?;
    let path = c.raw("image");
    let image = pgm::load_image(path).with_context(|| format!("loading image {path}"))?;
    let map = model.output_maps(cfg.exec, &[&image])?.remove(0);
    let decoded = decode(model.arm, &map, center, &cfg.contour)?;
    let out = out_dir(c)?;
    pgm::save_mask(out.join("mask.pgm"), &decoded.mask)?;
    let polygon = match &decoded.contour {
        Some((star, v)) => {
            let record = ContourRecord::new(star, v)?;
            std::fs::write(out.join("contour.json"), serde_json::to_string_pretty(&record)? + "\n")?;
            Some(indices_to_polygon(star, v)?)
        }
        None => None,
    };
    let canvas = overlay(&image, &decoded.mask, polygon.as_deref());
    let f = std::io::BufWriter::new(std::fs::File::create(out.join("overlay.pgm"))?);
    pgm::write_bytes(f, canvas.height(), canvas.width(), canvas.data())?;
    println!("arm={} foreground={} px, outputs in {}", model.arm, decoded.mask.count(), out.display());
    Ok(())
}

pub fn ablate_cmd(c: &RunConfig) -> Result<()> {
    let cfg = train_config(c)?;
    let sizes: Vec<usize> = c.list("sizes")?;
    let arms: Vec<Arm> = c.list("arms")?;
    let seeds = seeds(c)?;
    let data = load_data(c)?;
    let out = out_dir(c)?;
    let (rows, runs) = ablate(&data, &sizes, &arms, &seeds, &cfg, &mut |r| {
        eprintln!("size={} arm={} seed={} dice={:.4}", r.size, r.arm, r.seed, r.dice);
    })
    .map_err(|e| match e {
        sgcontour::Error::InvalidArgument(m) => UsageError(m).into(),
        other => anyhow::Error::from(other),
    })?;
    let table = ablation_csv(&rows);
    std::fs::write(out.join("ablation.csv"), &table)?;
    std::fs::write(out.join("runs.json"), serde_json::to_string_pretty(&runs)? + "\n")?;
    print!("{table}");
    Ok(())
}

pub fn jitter_cmd(c: &RunConfig) -> Result<()> {
    let cfg = eval_config(c)?;
    let fractions: Vec<f64> = c.list("fractions")?;
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(UsageError("--fractions must lie in [0, 1]".into()).into());
    }
    let seeds = seeds(c)?;
    let model = load_model(c)?;
    let data = load_data(c)?;
    let out = out_dir(c)?;
    let rows = jitter_eval(&model, &data.val, &fractions, &seeds, &cfg)?;
    let table = jitter_csv(&rows);
    std::fs::write(out.join("jitter.csv"), &table)?;
    print!("{table}");
    Ok(())
}

