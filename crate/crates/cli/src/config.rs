//! Flat `key = value` run configuration. Every key is also a flag of the
//! same name; precedence is default < config file < flag.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};

pub struct Setting {
    pub key: &'static str,
    /// Empty means required.
    pub default: &'static str,
    pub help: &'static str,
}

const fn s(key: &'static str, default: &'static str, help: &'static str) -> Setting {
    Setting { key, default, help }
}

/// A bad flag, config key or value. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXEC: &[Setting] = &[s("parallel", "true", "use the thread pool (false = sequential)")];

pub const CONTOUR: &[Setting] = &[
    s("lines", "24", "radial lines N"),
    s("points", "32", "samples per line M"),
    s("radius", "28", "star radius R in pixels"),
    s("delta", "2", "largest index step between neighbouring lines"),
    s("window", "5", "odd moving-average window applied to contour indices"),
    s("polarity", "negated", "edge polarity: as-printed or negated"),
];

pub const NETS: &[Setting] = &[
    s("seg-depth", "2", "segmentation net down blocks"),
    s("seg-channels", "8", "segmentation net base channels"),
    s("seg-convs", "2", "convolutions per segmentation block"),
    s("approx-depth", "3", "surrogate down blocks"),
    s("approx-channels", "8", "surrogate base channels"),
    s("approx-convs", "2", "convolutions per surrogate block"),
];

pub const OPTIM: &[Setting] = &[
    s("lr", "0.0001", "Adam learning rate"),
    s("beta1", "0.9", "Adam first-moment decay"),
    s("beta2", "0.999", "Adam second-moment decay"),
    s("batch", "10", "training batch size"),
    s("iters", "2000", "training iterations"),
    s("sigma", "1", "exploration noise standard deviation"),
    s("samples", "10", "noise samples per iteration"),
    s("inner-steps", "10", "surrogate updates per noise sample"),
    s("eval-every", "50", "iterations between validation evaluations"),
    s("jitter", "0.2", "training center jitter, fraction of object radius"),
];

pub const GEN_DATA: &[Setting] = &[
    s("data", "data", "output dataset directory"),
    s("seed", "0", "generator seed"),
    s("n-train", "200", "training samples"),
    s("n-val", "60", "validation samples"),
    s("height", "64", "image height"),
    s("width", "64", "image width"),
    s("noise", "0.05", "pixel noise standard deviation"),
];

pub const TRAIN: &[Setting] = &[
    s("data", "data", "dataset directory"),
    s("out", "run", "output directory"),
    s("arm", "edpcnn", "edpcnn, unet or unet+dp"),
    s("train-size", "10", "training samples (prefix of the seed's shuffled order)"),
    s("seed", "0", "run seed"),
];

pub const EVAL: &[Setting] = &[
    s("data", "data", "dataset directory"),
    s("checkpoint", "", "checkpoint file"),
    s("split", "val", "train or val"),
    s("out", "-", "directory for report.json and report.csv (- for none)"),
];

pub const SEGMENT: &[Setting] = &[
    s("image", "", "input PGM image"),
    s("center", "", "star center as x,y in pixels"),
    s("checkpoint", "", "checkpoint file"),
    s("out", "segment", "output directory"),
];

pub const ABLATE: &[Setting] = &[
    s("data", "data", "dataset directory"),
    s("out", "ablation", "output directory"),
    s("sizes", "10,50,200", "ascending training sizes"),
    s("arms", "edpcnn,unet,unet+dp", "arms to train"),
    s("seeds", "3", "number of seeds"),
    s("seed", "0", "first seed"),
];

pub const JITTER: &[Setting] = &[
    s("data", "data", "dataset directory"),
    s("checkpoint", "", "checkpoint file"),
    s("out", "jitter", "output directory"),
    s("fractions", "0,0.1,0.2,0.3,0.5", "center jitter fractions of the object radius"),
    s("seeds", "5", "number of seeds"),
    s("seed", "0", "first seed"),
];

pub struct Subcommand {
    pub name: &'static str,
    pub about: &'static str,
    pub groups: &'static [&'static [Setting]],
}

pub const SUBCOMMANDS: &[Subcommand] = &[
    Subcommand { name: "gen-data", about: "Generate a synthetic blob dataset", groups: &[GEN_DATA, EXEC] },
    Subcommand { name: "train", about: "Train one arm", groups: &[TRAIN, OPTIM, CONTOUR, NETS, EXEC] },
    Subcommand { name: "eval", about: "Score a checkpoint on a dataset split", groups: &[EVAL, CONTOUR, EXEC] },
    Subcommand { name: "segment", about: "Segment one image around a given center", groups: &[SEGMENT, CONTOUR, EXEC] },
    Subcommand {
        name: "ablate",
        about: "Train every arm at several training sizes",
        groups: &[ABLATE, OPTIM, CONTOUR, NETS, EXEC],
    },
    Subcommand { name: "jitter", about: "Dice under perturbed centers", groups: &[JITTER, CONTOUR, EXEC] },
];

fn settings(sub: &Subcommand) -> impl Iterator<Item = &'static Setting> {
    sub.groups.iter().flat_map(|g| g.iter())
}

pub fn command() -> Command {
    let mut cmd = Command::new("sgcontour")
        .about("Contour segmentation trained end to end through a dynamic-programming solver")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBCOMMANDS {
        let mut c = Command::new(sub.name).about(sub.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override it"),
        );
        for st in settings(sub) {
            let help = if st.default.is_empty() {
                format!("{} (required)", st.help)
            } else {
                format!("{} [default: {}]", st.help, st.default)
            };
            c = c.arg(Arg::new(st.key).long(st.key).value_name("VALUE").help(help));
        }
        cmd = cmd.subcommand(c);
    }
    cmd
}

/// Effective settings of one invocation, in table order.
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
}

fn parse_file(text: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected `key = value`", no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(sub: &Subcommand, m: &ArgMatches) -> Result<Self, UsageError> {
        let mut file = match m.get_one::<String>("config") {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| UsageError(format!("cannot read config {path}: {e}")))?;
                parse_file(&text)?
            }
            None => BTreeMap::new(),
        };
        let mut values = Vec::new();
        for st in settings(sub) {
            let v = match m.get_one::<String>(st.key) {
                Some(v) => v.clone(),
                None => file.remove(st.key).unwrap_or_else(|| st.default.to_string()),
            };
            file.remove(st.key);
            if v.is_empty() {
                return Err(UsageError(format!("--{} is required", st.key)));
            }
            values.push((st.key, v));
        }
        if let Some(k) = file.keys().next() {
            return Err(UsageError(format!("unknown config key `{k}` for {}", sub.name)));
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("setting `{key}` is not defined for this command"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, UsageError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| UsageError(format!("--{key} {raw}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, UsageError>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|p| p.trim().parse().map_err(|e| UsageError(format!("--{key} item `{p}`: {e}"))))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join("resolved-config.txt"), self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(args: &[&str], file: Option<&str>) -> Result<RunConfig, UsageError> {
        let tmp = tempfile::NamedTempFile::new().unwrap();
        let mut argv = vec!["sgcontour", "eval", "--checkpoint", "c.ckpt"];
        argv.extend_from_slice(args);
        let path = tmp.path().to_str().unwrap().to_string();
        if let Some(text) = file {
            std::fs::write(&path, text).unwrap();
            argv.extend(["--config", path.as_str()]);
        }
        let m = command().try_get_matches_from(argv).unwrap();
        let (_, sm) = m.subcommand().unwrap();
        RunConfig::resolve(&SUBCOMMANDS[2], sm)
    }

    #[test]
    fn precedence_and_errors() {
        let c = resolve(&[], None).unwrap();
        assert_eq!(c.raw("lines"), "24");
        let c = resolve(&[], Some("# comment\nlines = 12\ndelta=3\n")).unwrap();
        assert_eq!((c.raw("lines"), c.raw("delta")), ("12", "3"));
        let c = resolve(&["--lines", "40"], Some("lines = 12\n")).unwrap();
        assert_eq!(c.get::<usize>("lines").unwrap(), 40);
        assert!(resolve(&[], Some("iters = 3\n")).is_err());
        assert!(resolve(&[], Some("lines 3\n")).is_err());
        assert!(resolve(&["--lines", "x"], None).unwrap().get::<usize>("lines").is_err());
    }

    #[test]
    fn resolved_text_lists_every_key() {
        let c = resolve(&[], None).unwrap();
        let text = c.to_text();
        assert!(text.starts_with("data = data\ncheckpoint = c.ckpt\n"));
        assert_eq!(text.lines().count(), EVAL.len() + CONTOUR.len() + EXEC.len());
    }

    #[test]
    fn keys_unique_per_subcommand() {
        for sub in SUBCOMMANDS {
            let mut keys: Vec<_> = settings(sub).map(|s| s.key).collect();
            keys.sort();
            let n = keys.len();
            keys.dedup();
            assert_eq!(keys.len(), n, "{}", sub.name);
        }
        command().debug_assert();
    }
}
