//! Experiment plumbing: key=value configuration, run directories, LODO
//! sweeps, the ablation matrix on disk, report tables and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::datasets::{derive_seed, load_image_dir, lodo_split, synth_generate, DomainDataset, LodoSplit, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{embed, fmt_g, population_std, summarize, EmbeddingDump, EmbeddingSource, MetricsRow};
use crate::losses::LossReport;
use crate::model::{Model, ModelConfig};
use crate::train::{ablation_matrix, erm_baseline_run, evaluate_target, train_run, RunOutput, TrainConfig};

const TAG_SPLIT: u64 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Alfa,
    Erm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Alfa => "alfa",
            Method::Erm => "erm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Dir(PathBuf),
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub method: Method,
    pub val_frac: f64,
    /// Held-out domain, by name or index; `None` means every domain in turn.
    pub target: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synth(SynthSpec::default()),
            train: TrainConfig::default(),
            method: Method::Alfa,
            val_frac: 0.2,
            target: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Small-scale settings used by the acceptance suite: 12-pixel images and
    /// a one-hidden-layer encoder trained for 1000 iterations.
    pub fn desk() -> Self {
        Self {
            data: DataSource::Synth(SynthSpec {
                image_size: 12,
                ..SynthSpec::default()
            }),
            train: TrainConfig {
                iterations: 1000,
                lr: 3e-4,
                hidden: vec![128],
                embed: 32,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    fn synth_mut(&mut self, key: &str) -> Result<&mut SynthSpec> {
        match &mut self.data {
            DataSource::Synth(s) => Ok(s),
            DataSource::Dir(_) => Err(Error::invalid(format!("`{key}` only applies to synthetic data"))),
        }
    }

    /// Sets one `key=value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let w = &mut t.weights;
        let a = &mut t.augment;
        match key {
            "data_dir" => self.data = DataSource::Dir(PathBuf::from(value.trim())),
            "synth_n_per_domain" => self.synth_mut(key)?.n_per_domain = parse_num(key, value)?,
            "synth_thetas" => self.synth_mut(key)?.thetas = parse_list(key, value)?,
            "synth_classes" => self.synth_mut(key)?.n_classes = parse_num(key, value)?,
            "image_size" => self.synth_mut(key)?.image_size = parse_num(key, value)?,
            "data_seed" => self.synth_mut(key)?.seed = parse_num(key, value)?,
            "method" => {
                self.method = match value.trim() {
                    "alfa" => Method::Alfa,
                    "erm" => Method::Erm,
                    _ => return Err(Error::invalid(format!("`method`: expected alfa or erm, got `{value}`"))),
                }
            }
            "val_frac" => self.val_frac = parse_num(key, value)?,
            "target" => self.target = Some(value.trim().to_string()).filter(|s| !s.is_empty() && s != "all"),
            "iterations" => t.iterations = parse_num(key, value)?,
            "batch" => t.batch = parse_num(key, value)?,
            "lr" => t.lr = parse_num(key, value)?,
            "inner_lr" => {
                t.inner_lr = if value.trim() == "same" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "mask" => t.mask = value.parse()?,
            "seed" => t.seed = parse_num(key, value)?,
            "phase2" => t.phase2 = parse_bool(key, value)?,
            "interleave" => t.interleave = parse_bool(key, value)?,
            "val_every" => t.val_every = parse_num(key, value)?,
            "meta_frac" => t.meta_frac = parse_num(key, value)?,
            "hidden" => t.hidden = parse_list(key, value)?,
            "embed" => t.embed = parse_num(key, value)?,
            "triplet_batch" => {
                t.triplet_batch = if value.trim() == "batch" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "margin" => w.margin = parse_num(key, value)?,
            "mining_margin" => w.mining_margin = parse_num(key, value)?,
            "tau" => w.tau = parse_num(key, value)?,
            "zeta" => w.zeta = parse_num(key, value)?,
            "normalize_pc" => w.normalize_pc = parse_bool(key, value)?,
            "negate_cov" => w.negate_cov = parse_bool(key, value)?,
            "hed_theta" => a.hed_theta = parse_num(key, value)?,
            "rotation_deg" => a.rotation_deg = parse_num(key, value)?,
            "translate_min" => a.translate.0 = parse_num(key, value)?,
            "translate_max" => a.translate.1 = parse_num(key, value)?,
            "shear_deg" => a.shear_deg = parse_num(key, value)?,
            "pixelate_factor" => a.pixelate_factor = parse_num(key, value)?,
            "apply_prob" => a.apply_prob = parse_num(key, value)?,
            k => match k.strip_prefix('a').and_then(|i| i.parse::<usize>().ok()) {
                Some(i @ 1..=7) => w.a[i - 1] = parse_num(key, value)?,
                _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.val_frac > 0.0 && self.val_frac < 0.5) {
            return Err(Error::invalid("val_frac must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// Every setting as ordered `key=value` pairs; [`Self::apply_text`] on the
    /// output reproduces the configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut kv = |k: &str, v: String| out.push((k.to_string(), v));
        match &self.data {
            DataSource::Synth(s) => {
                kv("synth_n_per_domain", s.n_per_domain.to_string());
                kv("synth_thetas", join(&s.thetas));
                kv("synth_classes", s.n_classes.to_string());
                kv("image_size", s.image_size.to_string());
                kv("data_seed", s.seed.to_string());
            }
            DataSource::Dir(p) => kv("data_dir", p.display().to_string()),
        }
        let t = &self.train;
        kv("method", self.method.name().into());
        kv("val_frac", self.val_frac.to_string());
        kv("target", self.target.clone().unwrap_or_else(|| "all".into()));
        kv("iterations", t.iterations.to_string());
        kv("batch", t.batch.to_string());
        kv("lr", t.lr.to_string());
        kv("inner_lr", t.inner_lr.map_or("same".into(), |v| v.to_string()));
        kv("mask", t.mask.to_string());
        kv("seed", t.seed.to_string());
        kv("phase2", u8::from(t.phase2).to_string());
        kv("interleave", u8::from(t.interleave).to_string());
        kv("val_every", t.val_every.to_string());
        kv("meta_frac", t.meta_frac.to_string());
        kv("hidden", join(&t.hidden));
        kv("embed", t.embed.to_string());
        kv(
            "triplet_batch",
            t.triplet_batch.map_or("batch".into(), |v| v.to_string()),
        );
        for (i, a) in t.weights.a.iter().enumerate() {
            kv(&format!("a{}", i + 1), a.to_string());
        }
        let w = &t.weights;
        kv("margin", w.margin.to_string());
        kv("mining_margin", w.mining_margin.to_string());
        kv("tau", w.tau.to_string());
        kv("zeta", w.zeta.to_string());
        kv("normalize_pc", u8::from(w.normalize_pc).to_string());
        kv("negate_cov", u8::from(w.negate_cov).to_string());
        let a = &t.augment;
        kv("hed_theta", a.hed_theta.to_string());
        kv("rotation_deg", a.rotation_deg.to_string());
        kv("translate_min", a.translate.0.to_string());
        kv("translate_max", a.translate.1.to_string());
        kv("shear_deg", a.shear_deg.to_string());
        kv("pixelate_factor", a.pixelate_factor.to_string());
        kv("apply_prob", a.apply_prob.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        if text.lines().any(|l| l.trim_start().starts_with("data_dir")) {
            c.data = DataSource::Dir(PathBuf::new());
        }
        c.apply_text(text)?;
        Ok(c)
    }
}

pub fn load_dataset(source: &DataSource) -> Result<DomainDataset> {
    match source {
        DataSource::Synth(spec) => synth_generate(spec),
        DataSource::Dir(dir) => load_image_dir(dir),
    }
}

/// Resolves a domain by exact name or by index.
pub fn resolve_domain(ds: &DomainDataset, key: &str) -> Result<usize> {
    if let Some(k) = ds.domain_names().iter().position(|n| n == key) {
        return Ok(k);
    }
    match key.parse::<usize>() {
        Ok(k) if k < ds.n_domains() => Ok(k),
        _ => Err(Error::invalid(format!(
            "unknown domain `{key}`; available: {}",
            ds.domain_names().join(", ")
        ))),
    }
}

pub fn make_split(ds: &DomainDataset, cfg: &ExperimentConfig, target: usize) -> Result<LodoSplit> {
    lodo_split(ds, target, cfg.val_frac, derive_seed(cfg.train.seed, TAG_SPLIT))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn losses_csv(losses: &[(usize, LossReport)]) -> String {
    let mut s = LossReport::csv_header();
    s.push('\n');
    for (step, r) in losses {
        s.push_str(&r.csv_row(*step));
        s.push('\n');
    }
    s
}

fn series_csv(header: &str, rows: &[(usize, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (i, v) in rows {
        let _ = writeln!(s, "{i},{}", fmt_g(*v));
    }
    s
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{}\n", MetricsRow::HEADER);
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Reads a metrics CSV, skipping the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read(path)?
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRow::parse)
        .collect()
}

/// Model configuration of a run, as rebuilt from its settings.
pub fn model_config_for(ds: &DomainDataset, cfg: &ExperimentConfig) -> ModelConfig {
    let enc = cfg.train.encoder(ds.input_size());
    match cfg.method {
        Method::Alfa => ModelConfig::new(enc, ds.n_classes(), ds.n_domains() - 1, cfg.train.mask),
        Method::Erm => ModelConfig::erm(enc, ds.n_classes()),
    }
}

pub struct TargetResult {
    pub metrics: MetricsRow,
    pub run: RunOutput,
}

/// Trains on every domain but `target` and writes the run directory:
/// `config.txt`, `losses.csv`, `meta_losses.csv`, `validation.csv`,
/// `checkpoint/`, `predictions.csv`, `metrics.csv`.
pub fn run_target(ds: &DomainDataset, cfg: &ExperimentConfig, target: usize, out: &Path) -> Result<TargetResult> {
    cfg.validate()?;
    let split = make_split(ds, cfg, target)?;
    let run = match cfg.method {
        Method::Alfa => train_run(ds, &split, &cfg.train)?,
        Method::Erm => erm_baseline_run(ds, &split, &cfg.train)?,
    };
    let preds = evaluate_target(&run.best, ds, &split)?;
    let mask = match cfg.method {
        Method::Alfa => cfg.train.mask.to_string(),
        Method::Erm => "erm".to_string(),
    };
    let phase2 = cfg.method == Method::Alfa && cfg.train.phase2;
    let metrics = MetricsRow::from_predictions(ds.domain_name(target), cfg.train.seed, &mask, phase2, &preds)?;

    let echo = ExperimentConfig {
        target: Some(ds.domain_name(target).to_string()),
        ..cfg.clone()
    };
    write(&out.join("config.txt"), &echo.to_text())?;
    write(&out.join("losses.csv"), &losses_csv(&run.losses))?;
    write(
        &out.join("meta_losses.csv"),
        &series_csv("step,meta_loss", &run.meta_losses),
    )?;
    write(
        &out.join("validation.csv"),
        &series_csv("step,accuracy", &run.validation),
    )?;
    write(&out.join("predictions.csv"), &preds.csv())?;
    write(&out.join("metrics.csv"), &metrics_csv(std::slice::from_ref(&metrics)))?;
    run.best.save(&out.join("checkpoint"))?;
    Ok(TargetResult { metrics, run })
}

fn target_dir(out: &Path, ds: &DomainDataset, target: usize) -> PathBuf {
    out.join(format!("target_{}", ds.domain_name(target)))
}

/// One run per held-out domain, then `metrics.csv` with one row per target
/// followed by `mean` and (population) `std` rows.
pub fn run_lodo(ds: &DomainDataset, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MetricsRow>> {
    let results: Vec<TargetResult> = (0..ds.n_domains())
        .into_par_iter()
        .map(|k| run_target(ds, cfg, k, &target_dir(out, ds, k)))
        .collect::<Result<_>>()?;
    let mut rows: Vec<MetricsRow> = results.into_iter().map(|r| r.metrics).collect();
    rows.extend(summarize(&rows)?);
    write(&out.join("config.txt"), &cfg.to_text())?;
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    Ok(rows)
}

/// The seven-mask ablation for each target in `targets`; writes
/// `ablation.csv` (one metrics row per mask and target) and per-run loss logs.
pub fn run_ablation(
    ds: &DomainDataset,
    cfg: &ExperimentConfig,
    targets: &[usize],
    out: &Path,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &k in targets {
        let split = make_split(ds, cfg, k)?;
        for r in ablation_matrix(ds, &split, &cfg.train)? {
            let dir = target_dir(out, ds, k).join(format!("mask_{}", r.mask));
            write(&dir.join("losses.csv"), &losses_csv(&r.run.losses))?;
            rows.push(r.metrics);
        }
    }
    write(&out.join("config.txt"), &cfg.to_text())?;
    write(&out.join("ablation.csv"), &metrics_csv(&rows))?;
    Ok(rows)
}

fn ordered_unique(xs: impl Iterator<Item = String>) -> Vec<String> {
    let mut seen = Vec::new();
    for x in xs {
        if !seen.contains(&x) {
            seen.push(x);
        }
    }
    seen
}

/// Aggregates metrics rows (summary rows are ignored; repeated seeds are
/// averaged per cell).
///
/// With several masks the result has one row per mask, one accuracy column
/// per target, then `mean` and `std` (population) across targets. With a
/// single mask it has one row per target with accuracy, AUROC and recall,
/// followed by `mean` and `std` rows.
pub fn report(rows: &[MetricsRow]) -> Result<String> {
    let rows: Vec<&MetricsRow> = rows
        .iter()
        .filter(|r| r.target != "mean" && r.target != "std")
        .collect();
    if rows.is_empty() {
        return Err(Error::Data("no per-target metrics rows to report".into()));
    }
    let masks = ordered_unique(rows.iter().map(|r| r.mask.clone()));
    let targets = ordered_unique(rows.iter().map(|r| r.target.clone()));
    let cell = |mask: &str, target: &str, f: fn(&MetricsRow) -> f64| -> Option<f64> {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.mask == mask && r.target == target)
            .map(|r| f(r))
            .collect();
        (!v.is_empty()).then(|| crate::eval::mean(&v))
    };
    let mut s = String::new();
    if masks.len() > 1 {
        let _ = writeln!(s, "mask,{},mean,std", targets.join(","));
        for m in &masks {
            let cells: Vec<Option<f64>> = targets.iter().map(|t| cell(m, t, |r| r.accuracy)).collect();
            let present: Vec<f64> = cells.iter().flatten().copied().collect();
            let shown: Vec<String> = cells.iter().map(|c| c.map_or_else(String::new, fmt_g)).collect();
            let _ = writeln!(
                s,
                "{m},{},{},{}",
                shown.join(","),
                fmt_g(crate::eval::mean(&present)),
                fmt_g(population_std(&present))
            );
        }
    } else {
        let m = &masks[0];
        let _ = writeln!(s, "target,accuracy,auroc,recall");
        let mut cols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for t in &targets {
            let acc = cell(m, t, |r| r.accuracy).expect("target observed");
            let auc = cell(m, t, |r| r.auroc).expect("target observed");
            let rec = cell(m, t, |r| r.recall).expect("target observed");
            cols.entry("a").or_default().push(acc);
            cols.entry("u").or_default().push(auc);
            cols.entry("r").or_default().push(rec);
            let _ = writeln!(s, "{t},{},{},{}", fmt_g(acc), fmt_g(auc), fmt_g(rec));
        }
        for (name, agg) in [
            ("mean", crate::eval::mean as fn(&[f64]) -> f64),
            ("std", population_std),
        ] {
            let _ = writeln!(
                s,
                "{name},{},{},{}",
                fmt_g(agg(&cols["a"])),
                fmt_g(agg(&cols["u"])),
                fmt_g(agg(&cols["r"]))
            );
        }
    }
    Ok(s)
}

/// PCA embeddings of every example of every domain from a saved run
/// directory; writes `embeddings_<source>.csv` and returns the dump.
pub fn export_embeddings(run_dir: &Path, source: EmbeddingSource, out: &Path) -> Result<EmbeddingDump> {
    let cfg = ExperimentConfig::from_text(&read(&run_dir.join("config.txt"))?)?;
    let ds = load_dataset(&cfg.data)?;
    let model = Model::load(&run_dir.join("checkpoint"), model_config_for(&ds, &cfg))?;
    let mut images = Vec::new();
    let mut classes = Vec::new();
    let mut domains = Vec::new();
    for k in 0..ds.n_domains() {
        for e in ds.domain(k) {
            images.push(&e.image);
            classes.push(e.y);
            domains.push(ds.domain_name(k).to_string());
        }
    }
    let which = match source {
        EmbeddingSource::Extractor(e) => Some(e),
        EmbeddingSource::All => None,
    };
    let features = embed(&model, &images, which)?;
    let dump = EmbeddingDump::new(&features, classes, domains, source)?;
    write(&out.join(format!("embeddings_{}.csv", source.tag())), &dump.csv())?;
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let mut c = ExperimentConfig::desk();
        c.apply_text("# comment\nlr = 0.001\nmask=bg\nhidden=16,8\na3=0.5\ninner_lr=0.01\nphase2=off\n")
            .unwrap();
        assert_eq!(c.train.hidden, vec![16, 8]);
        assert_eq!(c.train.weights.a[2], 0.5);
        assert!(!c.train.phase2);
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);

        let mut d = ExperimentConfig::default();
        d.set("data_dir", "/tmp/x").unwrap();
        assert_eq!(ExperimentConfig::from_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn config_errors_name_the_key() {
        let mut c = ExperimentConfig::default();
        let e = c.set("lr", "fast").unwrap_err().to_string();
        assert!(e.contains("lr"), "{e}");
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("a8", "1").is_err());
        assert!(c.apply_text("just words").is_err());
        c.set("data_dir", "/x").unwrap();
        assert!(c.set("image_size", "12").is_err());
    }

    fn row(target: &str, mask: &str, acc: f64) -> MetricsRow {
        MetricsRow {
            target: target.into(),
            seed: 0,
            mask: mask.into(),
            phase2: true,
            accuracy: acc,
            auroc: acc,
            recall: acc,
        }
    }

    #[test]
    fn report_shapes() {
        let mut rows = Vec::new();
        for (i, m) in ["a", "b", "g", "ab", "ag", "bg", "abg"].iter().enumerate() {
            rows.push(row("x", m, 50.0 + i as f64));
            rows.push(row("y", m, 60.0 + i as f64));
        }
        let table = report(&rows).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "mask,x,y,mean,std");
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[7], "abg,56,66,61,5");

        let single = vec![row("x", "abg", 70.0), row("y", "abg", 80.0), row("mean", "abg", 75.0)];
        let t = report(&single).unwrap();
        assert!(t.contains("\nmean,75,75,75\nstd,5,5,5\n"), "{t}");
    }

    #[test]
    fn tiny_lodo_writes_expected_files() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::default();
        c.apply_text(
            "synth_n_per_domain=16\nsynth_thetas=0,0.5,0.05\nimage_size=8\niterations=2\nbatch=6\nhidden=4\nembed=3\nval_every=1\nlr=0.001",
        )
        .unwrap();
        let ds = load_dataset(&c.data).unwrap();
        let rows = run_lodo(&ds, &c, tmp.path()).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[3].target, "mean");
        let back = read_metrics(&tmp.path().join("metrics.csv")).unwrap();
        assert_eq!(back.len(), 5);
        let run = tmp.path().join("target_theta_0.5");
        for f in [
            "config.txt",
            "losses.csv",
            "meta_losses.csv",
            "validation.csv",
            "predictions.csv",
            "metrics.csv",
            "checkpoint/manifest.txt",
        ] {
            assert!(run.join(f).exists(), "{f}");
        }
        let dump = export_embeddings(&run, EmbeddingSource::All, tmp.path()).unwrap();
        assert_eq!(dump.coords.len(), 48);
        assert!(tmp.path().join("embeddings_all.csv").exists());
    }
}
