//! The `train`, `eval`, `ablate`, and `bench` commands.
//!
//! Every run is driven by a flat TOML config file; CLI flags override the
//! file. Unknown keys are rejected by name. Each run directory receives a
//! fully-resolved `config-echo.toml` so the run is reproducible from its
//! artifacts alone.
//!
//! Output schemas (all stable):
//! - `metrics.csv`: `epoch,iteration,loss1,loss_s,loss_t,loss3,target_accuracy,head_i_accuracy...`
//!   (no wall-time column: metrics files are byte-identical across runs of
//!   the same seed, which timing would break; timings land in `bench.csv`).
//! - `boundary.csv`: `x,y,consensus,head_1,...,head_n`.
//! - `ablation.csv`: `seed,full,remove_pair,duplicate_pair,mcd_n2`.
//! - `bench.csv`: `n,mean_epoch_ms,std_epoch_ms,warm_epochs`.
//! - `curves.csv`: `iteration,dis_n<k>...` (mean pair discrepancy per n).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBlock, ParamTensor};
use crate::data::{self, DatasetSplit, ToySpec};
use crate::losses::LossVariant;
use crate::model::{ModelSpec, MultiClassifierModel};
use crate::training::{self, MetricsRecord, TrainConfig};
use crate::{Error, Result};

fn default_task() -> String {
    "toy".into()
}

/// The flat run config. Field names are kebab-case in the file; unknown
/// keys are rejected with the offending name.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// "toy" or "csv".
    pub task: String,
    pub output_dir: Option<PathBuf>,
    // training
    pub n_classifiers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub step3_repeats: usize,
    pub seed: u64,
    pub variant: String,
    pub pretrain_epochs: usize,
    // model
    pub feature_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    // toy task (also reseeded per run: the dataset seed is the run seed)
    pub n_per_domain: usize,
    pub rotation_deg: f64,
    pub noise_sigma: f64,
    // csv task
    pub source_csv: Option<PathBuf>,
    pub target_csv: Option<PathBuf>,
    // boundary export
    pub boundary_resolution: usize,
    pub boundary_image: bool,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            task: default_task(),
            output_dir: None,
            n_classifiers: tc.n_classifiers,
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            lr: tc.lr,
            step3_repeats: tc.step3_repeats,
            seed: tc.seed,
            variant: "full".into(),
            pretrain_epochs: tc.pretrain_epochs,
            feature_dim: 8,
            extractor_hidden: vec![16, 16],
            head_hidden: vec![16],
            n_per_domain: 300,
            rotation_deg: 30.0,
            noise_sigma: 0.1,
            source_csv: None,
            target_csv: None,
            boundary_resolution: 100,
            boundary_image: true,
        }
    }
}

/// CLI-flag overrides; flags win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub n_classifiers: Option<usize>,
    pub variant: Option<String>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(d) = &ov.output_dir {
            self.output_dir = Some(d.clone());
        }
        if let Some(n) = ov.n_classifiers {
            self.n_classifiers = n;
        }
        if let Some(v) = &ov.variant {
            self.variant = v.clone();
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let variant: LossVariant = self.variant.parse()?;
        let cfg = TrainConfig {
            n_classifiers: self.n_classifiers,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            step3_repeats: self.step3_repeats,
            seed: self.seed,
            variant,
            pretrain_epochs: self.pretrain_epochs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_spec(&self, input_dim: usize, k: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            feature_dim: self.feature_dim,
            extractor_hidden: self.extractor_hidden.clone(),
            head_hidden: self.head_hidden.clone(),
            n_classifiers: self.n_classifiers,
            n_classes: k,
        }
    }

    pub fn toy_spec(&self) -> ToySpec {
        ToySpec {
            n_per_domain: self.n_per_domain,
            rotation_deg: self.rotation_deg,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn dataset(&self) -> Result<DatasetSplit> {
        match self.task.as_str() {
            "toy" => data::make_toy(&self.toy_spec()),
            "csv" => {
                let src = self.source_csv.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("task 'csv' requires source-csv".into())
                })?;
                let tgt = self.target_csv.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("task 'csv' requires target-csv".into())
                })?;
                data::load_csv(src, tgt)
            }
            other => Err(Error::InvalidConfig(format!(
                "unknown task '{other}': expected 'toy' or 'csv'"
            ))),
        }
    }

    pub fn echo_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolved_output_dir(&self, command: &str) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{command}-seed{}", self.seed)))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics CSV without the wall-time column; see the module docs.
pub fn metrics_csv(records: &[MetricsRecord], n_heads: usize) -> String {
    let mut out = String::new();
    let heads: Vec<String> = (1..=n_heads).map(|i| format!("head_{i}_accuracy")).collect();
    let _ = writeln!(
        out,
        "epoch,iteration,loss1,loss_s,loss_t,loss3,target_accuracy,{}",
        heads.join(",")
    );
    for r in records {
        let per_head = match &r.per_head_accuracy {
            Some(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            None => vec![String::new(); n_heads].join(","),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.iteration,
            fmt_opt(r.loss1),
            fmt_opt(r.loss_s),
            fmt_opt(r.loss_t),
            fmt_opt(r.loss3),
            fmt_opt(r.target_accuracy),
            per_head
        );
    }
    out
}

/// Textual checkpoint: spec header, then per block one `tensor` line per
/// parameter tensor followed by its row-major values. Float formatting is
/// shortest-roundtrip, so checkpoints are stable and lossless.
pub fn write_checkpoint(model: &MultiClassifierModel, path: &Path) -> Result<()> {
    let mut out = String::new();
    let s = &model.spec;
    let _ = writeln!(out, "mmcd-checkpoint v1");
    let _ = writeln!(
        out,
        "spec {} {} {} {}",
        s.input_dim, s.feature_dim, s.n_classifiers, s.n_classes
    );
    let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "extractor-hidden {}", join(&s.extractor_hidden));
    let _ = writeln!(out, "head-hidden {}", join(&s.head_hidden));
    for block in std::iter::once(&model.extractor).chain(&model.heads) {
        let _ = writeln!(out, "block {}", block.name);
        for t in &block.tensors {
            let _ = writeln!(out, "tensor {}", join(&t.shape));
            let vals: Vec<String> = t.values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
    }
    let _ = writeln!(out, "end");
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<MultiClassifierModel> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if lines.next() != Some("mmcd-checkpoint v1") {
        return Err(bad("missing or unsupported header"));
    }
    let parse_usizes = |s: &str| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad("malformed integer list")))
            .collect()
    };
    let spec_line = lines.next().ok_or_else(|| bad("truncated spec"))?;
    let spec_fields = parse_usizes(spec_line.strip_prefix("spec ").ok_or_else(|| bad("missing spec"))?)?;
    if spec_fields.len() != 4 {
        return Err(bad("spec line needs 4 fields"));
    }
    let eh = lines
        .next()
        .and_then(|l| l.strip_prefix("extractor-hidden"))
        .ok_or_else(|| bad("missing extractor-hidden"))?;
    let hh = lines
        .next()
        .and_then(|l| l.strip_prefix("head-hidden"))
        .ok_or_else(|| bad("missing head-hidden"))?;
    let spec = ModelSpec {
        input_dim: spec_fields[0],
        feature_dim: spec_fields[1],
        n_classifiers: spec_fields[2],
        n_classes: spec_fields[3],
        extractor_hidden: parse_usizes(eh)?,
        head_hidden: parse_usizes(hh)?,
    };

    let mut blocks: Vec<ParamBlock> = Vec::new();
    while let Some(line) = lines.next() {
        if line == "end" {
            break;
        }
        if let Some(name) = line.strip_prefix("block ") {
            blocks.push(ParamBlock::new(name.to_string(), Vec::new()));
        } else if let Some(shape) = line.strip_prefix("tensor ") {
            let shape = parse_usizes(shape)?;
            let values: Vec<f64> = lines
                .next()
                .ok_or_else(|| bad("truncated tensor values"))?
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad("malformed value")))
                .collect::<Result<_>>()?;
            if values.len() != shape.iter().product::<usize>() {
                return Err(bad("tensor value count does not match its shape"));
            }
            blocks
                .last_mut()
                .ok_or_else(|| bad("tensor before any block"))?
                .tensors
                .push(ParamTensor::new(shape, values));
        } else {
            return Err(bad("unrecognized line"));
        }
    }
    if blocks.len() != spec.n_classifiers + 1 {
        return Err(bad("block count does not match spec"));
    }
    let extractor = blocks.remove(0);
    Ok(MultiClassifierModel {
        spec,
        extractor,
        heads: blocks,
    })
}

fn run_one(cfg: &RunConfigFile) -> Result<(MultiClassifierModel, DatasetSplit, Vec<MetricsRecord>)> {
    let split = cfg.dataset()?;
    let spec = cfg.model_spec(split.source_x.cols, split.k);
    let mut model = MultiClassifierModel::init(spec, cfg.seed)?;
    let tc = cfg.train_config()?;
    let records = training::train(&mut model, &split, &tc)?;
    Ok((model, split, records))
}

/// `train`: full run, artifacts written to the run directory.
pub fn cmd_train(config_path: &Path, ov: &Overrides) -> Result<PathBuf> {
    let mut cfg = RunConfigFile::load(config_path)?;
    cfg.apply(ov);
    cfg.train_config()?; // validate before doing any work
    let dir = cfg.resolved_output_dir("train");
    fs::create_dir_all(&dir)?;
    let (model, split, records) = run_one(&cfg)?;
    fs::write(dir.join("config-echo.toml"), cfg.echo_toml())?;
    fs::write(
        dir.join("metrics.csv"),
        metrics_csv(&records, cfg.n_classifiers),
    )?;
    if model.spec.input_dim == 2 {
        let grid = data::boundary_grid(&model, data::data_bounds(&split), cfg.boundary_resolution)?;
        let mut csv = Vec::new();
        data::write_boundary_csv(&mut csv, &grid, cfg.n_classifiers)?;
        fs::write(dir.join("boundary.csv"), csv)?;
        if cfg.boundary_image {
            let mut ppm = Vec::new();
            data::write_boundary_ppm(&mut ppm, &grid, cfg.boundary_resolution)?;
            fs::write(dir.join("boundary.ppm"), ppm)?;
        }
    }
    write_checkpoint(&model, &dir.join("checkpoint.txt"))?;
    Ok(dir)
}

/// `eval`: load a checkpoint, rebuild the dataset, print metrics.
pub fn cmd_eval(checkpoint: &Path, config_path: &Path, ov: &Overrides) -> Result<String> {
    let mut cfg = RunConfigFile::load(config_path)?;
    cfg.apply(ov);
    let model = read_checkpoint(checkpoint)?;
    let split = cfg.dataset()?;
    if model.spec.input_dim != split.source_x.cols || model.spec.n_classes != split.k {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects input-dim {} / {} classes, dataset has {} / {}",
            model.spec.input_dim,
            model.spec.n_classes,
            split.source_x.cols,
            split.k
        )));
    }
    let report = training::evaluate(&model, &split)?;
    let mut out = String::new();
    let _ = writeln!(out, "source accuracy: {:.4}", report.source_accuracy);
    match report.target_accuracy {
        Some(acc) => {
            let _ = writeln!(out, "target accuracy: {acc:.4}");
            let _ = writeln!(out, "target risk: {:.4}", report.target_risk.unwrap());
        }
        None => {
            let _ = writeln!(out, "target accuracy: unavailable");
            let _ = writeln!(out, "target risk: unavailable");
        }
    }
    if let Some(heads) = &report.per_head_target_accuracy {
        for (i, acc) in heads.iter().enumerate() {
            let _ = writeln!(out, "head {} target accuracy: {acc:.4}", i + 1);
        }
    }
    Ok(out)
}

/// Final consensus target accuracy of one run.
fn final_target_accuracy(cfg: &RunConfigFile) -> Result<f64> {
    let (model, split, _) = run_one(cfg)?;
    let report = training::evaluate(&model, &split)?;
    report.target_accuracy.ok_or_else(|| {
        Error::Contract("ablation and bench runs need target evaluation labels".into())
    })
}

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "remove_pair", "duplicate_pair", "mcd_n2"];

/// `ablate`: full / remove-pair / duplicate-pair / 2-classifier baseline
/// over shared seeds. Needs n >= 3 (the closed loop does not exist below).
pub fn cmd_ablate(config_path: &Path, ov: &Overrides, seeds: usize) -> Result<PathBuf> {
    let mut cfg = RunConfigFile::load(config_path)?;
    cfg.apply(ov);
    if cfg.n_classifiers < 3 {
        return Err(Error::InvalidConfig(format!(
            "ablation needs at least 3 classifiers (the loss closed loop is trivial below); got {}",
            cfg.n_classifiers
        )));
    }
    if seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be at least 1".into()));
    }
    cfg.train_config()?;
    let dir = cfg.resolved_output_dir("ablate");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config-echo.toml"), cfg.echo_toml())?;

    let mut csv = format!("seed,{}\n", ABLATION_VARIANTS.join(","));
    for seed in cfg.seed..cfg.seed + seeds as u64 {
        let mut row = vec![seed.to_string()];
        for name in ABLATION_VARIANTS {
            let mut run = cfg.clone();
            run.seed = seed;
            match name {
                "full" => run.variant = "full".into(),
                "remove_pair" => run.variant = "remove:0,1".into(),
                "duplicate_pair" => run.variant = "duplicate:0,1=0,2".into(),
                "mcd_n2" => {
                    run.variant = "full".into();
                    run.n_classifiers = 2;
                }
                _ => unreachable!(),
            }
            row.push(final_target_accuracy(&run)?.to_string());
        }
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    Ok(dir)
}

/// Mean and population std of per-epoch wall times, first adaptation epoch
/// discarded as warmup.
pub fn warm_epoch_times(records: &[MetricsRecord], pretrain_epochs: usize) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.wall_time_ms.is_some() && r.epoch > pretrain_epochs)
        .filter_map(|r| r.wall_time_ms)
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `bench`: per-epoch timing and convergence curves versus head count.
/// Timing covers the training loop only; absolute numbers are
/// machine-specific, so only the trend is checked (as a warning).
pub fn cmd_bench(config_path: &Path, ov: &Overrides, n_list: &[usize]) -> Result<PathBuf> {
    let mut cfg = RunConfigFile::load(config_path)?;
    cfg.apply(ov);
    if n_list.is_empty() {
        return Err(Error::InvalidConfig("--n-list must be nonempty".into()));
    }
    if let Some(&bad) = n_list.iter().find(|&&n| n < 2) {
        return Err(Error::InvalidConfig(format!(
            "--n-list entries must be at least 2, got {bad}"
        )));
    }
    cfg.train_config()?;
    let dir = cfg.resolved_output_dir("bench");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config-echo.toml"), cfg.echo_toml())?;

    let mut bench = String::from("n,mean_epoch_ms,std_epoch_ms,warm_epochs\n");
    let mut curves: Vec<Vec<f64>> = Vec::new();
    let mut means = Vec::new();
    for &n in n_list {
        let mut run = cfg.clone();
        run.n_classifiers = n;
        run.variant = "full".into();
        let (_, _, records) = run_one(&run)?;
        let warm = warm_epoch_times(&records, run.pretrain_epochs);
        let (mean, std) = mean_std(&warm);
        means.push(mean);
        let _ = writeln!(bench, "{n},{mean},{std},{}", warm.len());
        curves.push(records.iter().filter_map(|r| r.loss_t).collect());
    }
    for (i, w) in means.windows(2).enumerate() {
        if w[1] < w[0] {
            eprintln!(
                "warning: mean epoch time decreased from n={} ({:.3} ms) to n={} ({:.3} ms); \
                 absolute timings are machine-specific",
                n_list[i],
                w[0],
                n_list[i + 1],
                w[1]
            );
        }
    }
    fs::write(dir.join("bench.csv"), bench)?;

    let header: Vec<String> = n_list.iter().map(|n| format!("dis_n{n}")).collect();
    let mut curves_csv = format!("iteration,{}\n", header.join(","));
    let rows = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    for i in 0..rows {
        let cells: Vec<String> = curves
            .iter()
            .map(|c| c.get(i).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        let _ = writeln!(curves_csv, "{},{}", i + 1, cells.join(","));
    }
    fs::write(dir.join("curves.csv"), curves_csv)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn unknown_config_key_is_named() {
        let err = toml::from_str::<RunConfigFile>("n-classifers = 3\n").unwrap_err();
        assert!(err.to_string().contains("n-classifers"), "{err}");
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg = RunConfigFile::default();
        let echoed: RunConfigFile = toml::from_str(&cfg.echo_toml()).unwrap();
        assert_eq!(echoed.n_classifiers, cfg.n_classifiers);
        assert_eq!(echoed.variant, cfg.variant);
        assert_eq!(echoed.lr, cfg.lr);
    }

    #[test]
    fn checkpoint_round_trips() {
        let model = MultiClassifierModel::init(ModelSpec::toy(3, 2), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        write_checkpoint(&model, &path).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec, model.spec);
        assert_eq!(loaded.extractor.tensors, model.extractor.tensors);
        for (a, b) in loaded.heads.iter().zip(&model.heads) {
            assert_eq!(a.tensors, b.tensors);
        }
    }

    #[test]
    fn corrupt_checkpoint_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn metrics_csv_has_stable_header() {
        let csv = metrics_csv(&[], 3);
        assert_eq!(
            csv.trim(),
            "epoch,iteration,loss1,loss_s,loss_t,loss3,target_accuracy,head_1_accuracy,head_2_accuracy,head_3_accuracy"
        );
    }
}
