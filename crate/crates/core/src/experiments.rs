//! Study driver: training cells, inference error, aggregation and CSV output.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{build_dataset, load_dataset, DataConfig, DatasetBundle, Trajectory};
use crate::error::{Error, Result};
use crate::integrators::{rollout, Scheme, StepperConfig};
use crate::models::{save_checkpoint, DynamicsModel, ModelKind, NetSize, Regularizer, RegularizerKind};
use crate::par::Exec;
use crate::physics::{OscillatorKind, OscillatorSpec};
use crate::training::{train_run, TrainConfig};

/// Architecture paired with its integrator, e.g. `PHNN-S-DG`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub scheme: Scheme,
}

impl ModelSpec {
    pub const ALL: [ModelSpec; 5] = [
        ModelSpec::new(ModelKind::Node, Scheme::Rk2),
        ModelSpec::new(ModelKind::PhnnS, Scheme::Rk2),
        ModelSpec::new(ModelKind::PhnnS, Scheme::Dg),
        ModelSpec::new(ModelKind::PhnnJr, Scheme::Rk2),
        ModelSpec::new(ModelKind::PhnnJr, Scheme::Dg),
    ];

    pub const fn new(kind: ModelKind, scheme: Scheme) -> Self {
        ModelSpec { kind, scheme }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown model '{s}' (expected one of NODE-RK2, PHNN-S-RK2, PHNN-S-DG, PHNN-JR-RK2, PHNN-JR-DG)")))
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.kind.name(), self.scheme.name())
    }
}

impl TryFrom<String> for ModelSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<ModelSpec> for String {
    fn from(m: ModelSpec) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub system: OscillatorKind,
    pub models: Vec<ModelSpec>,
    pub sizes: Vec<NetSize>,
    pub n_train: Vec<usize>,
    pub regularizers: Vec<RegularizerKind>,
    /// Model-initialisation and minibatch seeds, one run per entry.
    pub seeds: Vec<u64>,
    /// Master seed of the dataset.
    pub data_seed: u64,
    pub data: DataConfig,
    /// `seed` and `regularizer` are overridden per cell.
    pub train: TrainConfig,
    /// Existing dataset to use instead of generating one.
    pub dataset: Option<PathBuf>,
    pub exec: Exec,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: OscillatorKind::Harmonic,
            models: vec![ModelSpec::new(ModelKind::Node, Scheme::Rk2), ModelSpec::new(ModelKind::PhnnS, Scheme::Dg)],
            sizes: vec![NetSize::Small],
            n_train: vec![25],
            regularizers: vec![RegularizerKind::None],
            seeds: vec![0, 1, 2],
            data_seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            dataset: None,
            exec: Exec::Parallel,
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.models.is_empty() || self.sizes.is_empty() || self.n_train.is_empty() || self.regularizers.is_empty() {
            return Err(Error::Config("models, sizes, n_train, regularizers and seeds must be non-empty".into()));
        }
        if self.n_train.contains(&0) {
            return Err(Error::Config("n_train entries must be positive".into()));
        }
        self.data.validate()?;
        self.train.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every `(model, size, N_train, regularizer, seed)` combination in output order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &model in &self.models {
            for &size in &self.sizes {
                for &n_train in &self.n_train {
                    for &regularizer in &self.regularizers {
                        for &seed in &self.seeds {
                            out.push(Cell {
                                system: self.system,
                                model,
                                size,
                                n_train,
                                regularizer,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub system: OscillatorKind,
    pub model: ModelSpec,
    pub size: NetSize,
    pub n_train: usize,
    pub regularizer: RegularizerKind,
    pub seed: u64,
}

impl Cell {
    pub fn run_name(&self) -> String {
        format!(
            "{}-{}-{}-N{}-{}-s{}",
            self.system.name(),
            self.model,
            self.size.name(),
            self.n_train,
            self.regularizer.name(),
            self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Study {
    I,
    II,
    III,
}

impl Study {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Study::I),
            "II" | "2" => Ok(Study::II),
            "III" | "3" => Ok(Study::III),
            _ => Err(Error::Config(format!("unknown study '{s}'"))),
        }
    }
}

/// Desk-scale presets; `full` gives the complete sweep, one config per system.
pub fn preset(study: Study, full: bool) -> Vec<ExperimentConfig> {
    let base = ExperimentConfig::default();
    if !full {
        let cfg = match study {
            Study::I => base,
            Study::II => ExperimentConfig {
                sizes: vec![NetSize::Small, NetSize::Medium, NetSize::Large],
                train: TrainConfig { steps: 10_000, ..base.train.clone() },
                ..base
            },
            Study::III => ExperimentConfig {
                regularizers: vec![
                    RegularizerKind::None,
                    RegularizerKind::ConditionNumber,
                    RegularizerKind::SpectralNorm,
                    RegularizerKind::StiffnessRatio,
                ],
                train: TrainConfig { steps: 10_000, ..base.train.clone() },
                ..base
            },
        };
        return vec![cfg];
    }
    [OscillatorKind::Harmonic, OscillatorKind::Duffing, OscillatorKind::SelfSustained]
        .into_iter()
        .map(|system| {
            let cfg = ExperimentConfig {
                system,
                models: ModelSpec::ALL.to_vec(),
                seeds: (0..10).collect(),
                n_train: vec![25, 100, 400],
                ..base.clone()
            };
            match study {
                Study::I => cfg,
                Study::II => ExperimentConfig {
                    n_train: vec![25],
                    sizes: vec![NetSize::Small, NetSize::Medium, NetSize::Large],
                    ..cfg
                },
                Study::III => ExperimentConfig {
                    regularizers: vec![
                        RegularizerKind::None,
                        RegularizerKind::ConditionNumber,
                        RegularizerKind::SpectralNorm,
                        RegularizerKind::StiffnessRatio,
                    ],
                    ..cfg
                },
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceError {
    /// Mean squared trajectory error over the trajectories that completed.
    pub l_traj: f64,
    /// Trajectories dropped because a step failed.
    pub failures: usize,
}

/// Autoregressive rollouts from each `x0` with the trajectory's input,
/// compared state by state to the reference.
pub fn inference_error(model: &DynamicsModel, infer: &[Trajectory], stepper: &StepperConfig, exec: Exec) -> Result<InferenceError> {
    if infer.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let bm = model.values();
    let sums = exec.map(infer, |t| -> Result<f64> {
        let pred = rollout(|x| bm.eval_g(x, t.u, stepper), t.states[0], t.states.len() - 1)?;
        Ok(pred
            .iter()
            .zip(&t.states)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum())
    });
    let mut total = 0.0;
    let mut used = 0usize;
    let mut failures = 0;
    for (t, s) in infer.iter().zip(sums) {
        match s {
            Ok(s) if s.is_finite() => {
                total += s;
                used += 1;
            }
            Ok(_) | Err(_) => {
                log::warn!("inference rollout of trajectory {} failed", t.id);
                failures += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::NumericFailure { op: "inference rollout" });
    }
    let horizon = (infer[0].states.len() - 1) as f64;
    Ok(InferenceError {
        l_traj: total / (used as f64 * horizon),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub system: OscillatorKind,
    pub model: ModelKind,
    pub scheme: Scheme,
    pub size: NetSize,
    pub n_train: usize,
    pub regularizer: RegularizerKind,
    pub seed: u64,
    pub l_traj: f64,
    pub infer_failures: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroupKey {
    pub system: OscillatorKind,
    pub model: ModelKind,
    pub scheme: Scheme,
    pub size: NetSize,
    pub n_train: usize,
    pub regularizer: RegularizerKind,
}

impl ResultRow {
    pub fn key(&self) -> GroupKey {
        GroupKey {
            system: self.system,
            model: self.model,
            scheme: self.scheme,
            size: self.size,
            n_train: self.n_train,
            regularizer: self.regularizer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub key: GroupKey,
    pub n_runs: usize,
    pub median: f64,
    pub iqr: f64,
}

/// Percentile `q ∈ [0, 1]` with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// `(median, IQR)` of a set of values.
pub fn median_iqr(values: &[f64]) -> Result<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok((percentile(&v, 0.5)?, percentile(&v, 0.75)? - percentile(&v, 0.25)?))
}

/// Median and IQR of `L_traj` per configuration group, in key order.
pub fn aggregate(rows: &[ResultRow]) -> Result<Vec<Summary>> {
    if rows.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.key()).or_default().push(r.l_traj);
    }
    groups
        .into_iter()
        .map(|(key, v)| {
            let (median, iqr) = median_iqr(&v)?;
            Ok(Summary {
                key,
                n_runs: v.len(),
                median,
                iqr,
            })
        })
        .collect()
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_results_csv(rows: &[ResultRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "system,model,scheme,size,n_train,regularizer,seed,l_traj,infer_failures")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.system.name(),
            r.model.name(),
            r.scheme.name(),
            r.size.name(),
            r.n_train,
            r.regularizer.name(),
            r.seed,
            real(r.l_traj),
            r.infer_failures
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(summary: &[Summary], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "system,model,scheme,size,n_train,regularizer,n_runs,median,iqr")?;
    for s in summary {
        let k = &s.key;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            k.system.name(),
            k.model.name(),
            k.scheme.name(),
            k.size.name(),
            k.n_train,
            k.regularizer.name(),
            s.n_runs,
            real(s.median),
            real(s.iqr)
        )?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
}

#[derive(Clone, Debug)]
pub struct StudyOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<Summary>,
    /// `(run name, message)` of cells that produced no result row.
    pub errors: Vec<(String, String)>,
}

/// Dataset for `cfg`: loaded if a path is given, otherwise generated with
/// enough training points for the largest `N_train`.
pub fn study_dataset(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let max_n = cfg.n_train.iter().copied().max().unwrap_or(0);
    let bundle = match &cfg.dataset {
        Some(path) => load_dataset(path)?,
        None => {
            let data = DataConfig {
                n_train: max_n,
                ..cfg.data.clone()
            };
            build_dataset(&OscillatorSpec::from_kind(cfg.system), &data, cfg.data_seed, cfg.exec)?
        }
    };
    if bundle.header.system != cfg.system {
        return Err(Error::Config(format!(
            "dataset holds {} data, config asks for {}",
            bundle.header.system.name(),
            cfg.system.name()
        )));
    }
    if bundle.train.len() < max_n {
        return Err(Error::Config(format!("dataset has {} training points, N_train up to {max_n} requested", bundle.train.len())));
    }
    Ok(bundle)
}

struct CellOutcome {
    row: Option<ResultRow>,
    error: Option<String>,
}

fn run_cell(cfg: &ExperimentConfig, bundle: &DatasetBundle, cell: &Cell, out_dir: &Path) -> Result<CellOutcome> {
    let spec = OscillatorSpec::from_kind(cell.system);
    let model0 = DynamicsModel::new(cell.model.kind, cell.size, &spec, cell.seed);
    let stepper = StepperConfig {
        scheme: cell.model.scheme,
        h: bundle.header.config.h_train(),
        ..cfg.train.stepper
    };
    let train_cfg = TrainConfig {
        seed: cell.seed,
        regularizer: if cell.regularizer == cfg.train.regularizer.kind {
            cfg.train.regularizer
        } else {
            Regularizer::new(cell.regularizer)
        },
        stepper,
        ..cfg.train.clone()
    };
    let sub = DatasetBundle {
        train: bundle.train[..cell.n_train].to_vec(),
        ..bundle.clone()
    };
    let name = cell.run_name();
    let outcome = train_run(&model0, &sub, &train_cfg)?;
    outcome.log.save_csv(&out_dir.join(format!("metrics-{name}.csv")))?;
    if cfg.save_checkpoints {
        save_checkpoint(&out_dir.join(format!("checkpoint-{name}.bin")), &outcome.model, cell.seed, outcome.best_step as u64)?;
    }
    let mut error = outcome.failure.clone();
    let row = match inference_error(&outcome.model, &bundle.infer, &stepper, Exec::Sequential) {
        Ok(inf) => Some(ResultRow {
            system: cell.system,
            model: cell.model.kind,
            scheme: cell.model.scheme,
            size: cell.size,
            n_train: cell.n_train,
            regularizer: cell.regularizer,
            seed: cell.seed,
            l_traj: inf.l_traj,
            infer_failures: inf.failures,
        }),
        Err(e) => {
            error = Some(match error {
                Some(prev) => format!("{prev}; inference: {e}"),
                None => format!("inference: {e}"),
            });
            None
        }
    };
    Ok(CellOutcome { row, error })
}

/// Trains and evaluates every cell, then writes `results.csv`,
/// `summary.csv`, `errors.csv` and one `metrics-<run>.csv` per cell.
pub fn run_study(cfg: &ExperimentConfig, out_dir: &Path) -> Result<StudyOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let bundle = study_dataset(cfg)?;
    let cells = cfg.cells();
    log::info!("running {} cells for {}", cells.len(), cfg.system.name());
    let outcomes = cfg.exec.map(&cells, |cell| {
        log::info!("cell {}", cell.run_name());
        run_cell(cfg, &bundle, cell, out_dir)
    });
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (cell, outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok(CellOutcome { row, error }) => {
                rows.extend(row);
                if let Some(e) = error {
                    errors.push((cell.run_name(), e));
                }
            }
            Err(e) => errors.push((cell.run_name(), e.to_string())),
        }
    }
    let summary = if rows.is_empty() { Vec::new() } else { aggregate(&rows)? };

    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("results.csv"))?);
    write_results_csv(&rows, &mut f)?;
    f.flush()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("summary.csv"))?);
    write_summary_csv(&summary, &mut f)?;
    f.flush()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("errors.csv"))?);
    writeln!(f, "run,error")?;
    for (run, e) in &errors {
        writeln!(f, "{run},{}", csv_field(e))?;
    }
    f.flush()?;
    Ok(StudyOutput { rows, summary, errors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: ModelKind, seed: u64, l: f64) -> ResultRow {
        ResultRow {
            system: OscillatorKind::Harmonic,
            model,
            scheme: Scheme::Rk2,
            size: NetSize::Small,
            n_train: 25,
            regularizer: RegularizerKind::None,
            seed,
            l_traj: l,
            infer_failures: 0,
        }
    }

    #[test]
    fn percentile_rule() {
        assert_eq!(median_iqr(&[1.0, 2.0, 3.0, 4.0]).unwrap(), (2.5, 1.5));
        assert_eq!(median_iqr(&[7.0]).unwrap(), (7.0, 0.0));
        assert!(median_iqr(&[]).is_err());
        assert_eq!(median_iqr(&[4.0, 1.0, 3.0, 2.0]).unwrap(), (2.5, 1.5));
    }

    #[test]
    fn groups_partition_rows() {
        let rows: Vec<_> = (0..3)
            .map(|s| row(ModelKind::Node, s, s as f64))
            .chain((0..4).map(|s| row(ModelKind::PhnnS, s, 1.0 + s as f64)))
            .collect();
        let sum = aggregate(&rows).unwrap();
        assert_eq!(sum.len(), 2);
        assert_eq!(sum.iter().map(|s| s.n_runs).sum::<usize>(), rows.len());
        assert_eq!((sum[1].median, sum[1].iqr), (2.5, 1.5));
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev).unwrap(), sum);
    }

    #[test]
    fn model_spec_names() {
        for m in ModelSpec::ALL {
            assert_eq!(ModelSpec::parse(&m.to_string()).unwrap(), m);
        }
        assert!(ModelSpec::parse("NODE-DG").is_err());
        let json = serde_json::to_string(&ModelSpec::new(ModelKind::PhnnJr, Scheme::Dg)).unwrap();
        assert_eq!(json, "\"PHNN-JR-DG\"");
    }

    #[test]
    fn presets() {
        let i = preset(Study::I, false);
        assert_eq!(i.len(), 1);
        assert_eq!(i[0].cells().len(), 6);
        assert_eq!(i[0].train.steps, 50_000);
        let iii = preset(Study::III, false);
        assert_eq!(iii[0].regularizers.len(), 4);
        let full = preset(Study::II, true);
        assert_eq!(full.len(), 3);
        assert_eq!(full[0].cells().len(), 5 * 3 * 10);
        let json = serde_json::to_string(&i[0]).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, i[0]);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"system":"duffing","seeds":[4]}"#).unwrap();
        assert_eq!(partial.data, DataConfig::default());
        assert_eq!(partial.seeds, vec![4]);
    }

    #[test]
    fn wired_model_reproduces_reference() {
        // reference produced by the model itself with the same stepper
        let spec = OscillatorSpec::harmonic();
        let wired = DynamicsModel::hand_wired(ModelKind::PhnnS, &spec).unwrap();
        let stepper = StepperConfig::new(Scheme::Dg, 0.01);
        let x0 = [0.3, -0.1];
        let states = crate::integrators::rollout_system(&wired.values(), x0, 0.2, 500, &stepper).unwrap();
        let t = Trajectory {
            id: 0,
            states,
            u: 0.2,
            t0: 0.0,
            sample_rate: 100.0,
            system: OscillatorKind::Harmonic,
        };
        let e = inference_error(&wired, &[t.clone()], &stepper, Exec::Sequential).unwrap();
        assert!(e.l_traj <= 1e-18);
        // a frozen prediction is penalised
        let mut still = DynamicsModel::new(ModelKind::Node, NetSize::Small, &spec, 0);
        still.params.values.iter_mut().for_each(|v| *v = 0.0);
        let e = inference_error(&still, &[t], &StepperConfig::new(Scheme::Rk2, 0.01), Exec::Sequential).unwrap();
        assert!(e.l_traj > 0.0 && e.l_traj.is_finite());
    }

    #[test]
    fn tiny_study_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            data: DataConfig {
                n_traj: 80,
                n_eval: 10,
                n_infer: 2,
                ..DataConfig::default()
            },
            n_train: vec![5],
            seeds: vec![0, 1],
            train: TrainConfig {
                steps: 20,
                batch_size: 8,
                eval_every: 10,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let a = run_study(&cfg, &dir.path().join("a")).unwrap();
        let b = run_study(&cfg, &dir.path().join("b")).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert!(a.errors.is_empty());
        let read = |p: &str| std::fs::read(dir.path().join(p).join("results.csv")).unwrap();
        assert_eq!(read("a"), read("b"));
        assert!(dir.path().join("a/metrics-harmonic-PHNN-S-DG-small-N5-BL-s1.csv").exists());
        assert_eq!(b.summary.len(), 2);
    }
}
