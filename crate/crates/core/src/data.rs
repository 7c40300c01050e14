//! Synthetic datasets: DG trajectories at the generation rate, the
//! subsample-and-pick construction of training pairs, and persistence.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{rollout_system, Scheme, StepperConfig};
use crate::par::Exec;
use crate::physics::{OscillatorKind, OscillatorSpec};
use crate::rng::{substream, Purpose};
use crate::system::{AsS, State};

fn default_f0() -> f64 {
    1.0
}

/// Generation and split hyperparameters, with the reference values as defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(default = "default_f0")]
    pub f0: f64,
    /// Generation rate in multiples of `f0`.
    pub sr_gen: f64,
    /// Training and inference rate in multiples of `f0`.
    pub sr_train: f64,
    /// Training horizon in periods.
    pub duration_alpha: f64,
    /// Inference horizon in periods.
    pub duration_beta: f64,
    pub e0_band: [f64; 2],
    pub eeq_band: [f64; 2],
    pub n_traj: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_infer: usize,
    pub dg_tol: f64,
    pub dg_max_iters: usize,
    /// Inference trajectories are generated with `u = 0` instead of the designed input.
    pub zero_control_infer: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            f0: 1.0,
            sr_gen: 400.0,
            sr_train: 100.0,
            duration_alpha: 0.31,
            duration_beta: 5.0,
            e0_band: [0.1, 1.0],
            eeq_band: [0.1, 1.0],
            n_traj: 12_500,
            n_train: 25,
            n_eval: 2_500,
            n_infer: 100,
            dg_tol: 1e-12,
            dg_max_iters: 100,
            zero_control_infer: false,
        }
    }
}

impl DataConfig {
    pub fn gen_rate(&self) -> f64 {
        self.sr_gen * self.f0
    }

    pub fn train_rate(&self) -> f64 {
        self.sr_train * self.f0
    }

    /// Training step `h = 1 / sr_train`.
    pub fn h_train(&self) -> f64 {
        1.0 / self.train_rate()
    }

    /// Generation samples per training sample.
    pub fn stride(&self) -> Result<usize> {
        let r = self.sr_gen / self.sr_train;
        if r < 1.0 || (r - r.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("sr_gen / sr_train = {r} must be a positive integer")));
        }
        Ok(r.round() as usize)
    }

    /// Number of admissible start indices `n` on the training grid.
    pub fn train_candidates(&self) -> usize {
        (self.duration_alpha * self.sr_train + 1e-9).floor() as usize
    }

    /// Training-rate steps of an inference trajectory.
    pub fn infer_steps(&self) -> usize {
        (self.duration_beta * self.sr_train).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.stride()?;
        if self.train_candidates() == 0 {
            return Err(Error::Config("D_train is shorter than one sr_train step".into()));
        }
        if self.n_infer + self.n_eval + self.n_train > self.n_traj {
            return Err(Error::Config(format!(
                "pool of {} trajectories cannot hold {} + {} + {} disjoint sources",
                self.n_traj, self.n_infer, self.n_eval, self.n_train
            )));
        }
        Ok(())
    }

    fn gen_stepper(&self) -> StepperConfig {
        StepperConfig {
            dg_tol: self.dg_tol,
            dg_max_iters: self.dg_max_iters,
            ..StepperConfig::new(Scheme::Dg, 1.0 / self.gen_rate())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub states: Vec<State<f64>>,
    pub u: f64,
    pub t0: f64,
    pub sample_rate: f64,
    pub system: OscillatorKind,
}

impl Trajectory {
    /// Every `stride`-th sample.
    pub fn subsample(&self, stride: usize) -> Trajectory {
        Trajectory {
            states: self.states.iter().step_by(stride).copied().collect(),
            sample_rate: self.sample_rate / stride as f64,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPoint {
    pub x: State<f64>,
    pub u: f64,
    pub x_next: State<f64>,
    pub source_traj: usize,
    pub step_index: usize,
}

/// One pool trajectory: sampled initial condition and control, DG rollout
/// of `n_gen_steps` steps at the generation rate.
pub fn generate_trajectory(spec: &OscillatorSpec, cfg: &DataConfig, master: u64, id: usize, n_gen_steps: usize, zero_control: bool) -> Result<Trajectory> {
    let mut rng = substream(master, Purpose::Trajectory, id as u64);
    let x0 = spec.sample_initial_condition(&mut rng, cfg.e0_band[0], cfg.e0_band[1])?;
    let u = spec.design_control(&mut rng, cfg.eeq_band[0], cfg.eeq_band[1])?;
    let u = if zero_control { 0.0 } else { u };
    let states = rollout_system(&AsS(spec), x0, u, n_gen_steps, &cfg.gen_stepper())?;
    Ok(Trajectory {
        id,
        states,
        u,
        t0: 0.0,
        sample_rate: cfg.gen_rate(),
        system: spec.kind,
    })
}

/// Trajectories `ids` of the pool, generated independently.
pub fn generate_pool(
    spec: &OscillatorSpec,
    cfg: &DataConfig,
    master: u64,
    ids: &[usize],
    n_gen_steps: usize,
    zero_control: bool,
    exec: Exec,
) -> Result<Vec<Trajectory>> {
    exec.map(ids, |&id| generate_trajectory(spec, cfg, master, id, n_gen_steps, zero_control))
        .into_iter()
        .collect()
}

/// Disjoint `(infer, eval, train)` source ids drawn from the pool.
pub fn split_ids(cfg: &DataConfig, master: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    cfg.validate()?;
    let mut ids: Vec<usize> = (0..cfg.n_traj).collect();
    ids.shuffle(&mut substream(master, Purpose::Split, 0));
    let infer = ids[..cfg.n_infer].to_vec();
    let eval = ids[cfg.n_infer..cfg.n_infer + cfg.n_eval].to_vec();
    let start = cfg.n_infer + cfg.n_eval;
    let train = ids[start..start + cfg.n_train].to_vec();
    Ok((infer, eval, train))
}

/// One `((x_n, u), x_{n+1})` pair per trajectory, `n` uniform on the training window.
pub fn build_train_points<R: Rng + ?Sized>(pool: &[Trajectory], cfg: &DataConfig, rng: &mut R) -> Result<Vec<TrainPoint>> {
    let stride = cfg.stride()?;
    let n_cand = cfg.train_candidates();
    if n_cand == 0 {
        return Err(Error::Config("D_train is shorter than one sr_train step".into()));
    }
    pool.iter()
        .map(|traj| {
            let sub = traj.subsample(stride);
            if sub.states.len() < n_cand + 1 {
                return Err(Error::Config(format!("trajectory {} too short for the training window", traj.id)));
            }
            let n = rng.random_range(0..n_cand);
            Ok(TrainPoint {
                x: sub.states[n],
                u: traj.u,
                x_next: sub.states[n + 1],
                source_traj: traj.id,
                step_index: n,
            })
        })
        .collect()
}

/// Full trajectories resampled to the inference rate.
pub fn build_inference_set(pool: &[Trajectory], cfg: &DataConfig) -> Result<Vec<Trajectory>> {
    let stride = cfg.stride()?;
    let want = cfg.infer_steps() + 1;
    pool.iter()
        .map(|t| {
            let sub = t.subsample(stride);
            if sub.states.len() < want {
                return Err(Error::Config(format!("trajectory {} shorter than the inference horizon", t.id)));
            }
            Ok(Trajectory {
                states: sub.states[..want].to_vec(),
                ..sub
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub system: OscillatorKind,
    pub seed: u64,
    pub config: DataConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub header: DatasetHeader,
    pub train: Vec<TrainPoint>,
    pub eval: Vec<TrainPoint>,
    pub infer: Vec<Trajectory>,
}

/// Generates the three splits for `spec` from master seed `seed`.
pub fn build_dataset(spec: &OscillatorSpec, cfg: &DataConfig, seed: u64, exec: Exec) -> Result<DatasetBundle> {
    cfg.validate()?;
    let (infer_ids, eval_ids, train_ids) = split_ids(cfg, seed)?;
    let stride = cfg.stride()?;
    let short = (cfg.train_candidates() + 1) * stride;
    let long = cfg.infer_steps() * stride;
    let infer_pool = generate_pool(spec, cfg, seed, &infer_ids, long, cfg.zero_control_infer, exec)?;
    let eval_pool = generate_pool(spec, cfg, seed, &eval_ids, short, false, exec)?;
    let train_pool = generate_pool(spec, cfg, seed, &train_ids, short, false, exec)?;
    let train = build_train_points(&train_pool, cfg, &mut substream(seed, Purpose::Split, 1))?;
    let eval = build_train_points(&eval_pool, cfg, &mut substream(seed, Purpose::Split, 2))?;
    let infer = build_inference_set(&infer_pool, cfg)?;
    Ok(DatasetBundle {
        header: DatasetHeader {
            system: spec.kind,
            seed,
            config: cfg.clone(),
        },
        train,
        eval,
        infer,
    })
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    #[serde(flatten)]
    header: DatasetHeader,
    /// `(trajectory id, step index)` of each point.
    train: Vec<(usize, usize)>,
    eval: Vec<(usize, usize)>,
    infer: Vec<usize>,
}

const CSV_COLUMNS: &str = "t,q,p,u,traj_id";

fn row(out: &mut impl Write, t: f64, x: State<f64>, u: f64, id: usize) -> std::io::Result<()> {
    writeln!(out, "{t:.16e},{:.16e},{:.16e},{u:.16e},{id}", x[0], x[1])
}

/// One JSON header line, a CSV column line, then one row per stored state.
pub fn save_dataset(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let h = bundle.header.config.h_train();
    let header = FileHeader {
        header: bundle.header.clone(),
        train: bundle.train.iter().map(|p| (p.source_traj, p.step_index)).collect(),
        eval: bundle.eval.iter().map(|p| (p.source_traj, p.step_index)).collect(),
        infer: bundle.infer.iter().map(|t| t.id).collect(),
    };
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    writeln!(out)?;
    writeln!(out, "{CSV_COLUMNS}")?;
    for p in bundle.train.iter().chain(&bundle.eval) {
        row(&mut out, p.step_index as f64 * h, p.x, p.u, p.source_traj)?;
        row(&mut out, (p.step_index + 1) as f64 * h, p.x_next, p.u, p.source_traj)?;
    }
    for t in &bundle.infer {
        for (n, x) in t.states.iter().enumerate() {
            row(&mut out, t.t0 + n as f64 / t.sample_rate, *x, t.u, t.id)?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Row {
    x: State<f64>,
    u: f64,
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| Error::parse(1, "missing header"))??;
    let header: FileHeader = serde_json::from_str(&first).map_err(|e| Error::parse(1, e.to_string()))?;
    let columns = lines.next().ok_or_else(|| Error::parse(2, "missing column line"))??;
    if columns.trim() != CSV_COLUMNS {
        return Err(Error::parse(2, format!("expected columns '{CSV_COLUMNS}'")));
    }
    let mut rows: BTreeMap<usize, Vec<Row>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 3;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(line_no, format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(line_no, format!("column {}: {e}", k + 1)))
        };
        let id: usize = fields[4]
            .trim()
            .parse()
            .map_err(|e| Error::parse(line_no, format!("column 5: {e}")))?;
        num(0)?;
        rows.entry(id).or_default().push(Row {
            x: [num(1)?, num(2)?],
            u: num(3)?,
        });
    }
    let cfg = &header.header.config;
    let take_point = |rows: &mut BTreeMap<usize, Vec<Row>>, (id, n): (usize, usize)| -> Result<TrainPoint> {
        let r = rows.remove(&id).ok_or_else(|| Error::parse(0, format!("no rows for trajectory {id}")))?;
        if r.len() != 2 {
            return Err(Error::parse(0, format!("trajectory {id}: expected 2 rows, found {}", r.len())));
        }
        Ok(TrainPoint {
            x: r[0].x,
            u: r[0].u,
            x_next: r[1].x,
            source_traj: id,
            step_index: n,
        })
    };
    let train = header.train.iter().map(|&p| take_point(&mut rows, p)).collect::<Result<Vec<_>>>()?;
    let eval = header.eval.iter().map(|&p| take_point(&mut rows, p)).collect::<Result<Vec<_>>>()?;
    let infer = header
        .infer
        .iter()
        .map(|&id| {
            let r = rows.remove(&id).ok_or_else(|| Error::parse(0, format!("no rows for trajectory {id}")))?;
            Ok(Trajectory {
                id,
                u: r[0].u,
                states: r.iter().map(|r| r.x).collect(),
                t0: 0.0,
                sample_rate: cfg.train_rate(),
                system: header.header.system,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(id) = rows.keys().next() {
        return Err(Error::parse(0, format!("rows for trajectory {id} are not referenced by the header")));
    }
    Ok(DatasetBundle {
        header: header.header,
        train,
        eval,
        infer,
    })
}
