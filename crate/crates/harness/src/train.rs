//! Training runs: one per seed, in auto or fixed mode.

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use autoopt::controller::{autoopt_step, GroupState, TraceRecord};
use autoopt::data::{load_cifar10, load_idx, cifar10_paths, mnist_paths, ChannelStats, Dataset, MiniBatchSampler, Split};
use autoopt::nn::{group_stats, misclassified, nll_loss, GroupSpec, Mode, Network, Param};
use autoopt::optim::fixed_step;
use autoopt::{Error, Real, Rng};
use serde::Serialize;

use crate::config::{DataConfig, DatasetKind, ExperimentConfig, Precision, RunMode};
use crate::csv_out::{write_csv, METRICS_COLUMNS, METRICS_SCHEMA, TRACE_COLUMNS, TRACE_SCHEMA};

/// Training and test data after subsetting and standardization.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(cfg: &DataConfig) -> Result<Prepared> {
    let (mut train, mut test) = match cfg.dataset {
        DatasetKind::Mnist => {
            let (ti, tl) = mnist_paths(&cfg.dir, Split::Train);
            let (ei, el) = mnist_paths(&cfg.dir, Split::Test);
            (load_idx(&ti, &tl, Split::Train)?, load_idx(&ei, &el, Split::Test)?)
        }
        DatasetKind::Cifar10 => (
            load_cifar10(&cifar10_paths(&cfg.dir, Split::Train), Split::Train)?,
            load_cifar10(&cifar10_paths(&cfg.dir, Split::Test), Split::Test)?,
        ),
    };
    let rng = Rng::new(cfg.seed);
    if let Some(n) = cfg.train_subset {
        train = train.subset(n, &mut rng.fork(1))?;
    }
    if let Some(n) = cfg.test_subset {
        test = test.subset(n, &mut rng.fork(2))?;
    }
    if cfg.standardize {
        let stats = ChannelStats::fit(&train)?;
        train.standardize(stats.clone())?;
        test.standardize(stats)?;
    }
    Ok(Prepared { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub seed: u64,
    pub step: u64,
    pub group: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub vhat: f64,
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
    pub flags: String,
}

impl TraceRow {
    fn new(seed: u64, r: TraceRecord) -> Self {
        TraceRow {
            seed,
            step: r.step,
            group: r.group,
            alpha: r.alpha,
            beta: r.beta,
            gamma1: r.gamma1,
            gamma2: r.gamma2,
            vhat: r.vhat,
            a11: r.a.get(0, 0),
            a12: r.a.get(0, 1),
            a22: r.a.get(1, 1),
            flags: r.flags.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
    pub trace: Vec<TraceRow>,
}

impl TrainReport {
    /// Test error of the last epoch of every seed, in seed order.
    pub fn final_test_errors(&self) -> Vec<f64> {
        last_per_seed(&self.metrics).iter().map(|m| m.test_error).collect()
    }

    pub fn final_train_errors(&self) -> Vec<f64> {
        last_per_seed(&self.metrics).iter().map(|m| m.train_error).collect()
    }
}

fn last_per_seed(metrics: &[MetricsRecord]) -> Vec<&MetricsRecord> {
    let mut out: Vec<&MetricsRecord> = Vec::new();
    for m in metrics {
        match out.last_mut() {
            Some(last) if last.seed == m.seed => *last = m,
            _ => out.push(m),
        }
    }
    out
}

/// Everything one seed produced, including the final weights.
#[derive(Debug)]
pub struct SeedOutcome<T: Real> {
    pub report: TrainReport,
    pub params: Vec<Param<T>>,
    pub error: Option<Error>,
}

/// Mean loss and error rate over a dataset in evaluation mode.
pub fn evaluate<T: Real>(net: &Network<T>, data: &Dataset) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut wrong = 0;
    let mut rng = Rng::new(0);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(500) {
        let (x, y) = data.batch::<T>(chunk)?;
        let (out, _) = net.forward(&x, Mode::Eval, &mut rng)?;
        loss += nll_loss(&out, &y)? * chunk.len() as f64;
        wrong += misclassified(&out, &y);
    }
    let n = data.len() as f64;
    Ok((loss / n, wrong as f64 / n))
}

/// Trains one seed. A failure mid-run is returned in `error` together with
/// the metrics gathered up to that point.
pub fn train_seed<T: Real>(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<SeedOutcome<T>> {
    let root = Rng::new(seed);
    let mut init_rng = root.fork(1);
    let sampler_rng = root.fork(2);
    let mut dropout_rng = root.fork(3);
    let mut net: Network<T> = cfg.model.build(cfg.dropout, &mut init_rng)?;
    let input = net.input_shape().to_vec();
    let sample = data.train.sample_shape();
    if input != sample {
        anyhow::bail!("model {} expects inputs {input:?} but the data has {sample:?}", cfg.model);
    }
    let groups = net.param_groups(cfg.merge_bias);
    let mut states: Vec<GroupState<T>> = groups
        .iter()
        .map(|g| GroupState::new(g.name.clone(), net.gather(g).len(), &cfg.controller))
        .collect();
    let mut sampler = MiniBatchSampler::new(data.train.len(), cfg.batch_size, sampler_rng)?;
    let clock = Instant::now();
    let mut report = TrainReport::default();
    let mut step = 0u64;
    let mut initial_loss = None;

    let mut run = || -> Result<(), Error> {
        for epoch in 1..=cfg.epochs {
            let (mut loss_sum, mut wrong, mut seen) = (0.0, 0usize, 0usize);
            for idx in sampler.epoch() {
                step += 1;
                let (x, y) = data.train.batch::<T>(&idx)?;
                let (out, cache) = net.forward(&x, Mode::Train, &mut dropout_rng)?;
                let loss = nll_loss(&out, &y)?;
                let initial = *initial_loss.get_or_insert(loss);
                if !loss.is_finite() || loss > 1e6 * initial {
                    return Err(Error::Divergence { step, loss, initial });
                }
                loss_sum += loss * idx.len() as f64;
                wrong += misclassified(&out, &y);
                seen += idx.len();
                match cfg.mode {
                    RunMode::Auto => {
                        let grads = net.backward(&cache, &y, true)?;
                        let stats = group_stats(&grads, &groups)?;
                        for ((g, state), s) in groups.iter().zip(states.iter_mut()).zip(&stats) {
                            let mut w = net.gather(g);
                            let rec = autoopt_step(state, &mut w, s, &cfg.optimizer, &cfg.controller)?;
                            net.scatter(g, &w)?;
                            if cfg.write_trace {
                                report.trace.push(TraceRow::new(seed, rec));
                            }
                        }
                    }
                    RunMode::Fixed => {
                        let grads = net.backward(&cache, &y, false)?;
                        for (g, state) in groups.iter().zip(states.iter_mut()) {
                            let gv = concat(&grads.grads, g);
                            let mut w = net.gather(g);
                            fixed_step(&cfg.optimizer, &mut state.optimizer, &mut w, &gv, cfg.alpha, cfg.beta)?;
                            net.scatter(g, &w)?;
                        }
                    }
                }
            }
            let (train_loss, train_error) = if cfg.eval_train {
                let (l, e) = evaluate(&net, &data.train).map_err(to_core)?;
                (l, e)
            } else {
                (loss_sum / seen as f64, wrong as f64 / seen as f64)
            };
            let (_, test_error) = evaluate(&net, &data.test).map_err(to_core)?;
            report.metrics.push(MetricsRecord {
                seed,
                epoch,
                step,
                train_loss,
                train_error,
                test_error,
                wall_time_s: if cfg.wall_time { clock.elapsed().as_secs_f64() } else { 0.0 },
            });
        }
        Ok(())
    };
    let error = run().err();
    Ok(SeedOutcome { report, params: net.params().to_vec(), error })
}

fn to_core(e: anyhow::Error) -> Error {
    match e.downcast::<Error>() {
        Ok(core) => core,
        Err(other) => Error::Format(other.to_string()),
    }
}

fn concat<T: Real>(grads: &[Vec<T>], group: &GroupSpec) -> Vec<T> {
    group.params.iter().flat_map(|&p| grads[p].iter().copied()).collect()
}

/// Runs every seed in order. Stops at the first failing seed and returns
/// its error alongside everything recorded so far.
pub fn run_seeds(cfg: &ExperimentConfig, data: &Prepared) -> Result<(TrainReport, Option<Error>)> {
    let mut all = TrainReport::default();
    for &seed in &cfg.seeds {
        let (report, error) = match cfg.precision {
            Precision::F32 => {
                let o = train_seed::<f32>(cfg, data, seed)?;
                (o.report, o.error)
            }
            Precision::F64 => {
                let o = train_seed::<f64>(cfg, data, seed)?;
                (o.report, o.error)
            }
        };
        all.metrics.extend(report.metrics);
        all.trace.extend(report.trace);
        if error.is_some() {
            return Ok((all, error));
        }
    }
    Ok((all, None))
}

pub fn write_report(out: &Path, report: &TrainReport, trace: bool) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join("metrics.csv"), METRICS_SCHEMA, METRICS_COLUMNS, &report.metrics)?;
    if trace {
        write_csv(&out.join("trace.csv"), TRACE_SCHEMA, TRACE_COLUMNS, &report.trace)?;
    }
    Ok(())
}

/// The `train` command: runs every seed and writes `metrics.csv` and, in
/// auto mode, `trace.csv` into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let data = prepare_data(&cfg.data)?;
    let (report, error) = run_seeds(cfg, &data)?;
    write_report(&cfg.out, &report, cfg.mode == RunMode::Auto && cfg.write_trace)?;
    match error {
        Some(e) => Err(e.into()),
        None => Ok(report),
    }
}
