//! The `buffer`, `distill`, `eval` and `gen-toy` subcommands.
//!
//! Output files, all under the output directory:
//!
//! * `buffer`: `trajectories.tjbf`, `buffer_manifest.json`
//! * `distill`: `synthetic.synd`, `metrics.csv`, `checkpoint.dsck`
//! * `eval`: `eval_runs.csv`, `eval_summary.csv`

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use trajdistill::buffer::TrajectoryBuffer;
use trajdistill::derive_seed;
use trajdistill::distill::{read_metrics, write_metrics, DistillState, Distiller};
use trajdistill::evaldata::{
    evaluate, init_synthetic, load_dataset, ChannelStats, LabeledDataset, Split, SyntheticDataset, ToyBlobs,
};
use trajdistill::nn::Network;
use trajdistill::train::accuracy;

use crate::config::RunConfig;
use crate::{Cli, CliError};

// Independent streams under the master seed.
const INIT_STREAM: u64 = 1;
const DISTILL_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::config("--config <path> is required for this command"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir(cli.out.as_deref());
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::runtime(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn input_error(path: &Path, e: trajdistill::Error) -> CliError {
    CliError::config(format!("{}: {e}", path.display()))
}

fn write_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("cannot write {}: {e}", path.display()))
}

/// The training split, and the test split if asked for, standardized with
/// the training statistics when the config says so.
fn load_data(cfg: &RunConfig, with_test: bool) -> Result<(LabeledDataset, Option<LabeledDataset>), CliError> {
    let train_path = cfg.train_path()?;
    let test_path = if with_test { Some(cfg.test_path()?) } else { None };
    let classes = cfg.dataset.classes;
    let mut train =
        load_dataset(train_path, cfg.format(), classes, Split::Train).map_err(|e| input_error(train_path, e))?;
    let mut test = test_path
        .map(|p| load_dataset(p, cfg.format(), classes, Split::Test).map_err(|e| input_error(p, e)))
        .transpose()?;
    if let Some(t) = &test {
        if t.item != train.item {
            return Err(CliError::config(format!(
                "dataset.test: items are {:?}, training items are {:?}",
                t.item, train.item
            )));
        }
    }
    if cfg.dataset.standardize {
        let stats = ChannelStats::of(&train);
        stats.standardize(&mut train)?;
        if let Some(t) = test.as_mut() {
            stats.standardize(t)?;
        }
    }
    Ok((train, test))
}

#[derive(Serialize)]
struct BufferManifest {
    config_hash: String,
    wall_time_seconds: f64,
    experts: usize,
    steps: usize,
    params: usize,
    initial_accuracy: Vec<f64>,
    final_accuracy: Vec<f64>,
}

pub fn buffer(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let (train, _) = load_data(&cfg, false)?;
    let spec = cfg.model.spec(train.item, train.classes);
    spec.validate().map_err(|e| CliError::config(format!("model: {e}")))?;
    let hyper = cfg.buffer.hyper();
    let steps = hyper.trajectory_len(train.len());
    if cfg.distill.max_step > steps {
        return Err(CliError::config(format!(
            "distill.max_step: {} exceeds the {steps} snapshots the buffer settings produce",
            cfg.distill.max_step
        )));
    }
    let dir = out_dir(cli, &cfg)?;
    let started = Instant::now();
    log::info!(
        "training {} teachers for {} epochs (T = {steps})",
        cfg.buffer.experts,
        hyper.epochs
    );
    let samples = train.samples();
    let buffer = TrajectoryBuffer::generate(&samples, &spec, &hyper, cfg.buffer.experts, cfg.seed)?;
    let mut initial = Vec::new();
    let mut fin = Vec::new();
    for e in 0..buffer.experts() {
        let view = buffer.expert(e)?;
        initial.push(accuracy(
            &Network::<f32>::from_params(&spec, view.snapshot(0)?)?,
            &samples,
        )?);
        fin.push(accuracy(
            &Network::<f32>::from_params(&spec, view.snapshot(buffer.steps())?)?,
            &samples,
        )?);
        log::info!("expert {e}: training accuracy {:.4} -> {:.4}", initial[e], fin[e]);
    }
    let path = dir.join("trajectories.tjbf");
    buffer.save(&path).map_err(|e| write_error(&path, e))?;
    let manifest = BufferManifest {
        config_hash: format!("{:016x}", cfg.hash()),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        experts: buffer.experts(),
        steps: buffer.steps(),
        params: buffer.num_params(),
        initial_accuracy: initial,
        final_accuracy: fin,
    };
    let path = dir.join("buffer_manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| write_error(&path, e))?;
    println!(
        "wrote {} ({} experts x {} snapshots)",
        dir.join("trajectories.tjbf").display(),
        buffer.experts(),
        buffer.steps() + 1
    );
    Ok(())
}

pub fn distill(
    cli: &Cli,
    trajectories: Option<&Path>,
    resume: bool,
    halt_after: Option<usize>,
) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, &cfg)?;
    let traj_path = trajectories.map_or_else(|| dir.join("trajectories.tjbf"), Path::to_path_buf);
    if !traj_path.is_file() {
        return Err(CliError::config(format!(
            "trajectory file not found: {}",
            traj_path.display()
        )));
    }
    let buffer = TrajectoryBuffer::load(&traj_path).map_err(|e| input_error(&traj_path, e))?;
    let (train, _) = load_data(&cfg, false)?;
    let spec = buffer.spec();
    if spec.input != train.item || spec.classes != train.classes {
        return Err(CliError::config(format!(
            "{}: model expects {:?} items in {} classes, the dataset has {:?} in {}",
            traj_path.display(),
            spec.input,
            spec.classes,
            train.item,
            train.classes
        )));
    }
    let hash = cfg.hash();
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = derive_seed(cfg.seed, DISTILL_STREAM);
    let distiller =
        Distiller::new(&buffer, dcfg, hash).map_err(|e| CliError::config(format!("{}: {e}", traj_path.display())))?;

    let checkpoint = dir.join("checkpoint.dsck");
    let metrics_path = dir.join("metrics.csv");
    let synthetic_path = dir.join("synthetic.synd");
    let (mut state, mut records) = if resume {
        let state = DistillState::load(&checkpoint).map_err(|e| input_error(&checkpoint, e))?;
        if state.synthetic.config_hash != hash {
            return Err(CliError::config(format!(
                "{}: written under config {:016x}, current config is {hash:016x}",
                checkpoint.display(),
                state.synthetic.config_hash
            )));
        }
        let mut records = if state.iteration > 0 {
            read_metrics(&metrics_path).map_err(|e| input_error(&metrics_path, e))?
        } else {
            Vec::new()
        };
        records.retain(|r| r.iteration <= state.iteration);
        if records.len() != state.iteration {
            return Err(CliError::config(format!(
                "{}: has {} rows for {} completed iterations",
                metrics_path.display(),
                records.len(),
                state.iteration
            )));
        }
        log::info!("resuming after iteration {}", state.iteration);
        (state, records)
    } else {
        let init = init_synthetic(
            &train,
            cfg.distill.ipc,
            cfg.distill.init,
            derive_seed(cfg.seed, INIT_STREAM),
        )?;
        (distiller.init_state(init)?, Vec::new())
    };

    let save_all = |state: &DistillState, records: &[trajdistill::distill::MetricsRecord]| -> Result<(), CliError> {
        state.save(&checkpoint).map_err(|e| write_error(&checkpoint, e))?;
        state
            .synthetic
            .save(&synthetic_path)
            .map_err(|e| write_error(&synthetic_path, e))?;
        write_metrics(&metrics_path, records).map_err(|e| write_error(&metrics_path, e))
    };
    let until = halt_after.unwrap_or(usize::MAX);
    let every = cfg.checkpoint_every;
    let mut pending = Vec::new();
    let outcome = distiller.run(&mut state, until, |st, rec| {
        if rec.iteration % 10 == 0 || !rec.event.is_empty() {
            log::info!(
                "iteration {} t={} match={:.5} overlap={:.5} mmd={:.5} eta={:.5} {}",
                rec.iteration,
                rec.t,
                rec.matching_loss,
                rec.overlap_loss,
                rec.mmd,
                rec.eta,
                rec.event
            );
        }
        pending.push(rec.clone());
        if rec.iteration % every == 0 {
            records.append(&mut pending);
            save_all(st, &records).map_err(|e| trajdistill::Error::State(e.message))?;
        }
        Ok(())
    });
    records.append(&mut pending);
    if let Err(e) = outcome {
        return Err(CliError::runtime(format!("iteration {}: {e}", state.iteration + 1)));
    }
    save_all(&state, &records)?;
    println!(
        "wrote {} and {} after {} iterations",
        synthetic_path.display(),
        metrics_path.display(),
        state.iteration
    );
    Ok(())
}

#[derive(Serialize)]
struct RunRow<'a> {
    model: &'a str,
    depth: usize,
    width: usize,
    run: usize,
    seed: u64,
    accuracy: Option<f64>,
    error: Option<&'a str>,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    model: &'a str,
    depth: usize,
    width: usize,
    mean: f64,
    std: f64,
    completed: usize,
    runs: usize,
    config_hash: &'a str,
}

pub fn eval(cli: &Cli, synthetic: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, &cfg)?;
    let syn_path = synthetic.map_or_else(|| dir.join("synthetic.synd"), Path::to_path_buf);
    if !syn_path.is_file() {
        return Err(CliError::config(format!(
            "synthetic file not found: {}",
            syn_path.display()
        )));
    }
    let s = SyntheticDataset::load(&syn_path).map_err(|e| input_error(&syn_path, e))?;
    let (_, test) = load_data(&cfg, true)?;
    let test = test.expect("requested");
    if test.item != s.item || test.classes != s.classes() {
        return Err(CliError::config(format!(
            "{}: synthetic items {:?} in {} classes do not match the test split's {:?} in {}",
            syn_path.display(),
            s.item,
            s.classes(),
            test.item,
            test.classes
        )));
    }
    let hash = format!("{:016x}", cfg.hash());
    let runs_path = dir.join("eval_runs.csv");
    let summary_path = dir.join("eval_summary.csv");
    let mut runs_csv = csv::Writer::from_path(&runs_path).map_err(|e| write_error(&runs_path, e))?;
    let mut summary_csv = csv::Writer::from_path(&summary_path).map_err(|e| write_error(&summary_path, e))?;
    for arch in cfg.eval_models() {
        let spec = arch.spec(s.item, s.classes());
        spec.validate()
            .map_err(|e| CliError::config(format!("eval.models: {e}")))?;
        let name = arch.arch.name();
        let report = evaluate(
            &s.samples(),
            &test,
            &spec,
            &cfg.eval.train(),
            &cfg.eval.augment,
            derive_seed(cfg.seed, EVAL_STREAM),
        )?;
        for r in &report.runs {
            runs_csv
                .serialize(RunRow {
                    model: name,
                    depth: arch.depth,
                    width: arch.width,
                    run: r.run,
                    seed: r.seed,
                    accuracy: r.accuracy,
                    error: r.error.as_deref(),
                    config_hash: &hash,
                })
                .map_err(|e| write_error(&runs_path, e))?;
        }
        summary_csv
            .serialize(SummaryRow {
                model: name,
                depth: arch.depth,
                width: arch.width,
                mean: report.mean,
                std: report.std,
                completed: report.completed(),
                runs: report.runs.len(),
                config_hash: &hash,
            })
            .map_err(|e| write_error(&summary_path, e))?;
        println!(
            "{name} (depth {}, width {}): {:.2} ± {:.2} % over {} runs",
            arch.depth,
            arch.width,
            100.0 * report.mean,
            100.0 * report.std,
            report.completed()
        );
    }
    runs_csv.flush().map_err(|e| write_error(&runs_path, e))?;
    summary_csv.flush().map_err(|e| write_error(&summary_path, e))?;
    Ok(())
}

const TOY_CONFIG: &str = r#"seed = 0
out_dir = "run"

[dataset]
format = "raw_tensor"
train = "train.rawt"
test = "test.rawt"
classes = 3

[model]
arch = "convnet_d"
depth = 2
width = 16

[buffer]
experts = 5
epochs = 10
lr = 0.01
batch_size = 64

[distill]
iterations = 300
max_step = 10
steps_per_snapshot = 5
retrain_points = 2
beta_overlap = 0.1

[eval]
runs = 10
epochs = 200
"#;

pub fn gen_toy(cli: &Cli) -> Result<(), CliError> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("toy"));
    std::fs::create_dir_all(&dir).map_err(|e| write_error(&dir, e))?;
    let (train, test) = ToyBlobs::default().generate(cli.seed.unwrap_or(0))?;
    for (name, data) in [("train.rawt", &train), ("test.rawt", &test)] {
        let path = dir.join(name);
        data.save_raw_tensor(&path).map_err(|e| write_error(&path, e))?;
    }
    let path = dir.join("toy.toml");
    std::fs::write(&path, TOY_CONFIG).map_err(|e| write_error(&path, e))?;
    println!("wrote {} and {}", dir.join("train.rawt").display(), path.display());
    Ok(())
}
