//! Command-line surface: generate / train / reparam / track / eval / verify.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use stdtrack::config::{Config, Precision};
use stdtrack::memory::UpdatePolicy;
use stdtrack::metrics::{evaluate, summarize, SequenceEval};
use stdtrack::model::Model;
use stdtrack::pipeline::{track_sequence, OracleFrame, TrackOptions};
use stdtrack::sequence::{
    list_sequences, load_sequence, read_results, write_results, LoadedSequence,
};
use stdtrack::synth::{generate_to_dir, SynthSpec};
use stdtrack::tensor::Real;
use stdtrack::trainer::train;
use stdtrack::verify::{capacity_sweep, run_suite};
use stdtrack::weights::{load_model, save_model};
use stdtrack::{Error, Result};

#[derive(Parser)]
#[command(
    name = "stdtrack",
    version,
    about = "Lightweight tracker with propagated target tokens and a re-parameterizable head"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence directory from a spec file
    Generate {
        /// key=value spec file (frames, width, motion, occlude, ...)
        #[arg(long)]
        spec: PathBuf,
        /// output sequence directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on one or more sequence directories
    Train {
        /// key=value run configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// sequence directory, or a directory of sequence directories
        #[arg(long)]
        data: PathBuf,
        /// output weights file
        #[arg(long)]
        out: PathBuf,
        /// training log (one line per step)
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// override the configured iteration count
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Collapse a trained model's head into its single-branch form
    Reparam {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Track sequences and write result files
    Track {
        #[arg(long)]
        weights: PathBuf,
        /// sequence directory, or a directory of sequence directories
        #[arg(long)]
        sequence: PathBuf,
        /// results file (single sequence) or directory (multiple)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// memory update policy: quality | fifo
        #[arg(long)]
        policy: Option<String>,
        /// memory capacity override
        #[arg(long)]
        capacity: Option<usize>,
        /// replace the learned head with a groundtruth oracle (pipeline debugging)
        #[arg(long, default_value_t = false)]
        oracle_head: bool,
        /// track up to this many sequences in parallel
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score result files against groundtruth
    Eval {
        /// results file (single sequence) or directory of result files
        #[arg(long)]
        results: PathBuf,
        /// matching sequence directory or root
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Run the property verification suite
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// also sweep memory capacities {2,4,6,8} on a synthetic sequence
        #[arg(long, default_value_t = false)]
        capacity_sweep: bool,
        /// weights to drive the sweep with (otherwise a groundtruth oracle head)
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// existing sequence for the sweep (otherwise one is generated)
        #[arg(long)]
        sequence: Option<PathBuf>,
    },
}

/// Entry point shared by `main` and the integration tests.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => {
            let text = std::fs::read_to_string(&spec)?;
            let spec = SynthSpec::from_key_values(&text)?;
            generate_to_dir(&spec, seed, &out)?;
            println!("generated {} frames under {}", spec.frames, out.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            log,
            seed,
            steps,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg, &data, &out, log.as_deref()),
                Precision::F64 => run_train::<f64>(&cfg, &data, &out, log.as_deref()),
            }
        }
        Command::Reparam {
            weights,
            out,
            config,
            seed,
        } => {
            let cfg = load_config(&config, Some(seed))?;
            run_reparam::<f32>(&cfg, &weights, &out, seed)
        }
        Command::Track {
            weights,
            sequence,
            out,
            config,
            policy,
            capacity,
            oracle_head,
            jobs,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let policy = policy.map(|p| p.parse::<UpdatePolicy>()).transpose()?;
            let opts = TrackOptions {
                capacity,
                policy,
                window: None,
            };
            match cfg.precision {
                Precision::F32 => {
                    run_track::<f32>(&cfg, &weights, &sequence, &out, &opts, oracle_head, jobs)
                }
                Precision::F64 => {
                    run_track::<f64>(&cfg, &weights, &sequence, &out, &opts, oracle_head, jobs)
                }
            }
        }
        Command::Eval { results, sequence } => run_eval(&results, &sequence),
        Command::Verify {
            seed,
            capacity_sweep,
            weights,
            config,
            sequence,
        } => run_verify(seed, capacity_sweep, weights, config, sequence),
    }
}

fn load_training_data(root: &Path) -> Result<Vec<LoadedSequence>> {
    list_sequences(root)?
        .iter()
        .map(|dir| load_sequence(dir))
        .collect()
}

fn run_train<T: Real>(cfg: &Config, data: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let sequences = load_training_data(data)?;
    let mut model: Model<T> = Model::new(cfg, cfg.seed)?;
    let mut log_file = match log {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };
    let history = train(
        &mut model,
        &sequences,
        log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
    )?;
    save_model(&model, out)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} steps on {} sequence(s); final loss {:.6}; weights -> {}",
            history.len(),
            sequences.len(),
            last.total,
            out.display()
        );
    }
    Ok(())
}

fn run_reparam<T: Real>(cfg: &Config, weights: &Path, out: &Path, seed: u64) -> Result<()> {
    let model: Model<T> = load_model(cfg, weights)?;
    let merged = model.reparameterize()?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let deviation = stdtrack::verify::reparam_deviation(&model, &merged, 100, &mut rng)?;
    save_model(&merged, out)?;
    println!("max-abs deviation over 100 random probes: {deviation:.3e}");
    if deviation > 1e-4 {
        return Err(Error::contract(format!(
            "re-parameterization deviation {deviation:.3e} exceeds 1e-4"
        )));
    }
    println!("merged weights -> {}", out.display());
    Ok(())
}

fn oracle_frames(seq: &LoadedSequence) -> Vec<OracleFrame> {
    seq.boxes
        .iter()
        .zip(&seq.occlusion)
        .skip(1)
        .map(|(gt, &occ)| OracleFrame {
            gt: *gt,
            occluded: occ >= 0.5,
        })
        .collect()
}

fn run_track<T: Real>(
    cfg: &Config,
    weights: &Path,
    sequence: &Path,
    out: &Path,
    opts: &TrackOptions,
    oracle_head: bool,
    jobs: usize,
) -> Result<()> {
    let model: Model<T> = load_model(cfg, weights)?;
    let dirs = list_sequences(sequence)?;
    let single = dirs.len() == 1;
    if !single {
        std::fs::create_dir_all(out)?;
    }
    let jobs = jobs.max(1).min(dirs.len());
    let results: Vec<Result<(String, PathBuf)>> = if jobs == 1 {
        dirs.iter()
            .map(|dir| track_one(&model, dir, out, opts, oracle_head, single))
            .collect()
    } else {
        // parallel tracking over shared read-only weights
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in dirs.chunks(dirs.len().div_ceil(jobs)) {
                let model_ref = &model;
                handles.push(scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|dir| track_one(model_ref, dir, out, opts, oracle_head, single))
                        .collect::<Vec<_>>()
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("tracking thread panicked"))
                .collect()
        })
    };
    for r in results {
        let (name, path) = r?;
        println!("tracked {name} -> {}", path.display());
    }
    Ok(())
}

fn track_one<T: Real>(
    model: &Model<T>,
    dir: &Path,
    out: &Path,
    opts: &TrackOptions,
    oracle_head: bool,
    single: bool,
) -> Result<(String, PathBuf)> {
    let seq = load_sequence(dir)?;
    let oracles = if oracle_head {
        Some(oracle_frames(&seq))
    } else {
        None
    };
    let rows = track_sequence(model, &seq.frames, &seq.boxes[0], opts, oracles.as_deref())?;
    let path = if single {
        out.to_path_buf()
    } else {
        out.join(format!("{}.txt", seq.name))
    };
    write_results(&path, &rows)?;
    Ok((seq.name, path))
}

fn run_eval(results: &Path, sequence: &Path) -> Result<()> {
    let pairs: Vec<(PathBuf, PathBuf)> = if results.is_dir() {
        list_sequences(sequence)?
            .into_iter()
            .map(|dir| {
                let name = dir.file_name().unwrap().to_string_lossy().into_owned();
                (results.join(format!("{name}.txt")), dir)
            })
            .collect()
    } else {
        vec![(results.to_path_buf(), sequence.to_path_buf())]
    };
    let mut per_seq = Vec::new();
    for (res_path, seq_dir) in pairs {
        let rows = read_results(&res_path)?;
        let gt = stdtrack::sequence::read_groundtruth(&seq_dir.join("groundtruth.txt"))?;
        let boxes: Vec<_> = rows.iter().map(|r| r.bbox).collect();
        let report = evaluate(&boxes, &gt)?;
        let name = seq_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        println!(
            "{name}: AO {:.6}  SR0.5 {:.6}  SR0.75 {:.6}  ({} frames)",
            report.ao, report.sr50, report.sr75, report.frames
        );
        per_seq.push(SequenceEval { name, report });
    }
    let overall = summarize(&per_seq)?;
    println!(
        "overall: AO {:.6}  SR0.5 {:.6}  SR0.75 {:.6} over {} sequence(s)",
        overall.ao,
        overall.sr50,
        overall.sr75,
        per_seq.len()
    );
    // machine-readable block
    println!("AO={:.6}", overall.ao);
    println!("SR50={:.6}", overall.sr50);
    println!("SR75={:.6}", overall.sr75);
    Ok(())
}

fn run_verify(
    seed: u64,
    with_sweep: bool,
    weights: Option<PathBuf>,
    config: Option<PathBuf>,
    sequence: Option<PathBuf>,
) -> Result<()> {
    let lines = run_suite(seed);
    let mut all_pass = true;
    for line in &lines {
        let tag = if line.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", line.name, line.detail);
        all_pass &= line.pass;
    }
    if with_sweep {
        let cfg = load_config(&config, Some(seed))?;
        let seq = match &sequence {
            Some(dir) => load_sequence(dir)?,
            None => {
                let spec = SynthSpec::default();
                let out = stdtrack::synth::generate(&spec, seed)?;
                LoadedSequence {
                    name: "synthetic".into(),
                    frames: out.frames,
                    boxes: out.boxes,
                    occlusion: vec![0.0; spec.frames],
                }
            }
        };
        let rows = match &weights {
            Some(path) => {
                let model: Model<f32> = load_model(&cfg, path)?;
                capacity_sweep(&model, &seq, &[2, 4, 6, 8], false)?
            }
            None => {
                let model: Model<f32> = Model::new(&cfg, seed)?;
                capacity_sweep(&model, &seq, &[2, 4, 6, 8], true)?
            }
        };
        println!("capacity  AO        SR0.5     SR0.75");
        for (n, report) in &rows {
            println!(
                "{n:<9} {:<9.6} {:<9.6} {:.6}",
                report.ao, report.sr50, report.sr75
            );
        }
    }
    if all_pass {
        Ok(())
    } else {
        Err(Error::contract("one or more verification checks failed"))
    }
}
