//! Configuration-driven entry points behind the `adaptfed` binary.
//!
//! Reproducibility lives in one JSON file ([`ExperimentConfig`]); flags
//! only choose paths, override the seed, size the worker pool and set
//! verbosity. Every output file is written to a temporary sibling and
//! renamed into place, so a crashed run never leaves a half-written file
//! under the final name.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | `0` | master seed for every random stream |
//! | `output_dir` | `"out"` | overridden by `--out`, then by `$ADAPTFED_OUTPUT_DIR` |
//! | `strategy` | `"adaptfed"` | `adaptfed`, `vanilla-tailored`, `fedavg`, `local-only` |
//! | `task.num_clients` | `50` | clients `N` |
//! | `task.num_classes` | `10` | classes `K` |
//! | `task.input_dim` | `32` | input features |
//! | `task.samples_per_client` | `200` | before the train/test split |
//! | `task.groups` | `4` | client groups with distinct shifts |
//! | `task.shift` | `{"mode": "label-skew"}` | also `none`, `rotation`, `noise` (`max_std`) |
//! | `task.class_separation` | `6.0` | mean distance between class means |
//! | `task.test_fraction` | `0.2` | per-client test split |
//! | `task.partition` | `null` | `pathological`, `dirichlet` (`alpha`), `pachinko` (`alpha`, `beta`, `coarse_classes`) |
//! | `arch.input_dim` | `32` | must equal `task.input_dim` |
//! | `arch.width` | `16` | token width `d` |
//! | `arch.blocks` | `8` | focal blocks `B` |
//! | `arch.focal_levels` | `2` | windowed levels (a global level is added) |
//! | `arch.tokens` | `4` | tokens per input |
//! | `arch.num_classes` | `10` | must equal `task.num_classes` |
//! | `rounds.rounds` | `200` | communication rounds `C` |
//! | `rounds.local_epochs` | `5` | local epochs `L` |
//! | `rounds.local_lr` | `0.01` | client learning rate |
//! | `rounds.global_lr` | `0.01` | generator and embedding learning rate |
//! | `rounds.sample_fraction` | `0.1` | cohort fraction `f` |
//! | `rounds.batch_size` | `32` | local mini-batch size |
//! | `rounds.weighting` | `"cohort"` | or `"global"` |
//! | `rounds.step_rule` | `"descent"` | or `"literal"` |
//! | `rounds.eval_every` | `10` | evaluation period in rounds |
//! | `hypernet.embed_dim` | `32` | embedding size `D` |
//! | `hypernet.hidden` | `100` | trunk width `D_h` |
//! | `hypernet.depth` | `2` | trunk layers |
//! | `hypernet.activation` | `"relu"` | or `"identity"` |
//! | `hypernet.rank` | `null` | low-rank generator when set |
//! | `adapt.epochs` | `5` | novel-client embedding epochs |
//! | `adapt.lr` | `0.05` | novel-client learning rate |
//! | `adapt.batch_size` | `32` | novel-client mini-batch size |
//! | `sfda` | `null` | when set, `run` performs source-free adaptation instead |
//! | `sfda.task.*` | see [`TwoDomainSpec`] | two-domain synthetic task |
//! | `sfda.config.*` | see [`SfdaConfig`] | adaptation hyperparameters |

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{cost_report, export_embeddings, theorem1_rhs, write_cost_csv, BoundInputs};
use crate::checkpoint::{read_header, read_params, write_params};
use crate::datagen::{make_synthetic, SyntheticWorld, TaskSpec};
use crate::error::{config_err, Error, Result};
use crate::federation::{
    adapt_new_client, run_experiment, write_metrics_jsonl, write_summary_csv, AdaptConfig,
    ClientState, RoundConfig, ServerState, Simulation, Strategy,
};
use crate::gradcheck::{run_gradient_suites, GRADCHECK_TOLERANCE};
use crate::hypernet::HyperNetConfig;
use crate::model::Arch;
use crate::numcore::{Rng, Stream};
use crate::sfda::{make_two_domain, run_sfda_experiment, SfdaConfig, TwoDomainSpec};

/// Environment variable that overrides `output_dir` (but not `--out`).
pub const OUTPUT_DIR_ENV: &str = "ADAPTFED_OUTPUT_DIR";

/// Source-free adaptation section of an experiment file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfdaSection {
    pub task: TwoDomainSpec,
    pub config: SfdaConfig,
}

/// One experiment, fully specified. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub strategy: Strategy,
    pub task: TaskSpec,
    pub arch: Arch,
    pub rounds: RoundConfig,
    pub hypernet: HyperNetConfig,
    pub adapt: AdaptConfig,
    pub sfda: Option<SfdaSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            strategy: Strategy::Adaptfed,
            task: TaskSpec::default(),
            arch: Arch::default(),
            rounds: RoundConfig::default(),
            hypernet: HyperNetConfig::default(),
            adapt: AdaptConfig::default(),
            sfda: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.rounds.validate()?;
        self.hypernet.validate()?;
        if let Some(sfda) = &self.sfda {
            sfda.config.validate()?;
            if (sfda.task.input_dim, sfda.task.num_classes)
                != (self.arch.input_dim, self.arch.num_classes)
            {
                return config_err("sfda.task input_dim/num_classes must match arch");
            }
            return Ok(());
        }
        self.task.validate()?;
        if (self.task.input_dim, self.task.num_classes)
            != (self.arch.input_dim, self.arch.num_classes)
        {
            return config_err(format!(
                "task has input_dim {} / num_classes {}, arch has {} / {}",
                self.task.input_dim,
                self.task.num_classes,
                self.arch.input_dim,
                self.arch.num_classes
            ));
        }
        Ok(())
    }
}

/// Which embedding a novel client gets and how it is trained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NovelShardSpec {
    /// Client index in the synthetic world; indices `>= task.num_clients`
    /// were never seen during training.
    pub client: usize,
    /// Defaults to the checkpointed experiment's `adapt` section.
    #[serde(default)]
    pub adapt: Option<AdaptConfig>,
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut file = fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    atomic_write(path, &buf)
}

/// `--out`, then `$ADAPTFED_OUTPUT_DIR`, then the config's `output_dir`.
pub fn resolve_output_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config.output_dir.clone(),
    }
}

fn build_clients(task: &TaskSpec, seed: u64) -> Result<Vec<ClientState>> {
    make_synthetic(task, seed)?
        .clients
        .iter()
        .map(ClientState::from_data)
        .collect()
}

/// Files written by [`cmd_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
    pub extra: Vec<PathBuf>,
    /// Final weighted (or mean per-client) test accuracy.
    pub final_acc: f64,
}

/// Runs the experiment and writes `metrics.jsonl`, `summary.csv`, a
/// checkpoint and analysis side files into `out_dir`.
pub fn cmd_run(
    config: &ExperimentConfig,
    out_dir: &Path,
    workers: usize,
    verbose: bool,
) -> Result<RunOutputs> {
    config.validate()?;
    let meta = serde_json::to_value(config)?;
    let metrics = out_dir.join("metrics.jsonl");
    let summary = out_dir.join("summary.csv");

    if let Some(sfda) = &config.sfda {
        let task = make_two_domain(&sfda.task, config.seed)?;
        let report = run_sfda_experiment(&config.arch, task, &sfda.config, config.seed, workers)?;
        if verbose {
            eprintln!("sfda: mean gain {:+.4}", report.mean_gain());
        }
        write_with(&metrics, |b| write_metrics_jsonl(&report.records, b))?;
        write_with(&summary, |b| {
            writeln!(
                b,
                "schema_version,client,pretrained_acc,adapted_acc,student_acc"
            )?;
            for (i, ((p, a), s)) in report
                .pretrained_acc
                .iter()
                .zip(&report.adapted_acc)
                .zip(&report.student_acc)
                .enumerate()
            {
                writeln!(b, "1,{i},{p:?},{a:?},{s:?}")?;
            }
            Ok(())
        })?;
        let audit = out_dir.join("source_audit.json");
        write_with(&audit, |b| {
            serde_json::to_writer_pretty(
                &mut *b,
                &serde_json::json!({
                    "schema_version": 1,
                    "rows_checked": report.audit.rows_checked,
                    "source_rows_found": report.audit.source_rows_found,
                }),
            )?;
            Ok(())
        })?;
        let n = report.adapted_acc.len() as f64;
        return Ok(RunOutputs {
            metrics,
            summary,
            checkpoint: audit.clone(),
            extra: vec![],
            final_acc: report.adapted_acc.iter().sum::<f64>() / n,
        });
    }

    let clients = build_clients(&config.task, config.seed)?;
    let groups: Vec<usize> = clients.iter().map(|c| c.group).collect();
    let mut sim = Simulation::new(
        &config.arch,
        &config.hypernet,
        config.strategy,
        &config.rounds,
        clients,
        config.seed,
    )?;
    let log = run_experiment(&mut sim, workers)?;
    let final_acc = log.final_evaluation().map_or(f64::NAN, |e| e.weighted_acc);
    if verbose {
        eprintln!(
            "{}: final weighted accuracy {final_acc:.4}",
            config.strategy
        );
    }
    write_with(&metrics, |b| write_metrics_jsonl(&log.records, b))?;
    write_with(&summary, |b| write_summary_csv(&log, config.strategy, b))?;
    let checkpoint = out_dir.join("server.ckpt");
    write_with(&checkpoint, |b| {
        write_params(&sim.server, meta, b).map(|_| ())
    })?;

    let cost = out_dir.join("cost.csv");
    let reports = Strategy::ALL
        .iter()
        .map(|&s| cost_report(&config.arch, &config.hypernet, config.task.num_clients, s))
        .collect::<Result<Vec<_>>>()?;
    write_with(&cost, |b| write_cost_csv(&reports, b))?;
    let mut extra = vec![cost];
    if config.strategy == Strategy::Adaptfed {
        let path = out_dir.join("embeddings.csv");
        write_with(&path, |b| export_embeddings(&sim.server, &groups, b))?;
        extra.push(path);
    }
    Ok(RunOutputs {
        metrics,
        summary,
        checkpoint,
        extra,
        final_acc,
    })
}

/// Writes `partition.json` and `class_histogram.csv` for a partitioned task.
pub fn cmd_partition(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    config.task.validate()?;
    if config.task.partition.is_none() {
        return config_err("task.partition is not set; nothing to partition");
    }
    let task = make_synthetic(&config.task, config.seed)?;
    let (pool, plan) = task.partition.expect("partition scheme is set");
    let json = out_dir.join("partition.json");
    atomic_write(&json, plan.to_json()?.as_bytes())?;
    let csv = out_dir.join("class_histogram.csv");
    let entropies = plan.label_entropies(&pool);
    write_with(&csv, |b| {
        let classes: Vec<String> = (0..pool.num_classes).map(|k| format!("class{k}")).collect();
        writeln!(b, "client,{},entropy", classes.join(","))?;
        for (i, row) in plan.class_histogram(&pool).iter().enumerate() {
            let counts: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(b, "{i},{},{:?}", counts.join(","), entropies[i])?;
        }
        Ok(())
    })?;
    Ok(vec![json, csv])
}

/// Runs every gradient suite on five instances from `seed` and prints one
/// line each. Returns whether all passed.
pub fn cmd_gradcheck<W: Write>(seed: u64, mut out: W) -> Result<bool> {
    let checks = run_gradient_suites(seed, 5)?;
    let mut all = true;
    for c in &checks {
        all &= c.passed();
        writeln!(
            out,
            "{} {:<17} seed={:<4} scalars={:<5} max_rel_err={:.3e}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.suite,
            c.seed,
            c.scalars,
            c.max_rel_err
        )?;
    }
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    writeln!(
        out,
        "{}: {} checks, worst relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
        if all { "PASS" } else { "FAIL" },
        checks.len()
    )?;
    Ok(all)
}

/// Reads bound inputs from JSON and prints the four terms and their sum.
pub fn cmd_bound<W: Write>(inputs: &Path, mut out: W) -> Result<()> {
    let text = fs::read_to_string(inputs)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", inputs.display())))?;
    let b: BoundInputs = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", inputs.display())))?;
    let t = theorem1_rhs(&b)?;
    writeln!(
        out,
        "sample     sqrt(M/2 ln(N/delta))    = {:.12}",
        t.sample
    )?;
    writeln!(
        out,
        "capacity   sqrt(d N/M ln(e M/d))    = {:.12}",
        t.capacity
    )?;
    writeln!(
        out,
        "generator  L_h R_h (L_phi + L_z)    = {:.12}",
        t.generator
    )?;
    writeln!(
        out,
        "shared     L_xi R_t                 = {:.12}",
        t.shared
    )?;
    writeln!(out, "total                               = {:.12}", t.total)?;
    Ok(())
}

/// Loads a server checkpoint, samples the requested client from the same
/// synthetic world, trains only its embedding, and writes
/// `epoch,loss,acc` rows to `out`.
pub fn cmd_adapt(checkpoint: &Path, shard: &NovelShardSpec, out: &Path) -> Result<Vec<(f64, f64)>> {
    let file = fs::File::open(checkpoint)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", checkpoint.display())))?;
    let header = read_header(&mut BufReader::new(file))?;
    let config: ExperimentConfig = serde_json::from_value(header.meta)
        .map_err(|e| Error::Config(format!("checkpoint meta is not an experiment config: {e}")))?;
    if config.strategy != Strategy::Adaptfed {
        return Err(Error::Protocol(format!(
            "novel-client adaptation needs an adaptfed checkpoint, got {}",
            config.strategy
        )));
    }
    let mut server = ServerState::initial(
        &config.arch,
        &config.hypernet,
        Strategy::Adaptfed,
        config.task.num_clients,
        config.seed,
    )?;
    read_params(&mut server, BufReader::new(fs::File::open(checkpoint)?))?;

    let world = SyntheticWorld::new(&config.task, config.seed)?;
    let client = ClientState::from_data(&world.client(shard.client)?)?;
    let adapt = shard.adapt.unwrap_or(config.adapt);
    let mut rng = Rng::derive(config.seed, Stream::NovelClient, shard.client as u64);
    let result = adapt_new_client(&server, &client, &adapt, &mut rng)?;
    write_with(out, |b| {
        writeln!(b, "schema_version,client,epoch,loss,acc")?;
        for (e, (l, a)) in result.loss.iter().zip(&result.accuracy).enumerate() {
            writeln!(b, "1,{},{e},{l:?},{a:?}", shard.client)?;
        }
        Ok(())
    })?;
    Ok(result.loss.into_iter().zip(result.accuracy).collect())
}

#[derive(Debug, Parser)]
#[command(
    name = "adaptfed",
    version,
    about = "Federated learning with hypernetwork-generated focal modulation"
)]
pub struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (beats $ADAPTFED_OUTPUT_DIR and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Write the partition plan and per-client class histogram.
    Partition {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every backward pass with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate the generalization bound for inputs in a JSON file.
    Bound { inputs: PathBuf },
    /// Adapt a novel client's embedding against a trained checkpoint.
    Adapt {
        checkpoint: PathBuf,
        /// JSON file with the novel-client spec.
        shard: PathBuf,
        /// Trajectory CSV path (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Executes a parsed command line. Returns whether the command succeeded
/// in the domain sense (gradcheck can run fine and still fail).
pub fn execute(cli: &Cli) -> Result<bool> {
    let stdout = std::io::stdout();
    match &cli.command {
        Command::Run {
            config,
            seed,
            out,
            workers,
        } => {
            let config = load_with_seed(config, *seed)?;
            let dir = resolve_output_dir(out.as_deref(), &config);
            let outputs = cmd_run(&config, &dir, *workers, cli.verbose)?;
            println!(
                "wrote {} (final accuracy {:.4})",
                dir.display(),
                outputs.final_acc
            );
            Ok(true)
        }
        Command::Partition { config, seed, out } => {
            let config = load_with_seed(config, *seed)?;
            let dir = resolve_output_dir(out.as_deref(), &config);
            for path in cmd_partition(&config, &dir)? {
                println!("wrote {}", path.display());
            }
            Ok(true)
        }
        Command::Gradcheck { seed } => cmd_gradcheck(*seed, stdout.lock()),
        Command::Bound { inputs } => cmd_bound(inputs, stdout.lock()).map(|_| true),
        Command::Adapt {
            checkpoint,
            shard,
            out,
        } => {
            let text = fs::read_to_string(shard)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", shard.display())))?;
            let spec: NovelShardSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", shard.display())))?;
            let path = out.clone().unwrap_or_else(|| {
                checkpoint.with_file_name(format!("adapt_client{}.csv", spec.client))
            });
            let trajectory = cmd_adapt(checkpoint, &spec, &path)?;
            if cli.verbose {
                for (e, (l, a)) in trajectory.iter().enumerate() {
                    eprintln!("epoch {e}: loss {l:.4} acc {a:.4}");
                }
            }
            println!("wrote {}", path.display());
            Ok(true)
        }
    }
}

/// Parses `args`, runs the command, and maps the outcome to an exit code:
/// 0 on success, 1 on a failed check, 2 on any error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
