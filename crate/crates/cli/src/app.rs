use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use permbasin::barrier::{barrier_value, loss_profile, midpoint_barrier, Metric};
use permbasin::data::{Dataset, Split};
use permbasin::lab::{
    run_experiment, theorem1_check, train_member, DatasetSpec, ExperimentSpec, SearchMethod,
    TrainOverrides, XiRule,
};
use permbasin::net::{evaluate, ArchKind, LrSchedule, Network, TrainConfig};
use permbasin::perm::{apply, Permutation};
use permbasin::search::{
    brute_force_match, fd_align, grid_align, sa_search, sa_search_reduced, SAConfig, SearchResult,
};
use permbasin::{Error, Result};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

#[derive(Parser, Debug)]
#[command(name = "permbasin", version, about = "Loss barriers and permutation search for small networks")]
struct Cli {
    /// Master seed for training, permutation draws and searches.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "PERMBASIN_THREADS")]
    threads: Option<usize>,
    /// Directory for reports and generated files.
    #[arg(long, global = true, env = "PERMBASIN_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Barrier metric: loss or error.
    #[arg(long, global = true)]
    metric: Option<Metric>,
    /// Evaluation split: train or test.
    #[arg(long, global = true)]
    split: Option<Split>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Directory holding MNIST-format IDX files.
    #[arg(long, value_name = "DIR")]
    mnist: Option<PathBuf>,
    /// Synthetic Gaussian blobs.
    #[arg(long, value_name = "N:D:CLASSES:SEP")]
    blobs: Option<String>,
    /// Stratified training subsample size.
    #[arg(long)]
    train_size: Option<usize>,
    /// Stratified test subsample size.
    #[arg(long)]
    test_size: Option<usize>,
    /// Skip per-channel standardisation.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network and write a checkpoint.
    Train {
        #[arg(long, default_value = "mlp")]
        arch: String,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        stop_loss: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        cosine: bool,
        /// Output checkpoint.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Loss and error of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Interpolation profile and barrier between two checkpoints.
    Barrier {
        a: PathBuf,
        b: PathBuf,
        /// Number of grid points (odd).
        #[arg(long, default_value_t = 11)]
        grid: usize,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Apply a permutation file to a checkpoint.
    Permute {
        checkpoint: PathBuf,
        perm: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Search a permutation aligning the first checkpoint to the others.
    Search {
        /// sa, sa-reduced, fd, grid or brute.
        method: SearchMethod,
        #[arg(required = true, num_args = 2..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        t_min: Option<f64>,
        #[arg(long, default_value_t = 1)]
        swaps: usize,
        #[arg(long)]
        pin_first: bool,
        /// Largest width for brute-force enumeration.
        #[arg(long, default_value_t = permbasin::search::DEFAULT_WIDTH_LIMIT)]
        width_limit: usize,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run an experiment described by a TOML spec.
    Experiment {
        spec: PathBuf,
        /// Report file stem (defaults to the spec file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Grid-bucket matching deviation against width.
    Theorem1 {
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096,16384")]
        h_list: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        /// Fixed grid spacing instead of the population rule.
        #[arg(long)]
        xi: Option<f64>,
        /// Use the bound-balancing spacing instead of the population rule.
        #[arg(long, conflicts_with = "xi")]
        proof_rate: bool,
    },
}

struct Globals {
    seed: u64,
    seed_set: bool,
    out_dir: PathBuf,
    metric: Metric,
    split: Option<Split>,
}

impl DataArgs {
    fn spec(&self) -> Result<Option<DatasetSpec>> {
        let mut spec = match (&self.mnist, &self.blobs) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidArgument("give either --mnist or --blobs".into()))
            }
            (Some(dir), None) => {
                let abs = std::fs::canonicalize(dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                DatasetSpec::mnist(abs, None, None)
            }
            (None, Some(b)) => parse_blobs(b)?,
            (None, None) => return Ok(None),
        };
        spec.train = self.train_size;
        spec.test = self.test_size;
        if self.no_normalize {
            spec.normalize = false;
        }
        Ok(Some(spec))
    }
}

fn parse_blobs(s: &str) -> Result<DatasetSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::InvalidArgument(format!("--blobs expects N:D:CLASSES:SEP, got {s:?}"));
    if parts.len() != 4 {
        return Err(bad());
    }
    let n = parts[0].parse().map_err(|_| bad())?;
    let d = parts[1].parse().map_err(|_| bad())?;
    let c = parts[2].parse().map_err(|_| bad())?;
    let sep = parts[3].parse().map_err(|_| bad())?;
    Ok(DatasetSpec::blobs(n, d, c, sep, 0))
}

/// Dataset from the flags, else from the first checkpoint's metadata.
fn dataset_for(data: &DataArgs, ck: &Checkpoint) -> Result<Dataset> {
    let spec = match data.spec()? {
        Some(s) => s,
        None => ck.meta.dataset.clone().ok_or_else(|| {
            Error::InvalidArgument(
                "checkpoint records no dataset; pass --mnist or --blobs".into(),
            )
        })?,
    };
    spec.load(None)
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_perm(path: &Path, net: &Network) -> Result<Permutation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "permutation file",
        detail: e.to_string(),
    })?;
    // a flat array is accepted for single-hidden-layer networks
    let value = match &value {
        serde_json::Value::Array(items) if items.iter().all(|v| v.is_u64()) => {
            serde_json::Value::Array(vec![value.clone()])
        }
        _ => value,
    };
    let perm: Permutation = serde_json::from_value(value).map_err(|e| Error::Format {
        what: "permutation file",
        detail: e.to_string(),
    })?;
    perm.check_for(net)?;
    Ok(perm)
}

fn perm_json(p: &Permutation) -> String {
    serde_json::to_string(p).expect("permutations serialize") + "\n"
}

fn cmd_train(g: &Globals, cmd: Command) -> Result<()> {
    let Command::Train {
        arch,
        width,
        depth,
        data,
        max_epochs,
        lr,
        batch_size,
        stop_loss,
        momentum,
        cosine,
        output,
    } = cmd
    else {
        unreachable!()
    };
    let arch = match arch.as_str() {
        "mlp" => ArchKind::Mlp,
        "shallow-cnn" | "cnn" => ArchKind::ShallowCnn,
        other => return Err(Error::InvalidArgument(format!("unknown architecture {other:?}"))),
    };
    let spec = data
        .spec()?
        .ok_or_else(|| Error::InvalidArgument("train needs --mnist or --blobs".into()))?;
    let dataset = spec.load(None)?;
    let overrides = TrainOverrides {
        lr,
        lr_schedule: cosine.then_some(LrSchedule::Cosine),
        batch_size,
        max_epochs,
        momentum,
        stop_loss,
    };
    let cfg = overrides.apply(TrainConfig::for_arch(arch, spec.mnist_like()));
    cfg.validate()?;
    let member = train_member(arch, width, depth, &dataset, &cfg, g.seed)?;
    let tr = evaluate(&member.net, &dataset, Split::Train)?;
    let te = evaluate(&member.net, &dataset, Split::Test)?;
    let ck = Checkpoint {
        net: member.net,
        meta: CheckpointMeta {
            train: Some(TrainConfig {
                seed: permbasin::seed::derive(g.seed, "shuffle", 0),
                ..cfg
            }),
            report: Some(member.report.clone()),
            dataset: Some(spec),
            final_eval: vec![(Split::Train, tr), (Split::Test, te)],
            member_seed: Some(g.seed),
        },
        perm: None,
    };
    save_checkpoint(&output, &ck)?;
    println!(
        "epochs {} train_loss {} train_error {} test_loss {} test_error {}",
        member.report.epochs_run, tr.loss, tr.error, te.loss, te.error
    );
    Ok(())
}

fn cmd_search(g: &Globals, cmd: Command) -> Result<()> {
    let Command::Search {
        method,
        checkpoints,
        steps,
        t_max,
        t_min,
        swaps,
        pin_first,
        width_limit,
        data,
    } = cmd
    else {
        unreachable!()
    };
    let cks: Vec<Checkpoint> = checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<_>>()?;
    let nets: Vec<Network> = cks.iter().map(|c| c.net.clone()).collect();
    let dataset = dataset_for(&data, &cks[0])?;
    let split = g.split.unwrap_or(Split::Train);
    let defaults = SAConfig::default();
    let sa = SAConfig {
        steps: steps.unwrap_or(defaults.steps),
        t_max: t_max.unwrap_or(defaults.t_max),
        t_min: t_min.unwrap_or(defaults.t_min),
        swaps_per_layer: swaps,
        n_models: nets.len(),
        seed: g.seed,
        metric: g.metric,
        split,
        pin_first,
        ..defaults
    };
    let pairwise = |p: Permutation, name: &str| -> Result<SearchResult> {
        let before = midpoint_barrier(&nets[0], &nets[1], &dataset, g.metric, split)?;
        let after = midpoint_barrier(&apply(&nets[0], &p)?, &nets[1], &dataset, g.metric, split)?;
        Ok(SearchResult {
            method: name.to_string(),
            perms: vec![p],
            energy_trace: vec![(0, before), (1, after)],
            initial_energy: before,
            final_energy: after,
            evaluations: 2,
            accepted: 0,
            seed: g.seed,
            config: None,
        })
    };
    if method != SearchMethod::Sa && nets.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "{method} aligns exactly two checkpoints, got {}",
            nets.len()
        )));
    }
    let result = match method {
        SearchMethod::Sa => sa_search(&nets, &dataset, &sa)?,
        SearchMethod::SaReduced => sa_search_reduced(&nets[0], &nets[1], &dataset, &sa)?,
        SearchMethod::Fd => pairwise(fd_align(&nets[0], &nets[1], &dataset)?, "fd")?,
        SearchMethod::Grid => pairwise(grid_align(&nets[0], &nets[1], g.seed)?, "grid")?,
        SearchMethod::Brute => {
            brute_force_match(&nets[0], &nets[1], &dataset, width_limit, g.metric, split)?
        }
        SearchMethod::None => {
            return Err(Error::InvalidArgument("search method must not be none".into()))
        }
    };
    write_file(&g.out_dir.join("search.json"), result.to_json().as_bytes())?;
    write_file(&g.out_dir.join("search_trace.csv"), result.trace_csv().as_bytes())?;
    for (k, p) in result.perms.iter().enumerate() {
        let name = if result.perms.len() == 1 {
            "perm.json".to_string()
        } else {
            format!("perm_{k}.json")
        };
        write_file(&g.out_dir.join(name), perm_json(p).as_bytes())?;
    }
    println!(
        "method {} before {} after {} evaluations {}",
        result.method, result.initial_energy, result.final_energy, result.evaluations
    );
    Ok(())
}

fn dispatch(g: &Globals, command: Command) -> Result<()> {
    match command {
        cmd @ Command::Train { .. } => cmd_train(g, cmd),
        Command::Eval { checkpoint, data } => {
            let ck = load_checkpoint(&checkpoint)?;
            let dataset = dataset_for(&data, &ck)?;
            let split = g.split.unwrap_or(Split::Test);
            let e = evaluate(&ck.net, &dataset, split)?;
            println!("split {split} loss {} error {}", e.loss, e.error);
            Ok(())
        }
        Command::Barrier { a, b, grid, data } => {
            let ca = load_checkpoint(&a)?;
            let cb = load_checkpoint(&b)?;
            let dataset = dataset_for(&data, &ca)?;
            let split = g.split.unwrap_or(Split::Test);
            let profile = loss_profile(&ca.net, &cb.net, &dataset, grid, g.metric, split)?;
            write_file(&g.out_dir.join("barrier_profile.csv"), profile.to_csv().as_bytes())?;
            println!("barrier {}", barrier_value(&profile));
            Ok(())
        }
        Command::Permute {
            checkpoint,
            perm,
            output,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let p = read_perm(&perm, &ck.net)?;
            let net = apply(&ck.net, &p)?;
            let out = Checkpoint {
                net,
                meta: ck.meta,
                perm: Some(p),
            };
            save_checkpoint(&output, &out)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        cmd @ Command::Search { .. } => cmd_search(g, cmd),
        Command::Experiment { spec, name } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io {
                path: spec.clone(),
                source: e,
            })?;
            let mut parsed = ExperimentSpec::from_toml(&text)?;
            if g.seed_set {
                parsed.master_seed = g.seed;
            }
            let base = spec.parent().map(Path::to_path_buf);
            let report = run_experiment(&parsed, base.as_deref())?;
            let stem = name.unwrap_or_else(|| {
                spec.file_stem()
                    .map_or("experiment".into(), |s| s.to_string_lossy().into_owned())
            });
            for p in report.write_to(&g.out_dir, &stem)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Theorem1 {
            d,
            h_list,
            trials,
            probes,
            xi,
            proof_rate,
        } => {
            let fallback = if proof_rate { XiRule::ProofRate } else { XiRule::SqrtPopulation };
            let rule = xi.map_or(fallback, XiRule::Fixed);
            let report = theorem1_check(d, &h_list, trials, probes, rule, g.seed)?;
            report.write_to(&g.out_dir, "theorem1")?;
            for (h, m) in report.series("median") {
                println!("h {h} median_deviation {m}");
            }
            println!(
                "slope {} predicted {}",
                report.summary["slope"], report.summary["predicted_slope"]
            );
            Ok(())
        }
    }
}

/// Parse `argv` (including the program name) and run. Returns the process
/// exit code: 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads.unwrap_or(1);
    if threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return 1;
    }
    let g = Globals {
        seed: cli.seed.unwrap_or(0),
        seed_set: cli.seed.is_some(),
        out_dir: cli.out_dir.unwrap_or_else(|| PathBuf::from(".")),
        metric: cli.metric.unwrap_or(Metric::Loss),
        split: cli.split,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&g, cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
