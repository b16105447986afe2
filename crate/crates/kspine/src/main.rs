use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kspine::forest::{self, DEFAULT_CAP};
use kspine::genealogy::{self, SplitRecords, SPLIT_CSV_HEADER};
use kspine::harness::{self, ExperimentConfig, HarnessError, Mode};
use kspine::limitlaw;
use kspine::model::{self, OffspringModel};
use kspine::spine::{self, SpineCache, SpineOptions, SpineWorkspace};

#[derive(Parser)]
#[command(name = "kspine", version, about = "Critical multitype branching processes, k-spine trees and sample genealogies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the spectral data of a model and whether it is critical.
    ModelCheck {
        /// Model JSON file.
        path: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Simulate forward trees and summarize the population at T.
    Simulate(Common),
    /// Uniform k-samples by rejection; writes splits.csv.
    Genealogy(Common),
    /// k-spine trees under the discounted size-biased measure; writes
    /// splits.csv and weights.csv.
    Spine(Common),
    /// Limit density of the first rescaled split time of a uniform k-sample.
    Limit {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment against the limit laws; writes report.json.
    Compare {
        #[command(flatten)]
        common: Common,
        /// forward-rejection, spine or martingale.
        #[arg(long, default_value = "forward-rejection")]
        mode: String,
        /// Exit with status 3 when a statistical check fails.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Horizon, or a comma-separated list of horizons.
    #[arg(long = "T", value_delimiter = ',', default_value = "10")]
    horizons: Vec<f64>,
    /// Discount per type, comma separated; a single value applies to all types.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    theta: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    replicates: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// 1-based root type.
    #[arg(long, default_value_t = 1)]
    root: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Runtime(String),
    Statistical,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::Model(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(path: &Path) -> Result<OffspringModel, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    model::load_model(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", parts.join(","))
}

fn config(c: &Common, mode: Mode) -> Result<ExperimentConfig, Failure> {
    let model = load(&c.model)?;
    let d = model.d;
    let theta = match c.theta.len() {
        1 => vec![c.theta[0]; d],
        n if n == d => c.theta.clone(),
        n => return Err(Failure::Validation(format!("--theta has {n} entries, model has {d} types"))),
    };
    if c.root == 0 || c.root > d {
        return Err(Failure::Validation(format!("--root must lie in 1..={d}")));
    }
    let mut cfg = ExperimentConfig::new(model, mode, c.k, c.horizons.clone(), c.replicates, c.seed);
    cfg.theta = theta;
    cfg.root_type = c.root - 1;
    cfg.model_path = Some(c.model.display().to_string());
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn model_check(path: &Path) -> Result<(), Failure> {
    let m = load(path)?;
    let mean = model::mean_matrix(&m);
    let irreducible = model::is_irreducible(&mean);
    println!("types={}", m.d);
    for (i, row) in mean.iter().enumerate() {
        println!("M[{}]={}", i + 1, fmt_vec(row));
    }
    println!("irreducible={irreducible}");
    if !irreducible {
        return Err(Failure::Validation("mean matrix is reducible".into()));
    }
    let sp = model::spectral(&m).map_err(|e| Failure::Validation(e.to_string()))?;
    println!("rho={:.6}", sp.rho);
    println!("xi={}", fmt_vec(&sp.xi));
    println!("eta={}", fmt_vec(&sp.eta));
    println!("zeta={:.6}", sp.zeta);
    println!("zeta_i={}", fmt_vec(&sp.zeta_i));
    println!("critical={}", !sp.non_critical);
    Ok(())
}

fn simulate(c: &Common) -> Result<(), Failure> {
    let cfg = config(c, Mode::ForwardRejection)?;
    let dir = out_dir(&c.out)?;
    let sampler = forest::OffspringSampler::new(&cfg.model);
    for &horizon in &cfg.horizons {
        if cfg.replicates == 1 {
            let mut rng = forest::stream(cfg.seed, 0);
            let tree = forest::simulate_tree(&cfg.model, horizon, cfg.root_type, &mut rng)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            let path = dir.join("tree.csv");
            tree.write_csv(BufWriter::new(File::create(&path)?))?;
            println!("T={horizon} N_T={:?} individuals={} file={}", tree.final_population(), tree.len(), path.display());
            continue;
        }
        let mut survived = 0u64;
        let mut total = vec![0u64; cfg.model.d];
        for r in 0..cfg.replicates {
            let mut rng = forest::stream(cfg.seed, r);
            let z = forest::simulate_population(&cfg.model, &sampler, horizon, cfg.root_type, DEFAULT_CAP as u64, &mut rng)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            if z.iter().any(|&x| x > 0) {
                survived += 1;
            }
            for (t, x) in total.iter_mut().zip(&z) {
                *t += x;
            }
        }
        let n = cfg.replicates as f64;
        let mean: Vec<f64> = total.iter().map(|&t| t as f64 / n).collect();
        println!("T={horizon} replicates={} survival={:.6} mean_Z={}", cfg.replicates, survived as f64 / n, fmt_vec(&mean));
    }
    Ok(())
}

fn write_splits(path: &Path, records: &[(u64, SplitRecords)]) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SPLIT_CSV_HEADER}")?;
    for (id, rec) in records {
        genealogy::write_split_rows(&mut w, *id, rec)?;
    }
    w.flush()?;
    Ok(())
}

fn genealogy_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = config(c, Mode::ForwardRejection)?;
    let dir = out_dir(&c.out)?;
    let horizon = cfg.horizons[0];
    let batch = harness::sample_unif(&cfg.model, cfg.k, horizon, cfg.root_type, cfg.replicates, cfg.seed, cfg.cap, true)?;
    let path = dir.join("splits.csv");
    write_splits(&path, &batch.records)?;
    println!(
        "T={horizon} accepted={} attempts={} acceptance_rate={:.6e} file={}",
        batch.samples.len(),
        batch.attempts,
        batch.samples.len() as f64 / batch.attempts as f64,
        path.display()
    );
    Ok(())
}

fn spine_cmd(c: &Common) -> Result<(), Failure> {
    let cfg = config(c, Mode::Spine)?;
    let sp = cfg.validate()?;
    let dir = out_dir(&c.out)?;
    let horizon = cfg.horizons[0];
    let theta = cfg.scaled_theta(sp.zeta, horizon);
    let cache = SpineCache::new(&cfg.model, cfg.k, &theta, horizon).map_err(|e| Failure::Runtime(e.to_string()))?;
    let opts = SpineOptions {
        root_type: cfg.root_type,
        grow_unmarked: true,
        cap: cfg.cap,
    };
    let mut tree = forest::GenealogyTree::new(cfg.model.d, cfg.root_type, horizon);
    let mut ws = SpineWorkspace::default();
    let mut splits = BufWriter::new(File::create(dir.join("splits.csv"))?);
    let mut weights = BufWriter::new(File::create(dir.join("weights.csv"))?);
    writeln!(splits, "{SPLIT_CSV_HEADER}")?;
    writeln!(weights, "replicate_id,N,weight")?;
    for r in 0..cfg.replicates {
        let mut rng = forest::stream(cfg.seed, r);
        let rec = spine::spine_simulate(&cache, &opts, &mut tree, &mut ws, &mut rng).map_err(|e| Failure::Runtime(e.to_string()))?;
        let m = rec.m();
        let records = SplitRecords { events: rec.events.clone(), m };
        genealogy::write_split_rows(&mut splits, r, &records)?;
        let w = spine::importance_weight(&cache, &rec, cfg.root_type).unwrap_or(f64::NAN);
        writeln!(weights, "{r},{},{w}", rec.n_total().unwrap_or(0))?;
    }
    splits.flush()?;
    weights.flush()?;
    println!(
        "T={horizon} k={} theta_T={} replicates={} files={},{}",
        cfg.k,
        fmt_vec(&theta),
        cfg.replicates,
        dir.join("splits.csv").display(),
        dir.join("weights.csv").display()
    );
    Ok(())
}

fn limit_cmd(k: usize, model: &Option<PathBuf>, grid: usize, out: &Option<PathBuf>) -> Result<(), Failure> {
    if k < 2 {
        return Err(Failure::Validation("--k must be at least 2".into()));
    }
    if grid == 0 {
        return Err(Failure::Validation("--grid must be positive".into()));
    }
    if let Some(path) = model {
        let m = load(path)?;
        let sp = model::spectral(&m).map_err(|e| Failure::Validation(e.to_string()))?;
        if sp.non_critical {
            return Err(Failure::Validation(format!("model is not critical (rho = {:e})", sp.rho)));
        }
    }
    let fail = |e: limitlaw::LimitError| Failure::Runtime(e.to_string());
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("density_k{k}.csv"));
            limitlaw::write_density_table(BufWriter::new(File::create(&path)?), k, grid).map_err(fail)?;
            println!("{}", path.display());
        }
        None => {
            let mut buf = Vec::new();
            limitlaw::write_density_table(&mut buf, k, grid).map_err(fail)?;
            match io::stdout().lock().write_all(&buf) {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

fn compare(c: &Common, mode: &str, strict: bool) -> Result<(), Failure> {
    let dir = out_dir(&c.out)?;
    let path = dir.join("report.json");
    let (json, passed) = if mode == "martingale" {
        let cfg = config(c, Mode::Spine)?;
        let r = harness::martingale_checks(&cfg)?;
        let passed = r.checks.iter().all(|c| c.passed);
        (serde_json::to_string_pretty(&r), passed)
    } else {
        let mode: Mode = mode.parse()?;
        let cfg = config(c, mode)?;
        let r = match mode {
            Mode::ForwardRejection => harness::run_unif_experiment(&cfg)?,
            Mode::Spine => harness::run_spine_experiment(&cfg)?,
        };
        for run in &r.runs {
            for w in &run.warnings {
                eprintln!("warning: T={}: {w}", run.horizon);
            }
            if let (Some(ks), Some(p)) = (run.stats.first_split_ks, run.stats.first_split_ks_pvalue) {
                println!("T={} samples={} ks={ks:.5} p={p:.4}", run.horizon, run.stats.samples);
            }
        }
        (serde_json::to_string_pretty(&r), r.passed())
    };
    let json = json.map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(&path, json + "\n")?;
    println!("report={} checks_passed={passed}", path.display());
    if strict && !passed {
        return Err(Failure::Statistical);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::ModelCheck { path, model } => match path.as_ref().or(model.as_ref()) {
            Some(p) => model_check(p),
            None => Err(Failure::Validation("model-check needs a model file".into())),
        },
        Command::Simulate(c) => simulate(c),
        Command::Genealogy(c) => genealogy_cmd(c),
        Command::Spine(c) => spine_cmd(c),
        Command::Limit { k, model, grid, out } => limit_cmd(*k, model, *grid, out),
        Command::Compare { common, mode, strict } => compare(common, mode, *strict),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Statistical) => {
            eprintln!("error: statistical checks failed");
            ExitCode::from(3)
        }
    }
}
