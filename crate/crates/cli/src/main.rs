use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attnarb::backtest::{
    ablate, cumulative_returns, ledger_csv, metrics_csv, multi_seed, top_constituents, write_ablation_csv,
    write_constituents_csv, write_cumulative_csv, MetricsRow, METRICS_HEADER,
};
use attnarb::io::write_atomic;
use attnarb::panel::{load_csv, save_csv, synthetic_generate, ReturnPanel, SyntheticConfig};
use attnarb::train::{factor_weights_at, rolling_protocol, MarketData, ModelClass, RunConfig};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "attnarb", version, about = "Attention-factor statistical arbitrage backtests")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic return panel.
    Gen(GenArgs),
    /// Rolling out-of-sample backtest for one model class and a list of K.
    Backtest(BacktestArgs),
    /// Drop characteristic groups one at a time and rerun the backtest.
    Ablate(AblateArgs),
    /// Top factor constituents at each retraining date.
    Inspect(InspectArgs),
    /// Summarize metrics CSVs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "ATTNARB_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Input panel CSV.
    #[arg(long)]
    panel: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Model seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of assets.
    #[arg(long)]
    n: Option<usize>,
    /// Number of days.
    #[arg(long)]
    t: Option<usize>,
    /// Number of latent clusters.
    #[arg(long)]
    k_true: Option<usize>,
    #[arg(long)]
    n_chars: Option<usize>,
    /// Cluster reassignments per asset per year.
    #[arg(long)]
    switch_rate: Option<f64>,
    #[arg(long)]
    factor_vol: Option<f64>,
    #[arg(long)]
    residual_vol: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct BacktestArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "attention")]
    model: String,
    /// Factor counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "attention")]
    model: String,
    /// Characteristic groups to drop, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    groups: Vec<String>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Assets listed per factor.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metrics CSV files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

/// Marks an error as a configuration problem (exit 1).
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Marks an error as a problem with input data (exit 2).
#[derive(Debug)]
struct DataError(String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if cause.is::<DataError>() || cause.is::<csv::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<attnarb::Error>() {
            return if e.is_data_error() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let command = std::env::args().collect::<Vec<_>>().join(" ");
    match cli.cmd {
        Cmd::Gen(a) => gen(a, &command),
        Cmd::Backtest(a) => backtest(a, &command),
        Cmd::Ablate(a) => ablation(a, &command),
        Cmd::Inspect(a) => inspect(a, &command),
        Cmd::Report(a) => report(a),
    }
}

fn out_dir(o: &OutArgs) -> Result<&Path> {
    std::fs::create_dir_all(&o.out)
        .map_err(|e| ConfigError(format!("cannot create output directory {}: {e}", o.out.display())))?;
    Ok(&o.out)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(dir: &Path, cmd: &str, command: &str, header: &[String], cfg: Option<&RunConfig>) -> Result<()> {
    let mut text = format!(
        "# attnarb {} manifest\n# version: {}\n# command: {command}\n",
        cmd,
        env!("CARGO_PKG_VERSION")
    );
    for h in header {
        text.push_str(&format!("# {h}\n"));
    }
    if let Some(c) = cfg {
        text.push_str(&c.to_text());
    }
    let path = dir.join(format!("manifest_{cmd}.cfg"));
    write_atomic(&path, text.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
        cfg.apply_text(&text).with_context(|| format!("config {}", p.display()))?;
    }
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k, v)?;
    }
    if !a.seed.is_empty() {
        cfg.seed = a.seed[0];
        cfg.seeds = a.seed.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_panel(path: &Path) -> Result<(ReturnPanel, String)> {
    let panel = load_csv(path).with_context(|| format!("loading panel {}", path.display()))?;
    let digest = sha256_file(path)?;
    eprintln!(
        "loaded {}: {} dates, {} assets, {} characteristics",
        path.display(),
        panel.n_dates(),
        panel.n_assets(),
        panel.n_characteristics()
    );
    Ok((panel, digest))
}

fn parse_model(s: &str) -> Result<ModelClass> {
    Ok(s.parse::<ModelClass>()?)
}

fn gen(a: GenArgs, command: &str) -> Result<()> {
    let mut syn = SyntheticConfig::default();
    if let Some(v) = a.n {
        syn.n_assets = v;
    }
    if let Some(v) = a.t {
        syn.n_days = v;
    }
    if let Some(v) = a.k_true {
        syn.n_factors = v;
    }
    if let Some(v) = a.n_chars {
        syn.n_characteristics = v;
    }
    if let Some(v) = a.switch_rate {
        syn.cluster_switch_rate = v;
    }
    if let Some(v) = a.factor_vol {
        syn.factor_vols = vec![v];
    }
    if let Some(v) = a.residual_vol {
        syn.residual_vol = v;
    }
    if let Some(v) = a.kappa {
        syn.residual_kappa = v;
    }
    if let Some(v) = a.missing_rate {
        syn.missing_rate = v;
    }
    let dir = out_dir(&a.out)?;
    let panel = synthetic_generate(&syn, a.seed)?;
    let path = dir.join("panel.csv");
    save_csv(&panel, &path)?;
    eprintln!("wrote {}", path.display());
    let header = vec![format!("seed: {}", a.seed), format!("synthetic: {syn:?}"), format!("output sha256: {}", sha256_file(&path)?)];
    write_manifest(dir, "gen", command, &header, None)
}

fn backtest(a: BacktestArgs, command: &str) -> Result<()> {
    let class = parse_model(&a.model)?;
    let base = resolve_config(&a.run)?;
    let ks = if a.k.is_empty() { vec![base.n_factors] } else { a.k.clone() };
    let (panel, digest) = load_panel(&a.run.panel)?;
    let dir = out_dir(&a.run.out)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    for &k in &ks {
        let mut cfg = base.clone();
        cfg.set("n_factors", &k.to_string())?;
        cfg.validate()?;
        eprintln!("{class} K={k}: seeds {:?}", cfg.seeds);
        let (report, ledgers) = multi_seed(&panel, &cfg, class)?;
        for (row, ledger) in report.rows.iter().zip(&ledgers) {
            let stem = format!("{class}_K{k}_seed{}", row.seed);
            write_atomic(&dir.join(format!("ledger_{stem}.csv")), ledger_csv(ledger).as_bytes())?;
            write_cumulative_csv(
                &dir.join(format!("cumulative_{stem}.csv")),
                &ledger.dates,
                &cumulative_returns(ledger.net.view()),
            )?;
            eprintln!("{stem}: SR {:.3}, net SR {:.3}", row.metrics.sr, row.metrics.sr_net);
        }
        rows.extend(report.rows);
    }
    let path = dir.join(format!("metrics_{class}.csv"));
    write_atomic(&path, metrics_csv(&rows).as_bytes())?;
    eprintln!("wrote {}", path.display());
    let header = vec![
        format!("panel: {}", a.run.panel.display()),
        format!("panel sha256: {digest}"),
        format!("model: {class}"),
        format!("K: {}", ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")),
    ];
    write_manifest(dir, "backtest", command, &header, Some(&base))
}

fn ablation(a: AblateArgs, command: &str) -> Result<()> {
    let class = parse_model(&a.model)?;
    if class == ModelClass::PcaOu {
        bail!(ConfigError("ablation needs a model that uses characteristics".into()));
    }
    let cfg = resolve_config(&a.run)?;
    let (panel, digest) = load_panel(&a.run.panel)?;
    let dir = out_dir(&a.run.out)?;
    let results = ablate(&panel, &cfg, &a.groups, class)?;
    for r in &results {
        eprintln!(
            "excluded {}: SR {:.3} (std {:.3})",
            r.excluded.as_deref().unwrap_or("none"),
            r.report.mean.sr,
            r.report.std.sr
        );
    }
    let path = dir.join("ablation.csv");
    write_ablation_csv(&path, &results)?;
    eprintln!("wrote {}", path.display());
    let header = vec![
        format!("panel: {}", a.run.panel.display()),
        format!("panel sha256: {digest}"),
        format!("model: {class}"),
        format!("groups: {}", a.groups.join(",")),
    ];
    write_manifest(dir, "ablate", command, &header, Some(&cfg))
}

fn inspect(a: InspectArgs, command: &str) -> Result<()> {
    let cfg = resolve_config(&a.run)?;
    let (panel, digest) = load_panel(&a.run.panel)?;
    let dir = out_dir(&a.run.out)?;
    let class = ModelClass::Attention;
    let run = rolling_protocol(&panel, &cfg, class)?;
    let data = MarketData::new(&panel, class, &run.config)?;
    let mut rows = Vec::new();
    for w in &run.windows {
        if w.traded.is_empty() {
            continue;
        }
        let day = w.traded.start;
        let wf = factor_weights_at(&data, w.params(), day)?;
        rows.push((panel.dates()[day], top_constituents(wf.view(), panel.asset_ids(), a.top)?));
    }
    let path = dir.join("constituents.csv");
    write_constituents_csv(&path, &rows)?;
    eprintln!("wrote {}", path.display());
    let header = vec![format!("panel: {}", a.run.panel.display()), format!("panel sha256: {digest}")];
    write_manifest(dir, "inspect", command, &header, Some(&cfg))
}

#[derive(Default)]
struct Summary {
    sr: Vec<f64>,
    sr_net: Vec<f64>,
    mu_net: Vec<f64>,
    sigma_net: Vec<f64>,
    beta: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn report(a: ReportArgs) -> Result<()> {
    let expected: Vec<&str> = METRICS_HEADER.split(',').collect();
    let mut groups: BTreeMap<(String, usize), Summary> = BTreeMap::new();
    for path in &a.files {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let headers = rdr.headers().with_context(|| format!("reading {}", path.display()))?.clone();
        if headers.iter().collect::<Vec<_>>() != expected {
            bail!(DataError(format!("{}: not a metrics CSV (header {:?})", path.display(), headers)));
        }
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.with_context(|| format!("reading {}", path.display()))?;
            let line = i + 2;
            let num = |j: usize| -> Result<f64> {
                let s = &rec[j];
                if s == "NaN" {
                    return Ok(f64::NAN);
                }
                s.parse::<f64>()
                    .map_err(|_| DataError(format!("{}:{line}: invalid {} value {s:?}", path.display(), expected[j])).into())
            };
            let k: usize = rec[1]
                .parse()
                .map_err(|_| DataError(format!("{}:{line}: invalid K {:?}", path.display(), &rec[1])))?;
            let s = groups.entry((rec[0].to_string(), k)).or_default();
            s.sr.push(num(3)?);
            s.sr_net.push(num(6)?);
            s.mu_net.push(num(7)?);
            s.sigma_net.push(num(8)?);
            s.beta.push(num(9)?);
        }
    }
    println!(
        "{:<14} {:>4} {:>6} {:>16} {:>16} {:>10} {:>10} {:>8}",
        "model", "K", "seeds", "SR", "SR_net", "mu_net%", "sigma_net%", "beta"
    );
    for ((model, k), s) in &groups {
        let (sr, sr_sd) = mean_std(&s.sr);
        let (srn, srn_sd) = mean_std(&s.sr_net);
        println!(
            "{:<14} {:>4} {:>6} {:>16} {:>16} {:>10.2} {:>10.2} {:>8.3}",
            model,
            k,
            s.sr.len(),
            format!("{sr:.2} ± {sr_sd:.2}"),
            format!("{srn:.2} ± {srn_sd:.2}"),
            mean_std(&s.mu_net).0,
            mean_std(&s.sigma_net).0,
            mean_std(&s.beta).0
        );
    }
    Ok(())
}
