use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use visitcast::baselines::{EventSequence, HawkesModel, HppModel};
use visitcast::cascade::{Checkpoint, Trainer, Variant};
use visitcast::config::RunConfig;
use visitcast::data::{corpus_stats, load_jsonl, parse_visits, split, write_jsonl, CodeTaxonomy, DatasetSplit, Patient};
use visitcast::eval::{
    ablation_suite, cold_start_from_records, collect_records, metrics_rows, sweep, time_baseline_rmse, write_ablation_csv,
    write_comments, write_metrics_csv, write_sweep_csv, write_training_log, MetricReport,
};
use visitcast::synthgen::{generate, non_adjacent_share, write_provenance, SynthConfig};

#[derive(Parser)]
#[command(name = "visitcast", version, about = "Next-visit time and diagnosis prediction for EHR visit sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cascade corpus, its provenance sidecar and taxonomy.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a corpus.
    Evaluate(EvaluateArgs),
    /// Predict the next visit after a visit prefix.
    Predict(PredictArgs),
    /// Sensitivity sweep over alpha, beta and embedding widths.
    Sweep(SuiteArgs),
    /// Train every ablation variant over several seeds.
    Ablate(AblateArgs),
    /// Fit and score the Poisson and Hawkes time baselines.
    Baseline(BaselineArgs),
}

/// Configuration shared by the model commands. Later sources win:
/// defaults, then `--config`, then `--set`, then the explicit flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set beta=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Sets marker, time and hidden widths together.
    #[arg(long)]
    dim: Option<usize>,
    /// full, no_cascade, no_graph, scalar_time, random_edges or single_parent.
    #[arg(long)]
    variant: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_over(RunConfig::default())
    }

    fn resolve_over(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            cfg.apply_file(path).with_context(|| format!("reading config {}", path.display()))?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("`--set {kv}`: expected KEY=VALUE"))?;
            cfg.set(k, v)?;
        }
        let mut flag = |k: &str, v: Option<String>| v.map(|v| cfg.set(k, &v)).transpose();
        flag("seed", self.seed.map(|x| x.to_string()))?;
        flag("epochs", self.epochs.map(|x| x.to_string()))?;
        flag("batch_size", self.batch_size.map(|x| x.to_string()))?;
        flag("alpha", self.alpha.map(|x| x.to_string()))?;
        flag("beta", self.beta.map(|x| x.to_string()))?;
        flag("variant", self.variant.clone())?;
        if let Some(d) = self.dim {
            for k in ["marker_dim", "time_dim", "hidden_dim"] {
                cfg.set(k, &d.to_string())?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// The cascade corpus used for the ablation and cold-start protocols.
    Default,
    /// Shaped like the MIMIC-III cohort statistics.
    Mimic,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory; gets corpus.jsonl, provenance.jsonl, taxonomy.txt and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    /// Patient corpus in JSONL form.
    #[arg(long)]
    data: PathBuf,
    /// Closed code list, one per line. Defaults to the codes seen in the data.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory; gets checkpoint.json and training_log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint until `epochs` epochs are done in total.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// metrics.csv destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON visit list `[{"t": 0.0, "codes": ["A"]}, ...]`; `-` reads stdin.
    #[arg(long)]
    prefix: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Comma-separated variant labels; all six by default.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn comments(command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Result<Vec<(String, String)>> {
    let mut c = vec![("command".to_string(), command.to_string()), ("config".to_string(), cfg.to_json())];
    for (name, path) in inputs {
        c.push((format!("{name}_sha256"), sha256_file(path)?));
    }
    Ok(c)
}

fn load_data(d: &DataArgs) -> Result<(CodeTaxonomy, Vec<Patient>)> {
    let tax = d.taxonomy.as_ref().map(CodeTaxonomy::load).transpose()?;
    load_jsonl(&d.data, tax).with_context(|| format!("reading {}", d.data.display()))
}

fn variant_label(cfg: &RunConfig) -> &'static str {
    Variant::ALL.iter().find(|v| v.ablation() == cfg.ablation).map(|v| v.label()).unwrap_or("custom")
}

fn pick<'a>(s: &'a DatasetSplit, which: SplitName, all: &'a [Patient]) -> &'a [Patient] {
    match which {
        SplitName::Train => &s.train,
        SplitName::Validation => &s.validation,
        SplitName::Test => &s.test,
        SplitName::All => all,
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = match a.preset {
        Preset::Default => SynthConfig::default(),
        Preset::Mimic => SynthConfig::mimic_like(),
    };
    cfg.seed = a.seed;
    if let Some(n) = a.patients {
        cfg.n_patients = n;
    }
    let corpus = generate(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let patients = corpus.plain_patients();
    let files = [("corpus.jsonl", 0), ("provenance.jsonl", 1), ("taxonomy.txt", 2)];
    for (name, kind) in files {
        let mut w = create(&a.out.join(name))?;
        match kind {
            0 => write_jsonl(&mut w, &patients, &corpus.taxonomy)?,
            1 => write_provenance(&mut w, &corpus.patients)?,
            _ => corpus.taxonomy.write(&mut w)?,
        }
        w.flush()?;
    }
    let mut hashes = serde_json::Map::new();
    for (name, _) in files {
        hashes.insert(name.into(), sha256_file(&a.out.join(name))?.into());
    }
    let manifest = json!({
        "command": "generate",
        "synth_config": cfg,
        "sha256": hashes,
        "stats": corpus_stats(&patients),
        "non_adjacent_parent_share": non_adjacent_share(&corpus.patients),
        "redraws": corpus.redraws,
    });
    let mut w = create(&a.out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    info!("wrote {} patients to {}", patients.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let resumed = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let (cfg, tax, patients) = match &resumed {
        Some(ck) => {
            // The checkpoint's settings are the base; only the epoch budget
            // and other non-structural keys should normally be overridden.
            let cfg = a.cfg.resolve_over(checkpoint_config(ck)?)?;
            let tax = ck.taxonomy()?;
            let given = a.data.taxonomy.as_ref().map(CodeTaxonomy::load).transpose()?;
            if given.is_some_and(|g| g.hash() != tax.hash()) {
                bail!("checkpoint taxonomy differs from --taxonomy");
            }
            let (_, p) = load_jsonl(&a.data.data, Some(tax.clone()))?;
            (cfg, tax, p)
        }
        None => {
            let cfg = a.cfg.resolve()?;
            let (tax, p) = load_data(&a.data)?;
            (cfg, tax, p)
        }
    };
    let sp = split(&patients, cfg.seed)?;
    let mut trainer = match &resumed {
        Some(ck) => {
            let mut t = ck.trainer::<f64>()?;
            if cfg.model_config(tax.len())? != t.model.config || cfg.seed != t.config.seed {
                bail!("resumed run must keep the checkpoint's model shape, variant and seed");
            }
            t.config.epochs = cfg.epochs;
            info!("resuming at epoch {} step {}", t.epochs_done, t.step());
            t
        }
        None => Trainer::<f64>::new(cfg.model_config(tax.len())?, cfg.train_config()?, &sp.train)?,
    };
    let logs = trainer.fit(&sp.train, |l| info!("epoch {} step {} loss {:.6}", l.epoch, l.step, l.loss))?;
    let train_metrics = visitcast::eval::evaluate(&trainer.model, &sp.train, &visitcast::eval::DEFAULT_KS)?;

    let mut inputs = vec![("data", a.data.data.as_path())];
    if let Some(r) = &a.resume {
        inputs.push(("resume", r.as_path()));
    }
    let notes = comments("train", &cfg, &inputs)?;
    let mut ck = Checkpoint::from_trainer(&trainer, &tax)?;
    ck.meta = json!({
        "config": cfg,
        "data_sha256": sha256_file(&a.data.data)?,
        "split_seed": cfg.seed,
    });
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    ck.save(a.out.join("checkpoint.json"))?;
    let mut w = create(&a.out.join("training_log.csv"))?;
    write_training_log(&mut w, &notes, &logs, Some(&train_metrics))?;
    w.flush()?;
    info!("checkpoint written to {}", a.out.join("checkpoint.json").display());
    Ok(())
}

fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    let v = ck.meta.get("config").cloned().context("checkpoint carries no run configuration")?;
    Ok(serde_json::from_value(v)?)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = checkpoint_config(&ck)?;
    let tax = ck.taxonomy()?;
    let model = ck.model::<f64>()?;
    let (_, patients) = load_jsonl(&a.data, Some(tax))?;
    let sp = split(&patients, cfg.seed)?;
    let chosen = pick(&sp, a.split, &patients);
    let records = collect_records(&model, chosen)?;
    let ks = visitcast::eval::DEFAULT_KS;
    let overall = MetricReport::from_records(&records, &ks)?;
    let cold = cold_start_from_records(chosen, &records, &ks)?;
    let mut notes = comments("evaluate", &cfg, &[("data", &a.data), ("checkpoint", &a.checkpoint)])?;
    let split_name = ["train", "validation", "test", "all"][a.split as usize];
    notes.push(("split".into(), split_name.into()));
    let rows = metrics_rows(variant_label(&cfg), Some(cfg.seed), &overall, &cold);
    let mut w = create(&a.out)?;
    write_metrics_csv(&mut w, &notes, &rows)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ScoredCode {
    code: String,
    score: f64,
}

#[derive(Serialize)]
struct PredictOutput {
    t_hat: f64,
    gap_hat: f64,
    top_codes: Vec<ScoredCode>,
    attention: Vec<f64>,
    intensity: visitcast::IntensityContext,
    config: RunConfig,
    checkpoint_sha256: String,
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = checkpoint_config(&ck)?;
    let tax = ck.taxonomy()?;
    let model = ck.model::<f64>()?;
    let text = if a.prefix.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(&a.prefix).with_context(|| format!("reading {}", a.prefix.display()))?
    };
    let visits = parse_visits(&text, &tax)?;
    let p = model.predict(&visits)?;
    let order = visitcast::eval::ranking(&p.probs);
    let top_codes = order.iter().take(a.top).map(|&i| ScoredCode { code: tax.code(i).to_string(), score: p.probs[i] }).collect();
    let out = PredictOutput {
        t_hat: p.t_hat,
        gap_hat: p.gap_hat,
        top_codes,
        attention: p.attention,
        intensity: p.intensity,
        config: cfg,
        checkpoint_sha256: sha256_file(&a.checkpoint)?,
    };
    let mut w: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    serde_json::to_writer_pretty(&mut w, &out)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_sweep(a: &SuiteArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (tax, patients) = load_data(&a.data)?;
    let sp = split(&patients, cfg.seed)?;
    let exp = cfg.experiment(tax.len())?;
    let grid = cfg.sweep_grid();
    info!("sweep over {} cells x {} seeds", grid.len(), cfg.seeds.len());
    let rows = sweep(&sp, &exp, &grid, &cfg.seeds, |r| {
        info!("alpha {} beta {} dm {} dt {} seed {} done", r.alpha, r.beta, r.marker_dim, r.time_dim, r.run.seed)
    })?;
    let notes = comments("sweep", &cfg, &[("data", &a.data.data)])?;
    let mut w = create(&a.out)?;
    write_sweep_csv(&mut w, &notes, &rows)?;
    w.flush()?;
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let s = &a.suite;
    let cfg = s.cfg.resolve()?;
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants
            .iter()
            .map(|v| Variant::parse(v.trim()).with_context(|| format!("unknown variant `{v}`")))
            .collect::<Result<Vec<_>>>()?
    };
    let (tax, patients) = load_data(&s.data)?;
    let sp = split(&patients, cfg.seed)?;
    let exp = cfg.experiment(tax.len())?;
    let table = ablation_suite(&sp, &exp, &variants, &cfg.seeds, |r| {
        info!("{} seed {} diverged={}", r.variant.label(), r.seed, r.diverged)
    })?;
    let notes = comments("ablate", &cfg, &[("data", &s.data.data)])?;
    let mut w = create(&s.out)?;
    write_ablation_csv(&mut w, &notes, &table)?;
    w.flush()?;
    Ok(())
}

fn sequences(patients: &[Patient]) -> Result<Vec<EventSequence<f64>>> {
    Ok(patients.iter().filter(|p| p.len() >= 2).map(EventSequence::from_patient).collect::<visitcast::Result<_>>()?)
}

fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let (_, patients) = load_data(&a.data)?;
    let sp = split(&patients, a.seed)?;
    let train = sequences(&sp.train)?;
    let test = sequences(&sp.test)?;

    let hpp = HppModel::fit(&train)?;
    let (hpp_rmse, n) = time_baseline_rmse(&sp.test, |h| hpp.predict_next(h))?;
    let hpp_nll: f64 = test.iter().map(|s| hpp.nll(s)).sum();

    let fit = HawkesModel::fit(&train)?;
    let hk = fit.model;
    let (hk_rmse, _) = time_baseline_rmse(&sp.test, |h| hk.predict_next(h))?;
    let hk_nll: f64 = test.iter().map(|s| hk.nll(s)).sum();

    let cfg = RunConfig { seed: a.seed, ..RunConfig::default() };
    let mut notes = comments("baseline", &cfg, &[("data", &a.data.data)])?;
    notes.push(("hawkes_starts".into(), serde_json::to_string(&fit.starts)?));
    let mut w = create(&a.out)?;
    write_comments(&mut w, &notes)?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(["model", "mu", "a", "b", "train_nll", "test_nll", "test_rmse_log_time", "n_predictions"])?;
    cw.write_record(["hpp", &hpp.rate.to_string(), "", "", "", &hpp_nll.to_string(), &hpp_rmse.to_string(), &n.to_string()])?;
    cw.write_record([
        "hawkes",
        &hk.mu.to_string(),
        &hk.a.to_string(),
        &hk.b.to_string(),
        &fit.nll.to_string(),
        &hk_nll.to_string(),
        &hk_rmse.to_string(),
        &n.to_string(),
    ])?;
    cw.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Baseline(a) => cmd_baseline(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::from("error");
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
