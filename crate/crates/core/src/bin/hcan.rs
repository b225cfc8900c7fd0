use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hcan::checkpoint;
use hcan::config::RunConfig;
use hcan::dataio::{self, BenchmarkLayout, Corpus, Split};
use hcan::gradcheck::{self, SuiteSize};
use hcan::tensor::OpKind;
use hcan::trainer::{self, mean_std, AblationSwitch, Trainer};
use hcan::{Error, HcanModel, Result};

const METRICS_SCHEMA: &str = "hcan.metrics/1";
const PREDICTIONS_SCHEMA: &str = "hcan.predictions/1";
const INSPECT_SCHEMA: &str = "hcan.inspect/1";
const STATS_SCHEMA: &str = "hcan.stats/1";
const SEEDS_SCHEMA: &str = "hcan.seeds/1";
const ABLATION_SCHEMA: &str = "hcan.ablation/1";
const GRADCHECK_SCHEMA: &str = "hcan.gradcheck/1";

#[derive(Parser)]
#[command(name = "hcan", version, about = "Emotion recognition in conversation with HCAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/val/test files) from a spec file.
    GenerateData {
        /// key = value file with synthetic keys; missing keys use defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Extra key=value overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a random-content corpus with a public benchmark's split layout.
    GenerateLayout {
        #[arg(long)]
        benchmark: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        feature_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print corpus statistics as JSON.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model (optionally over several seeds or ablations).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run K seeds starting at the configured seed and report mean±std.
        #[arg(long)]
        seeds: Option<usize>,
        /// Also train the model without the named component(s):
        /// no_ece, no_eae, no_kl, no_adv.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in this invocation; the checkpoint
        /// can be resumed.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print metrics of a checkpoint on a labeled split file as JSON.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Split file, or a corpus directory (its test split is used).
        #[arg(long)]
        data: PathBuf,
    },
    /// Write predicted labels and distributions for every utterance.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-utterance distributions and attribution attention of one
    /// conversation.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        conversation: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Size::Small)]
        size: Size,
        /// Write the report as JSON here as well.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Small,
    Full,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("hcan: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hcan: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HCAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("HCAN_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData { spec, out, overrides } => generate_data(spec.as_deref(), &out, &overrides),
        Command::GenerateLayout {
            benchmark,
            out,
            feature_dim,
            seed,
        } => {
            let layout = BenchmarkLayout::from_name(&benchmark)
                .ok_or_else(|| Error::Config(format!("unknown benchmark `{benchmark}` (iemocap, meld, emorynlp)")))?;
            let corpus = dataio::layout_corpus(layout, feature_dim, seed);
            create_dir(&out)?;
            dataio::write_corpus(&corpus, &out)?;
            print_json(&stats_doc(&corpus));
            Ok(())
        }
        Command::Stats { data } => {
            let corpus = load_data(&data)?;
            print_json(&stats_doc(&corpus));
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            seeds,
            ablate,
            resume,
            stop_after,
            overrides,
        } => train(TrainArgs {
            config,
            data,
            out,
            seed,
            seeds,
            ablate,
            resume,
            stop_after,
            overrides,
        }),
        Command::Evaluate { ckpt, data } => {
            let ck = checkpoint::load(&ckpt)?;
            let corpus = load_data(&data)?;
            let convs = eval_split(&corpus);
            check_labels(&ck.labels, &corpus)?;
            trainer::check_compatible(&ck.model, &corpus)?;
            let m = trainer::evaluate(&ck.model, convs, corpus.num_emotions())?;
            let mut doc = json!({ "schema": METRICS_SCHEMA, "labels": corpus.label_set });
            merge(&mut doc, serde_json::to_value(&m).expect("metrics serialize"));
            print_json(&doc);
            Ok(())
        }
        Command::Predict { ckpt, data, out } => predict(&ckpt, &data, &out),
        Command::Inspect {
            ckpt,
            data,
            conversation,
            out,
        } => inspect(&ckpt, &data, &conversation, &out),
        Command::Gradcheck { size, json, inject_fault } => gradcheck(size, json.as_deref(), inject_fault.as_deref()),
    }
}

fn print_json(v: &Value) {
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(v).expect("json"));
}

fn merge(doc: &mut Value, extra: Value) {
    if let (Value::Object(a), Value::Object(b)) = (doc, extra) {
        a.extend(b);
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("json");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

/// A corpus directory, or a single split file loaded as its own split.
fn load_data(path: &Path) -> Result<Corpus> {
    if path.is_dir() {
        return Ok(dataio::load_corpus(path)?);
    }
    let f = dataio::load_split(path)?;
    let mut corpus = Corpus {
        label_set: f.label_set,
        feature_dim: f.feature_dim,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    *corpus.split_mut(f.split) = f.conversations;
    Ok(corpus)
}

/// Conversations used by evaluate/predict: the single split of a file, or
/// the test split of a directory.
fn eval_split(corpus: &Corpus) -> &[hcan::dataio::Conversation] {
    let nonempty: Vec<Split> = Split::ALL.into_iter().filter(|&s| !corpus.split(s).is_empty()).collect();
    match nonempty.as_slice() {
        [only] => corpus.split(*only),
        _ => corpus.split(Split::Test),
    }
}

fn check_labels(ckpt_labels: &[String], corpus: &Corpus) -> Result<()> {
    if ckpt_labels != corpus.label_set.as_slice() {
        return Err(Error::Compatibility(format!(
            "checkpoint label set {ckpt_labels:?} differs from corpus label set {:?}",
            corpus.label_set
        )));
    }
    Ok(())
}

fn stats_doc(corpus: &Corpus) -> Value {
    let mut doc = json!({ "schema": STATS_SCHEMA });
    merge(&mut doc, serde_json::to_value(dataio::corpus_stats(corpus)).expect("stats"));
    doc
}

fn generate_data(spec: Option<&Path>, out: &Path, overrides: &[String]) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(p) = spec {
        cfg.apply_file(p)?;
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.synthetic.validate()?;
    let corpus = dataio::generate_synthetic(&cfg.synthetic)?;
    create_dir(out)?;
    dataio::write_corpus(&corpus, out)?;
    print_json(&stats_doc(&corpus));
    Ok(())
}

struct TrainArgs {
    config: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    seeds: Option<usize>,
    ablate: Vec<String>,
    resume: Option<PathBuf>,
    stop_after: Option<usize>,
    overrides: Vec<String>,
}

fn train(args: TrainArgs) -> Result<()> {
    let resumed = match &args.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            let state = ck
                .train_state
                .ok_or_else(|| Error::Config(format!("{} holds no training state", p.display())))?;
            let cfg = ck
                .config
                .ok_or_else(|| Error::Config(format!("{} holds no training config", p.display())))?;
            Some((state, cfg))
        }
        None => None,
    };
    let mut rc = RunConfig::default();
    if let Some((_, cfg)) = &resumed {
        rc.train = cfg.clone();
    }
    if let Some(p) = &args.config {
        rc.apply_file(p)?;
    }
    for o in &args.overrides {
        rc.apply_override(o)?;
    }
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    rc.validate()?;
    let switches = args
        .ablate
        .iter()
        .map(|a| {
            AblationSwitch::from_name(a)
                .ok_or_else(|| Error::Config(format!("unknown ablation `{a}` (no_ece, no_eae, no_kl, no_adv)")))
        })
        .collect::<Result<Vec<_>>>()?;
    if resumed.is_some() && (args.seeds.is_some() || !switches.is_empty()) {
        return Err(Error::Config("--resume cannot be combined with --seeds or --ablate".into()));
    }

    println!("# effective config");
    for line in rc.render().lines() {
        println!("#   {line}");
    }
    let corpus = dataio::load_corpus(&args.data)?;
    let cfg = rc.train;
    let seeds: Vec<u64> = (0..args.seeds.unwrap_or(1) as u64).map(|k| cfg.seed + k).collect();

    if !switches.is_empty() {
        let table = trainer::run_ablation(&corpus, &cfg, &switches, &seeds)?;
        print!("{}", table.render());
        let mut doc = json!({ "schema": ABLATION_SCHEMA });
        merge(&mut doc, serde_json::to_value(&table).expect("table"));
        write_json(&args.out, &doc)?;
        return Ok(());
    }

    if args.seeds.is_some() {
        let runs = trainer::run_seeds(&corpus, &cfg, &seeds)?;
        println!("{:>6} {:>8} {:>10} {:>10}", "seed", "epochs", "W-Avg F1", "accuracy");
        for (r, model) in &runs {
            println!(
                "{:>6} {:>8} {:>10.4} {:>10.4}",
                r.seed, r.epochs_run, r.test.weighted_f1, r.test.accuracy
            );
            checkpoint::save_model(&seed_path(&args.out, r.seed), model, &corpus.label_set, Some(&cfg))?;
        }
        let f1: Vec<f64> = runs.iter().map(|(r, _)| r.test.weighted_f1).collect();
        let s = mean_std(&f1);
        println!("mean weighted F1 {:.4} ± {:.4} over {} seeds", s.mean, s.std, f1.len());
        let rows: Vec<&trainer::SeedRun> = runs.iter().map(|(r, _)| r).collect();
        write_json(
            &args.out.with_extension("seeds.json"),
            &json!({ "schema": SEEDS_SCHEMA, "runs": rows, "weighted_f1": s }),
        )?;
        return Ok(());
    }

    let mut t = match resumed {
        Some((state, _)) => Trainer::resume(&corpus, cfg.clone(), state)?,
        None => Trainer::new(&corpus, cfg.clone())?,
    };
    let mut ran = 0;
    while !t.is_finished() && args.stop_after.is_none_or(|n| ran < n) {
        let rec = t.run_epoch()?;
        ran += 1;
        let val = rec
            .val
            .as_ref()
            .map(|m| format!(" val_f1 {:.4}", m.weighted_f1))
            .unwrap_or_default();
        eprintln!(
            "epoch {:>3} loss {:.5}{val}{}",
            rec.epoch,
            rec.train_loss,
            if rec.improved { " *" } else { "" }
        );
    }
    checkpoint::save_training(&args.out, t.state(), &corpus.label_set, &cfg)?;
    if !t.is_finished() {
        println!("stopped after epoch {}; resume with --resume {}", t.state().epoch, args.out.display());
        return Ok(());
    }
    let model: &HcanModel = &t.state().best;
    if !corpus.test.is_empty() && corpus.test.iter().all(|c| c.is_labeled()) {
        let m = trainer::evaluate_split(model, &corpus, Split::Test)?;
        println!("test weighted F1 {:.4} accuracy {:.4}", m.weighted_f1, m.accuracy);
    }
    println!("saved {}", args.out.display());
    Ok(())
}

fn seed_path(out: &Path, seed: u64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{seed}"),
    };
    out.with_file_name(name)
}

fn predict(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let corpus = load_data(data)?;
    check_labels(&ck.labels, &corpus)?;
    trainer::check_compatible(&ck.model, &corpus)?;
    let convs = eval_split(&corpus);
    let preds = trainer::predict_all(&ck.model, convs)?;
    let conversations: Vec<Value> = convs
        .iter()
        .zip(&preds)
        .map(|(c, p)| {
            let utts: Vec<Value> = c
                .utterances
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    json!({
                        "index": i,
                        "speaker": u.speaker,
                        "predicted": p.labels[i],
                        "predicted_label": corpus.label_set[p.labels[i]],
                        "y_hat": p.y_hat.row(i),
                    })
                })
                .collect();
            json!({ "id": c.id, "utterances": utts })
        })
        .collect();
    write_json(
        out,
        &json!({ "schema": PREDICTIONS_SCHEMA, "labels": corpus.label_set, "conversations": conversations }),
    )?;
    let n: usize = convs.iter().map(|c| c.len()).sum();
    println!("wrote {n} predictions to {}", out.display());
    Ok(())
}

fn inspect(ckpt: &Path, data: &Path, id: &str, out: &Path) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let corpus = load_data(data)?;
    check_labels(&ck.labels, &corpus)?;
    trainer::check_compatible(&ck.model, &corpus)?;
    let conv = Split::ALL
        .into_iter()
        .flat_map(|s| corpus.split(s))
        .find(|c| c.id == id)
        .ok_or_else(|| Error::UnknownConversation(id.to_string()))?;
    let p = ck.model.predict(conv)?;
    let utts: Vec<Value> = conv
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let attribution = match &p.trace {
                Some(t) => {
                    let ut = &t.utterances[i];
                    json!({
                        "weights": ut.weights,
                        "head_weights": ut.head_weights,
                        "intra": ut.intra,
                        "distances": ut.distances,
                        "gaussian": ut.gaussian,
                    })
                }
                None => Value::Null,
            };
            json!({
                "index": i,
                "speaker": u.speaker,
                "gold": u.label,
                "predicted": p.labels[i],
                "d_tmp": p.d_tmp.row(i),
                "d_src": p.d_src.row(i),
                "y_hat": p.y_hat.row(i),
                "attribution": attribution,
            })
        })
        .collect();
    write_json(
        out,
        &json!({
            "schema": INSPECT_SCHEMA,
            "conversation": conv.id,
            "labels": corpus.label_set,
            "utterances": utts,
        }),
    )?;
    println!("wrote {} utterances of `{}` to {}", conv.len(), conv.id, out.display());
    Ok(())
}

fn gradcheck(size: Size, json_out: Option<&Path>, fault: Option<&str>) -> Result<()> {
    let fault = match fault {
        Some(name) => Some(
            OpKind::from_name(name)
                .filter(|k| *k != OpKind::Leaf)
                .ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?,
        ),
        None => None,
    };
    let size = match size {
        Size::Small => SuiteSize::Small,
        Size::Full => SuiteSize::Full,
    };
    let report = gradcheck::run_suite(size, fault)?;
    let mut stdout = std::io::stdout().lock();
    for r in &report.results {
        let _ = writeln!(
            stdout,
            "{:<4} {:<34} max rel err {:.3e} (threshold {:.0e}, {} coords)",
            if r.passed { "ok" } else { "FAIL" },
            r.component,
            r.max_rel_error,
            r.threshold,
            r.coordinates
        );
    }
    let _ = writeln!(stdout, "elapsed {:.2}s", report.elapsed.as_secs_f64());
    drop(stdout);
    if let Some(p) = json_out {
        let mut doc = json!({ "schema": GRADCHECK_SCHEMA, "elapsed_seconds": report.elapsed.as_secs_f64() });
        merge(&mut doc, serde_json::to_value(&report).expect("report"));
        write_json(p, &doc)?;
    }
    gradcheck::require_pass(&report)
}
