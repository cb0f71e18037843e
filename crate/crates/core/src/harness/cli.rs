//! Command-line front end. Exit status: 0 on success, 2 for usage and
//! config errors, 1 for anything else.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::recipes::{feature_shift, reproduce_finding, sweep, sweep_csv, SweepAxis};
use super::train::{load_data, pretrain_backbone, resume, train_features, train_with, EpochMetrics};
use crate::backbone::{count_params, BackboneSpec};
use crate::data::save_dataset;
use crate::error::{Error, Result};
use crate::head::weight_norms;
use crate::inference::{evaluate, format_records, interclass_similarity, matrix_csv, shift_histogram_csv};
use crate::objective::{prop1_simulate, Prop1Input};
use crate::peft::{count_policy_params, FineTunePolicy};

#[derive(Parser, Debug)]
#[command(name = "liftlab", version, about = "Lightweight fine-tuning lab for long-tail classification")]
struct Cli {
    /// Run configuration file (key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured synthetic long-tail dataset as dataset.lfds.
    GenData,
    /// Pretrain the foundation backbone on balanced source data (backbone.lfck).
    Pretrain,
    /// Fine-tune as configured; writes checkpoint.lfck and appends to metrics.jsonl.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch without shortening the schedule.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Similarity matrix, intra-class histograms, weight norms and shift statistics.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Learned-parameter accounting for a backbone and policy.
    Params {
        /// vitb16, vitl14 or desk.
        #[arg(long, default_value = "vitb16")]
        spec: String,
        #[arg(long, default_value = "adaptformer")]
        policy: String,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
    },
    /// Two-class Gaussian simulator for the source/target threshold bias.
    Prop1 {
        /// Source conditionals as m0,s0,m1,s1.
        #[arg(long, default_value = "0,1,2,1")]
        source: String,
        /// Target conditionals as m0,s0,m1,s1.
        #[arg(long, default_value = "0,1,2,1")]
        target: String,
        /// Class prior as p0,p1.
        #[arg(long, default_value = "0.9,0.1")]
        prior: String,
    },
    /// LIFT against classifier-only and full fine-tuning on the tail, over seeds.
    Reproduce {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Train once per value along one axis and tabulate the results.
    Sweep {
        /// alpha, r, sigma, e, g, k or lr.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

/// Digits grouped by thousands, e.g. `617,868`.
pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn floats<const N: usize>(what: &str, s: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("{what}: cannot parse {s:?}")))?;
    v.try_into().map_err(|_| Error::config(format!("{what}: expected {N} comma-separated numbers")))
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out)?;
    Ok(&cli.out)
}

fn spec_named(name: &str) -> Result<BackboneSpec> {
    match name {
        "desk" => Ok(super::config::desk_spec()),
        _ => BackboneSpec::preset(name).ok_or_else(|| Error::config(format!("unknown spec {name:?}"))),
    }
}

fn append_metrics(path: &Path) -> impl FnMut(&EpochMetrics) -> Result<()> + '_ {
    move |m| {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", m.to_json())?;
        println!("{}", m.to_json());
        Ok(())
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Params { spec, policy, classes } => {
            let spec = spec_named(spec)?;
            let policy: FineTunePolicy = policy.parse()?;
            let backbone = count_params(&spec).total();
            let learned = count_policy_params(&policy, &spec, *classes)?;
            println!("spec = {spec}");
            println!("policy = {policy}");
            println!("classes = {classes}");
            if let Some(r) = policy.bottleneck(*classes, spec.layers)? {
                println!("bottleneck = {r}");
            }
            println!("backbone_params = {} ({:.2}M)", group_thousands(backbone), backbone as f64 / 1e6);
            println!("learned_params = {} ({:.2}M)", group_thousands(learned), learned as f64 / 1e6);
        }
        Command::Prop1 { source, target, prior } => {
            let [a, b, c, d] = floats::<4>("--source", source)?;
            let [e, f, g, h] = floats::<4>("--target", target)?;
            let [p0, p1] = floats::<2>("--prior", prior)?;
            let input = Prop1Input::new([(a, b), (c, d)], [(e, f), (g, h)], [p0, p1]).map_err(|e| Error::config(e.to_string()))?;
            print!("{}", format_records(&prop1_simulate(&input)?.to_records()));
        }
        Command::GenData => {
            let cfg = config(cli)?;
            let ds = load_data(&cfg)?;
            let path = out_dir(cli)?.join("dataset.lfds");
            save_dataset(&path, &ds)?;
            println!("wrote {}", path.display());
            println!("counts = {:?}", ds.counts);
            let groups: Vec<String> = ds.groups.iter().map(|g| g.to_string()).collect();
            println!("groups = {}", groups.join(","));
        }
        Command::Pretrain => {
            let cfg = config(cli)?;
            let dir = out_dir(cli)?;
            let log = dir.join("pretrain_metrics.jsonl");
            let run = pretrain_backbone(&cfg, append_metrics(&log))?;
            let path = dir.join("backbone.lfck");
            save_checkpoint(&path, &run.checkpoint)?;
            println!("source_accuracy = {:.6}", run.source_accuracy);
            println!("wrote {}", path.display());
        }
        Command::Train { resume: from, until } => {
            let cfg = config(cli)?;
            let dir = out_dir(cli)?;
            let log = dir.join("metrics.jsonl");
            let run = match from {
                Some(p) => resume(&cfg, &load_checkpoint(p)?, *until, append_metrics(&log))?,
                None => train_with(&cfg, *until, append_metrics(&log))?,
            };
            let path = dir.join("checkpoint.lfck");
            save_checkpoint(&path, &run.checkpoint)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { checkpoint } => {
            let cfg = config(cli)?;
            let ds = load_data(&cfg)?;
            let model = load_checkpoint(checkpoint)?.to_model()?;
            print!("{}", format_records(&evaluate(&model, &ds, cfg.tte)?.to_records()));
        }
        Command::Diagnose { checkpoint, bins } => {
            let cfg = config(cli)?;
            let ds = load_data(&cfg)?;
            let model = load_checkpoint(checkpoint)?.to_model()?;
            let dir = out_dir(cli)?;
            let train = train_features(&model, &ds)?;
            let sim = interclass_similarity(&train, &ds.train_labels, ds.classes)?;
            fs::write(dir.join("similarity.csv"), matrix_csv(&sim))?;
            let shift = feature_shift(&model, &ds)?;
            fs::write(dir.join("intraclass_hist.csv"), shift_histogram_csv(&shift, *bins))?;
            let norms = weight_norms(&model.weight_matrix(), model.spec().dim);
            let mut csv = String::from("class,group,train_count,weight_norm\n");
            for (k, n) in norms.iter().enumerate() {
                csv.push_str(&format!("{k},{},{},{n:.6}\n", ds.groups[k], ds.counts[k]));
            }
            fs::write(dir.join("weight_norms.csv"), csv)?;
            let mut records = Vec::new();
            for c in &shift.classes {
                records.push((format!("shift.class{}", c.class), format!("{:.6}", c.shift)));
            }
            for g in crate::data::Group::ALL {
                let members: Vec<usize> = (0..ds.classes).filter(|&k| ds.groups[k] == g).collect();
                let v = shift.mean_shift(&members).map_or("absent".to_string(), |v| format!("{v:.6}"));
                records.push((format!("shift.{g}"), v));
            }
            for w in &shift.warnings {
                eprintln!("warning: {w}");
            }
            let text = format_records(&records);
            fs::write(dir.join("shift.txt"), &text)?;
            print!("{text}");
        }
        Command::Reproduce { seeds } => {
            let dir = out_dir(cli)?;
            let finding = reproduce_finding(seeds, dir)?;
            let opt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
            let mut csv = String::from("seed,lift_tail,classifier_only_tail,full_tail,full_lr,lift_tail_shift,full_tail_shift\n");
            for s in &finding.seeds {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    s.seed,
                    opt(s.lift.tail),
                    opt(s.classifier_only.tail),
                    opt(s.full.tail),
                    s.full_lr,
                    opt(s.lift_tail_shift),
                    opt(s.full_tail_shift)
                ));
            }
            fs::write(dir.join("finding.csv"), &csv)?;
            print!("{csv}");
            let m = finding.medians();
            let records = [
                ("source_accuracy", finding.source_accuracy),
                ("median.lift_tail", m.lift_tail),
                ("median.classifier_only_tail", m.classifier_only_tail),
                ("median.full_tail", m.full_tail),
                ("median.lift_tail_shift", m.lift_shift),
                ("median.full_tail_shift", m.full_shift),
            ];
            let mut records: Vec<(String, String)> = records.iter().map(|(k, v)| (k.to_string(), format!("{v:.6}"))).collect();
            records.push(("holds".to_string(), m.holds().to_string()));
            print!("{}", format_records(&records));
        }
        Command::Sweep { axis, values } => {
            let cfg = config(cli)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = sweep(&cfg, axis, values)?;
            let csv = sweep_csv(axis, &rows);
            fs::write(out_dir(cli)?.join(format!("sweep_{axis}.csv")), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}
