use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use ntaa_core::arch::DiscreteArchitecture;
use ntaa_core::gradsuite::{run_suite, GRAD_TOL};
use ntaa_core::oracle::{arch_id, rating_fidelity_vs_space_size, run_oracle};
use ntaa_core::persist::{write_report_log, Checkpoint, ConfigFile, ExperimentConfig, ReportLog};
use ntaa_core::pipeline::{
    finalize, pretrain_source, search_phase, wpf_baseline, RunReport, TransferData, WpfMode,
};
use ntaa_core::selfsup::{linear_eval_search, unsup_pretrain_supernet};
use ntaa_core::supernet::SuperNet;
use ntaa_core::NtaaError;

#[derive(Parser, Debug)]
#[command(
    name = "ntaa",
    version,
    about = "Transfer a pretrained network while adapting its architecture"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Shorthand for `--set run.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for reports, checkpoints and exports.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the initial architecture on the source task.
    Pretrain,
    /// Search on the target starting from a pretrained checkpoint, then finetune the result.
    Adapt {
        /// Pretrained checkpoint; trained from scratch first when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Contrastive pretraining of the supernet on unlabeled source images.
    UnsupPretrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gate-and-classifier search on the target from a contrastively pretrained supernet.
    LinearSearch {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Discretize a searched supernet checkpoint and finetune the selected network.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finetune the pretrained architecture unchanged.
    Wpf {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
    },
    /// Rate every architecture of a small space by brute force and by shared weights.
    Oracle {
        /// Also measure rank agreement for each candidate-set size in `oracle.sizes`.
        #[arg(long)]
        sweep: bool,
    },
    /// Print a saved architecture as text, or as DOT with `--dot`.
    ExportArch {
        path: PathBuf,
        #[arg(long)]
        dot: bool,
    },
    /// Compare analytic and finite-difference gradients of every op.
    Gradcheck {
        #[arg(long, default_value_t = ntaa_core::gradsuite::DEFAULT_SEEDS)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Full,
    Partial,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<NtaaError> for Failure {
    fn from(e: NtaaError) -> Self {
        match e {
            NtaaError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            ConfigFile::parse(&text)?
        }
        None => ConfigFile::default(),
    };
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| ConfigFile::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(("run.seed".into(), seed.to_string()));
    }
    Ok(ExperimentConfig::from_entries(&file, &overrides)?)
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    log: ReportLog,
}

impl Run {
    fn new(cfg: ExperimentConfig, out: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(out)?;
        fs::write(out.join("config.txt"), cfg.serialize())?;
        let mut log = ReportLog::new();
        let entries: Map<String, Value> = ExperimentConfig::keys()
            .into_iter()
            .map(|k| (k.to_string(), Value::String(cfg.get(k).unwrap_or_default())))
            .collect();
        log.push("config", entries);
        Ok(Run { cfg, out: out.to_path_buf(), log })
    }

    fn data(&self) -> Result<TransferData, Failure> {
        Ok(self.cfg.transfer_data()?)
    }

    fn save(&self, name: &str, ckpt: &Checkpoint) -> Outcome {
        ckpt.save(self.out.join(name))?;
        println!("wrote {}", self.out.join(name).display());
        Ok(())
    }

    fn report(&mut self, r: &RunReport) {
        println!(
            "{}: val {} test {}{}",
            r.kind,
            fmt_acc(r.final_val_acc),
            fmt_acc(r.test_acc),
            r.architecture.as_ref().map(|a| format!(" arch {}", arch_id(a))).unwrap_or_default()
        );
        self.log.extend(r.to_log());
    }

    fn export_arch(&self, arch: &DiscreteArchitecture) -> Outcome {
        fs::write(self.out.join("arch.bin"), arch.to_bytes())?;
        fs::write(self.out.join("arch.dot"), arch.to_dot())?;
        Ok(())
    }

    fn finish(self) -> Outcome {
        write_report_log(self.out.join("report.jsonl"), &self.log)?;
        Ok(())
    }

    /// A given checkpoint, or a fresh source pretraining (saved alongside).
    fn pretrained(
        &mut self,
        path: Option<&Path>,
        data: &TransferData,
    ) -> Result<Checkpoint, Failure> {
        if let Some(p) = path {
            return Ok(Checkpoint::load(p)?);
        }
        let pre = pretrain_source(&self.cfg.run, data)?;
        self.report(&pre.report);
        self.save("pretrain.ckpt", &pre.checkpoint)?;
        Ok(pre.checkpoint)
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or("-".into(), |v| format!("{v:.4}"))
}

fn obj(v: Value) -> Map<String, Value> {
    v.as_object().cloned().unwrap_or_default()
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::ExportArch { path, dot } => {
            let bytes = fs::read(path)?;
            let arch = DiscreteArchitecture::from_bytes(&bytes)?;
            print!("{}", if *dot { arch.to_dot() } else { arch.to_text() });
            return Ok(());
        }
        Command::Gradcheck { seeds } => return gradcheck(*seeds, &cli.out),
        _ => {}
    }
    let mut r = Run::new(load_config(&cli)?, &cli.out)?;
    let data = r.data()?;
    let cfg = r.cfg.run.clone();
    match &cli.command {
        Command::Pretrain => {
            r.pretrained(None, &data)?;
        }
        Command::Adapt { checkpoint } => {
            let pre = r.pretrained(checkpoint.as_deref(), &data)?;
            let (net, search) = search_phase(&pre, &cfg, &data)?;
            r.report(&search);
            r.save("supernet.ckpt", &Checkpoint::from_store(&net.store, "search", cfg.seed))?;
            let fin = finalize(&net, &cfg, &data)?;
            r.report(&fin.report);
            r.export_arch(&fin.architecture)?;
            let ckpt = Checkpoint::from_store(&fin.network.store, "finalize", cfg.seed)
                .with_meta("arch", fin.architecture.to_text());
            r.save("adapted.ckpt", &ckpt)?;
        }
        Command::UnsupPretrain { checkpoint } => {
            let pre = r.pretrained(checkpoint.as_deref(), &data)?;
            let alpha0 = cfg.alpha0()?;
            let net = SuperNet::init_from_pretrained(&alpha0, &pre, &cfg.candidates, cfg.seed)?;
            let out =
                unsup_pretrain_supernet(net, &pre, &data.source_train, &cfg, &r.cfg.contrastive)?;
            for (epoch, loss) in out.report.epoch_loss.iter().enumerate() {
                r.log.push("contrastive_epoch", obj(json!({ "epoch": epoch, "loss": loss })));
            }
            r.log.push(
                "contrastive_summary",
                obj(json!({
                    "optimizer_steps": out.report.optimizer_steps,
                    "trainable_params": out.report.trainable_params,
                    "negatives_per_query": out.report.negatives_per_query,
                })),
            );
            println!(
                "contrastive: final loss {:.4}",
                out.report.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
            r.save("super_alpha0.ckpt", &out.checkpoint)?;
        }
        Command::LinearSearch { checkpoint } => {
            let sup = Checkpoint::load(checkpoint)?;
            let (net, report) = linear_eval_search(&sup, &cfg, &r.cfg.contrastive, &data)?;
            r.report(&report);
            r.export_arch(&net.discretize())?;
            r.save(
                "supernet.ckpt",
                &Checkpoint::from_store(&net.store, "linear-search", cfg.seed),
            )?;
        }
        Command::Finetune { checkpoint } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let net =
                SuperNet::<f32>::from_source(&cfg.alpha0()?, &ckpt, &cfg.candidates, cfg.seed)?;
            let fin = finalize(&net, &cfg, &data)?;
            r.report(&fin.report);
            r.export_arch(&fin.architecture)?;
            let out = Checkpoint::from_store(&fin.network.store, "finalize", cfg.seed)
                .with_meta("arch", fin.architecture.to_text());
            r.save("adapted.ckpt", &out)?;
        }
        Command::Wpf { checkpoint, mode } => {
            let pre = r.pretrained(checkpoint.as_deref(), &data)?;
            let mode = match mode {
                Mode::Full => WpfMode::Full,
                Mode::Partial => WpfMode::Partial,
            };
            let (net, report) = wpf_baseline(&pre, &cfg, &data, mode)?;
            r.report(&report);
            r.save("wpf.ckpt", &Checkpoint::from_store(&net.store, &report.kind, cfg.seed))?;
        }
        Command::Oracle { sweep } => {
            let table = run_oracle(&cfg, &r.cfg.oracle, &data)?;
            fs::write(r.out.join("ratings.csv"), table.to_csv())?;
            fs::write(r.out.join("best.dot"), table.best().to_dot())?;
            for (i, a) in table.architectures.iter().enumerate() {
                r.log.push("rating", obj(json!({
                    "index": i, "architecture": arch_id(a), "brute_force": table.brute_force[i],
                    "shared_weight": table.shared_weight[i], "under_trained": table.under_trained[i],
                })));
            }
            r.log.push("oracle", obj(json!({
                "size": table.architectures.len(), "tau_shared": table.tau_shared, "tau_under": table.tau_under,
                "random_selection": table.random_selection, "best": arch_id(table.best()),
                "supernet_choice": arch_id(&table.supernet_choice), "seeds": table.seeds,
            })));
            println!(
                "oracle: {} architectures, tau shared {:?}, tau under-trained {:?}, random selection {:.4}",
                table.architectures.len(),
                table.tau_shared,
                table.tau_under,
                table.random_selection
            );
            if *sweep {
                for (size, tau) in rating_fidelity_vs_space_size(&cfg, &r.cfg.oracle, &data)? {
                    r.log.push("fidelity", obj(json!({ "candidates": size, "tau": tau })));
                    println!("fidelity: {size} candidates, tau {tau:?}");
                }
            }
        }
        Command::ExportArch { .. } | Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    r.finish()
}

fn gradcheck(seeds: u64, out: &Path) -> Outcome {
    let results = run_suite(seeds)?;
    let mut log = ReportLog::new();
    let mut failed = 0;
    for op in ntaa_core::gradsuite::OPS {
        let rows: Vec<_> = results.iter().filter(|r| r.op == op).collect();
        let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.rel_err));
        let bad = rows.iter().filter(|r| !r.passed()).count();
        failed += bad;
        println!(
            "{op:<16} worst rel err {worst:.3e} over {} seeds{}",
            rows.len(),
            if bad > 0 { "  FAIL" } else { "" }
        );
        for r in rows {
            log.push("gradcheck", obj(json!({ "op": r.op, "seed": r.seed, "rel_err": r.rel_err })));
        }
    }
    fs::create_dir_all(out)?;
    write_report_log(out.join("gradcheck.jsonl"), &log)?;
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} checks above {GRAD_TOL:e}")));
    }
    Ok(())
}
