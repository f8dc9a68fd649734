use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use r2p_core::bank::{read_bank, write_bank};
use r2p_core::checkpoint::Checkpoint;
use r2p_core::config::RunConfig;
use r2p_core::eval::{attention_dump, baseline_metrics, check_bank_matches, configured_bank, datasets, plot_data, preset, write_report};
use r2p_core::gradcheck::{gradcheck, Component};
use r2p_core::scene::{read_scenes, write_scenes, Scene};
use r2p_core::train::{train, EpochRow, Session, TrainOptions};
use r2p_core::{Error, Result};

#[derive(Parser)]
#[command(name = "r2p", version, about = "Anchor-retrieval motion forecasting on synthetic scenes")]
struct Cli {
    /// JSON run config; `R2P_SECTION__FIELD` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and eval scene files.
    GenData,
    /// Build the motion bank from the training scenes.
    BuildBank,
    /// Train, appending one metrics row per epoch and split.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint: metrics report, attention dump and plot data.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        /// Confidence temperature, e.g. 0.5 to sharpen.
        #[arg(long)]
        conf_temperature: Option<f64>,
    },
    /// Finite-difference check of analytic gradients.
    Gradcheck {
        /// Component name or `all`.
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every variant of an ablation preset.
    Ablate {
        /// bank-mode, bank-topology, retrieval, gates, queries or map.
        preset: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::GenData => gen_data(&cfg),
        Cmd::BuildBank => build(&cfg),
        Cmd::Train { resume, stop_after } => train_cmd(&cfg, resume.as_deref(), stop_after),
        Cmd::Eval { checkpoint, split, conf_temperature } => eval_cmd(&cfg, checkpoint, split, conf_temperature),
        Cmd::Gradcheck { component, seed } => gradcheck_cmd(&component, seed),
        Cmd::Ablate { preset } => ablate(&cfg, &preset),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let (tr, ev) = datasets(cfg)?;
    for (path, scenes) in [(&cfg.paths.train, &tr), (&cfg.paths.eval, &ev)] {
        create_parent(path)?;
        write_scenes(path, scenes)?;
        eprintln!("wrote {} scenes to {}", scenes.len(), path.display());
    }
    Ok(())
}

fn build(cfg: &RunConfig) -> Result<()> {
    let tr = read_scenes(&cfg.paths.train)?;
    let bank = configured_bank(cfg, &tr)?;
    create_parent(&cfg.paths.bank)?;
    write_bank(&cfg.paths.bank, &bank)?;
    eprintln!("wrote {}x{} bank ({:08x}) to {}", bank.n_clusters, bank.n_elements, bank.checksum(), cfg.paths.bank.display());
    Ok(())
}

fn log_rows(rows: &[EpochRow]) {
    for r in rows {
        eprintln!(
            "epoch {:>3} {:5} minADE6 {:.3} minFDE6 {:.3} MR {:.3} loss {:.4} anchor {:.3} tau {:.3}",
            r.epoch, r.split, r.metrics.min_ade6, r.metrics.min_fde6, r.metrics.miss_rate, r.loss.total, r.anchor_distance, r.tau
        );
    }
}

fn train_cmd(cfg: &RunConfig, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let tr = read_scenes(&cfg.paths.train)?;
    let ev = read_scenes(&cfg.paths.eval)?;
    let bank = read_bank(&cfg.paths.bank)?;
    check_bank_matches(cfg, &bank)?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json_pretty())?;
    let ckpt = resume.map(Checkpoint::read).transpose()?;
    let report = out.join("metrics.csv");
    let append = ckpt.is_some();
    let mut first = true;
    let mut on_epoch = |s: &Session, rows: &[EpochRow]| -> Result<()> {
        log_rows(rows);
        write_report(&report, rows, append || !first)?;
        first = false;
        s.checkpoint().write(out.join("checkpoint.bin"))
    };
    let opts = TrainOptions { resume: ckpt.as_ref(), stop_after, on_epoch: Some(&mut on_epoch) };
    let s = train(cfg, &bank, &tr, &ev, opts)?;
    eprintln!("finished at epoch {} step {}", s.epoch, s.step);
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, checkpoint: Option<PathBuf>, split: Split, conf_temperature: Option<f64>) -> Result<()> {
    let out = &cfg.paths.out_dir;
    let ckpt = Checkpoint::read(checkpoint.unwrap_or_else(|| out.join("checkpoint.bin")))?;
    let bank = read_bank(&cfg.paths.bank)?;
    check_bank_matches(cfg, &bank)?;
    let s = Session::restore(cfg, &bank, &ckpt)?;
    let (scenes, name): (Vec<Scene>, &str) = match split {
        Split::Train => (read_scenes(&cfg.paths.train)?, "train"),
        Split::Eval => (read_scenes(&cfg.paths.eval)?, "eval"),
    };
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to evaluate"));
    }
    let temp = conf_temperature.unwrap_or(cfg.train.conf_temperature);
    if temp.is_nan() || temp <= 0.0 {
        return Err(Error::invalid("confidence temperature must be positive"));
    }
    let tau = s.eval_tau(cfg.data.n_train);
    let outputs = s.evaluate(&scenes, tau, temp)?;
    let mut row = s.eval_row(&outputs, &scenes, tau);
    row.split = name.into();
    fs::create_dir_all(out)?;
    write_report(out.join(format!("eval_{name}.csv")), std::slice::from_ref(&row), false)?;
    fs::write(out.join(format!("attention_{name}.jsonl")), attention_dump(&outputs)?)?;
    fs::write(out.join(format!("plot_{name}.csv")), plot_data(&scenes, &outputs))?;
    let cv = baseline_metrics(&scenes)?;
    let summary = serde_json::json!({ "split": name, "metrics": row.metrics, "anchor_distance": row.anchor_distance, "constant_velocity": cv });
    println!("{summary}");
    Ok(())
}

fn gradcheck_cmd(component: &str, seed: u64) -> Result<()> {
    let comps = if component == "all" { Component::ALL.to_vec() } else { vec![Component::parse(component)?] };
    let mut failed = Vec::new();
    for c in comps {
        let r = gradcheck(c, seed)?;
        println!("{}", serde_json::to_string(&r)?);
        eprintln!("{:10} {} max rel err {:.3e} over {} groups", c.name(), if r.passed() { "pass" } else { "FAIL" }, r.max_rel_err(), r.groups.len());
        if let Err(e) = r.into_result() {
            failed.push(e.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join("; ")))
    }
}

fn ablate(cfg: &RunConfig, name: &str) -> Result<()> {
    let variants = preset(name, cfg)?;
    let tr = read_scenes(&cfg.paths.train)?;
    let ev = read_scenes(&cfg.paths.eval)?;
    let dir = cfg.paths.out_dir.join("ablate").join(name);
    fs::create_dir_all(&dir)?;
    let mut summary = String::from("variant,min_ade1,min_ade6,min_fde1,min_fde6,miss_rate,brier_min_fde,anchor_distance\n");
    for (label, vcfg) in variants {
        eprintln!("== {name}/{label}");
        let bank = configured_bank(&vcfg, &tr)?;
        let vdir = dir.join(&label);
        fs::create_dir_all(&vdir)?;
        fs::write(vdir.join("config.json"), vcfg.to_json_pretty())?;
        let report = vdir.join("metrics.csv");
        let mut first = true;
        let mut on_epoch = |_: &Session, rows: &[EpochRow]| -> Result<()> {
            log_rows(rows);
            write_report(&report, rows, !first)?;
            first = false;
            Ok(())
        };
        let s = train(&vcfg, &bank, &tr, &ev, TrainOptions { on_epoch: Some(&mut on_epoch), ..Default::default() })?;
        let tau = s.eval_tau(tr.len());
        let out = s.evaluate(&ev, tau, vcfg.train.conf_temperature)?;
        let row = s.eval_row(&out, &ev, tau);
        let m = row.metrics;
        summary.push_str(&format!(
            "{label},{},{},{},{},{},{},{}\n",
            m.min_ade1, m.min_ade6, m.min_fde1, m.min_fde6, m.miss_rate, m.brier_min_fde, row.anchor_distance
        ));
        s.checkpoint().write(vdir.join("checkpoint.bin"))?;
    }
    fs::write(dir.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}
