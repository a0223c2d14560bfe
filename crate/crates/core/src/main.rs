use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cda::autodiff::Tensor;
use cda::config::RunConfig;
use cda::data::{self, LabeledDataset, UnlabeledDataset};
use cda::metrics::{self, Domain};
use cda::nn::CdaModel;
use cda::trainer::{self, Artifacts, TrainOutcome};
use cda::Error;

/// Contrastive-adversarial domain adaptation experiments.
#[derive(Parser)]
#[command(name = "cda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    Gen(GenArgs),
    /// Train a model from a config file.
    Train(RunArgs),
    /// Evaluate a trained checkpoint on the configured data.
    Eval(EvalArgs),
    /// Train CDA and DANN-mode side by side and compare them.
    Ablate(RunArgs),
    /// Project embeddings of a trained checkpoint to 2-D and write an SVG.
    Plot(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator name (`two-moons`).
    generator: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Rotation in degrees.
    #[arg(long, default_value_t = 0.0)]
    rotation: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    translate_x: f64,
    #[arg(long, default_value_t = 0.0)]
    translate_y: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "two_moons.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=value` or `section.key=value`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to the final checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Plot output path; defaults to `embedding.svg` in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Plot(a) => cmd_plot(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidArgument(_) => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn cmd_gen(a: &GenArgs) -> cda::Result<()> {
    let ds = match a.generator.as_str() {
        "two-moons" | "two_moons" => data::gen_two_moons(a.n, a.noise, a.rotation, [a.translate_x, a.translate_y], a.seed)?,
        other => {
            return Err(Error::InvalidArgument(format!("unknown generator `{other}` (available: two-moons)")));
        }
    };
    data::write_csv(&a.out, ds.x(), Some(ds.y()))?;
    println!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(())
}

struct Prepared {
    cfg: RunConfig,
    source: LabeledDataset,
    target: UnlabeledDataset,
    out_dir: PathBuf,
}

fn prepare(a: &RunArgs) -> cda::Result<Prepared> {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    let (source, target) = cfg.build_datasets()?;
    let out_dir = cfg.resolve_out_dir();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    Ok(Prepared {
        cfg,
        source,
        target,
        out_dir,
    })
}

fn run_training(cfg: &RunConfig, source: &LabeledDataset, target: &UnlabeledDataset, dir: &Path) -> cda::Result<TrainOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join("config.resolved");
    fs::write(&resolved, cfg.canonical()).map_err(|e| Error::io(&resolved, e))?;
    let artifacts = Artifacts {
        dir: dir.to_path_buf(),
        config_hash: cfg.hash(),
    };
    let model = cfg.init_model(source.in_dim(), source.num_classes())?;
    let out = trainer::train(&cfg.train, model, source, target, Some(&artifacts))?;
    cda::nn::save_checkpoint(&out.model, &artifacts.config_hash, &artifacts.final_checkpoint_path())?;
    Ok(out)
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.4}")).unwrap_or_else(|| "NA".into())
}

fn cmd_train(a: &RunArgs) -> cda::Result<()> {
    let p = prepare(a)?;
    let out = run_training(&p.cfg, &p.source, &p.target, &p.out_dir)?;
    let last = out.history.last().expect("at least one epoch");
    println!("artifacts in {}", p.out_dir.display());
    println!("final_source_acc={:.4}", last.src_acc);
    println!("final_target_acc={}", fmt_acc(last.tgt_acc));
    Ok(())
}

fn load_for(p: &Prepared, checkpoint: Option<&PathBuf>) -> cda::Result<CdaModel> {
    let path = checkpoint
        .cloned()
        .unwrap_or_else(|| p.out_dir.join("model_final.ckpt"));
    trainer::load_model(&path, Some(&p.cfg.hash()))
}

fn cmd_eval(a: &EvalArgs) -> cda::Result<()> {
    let p = prepare(&a.run)?;
    let model = load_for(&p, a.checkpoint.as_ref())?;
    let src = trainer::evaluate(&model, p.source.x(), p.source.y())?;
    let tgt = p
        .target
        .hidden_y()
        .map(|y| trainer::evaluate(&model, p.target.x(), y))
        .transpose()?;
    println!("source_acc={src:.4}");
    println!("target_acc={}", fmt_acc(tgt));
    Ok(())
}

// at most this many points per domain go into a scatter plot
const PLOT_POINTS: usize = 400;

fn stride_indices(n: usize) -> Vec<usize> {
    let step = n.div_ceil(PLOT_POINTS).max(1);
    (0..n).step_by(step).collect()
}

/// Writes the embedding dump and PCA scatter for one model.
fn export_embeddings(model: &CdaModel, p: &Prepared, csv: &Path, svg: &Path, title: &str) -> cda::Result<()> {
    let si = stride_indices(p.source.len());
    let ti = stride_indices(p.target.len());
    let xs = p.source.x().select_rows(&si);
    let xt = p.target.x().select_rows(&ti);
    let zs = model.embed(&xs)?;
    let zt = model.embed(&xt)?;
    let ys: Vec<usize> = si.iter().map(|&i| p.source.y()[i]).collect();
    let yt = match p.target.hidden_y() {
        Some(h) => ti.iter().map(|&i| h[i]).collect(),
        None => trainer::pseudo_labels(model, &xt)?,
    };
    let mut rows = zs.data().to_vec();
    rows.extend_from_slice(zt.data());
    let z = Tensor::matrix(zs.rows() + zt.rows(), zs.cols(), rows)?;
    let labels: Vec<usize> = ys.into_iter().chain(yt).collect();
    let domains: Vec<Domain> = std::iter::repeat_n(Domain::Source, zs.rows())
        .chain(std::iter::repeat_n(Domain::Target, zt.rows()))
        .collect();
    metrics::write_embeddings(csv, &z, &labels, &domains)?;
    let coords = metrics::pca_project(&z, 2)?;
    metrics::write_scatter(svg, &coords, &labels, &domains, title)
}

fn cmd_plot(a: &EvalArgs) -> cda::Result<()> {
    let p = prepare(&a.run)?;
    let model = load_for(&p, a.checkpoint.as_ref())?;
    let svg = a.out.clone().unwrap_or_else(|| p.out_dir.join("embedding.svg"));
    let csv = svg.with_extension("csv");
    export_embeddings(&model, &p, &csv, &svg, &p.cfg.name)?;
    println!("wrote {} and {}", svg.display(), csv.display());
    Ok(())
}

fn cmd_ablate(a: &RunArgs) -> cda::Result<()> {
    let p = prepare(a)?;
    let mut cda_cfg = p.cfg.clone();
    cda_cfg.train.contrastive_enabled = true;
    cda_cfg.train.adversarial_enabled = true;
    let mut dann_cfg = p.cfg.clone();
    dann_cfg.train.contrastive_enabled = false;
    dann_cfg.train.adversarial_enabled = true;

    let cda_run = run_training(&cda_cfg, &p.source, &p.target, &p.out_dir.join("cda"))?;
    let dann_run = run_training(&dann_cfg, &p.source, &p.target, &p.out_dir.join("dann"))?;

    let path = p.out_dir.join("ablation.csv");
    let mut text = String::from("epoch,cda_tgt_acc,dann_tgt_acc\n");
    for (c, d) in cda_run.history.iter().zip(&dann_run.history) {
        let f = |v: Option<f64>| v.map(metrics::format_sig6).unwrap_or_default();
        text.push_str(&format!("{},{},{}\n", c.epoch, f(c.tgt_acc), f(d.tgt_acc)));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    for (name, run) in [("cda", &cda_run), ("dann", &dann_run)] {
        export_embeddings(
            &run.model,
            &p,
            &p.out_dir.join(format!("{name}_embeddings.csv")),
            &p.out_dir.join(format!("{name}_scatter.svg")),
            &format!("{} ({name})", p.cfg.name),
        )?;
    }
    let last = |r: &TrainOutcome| fmt_acc(r.history.last().and_then(|h| h.tgt_acc));
    println!("wrote {}", path.display());
    println!("final_cda_tgt_acc={}", last(&cda_run));
    println!("final_dann_tgt_acc={}", last(&dann_run));
    Ok(())
}
