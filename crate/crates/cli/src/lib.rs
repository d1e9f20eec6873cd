//! Command-line driver for the depth meta-initialization experiments.
//!
//! Subcommands cover the full pipeline: write a preset config, generate
//! a procedural RGB-D dataset, run stage-1 prior learning and stage-2
//! supervised training, evaluate models under the in-domain or zero-shot
//! protocol, compare reports, sweep the meta step size and export point
//! clouds.
//!
//! Exit codes: 0 success, 2 configuration or usage errors, 3 data and
//! I/O errors, 4 numeric or internal-state failures.

use clap::{Args, Parser, Subcommand, ValueEnum};
use metadepth_core::checkpoint::{load_model_any, save_model, AnyModel};
use metadepth_core::config::{
    load_config, save_config, ExperimentConfig, Precision, Stage1Strategy,
};
use metadepth_core::error::{Error, Result};
use metadepth_core::eval::{
    compare_methods, evaluate_model, write_metrics_csv, write_report_json, EvalReport,
    ProtocolSpec,
};
use metadepth_core::geometry::{backproject_to_cloud, write_ply, CameraIntrinsics};
use metadepth_core::metainit::{
    beta_sweep, run_fomaml, run_grad_accum, run_prior_learning, run_simple_pretraining,
    smoothed_tail_loss, MetaTraceRow, PriorResult,
};
use metadepth_core::net::Network;
use metadepth_core::scenes::{
    check_matches_config, generate_dataset, load_dataset, save_generated, Dataset,
};
use metadepth_core::tensor::Scalar;
use metadepth_core::trainer::{
    run_supervised_with_augment, DepthConversion, Provenance, TaskObjective, TraceRow,
    TrainedModel,
};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "metadepth",
    about = "Meta-initialization experiments for single-image depth regression",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a preset experiment configuration.
    Config(ConfigArgs),
    /// Render the procedural RGB-D dataset described by a config.
    Generate(GenerateArgs),
    /// Run stage-1 prior learning and/or stage-2 supervised training.
    Train(TrainArgs),
    /// Score a trained model on a dataset split.
    Eval(EvalArgs),
    /// Compare two stored evaluation reports.
    Compare(CompareArgs),
    /// Run stage 1 once per meta step size and tabulate the endpoints.
    SweepBeta(SweepBetaArgs),
    /// Export a predicted or ground-truth depth map as a colored PLY.
    ExportCloud(ExportCloudArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum StageArg {
    Prior,
    Supervised,
    Both,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum ProtocolArg {
    /// 20 m cap, absolute scale.
    Intra,
    /// 10 m cap, per-image median scaling.
    Cross,
}

impl ProtocolArg {
    fn spec(self) -> ProtocolSpec {
        match self {
            ProtocolArg::Intra => ProtocolSpec::intra_domain(),
            ProtocolArg::Cross => ProtocolSpec::zero_shot_cross_domain(),
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum SplitArg {
    Train,
    Test,
}

impl SplitArg {
    fn dir_name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Which preset to write.
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed to embed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory for the train/ and test/ splits.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset root produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and traces.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Which stages to run.
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model manifest (model.json).
    #[arg(long)]
    model: PathBuf,
    /// Dataset root produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "intra")]
    protocol: ProtocolArg,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional one-row CSV of the aggregate metrics.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Label for the CSV row; defaults to the model's stage-1 strategy.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Baseline evaluation report (JSON).
    #[arg(long)]
    baseline: PathBuf,
    /// Method evaluation report (JSON).
    #[arg(long)]
    method: PathBuf,
    /// Optional JSON output for the comparison.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepBetaArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated meta step sizes, each in (0, 1].
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    /// Directory for the sweep table and per-arm traces.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExportCloudArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Frame index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output PLY path.
    #[arg(long)]
    out: PathBuf,
    /// Export the ground-truth depth instead of the prediction.
    #[arg(long, default_value_t = false)]
    ground_truth: bool,
}

/// Parses and runs a full command line (excluding the program name is
/// fine; clap handles both). Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Config(a) => cmd_config(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::SweepBeta(a) => cmd_sweep_beta(a),
        Command::ExportCloud(a) => cmd_export_cloud(a),
    }
}

/// Loads a config, applies the seed override, re-derives component seeds
/// and validates.
fn prepare_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_split<T: Scalar>(
    data: &Path,
    split: &str,
    cfg: Option<&ExperimentConfig>,
) -> Result<Dataset<T>> {
    let (ds, _regions) = load_dataset::<T>(&data.join(split))?;
    if let Some(cfg) = cfg {
        check_matches_config(&ds, &cfg.generator)?;
    }
    Ok(ds)
}

fn write_meta_trace_csv(path: &Path, rows: &[MetaTraceRow]) -> Result<()> {
    let mut out = String::from("epoch,meta_iter,loss,elapsed_s\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.meta_iter, r.loss, r.elapsed_s));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_train_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("epoch,iter,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.iter, r.loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn cmd_config(a: ConfigArgs) -> Result<()> {
    let mut cfg = match a.preset {
        PresetArg::Desk => ExperimentConfig::desk(),
        PresetArg::Full => ExperimentConfig::full(),
    };
    if let Some(s) = a.seed {
        cfg.master_seed = s;
        cfg.resolve_seeds();
    }
    match &a.out {
        Some(path) => {
            save_config(path, &cfg)?;
            println!("wrote {} preset to {}", preset_name(a.preset), path.display());
        }
        None => {
            let text = serde_json::to_string_pretty(&cfg)
                .map_err(|e| Error::Data(format!("serializing config: {e}")))?;
            println!("{text}");
        }
    }
    Ok(())
}

fn preset_name(p: PresetArg) -> &'static str {
    match p {
        PresetArg::Desk => "desk",
        PresetArg::Full => "full",
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = prepare_config(&a.config, a.seed)?;
    ensure_dir(&a.out)?;
    match cfg.precision {
        Precision::F32 => generate_impl::<f32>(&cfg, &a.out),
        Precision::F64 => generate_impl::<f64>(&cfg, &a.out),
    }
}

fn generate_impl<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = generate_dataset::<T>(&cfg.generator)?;
    save_generated(&data, out)?;
    println!(
        "generated {} train and {} test tasks ({}x{}) into {}",
        data.train.len(),
        data.test.len(),
        cfg.generator.image_size.0,
        cfg.generator.image_size.1,
        out.display()
    );
    println!("generator config hash {}", cfg.generator.hash());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = prepare_config(&a.config, a.seed)?;
    ensure_dir(&a.out)?;
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(&cfg, &a.data, &a.out, a.stage),
        Precision::F64 => train_impl::<f64>(&cfg, &a.data, &a.out, a.stage),
    }
}

/// Runs the requested stages. Artifacts: `prior.json`/`prior.mdck` and
/// `stage1_trace.csv` for stage 1; `model.json`/`model.mdck` and
/// `stage2_trace.csv` for stage 2.
fn train_impl<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    stage: StageArg,
) -> Result<()> {
    let train_ds = load_split::<T>(data, "train", Some(cfg))?;
    let net = Network::new(cfg.network.clone())?;
    let theta_init = net.init_params::<T>(cfg.init_seed());
    let conversion =
        DepthConversion::new(cfg.stage2.depth_range.0, cfg.stage2.depth_range.1)?;
    let provenance = Provenance {
        stage1: cfg.stage1.label().into(),
        master_seed: cfg.master_seed,
        config_hash: cfg.hash(),
    };

    let run_stage1 = stage != StageArg::Supervised;
    let run_stage2 = stage != StageArg::Prior;
    let single_stage = matches!(cfg.stage1, Stage1Strategy::GradAccumSingleStage(_));

    let prior_params: metadepth_core::ParamVector<T> = if run_stage1 {
        let obj = TaskObjective::new(&net, &train_ds, conversion, cfg.stage2.loss_space)?
            .with_augment(cfg.augment, cfg.augment_seed())?;
        let result: Option<PriorResult<T>> = match &cfg.stage1 {
            Stage1Strategy::None => None,
            Stage1Strategy::Reptile(c) => Some(run_prior_learning(c, &obj, &theta_init)?),
            Stage1Strategy::Fomaml(c) => Some(run_fomaml(c, &obj, &theta_init)?),
            Stage1Strategy::Pretrain(c) => Some(run_simple_pretraining(c, &obj, &theta_init)?),
            Stage1Strategy::GradAccum(c) | Stage1Strategy::GradAccumSingleStage(c) => {
                Some(run_grad_accum(c, &obj, &theta_init)?)
            }
        };
        match result {
            None => {
                println!("stage 1: none (stage 2 starts from random initialization)");
                theta_init.clone()
            }
            Some(r) => {
                let tail = smoothed_tail_loss(&r.trace, 10).unwrap_or(f64::NAN);
                println!(
                    "stage 1 ({}): {} iterations, {} gradient evaluations, \
                     final smoothed loss {:.6}, {:.2}s",
                    cfg.stage1.label(),
                    r.trace.len(),
                    r.grad_evals,
                    tail,
                    r.wallclock_s
                );
                write_meta_trace_csv(&out.join("stage1_trace.csv"), &r.trace)?;
                let prior_model = TrainedModel {
                    spec: cfg.network.clone(),
                    params: r.theta_prior.clone(),
                    depth_range: cfg.stage2.depth_range,
                    provenance: provenance.clone(),
                };
                save_model(out, "prior", &prior_model)?;
                r.theta_prior
            }
        }
    } else {
        // Stage 2 alone: continue from a stored prior when one exists.
        let prior_json = out.join("prior.json");
        if prior_json.is_file() {
            let model = metadepth_core::checkpoint::load_model::<T>(&prior_json)?;
            println!("resuming from {}", prior_json.display());
            model.params
        } else {
            println!("no stored prior; stage 2 starts from random initialization");
            theta_init.clone()
        }
    };

    if !run_stage2 {
        return Ok(());
    }

    if single_stage {
        // The accumulation baseline in its single-stage form is the
        // final model; no supervised stage follows.
        let model = TrainedModel {
            spec: cfg.network.clone(),
            params: prior_params,
            depth_range: cfg.stage2.depth_range,
            provenance,
        };
        save_model(out, "model", &model)?;
        println!("stage 2 skipped (single-stage strategy); saved model to {}", out.display());
        return Ok(());
    }

    let result = run_supervised_with_augment(
        &net,
        &train_ds,
        &prior_params,
        &cfg.stage2,
        cfg.augment,
        cfg.augment_seed(),
    )?;
    let final_loss = result.loss_trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "stage 2: {} steps, final loss {:.6}",
        result.loss_trace.len(),
        final_loss
    );
    write_train_trace_csv(&out.join("stage2_trace.csv"), &result.loss_trace)?;
    let model = TrainedModel { provenance, ..result.model };
    save_model(out, "model", &model)?;
    println!("saved model to {}", out.join("model.json").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let report_label;
    let report = match load_model_any(&a.model)? {
        AnyModel::F32(m) => {
            report_label = a.label.clone().unwrap_or_else(|| m.provenance.stage1.clone());
            eval_impl(&m, &a)?
        }
        AnyModel::F64(m) => {
            report_label = a.label.clone().unwrap_or_else(|| m.provenance.stage1.clone());
            eval_impl(&m, &a)?
        }
    };
    write_report_json(&a.out, &report)?;
    if let Some(csv) = &a.csv {
        write_metrics_csv(csv, &[(report_label.clone(), report.metrics)])?;
    }
    let m = &report.metrics;
    println!(
        "{} images ({} skipped): mae {:.4}  absrel {:.4}  rmse {:.4}  rmse_log {:.4}",
        m.n_images, report.skipped_images, m.mae, m.absrel, m.rmse, m.rmse_log
    );
    println!(
        "delta1 {:.2}%  delta2 {:.2}%  delta3 {:.2}%  err_variance {:.5}",
        m.delta1 * 100.0,
        m.delta2 * 100.0,
        m.delta3 * 100.0,
        m.err_variance
    );
    println!("wrote report to {}", a.out.display());
    Ok(())
}

fn eval_impl<T: Scalar>(model: &TrainedModel<T>, a: &EvalArgs) -> Result<EvalReport> {
    let ds = load_split::<T>(&a.data, a.split.dir_name(), None)?;
    if ds.meta.image_size != model.spec.input_size {
        return Err(Error::Config(format!(
            "model expects {:?} input but the dataset holds {:?} frames",
            model.spec.input_size, ds.meta.image_size
        )));
    }
    evaluate_model(model, &ds, &a.protocol.spec())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("parsing report {}: {e}", path.display())))
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let baseline = read_report(&a.baseline)?;
    let method = read_report(&a.method)?;
    if baseline.protocol != method.protocol {
        return Err(Error::Config(format!(
            "reports use different protocols: {:?} vs {:?}",
            baseline.protocol, method.protocol
        )));
    }
    let cmp = compare_methods(&baseline.metrics, &method.metrics)?;
    println!(
        "relative change, method vs baseline (negative error change is better):"
    );
    println!(
        "  mae {:+.1}%  absrel {:+.1}%  rmse {:+.1}%  rmse_log {:+.1}%  err_variance {:+.1}%",
        cmp.mae_pct, cmp.absrel_pct, cmp.rmse_pct, cmp.rmse_log_pct, cmp.err_variance_pct
    );
    println!(
        "  delta1 {:+.1} pts  delta2 {:+.1} pts  delta3 {:+.1} pts",
        cmp.delta1_pts, cmp.delta2_pts, cmp.delta3_pts
    );
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&cmp)
            .map_err(|e| Error::Data(format!("serializing comparison: {e}")))?;
        std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
        println!("wrote comparison to {}", out.display());
    }
    Ok(())
}

fn cmd_sweep_beta(a: SweepBetaArgs) -> Result<()> {
    let cfg = prepare_config(&a.config, a.seed)?;
    if a.betas.is_empty() {
        return Err(Error::Config("provide at least one beta via --betas".into()));
    }
    let meta = match &cfg.stage1 {
        Stage1Strategy::Reptile(c) => c.clone(),
        other => {
            return Err(Error::Config(format!(
                "beta sweeps need a reptile stage-1 config, found {:?}",
                other.label()
            )))
        }
    };
    ensure_dir(&a.out)?;
    match cfg.precision {
        Precision::F32 => sweep_impl::<f32>(&cfg, &meta, &a),
        Precision::F64 => sweep_impl::<f64>(&cfg, &meta, &a),
    }
}

fn sweep_impl<T: Scalar>(
    cfg: &ExperimentConfig,
    meta: &metadepth_core::metainit::MetaConfig,
    a: &SweepBetaArgs,
) -> Result<()> {
    let train_ds = load_split::<T>(&a.data, "train", Some(cfg))?;
    let net = Network::new(cfg.network.clone())?;
    let theta_init = net.init_params::<T>(cfg.init_seed());
    let conversion =
        DepthConversion::new(cfg.stage2.depth_range.0, cfg.stage2.depth_range.1)?;
    let obj = TaskObjective::new(&net, &train_ds, conversion, cfg.stage2.loss_space)?
        .with_augment(cfg.augment, cfg.augment_seed())?;
    let arms = beta_sweep(meta, &obj, &theta_init, &a.betas)?;

    let mut table = String::from("beta,final_smoothed_loss,grad_evals,wallclock_s,status\n");
    for (i, arm) in arms.iter().enumerate() {
        match &arm.outcome {
            Ok(r) => {
                let tail = smoothed_tail_loss(&r.trace, 10).unwrap_or(f64::NAN);
                table.push_str(&format!(
                    "{},{},{},{},ok\n",
                    arm.beta, tail, r.grad_evals, r.wallclock_s
                ));
                write_meta_trace_csv(&a.out.join(format!("trace_beta_{i}.csv")), &r.trace)?;
                println!("beta {:.3}: final smoothed loss {:.6}", arm.beta, tail);
            }
            Err(e) => {
                table.push_str(&format!("{},,,,diverged\n", arm.beta));
                println!("beta {:.3}: diverged ({e})", arm.beta);
            }
        }
    }
    let table_path = a.out.join("sweep.csv");
    std::fs::write(&table_path, table).map_err(|e| Error::io(&table_path, e))?;
    println!("wrote sweep table to {}", table_path.display());
    Ok(())
}

fn cmd_export_cloud(a: ExportCloudArgs) -> Result<()> {
    match load_model_any(&a.model)? {
        AnyModel::F32(m) => export_impl(&m, &a),
        AnyModel::F64(m) => export_impl(&m, &a),
    }
}

fn export_impl<T: Scalar>(model: &TrainedModel<T>, a: &ExportCloudArgs) -> Result<()> {
    let ds = load_split::<T>(&a.data, a.split.dir_name(), None)?;
    let task = ds.tasks.get(a.index).ok_or_else(|| {
        Error::Data(format!(
            "frame index {} out of range: split has {} tasks",
            a.index,
            ds.len()
        ))
    })?;
    let (h, w) = ds.meta.image_size;
    let intr = CameraIntrinsics::default_for(w, h);
    let cloud = if a.ground_truth {
        backproject_to_cloud(&task.image, &task.depth, &task.valid, &intr)?
    } else {
        let pred = model.predict_one(&task.image)?;
        // Predictions are positive everywhere; export every pixel.
        let all = metadepth_core::Mask::all_true(h, w);
        backproject_to_cloud(&task.image, &pred, &all, &intr)?
    };
    write_ply(&a.out, &cloud)?;
    println!(
        "wrote {} points (scene {}, frame {}) to {}",
        cloud.len(),
        task.scene_id,
        task.frame_id,
        a.out.display()
    );
    Ok(())
}
