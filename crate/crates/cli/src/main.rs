use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use openset_core::density::{fit_density_model, tp_id_samples, ClassDensityModel, CovarianceKind, DensityConfig};
use openset_core::features::{build_feature_set, FeatureConfig, GmmDensityMode, DEFAULT_PRUNE_THRESHOLD};
use openset_core::fusion::{ClassScheme, Classifier, Decision, FusionModel, TrainingConfig, DEFAULT_ESCAPE_BOUND};
use openset_core::interchange::{
    check_vocabulary_alignment, create_file, open_file, parse_detections, parse_ground_truth,
    read_model_file, write_jsonl_file, write_model_file, ClassVocabulary, DatasetBundle, DetectionRecord, RecordReader,
};
use openset_core::matching::{label_counts, label_detections, DEFAULT_IOU_THRESHOLD};
use openset_core::metrics::{measure_throughput, Interpolation};
use openset_core::pipeline::{
    self, build_fusion_dataset, calibrate_temperatures, evaluate, read_features, read_labeled, read_report,
    render_report, run_pipeline, train_fusion, tune_on, write_features, write_report_files, EvalInputs,
    FusionSplit, PipelineConfig, Ratio, SplitPlan, Stage,
};
use openset_core::synth::{generate_synthetic, BenchmarkPart, SynthConfig};
use openset_core::{Error, ErrorKind};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "openset", version, about = "Post-hoc open-set labeling of object detections")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label detections TP_ID / FP_ID / OOD / BG against ground truth.
    Match(MatchArgs),
    /// Fit per-class Gaussian mixtures on TP_ID embeddings.
    FitGmm(FitGmmArgs),
    /// Fit detector and GMM temperatures; writes a fusion model file.
    Calibrate(CalibrateArgs),
    /// Extract fusion feature vectors from labeled detections.
    BuildFeatures(BuildFeaturesArgs),
    /// Compose the fusion training and validation sets.
    Split(SplitArgs),
    /// Train the fusion MLP.
    TrainMlp(TrainMlpArgs),
    /// Tune the OOD threshold under the escape bound.
    TuneThresholds(TuneArgs),
    /// Evaluate a tuned model on the validation split.
    Evaluate(EvaluateArgs),
    /// Classify a detection stream.
    Classify(ClassifyArgs),
    /// Generate the synthetic benchmark bundles and a pipeline config.
    Synth(SynthArgs),
    /// Run the full pipeline from a config file.
    Run(RunArgs),
    /// Render tables and ROC point files from a saved report.
    Report(ReportArgs),
}

#[derive(Args)]
struct MatchArgs {
    /// Bundle directory (detections.jsonl, ground_truth.jsonl, vocabulary.txt).
    #[arg(long, conflicts_with_all = ["detections", "ground_truth", "vocabulary"])]
    bundle: Option<PathBuf>,
    #[arg(long, required_unless_present = "bundle")]
    detections: Option<PathBuf>,
    #[arg(long, required_unless_present = "bundle")]
    ground_truth: Option<PathBuf>,
    #[arg(long, required_unless_present = "bundle")]
    vocabulary: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou_threshold: f64,
    /// Labeled detection file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitGmmArgs {
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    vocabulary: PathBuf,
    #[arg(long, default_value_t = 1)]
    components: usize,
    #[arg(long, default_value_t = openset_core::density::DEFAULT_EPSILON)]
    epsilon: f64,
    /// full or diagonal.
    #[arg(long, default_value = "full", value_parser = parse_covariance)]
    covariance: CovarianceKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Labeled calibration detections.
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    vocabulary: PathBuf,
    /// Density model; enables the GMM temperature.
    #[arg(long)]
    density: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PRUNE_THRESHOLD)]
    prune_threshold: f64,
    /// Fusion model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildFeaturesArgs {
    #[arg(long)]
    labeled: PathBuf,
    /// Fusion model holding the temperatures.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    density: Option<PathBuf>,
    /// Comma-separated features, by name or column heading (e.g.
    /// "Score,Entropy,GMM Entr."), or "all".
    #[arg(long, default_value = "all")]
    features: String,
    /// log-sum-exp or max.
    #[arg(long, default_value = "log-sum-exp", value_parser = parse_gmm_mode)]
    gmm_density: GmmDensityMode,
    /// Overrides the model's prune threshold.
    #[arg(long)]
    prune_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also store the feature configuration in the model file.
    #[arg(long)]
    update_model: bool,
}

#[derive(Args)]
struct SplitArgs {
    /// Features of the detector-train source.
    #[arg(long)]
    train_features: PathBuf,
    /// Features of the ood-test source.
    #[arg(long)]
    test_features: PathBuf,
    /// Image list of the ood-test bundle.
    #[arg(long)]
    test_images: PathBuf,
    /// OOD training samples from another source instead of the test set.
    #[arg(long)]
    proxy_features: Option<PathBuf>,
    /// ID (and BG) detector-train:ood-test ratio.
    #[arg(long, default_value = "1:1")]
    ratio: Ratio,
    #[arg(long, default_value_t = 0.5)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainMlpArgs {
    #[arg(long)]
    features: PathBuf,
    /// Calibrated fusion model; the trained MLP is added to it.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// In two-class mode, train BG as OOD instead of excluding it.
    #[arg(long)]
    bg_as_ood: bool,
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = TrainingConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainingConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = TrainingConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainingConfig::default().max_epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainingConfig::default().patience)]
    patience: usize,
    #[arg(long, default_value_t = TrainingConfig::default().holdout_fraction)]
    holdout_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Validation features.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ESCAPE_BOUND, allow_negative_numbers = true)]
    escape_bound: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    density: Option<PathBuf>,
    /// Validation features.
    #[arg(long)]
    features: PathBuf,
    /// Labeled ood-test detections the features index into.
    #[arg(long)]
    labeled: PathBuf,
    /// ood-test bundle directory (ground truth for AP).
    #[arg(long)]
    bundle: PathBuf,
    /// split.json naming the validation images.
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    ap_iou_threshold: f64,
    /// all-point or 11-point.
    #[arg(long, default_value = "all-point", value_parser = parse_interpolation)]
    interpolation: Interpolation,
    /// Throughput timing runs; 0 skips it.
    #[arg(long, default_value_t = 3)]
    fps_runs: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    density: Option<PathBuf>,
    /// Detection stream; `-` reads stdin.
    #[arg(long, default_value = "-")]
    input: PathBuf,
    /// Decision stream; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report classification throughput on stderr.
    #[arg(long)]
    measure_fps: bool,
    #[arg(long, default_value_t = 3)]
    fps_runs: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Resume at this stage using the artifacts of earlier stages.
    #[arg(long)]
    from: Option<Stage>,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json written by evaluate.
    #[arg(long)]
    report: PathBuf,
    /// Directory for report.txt and ROC files; tables go to stdout when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_covariance(s: &str) -> Result<CovarianceKind, String> {
    match s {
        "full" => Ok(CovarianceKind::Full),
        "diagonal" => Ok(CovarianceKind::Diagonal),
        _ => Err("expected full or diagonal".into()),
    }
}

fn parse_gmm_mode(s: &str) -> Result<GmmDensityMode, String> {
    match s {
        "log-sum-exp" => Ok(GmmDensityMode::LogSumExp),
        "max" => Ok(GmmDensityMode::Max),
        _ => Err("expected log-sum-exp or max".into()),
    }
}

fn parse_interpolation(s: &str) -> Result<Interpolation, String> {
    match s {
        "all-point" => Ok(Interpolation::AllPoint),
        "11-point" => Ok(Interpolation::ElevenPoint),
        _ => Err("expected all-point or 11-point".into()),
    }
}

fn load_density(path: Option<&Path>) -> Result<Option<ClassDensityModel>, Error> {
    path.map(|p| read_model_file(p).map_err(Error::from)).transpose()
}

fn load_vocabulary(path: &Path) -> Result<ClassVocabulary, Error> {
    Ok(ClassVocabulary::parse(open_file(path)?)?)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let mut f = create_file(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(std::io::Error::other)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn cmd_match(a: MatchArgs) -> Result<(), Error> {
    let (detections, ground_truth, vocabulary) = match &a.bundle {
        Some(dir) => {
            let b = DatasetBundle::read_dir(dir)?;
            (b.detections, b.ground_truth, b.vocabulary)
        }
        None => {
            let (Some(d), Some(g), Some(v)) = (&a.detections, &a.ground_truth, &a.vocabulary) else {
                unreachable!("clap requires the three files without --bundle");
            };
            let dets = parse_detections(open_file(d)?)?;
            let gts = parse_ground_truth(open_file(g)?)?;
            let vocab = load_vocabulary(v)?;
            check_vocabulary_alignment(&dets, &vocab)?;
            (dets, gts, vocab)
        }
    };
    let labeled = label_detections(&detections, &ground_truth, &vocabulary, a.iou_threshold)?;
    write_jsonl_file(&a.out, &labeled)?;
    for (label, n) in label_counts(&labeled) {
        info!("{}: {n}", label.as_str());
    }
    Ok(())
}

fn cmd_fit_gmm(a: FitGmmArgs) -> Result<(), Error> {
    let vocab = load_vocabulary(&a.vocabulary)?;
    let labeled = read_labeled(&a.labeled)?;
    let samples = tp_id_samples(&labeled, &vocab);
    let config = DensityConfig {
        components: a.components,
        epsilon: a.epsilon,
        covariance: a.covariance,
        seed: a.seed,
        ..DensityConfig::default()
    };
    let model = fit_density_model(&vocab, &samples, &config)?;
    write_model_file(&model, &a.out)?;
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<(), Error> {
    let vocab = load_vocabulary(&a.vocabulary)?;
    let labeled = read_labeled(&a.labeled)?;
    let density = load_density(a.density.as_deref())?;
    let temps = calibrate_temperatures(&labeled, &vocab, density.as_ref())?;
    let mut model = FusionModel::new(vocab.len(), temps);
    model.prune_threshold = a.prune_threshold;
    write_model_file(&model, &a.out)?;
    Ok(())
}

fn cmd_build_features(a: BuildFeaturesArgs) -> Result<(), Error> {
    let mut model: FusionModel = read_model_file(&a.model)?;
    let mut config = FeatureConfig::parse_list(&a.features)?;
    config.gmm_density_mode = a.gmm_density;
    let density = load_density(a.density.as_deref())?;
    let extractor = openset_core::features::FeatureExtractor::new(config, model.temperatures, density.as_ref())?;
    let labeled = read_labeled(&a.labeled)?;
    let threshold = a.prune_threshold.unwrap_or(model.prune_threshold);
    let set = build_feature_set(&labeled, &extractor, threshold)?;
    info!("{} rows, {} pruned", set.rows.len(), set.header.pruned);
    write_features(&set, &a.out)?;
    if a.update_model {
        model.feature_config = Some(config);
        model.prune_threshold = threshold;
        write_model_file(&model, &a.model)?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Error> {
    let mut out = Vec::new();
    for line in open_file(path)?.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line.trim().to_string());
        }
    }
    Ok(out)
}

fn cmd_split(a: SplitArgs) -> Result<(), Error> {
    let train = read_features(&a.train_features)?;
    let test = read_features(&a.test_features)?;
    let proxy = a.proxy_features.as_deref().map(read_features).transpose()?;
    let images = read_lines(&a.test_images)?;
    let plan = SplitPlan {
        id_ratio: a.ratio,
        validation_fraction: a.validation_fraction,
        seed: a.seed,
    };
    let split = build_fusion_dataset(&train, &test, &images, proxy.as_ref(), &plan)?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_json(&split, &a.out_dir.join(pipeline::artifacts::SPLIT))?;
    write_features(
        &split.train_set(&train, &test, proxy.as_ref()),
        &a.out_dir.join(pipeline::artifacts::TRAIN_FEATURES),
    )?;
    write_features(&split.validation_set(&test), &a.out_dir.join(pipeline::artifacts::VALIDATION_FEATURES))?;
    for (k, n) in &split.counts {
        info!("{k}: {n}");
    }
    Ok(())
}

fn cmd_train_mlp(a: TrainMlpArgs) -> Result<(), Error> {
    let mut model: FusionModel = read_model_file(&a.model)?;
    let train = read_features(&a.features)?;
    let scheme = ClassScheme::from_classes(a.classes, a.bg_as_ood)?;
    let config = TrainingConfig {
        hidden: a.hidden,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        patience: a.patience,
        holdout_fraction: a.holdout_fraction,
        seed: a.seed,
    };
    let clf = train_fusion(&train, scheme, &config)?;
    info!(
        "trained {} epochs, best at epoch {}",
        clf.training.epochs_run, clf.training.best_epoch
    );
    model.feature_config = Some(train.header.config);
    model.classifier = Some(clf);
    model.thresholds = None;
    write_model_file(&model, &a.out)?;
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> Result<(), Error> {
    let mut model: FusionModel = read_model_file(&a.model)?;
    let val = read_features(&a.features)?;
    let t = tune_on(model.classifier()?, &val, a.escape_bound)?;
    println!(
        "tau_ood = {}  id_tpr = {:.4}  ood_escape = {:.4}",
        t.tau_ood, t.id_tpr, t.ood_escape
    );
    model.thresholds = Some(t);
    write_model_file(&model, &a.out)?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let model: FusionModel = read_model_file(&a.model)?;
    let density = load_density(a.density.as_deref())?;
    let validation = read_features(&a.features)?;
    let labeled = read_labeled(&a.labeled)?;
    let bundle = DatasetBundle::read_dir(&a.bundle)?;
    let text = std::fs::read_to_string(&a.split)?;
    let split: FusionSplit = serde_json::from_str(&text)
        .map_err(|e| openset_core::interchange::InterchangeError::ModelParse(e.to_string()))?;
    let report = evaluate(&EvalInputs {
        model: &model,
        density: density.as_ref(),
        validation: &validation,
        labeled: &labeled,
        bundle: &bundle,
        validation_images: &split.validation_images,
        ap_iou_threshold: a.ap_iou_threshold,
        interpolation: a.interpolation,
        fps_runs: a.fps_runs,
    })?;
    write_report_files(&report, &a.out_dir)?;
    print!("{}", render_report(&report));
    Ok(())
}

fn cmd_classify(a: ClassifyArgs) -> Result<(), Error> {
    let model: FusionModel = read_model_file(&a.model)?;
    let density = load_density(a.density.as_deref())?;
    let classifier = Classifier::new(&model, density.as_ref())?;
    let records: Vec<DetectionRecord> = if a.input.as_os_str() == "-" {
        RecordReader::new(std::io::stdin().lock()).collect::<Result<_, _>>()?
    } else {
        RecordReader::new(open_file(&a.input)?).collect::<Result<_, _>>()?
    };
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create_file(p)?),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    };
    for r in &records {
        let posterior = classifier.posterior(r)?;
        let decision = match &posterior {
            None => Decision::Suppressed,
            Some(p) => model.decision_thresholds()?.decide(p),
        };
        let line = serde_json::json!({
            "image_id": r.image_id,
            "box": r.bbox.to_array(),
            "decision": decision.as_str(),
            "posterior": posterior,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    if a.measure_fps && !records.is_empty() {
        let mut sink = 0usize;
        let t = measure_throughput(&records, a.fps_runs, |r| {
            if let Ok(d) = classifier.classify(r) {
                sink = sink.wrapping_add(d as usize);
            }
        })?;
        std::hint::black_box(sink);
        eprintln!(
            "throughput: {:.0} detections/s (std {:.0}, {} runs of {} records)",
            t.mean, t.std, t.runs, t.records_per_run
        );
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    std::fs::create_dir_all(&a.out_dir)?;
    for part in BenchmarkPart::ALL {
        let out = generate_synthetic(&SynthConfig::benchmark(part, a.seed))?;
        out.bundle.write_dir(&a.out_dir.join(part.name()))?;
    }
    let conf = format!(
        "# Synthetic benchmark run\n\
         train_bundle = train\n\
         calibration_bundle = calibration\n\
         test_bundle = test\n\
         output_dir = run\n\
         seed = {}\n\
         features = all\n\
         classes = 3\n\
         id_ratio = 3:1\n\
         validation_fraction = 0.5\n\
         escape_bound = {DEFAULT_ESCAPE_BOUND}\n",
        a.seed
    );
    std::fs::write(a.out_dir.join("pipeline.conf"), conf)?;
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<(), Error> {
    let config = PipelineConfig::load(&a.config)?;
    let report = run_pipeline(&config, a.from)?;
    print!("{}", render_report(&report));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Error> {
    let report = read_report(&a.report)?;
    match &a.out_dir {
        Some(dir) => {
            for p in write_report_files(&report, dir)? {
                info!("wrote {}", p.display());
            }
        }
        None => print!("{}", render_report(&report)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Match(a) => cmd_match(a),
        Command::FitGmm(a) => cmd_fit_gmm(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::BuildFeatures(a) => cmd_build_features(a),
        Command::Split(a) => cmd_split(a),
        Command::TrainMlp(a) => cmd_train_mlp(a),
        Command::TuneThresholds(a) => cmd_tune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !line.contains(&text) {
                    line.push_str(&format!(": {text}"));
                }
                source = s.source();
            }
            eprintln!("{line}");
            match e.kind() {
                ErrorKind::Infeasible => ExitCode::from(EXIT_INFEASIBLE),
                ErrorKind::Data => ExitCode::from(EXIT_DATA),
            }
        }
    }
}
