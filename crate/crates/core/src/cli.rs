//! The `eds` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cluster::{kmeans_best_of, ClusterModel, KMeansParams, DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::corpus::Corpus;
use crate::embed::{self, Embedding, EmbeddingSet, RoiSpec, DEFAULT_GRID};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ImageRecord, Split};
use crate::pipeline::{self, EncoderChoice, Experiment, ExperimentConfig, ExperimentReport};
use crate::raster::Mask;
use crate::sampler::{self, SamplePool, SamplerKind};
use crate::segmodel::{self, Hyperparams, PixelFeatures, SegModel};
use crate::synth::{self, SynthSpec};

#[derive(Parser, Debug)]
#[command(name = "eds", version, about = "Efficient data sampling and self-training for road segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with an imbalanced scenario mixture
    Synth(SynthArgs),
    /// Encode ROI crops into an EDSE embedding file
    Embed(EmbedArgs),
    /// Fit k-means on embeddings and write an EDSC cluster file
    Cluster(ClusterArgs),
    /// Draw an EDS or random subset and write it as a manifest fragment
    Sample(SampleArgs),
    /// Per-axis scenario densities and KL divergence to uniform
    Diagnose(DiagnoseArgs),
    /// Train a model on real labels
    TrainTeacher(TrainTeacherArgs),
    /// Write teacher argmax masks for unlabeled images
    PseudoLabel(PseudoLabelArgs),
    /// Train a model on real plus pseudo labels
    TrainStudent(TrainStudentArgs),
    /// Per-class IoU and mIoU of a model on a split
    Evaluate(EvaluateArgs),
    /// Run seeded supervised, self-training or sampler-comparison experiments
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Clone, Copy)]
struct SeedArg {
    /// Random seed
    #[arg(long, env = "EDS_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PoolArg {
    Labeled,
    Unlabeled,
    Train,
    All,
}

impl From<PoolArg> for SamplePool {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Labeled => SamplePool::Labeled,
            PoolArg::Unlabeled => SamplePool::Unlabeled,
            PoolArg::Train => SamplePool::Train,
            PoolArg::All => SamplePool::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Eds,
    Random,
}

impl From<MethodArg> for SamplerKind {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Eds => SamplerKind::Eds,
            MethodArg::Random => SamplerKind::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    LabeledTrain,
    Unlabeled,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::LabeledTrain => Split::LabeledTrain,
            SplitArg::Unlabeled => Split::Unlabeled,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (manifest.jsonl, images/, masks/)
    #[arg(long)]
    out: PathBuf,
    /// Number of images
    #[arg(long, default_value_t = 1000)]
    size: usize,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug, Clone, Copy)]
struct EncoderArgs {
    /// Grid cells per side for the built-in encoder
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    /// Bottom fraction of rows kept as the road region
    #[arg(long, default_value_t = 0.6)]
    roi: f64,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output EDSE file
    #[arg(long)]
    out: PathBuf,
    /// Records to encode
    #[arg(long, value_enum, default_value_t = PoolArg::All)]
    pool: PoolArg,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    /// Input EDSE file
    #[arg(long)]
    embeddings: PathBuf,
    /// Output EDSC file
    #[arg(long)]
    out: PathBuf,
    /// Number of clusters
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Independent k-means++ restarts; the lowest inertia wins
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Restrict to the ids of this pool (requires --manifest)
    #[arg(long, value_enum, requires = "manifest")]
    pool: Option<PoolArg>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Standardize every dimension before clustering
    #[arg(long)]
    standardize: bool,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output subset file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Eds)]
    method: MethodArg,
    /// EDSC cluster file (eds only)
    #[arg(long)]
    clusters: Option<PathBuf>,
    /// Picks per cluster; the eds budget is n * k
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Subset size; defaults to n * k for eds and 3000 for random
    #[arg(long)]
    budget: Option<usize>,
    /// Pool for random sampling
    #[arg(long, value_enum, default_value_t = PoolArg::Labeled)]
    pool: PoolArg,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Subset file; the whole manifest when absent
    #[arg(long)]
    subset: Option<PathBuf>,
    /// JSON output file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Copy)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Early-stopping patience in epochs
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0.9)]
    poly_power: f64,
    /// Fine-tuning preset: lr 0.0001 unless --lr is given explicitly
    #[arg(long)]
    fine_tune: bool,
}

impl TrainArgs {
    fn hyperparams(&self, seed: u64, lr_explicit: bool) -> Hyperparams {
        let lr = if self.fine_tune && !lr_explicit { Hyperparams::fine_tune().lr } else { self.lr };
        Hyperparams {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            poly_power: self.poly_power,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainTeacherArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Subset file of labeled ids; every labeled-train record when absent
    #[arg(long)]
    subset: Option<PathBuf>,
    /// Output EDSM model file
    #[arg(long)]
    out: PathBuf,
    /// CSV of per-epoch training and validation loss
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct PseudoLabelArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Teacher EDSM file
    #[arg(long)]
    model: PathBuf,
    /// Subset file of ids to label; every unlabeled record when absent
    #[arg(long)]
    subset: Option<PathBuf>,
    /// Output directory (pseudo.jsonl, masks/)
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainStudentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Subset file of real labeled ids; every labeled-train record when absent
    #[arg(long)]
    subset: Option<PathBuf>,
    /// Pseudo-label manifest written by pseudo-label
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// JSON report file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-class IoU CSV table
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Supervised,
    SelfTraining,
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SamplerArg {
    Eds,
    Random,
    Both,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Corpus manifest; a synthetic corpus is generated when absent
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Size of the generated synthetic corpus
    #[arg(long, default_value_t = 16000, conflicts_with = "manifest")]
    synth_size: usize,
    /// Seed of the generated synthetic corpus
    #[arg(long, default_value_t = 0, conflicts_with = "manifest")]
    synth_seed: u64,
    /// Output directory for reports and tables
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Supervised)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SamplerArg::Both)]
    sampler: SamplerArg,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    pseudo_k: usize,
    /// Pseudo-label budgets, one student per value
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pseudo_budget: Vec<usize>,
    /// Pool the labeled subset is drawn from
    #[arg(long, value_enum, default_value_t = PoolArg::Labeled)]
    pool: PoolArg,
    /// Number of seeds (trials), starting at --seed
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Train teachers in compare mode
    #[arg(long)]
    train: bool,
    /// Parallel jobs over seeds
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write density and KL bar-chart tables
    #[arg(long)]
    plot: bool,
    /// Precomputed EDSE embeddings instead of the built-in encoder
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    standardize: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    train_args: TrainArgs,
    /// Student epochs; the teacher's when absent
    #[arg(long)]
    student_epochs: Option<usize>,
    /// Student learning rate; the teacher's when absent
    #[arg(long)]
    student_lr: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on a validation or I/O error, 2 on a
/// usage error. Errors are printed to stderr as one `error: <kind>: <message>`
/// line.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let lr_explicit = args.iter().any(|a| a == "--lr" || a.to_string_lossy().starts_with("--lr="));
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    if let Some(message) = usage_problem(&cli.command) {
        eprintln!("error: usage: {message}");
        return 2;
    }
    match run(cli.command, lr_explicit) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// Flag combinations clap cannot express.
fn usage_problem(command: &Command) -> Option<&'static str> {
    match command {
        Command::Sample(a) if a.method == MethodArg::Eds && a.clusters.is_none() => {
            Some("the eds method requires --clusters")
        }
        _ => None,
    }
}

/// The one-line error format used on stderr.
pub fn error_line(e: &Error) -> String {
    format!("error: {}: {}", e.kind(), single_line(&e.to_string()))
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn usage_error(e: clap::Error) -> i32 {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            print!("{e}");
            0
        }
        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
            eprint!("{}", e.render());
            eprintln!("error: usage: a subcommand is required");
            2
        }
        _ => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", single_line(first));
            2
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        )),
        _ => Ok(()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(command: Command, lr_explicit: bool) -> Result<String> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::TrainTeacher(a) => cmd_train_teacher(a, lr_explicit),
        Command::PseudoLabel(a) => cmd_pseudo_label(a),
        Command::TrainStudent(a) => cmd_train_student(a, lr_explicit),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Experiment(a) => cmd_experiment(a, lr_explicit),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<String> {
    let mut spec = SynthSpec::imbalanced(a.size, a.seed.seed);
    if let Some(f) = a.labeled_fraction {
        spec.labeled_fraction = f;
    }
    if let Some(f) = a.val_fraction {
        spec.val_fraction = f;
    }
    if let Some(f) = a.test_fraction {
        spec.test_fraction = f;
    }
    spec.validate()?;
    let corpus = synth::generate(&spec)?;
    corpus.write_to(&a.out)?;
    let mut out = format!("wrote {} images to {}\n", corpus.manifest.len(), a.out.display());
    for (split, count) in corpus.manifest.split_counts() {
        let _ = writeln!(out, "{split}: {count}");
    }
    Ok(out)
}

fn cmd_embed(a: EmbedArgs) -> Result<String> {
    require_file(&a.manifest)?;
    require_parent(&a.out)?;
    let roi = RoiSpec::new(a.encoder.roi)?;
    if a.encoder.grid == 0 {
        return Err(Error::invalid("grid must be positive"));
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let root = a.manifest.parent().unwrap_or(Path::new("."));
    let entries = SamplePool::from(a.pool)
        .ids(&manifest)
        .into_iter()
        .map(|id| {
            let image = crate::raster::Raster::read_ppm(&root.join(&manifest.require(id)?.image_path))?;
            Ok(Embedding {
                id: id.to_string(),
                values: embed::encode_image(&image, &roi, a.encoder.grid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = EmbeddingSet::new(3 * a.encoder.grid * a.encoder.grid, entries)?;
    embed::write_embeddings(&set, &a.out)?;
    Ok(format!("wrote {} embeddings of dimension {} to {}\n", set.len(), set.dim(), a.out.display()))
}

fn cmd_cluster(a: ClusterArgs) -> Result<String> {
    require_file(&a.embeddings)?;
    if let Some(m) = &a.manifest {
        require_file(m)?;
    }
    require_parent(&a.out)?;
    let mut set = embed::read_embeddings(&a.embeddings)?;
    if let (Some(pool), Some(m)) = (a.pool, &a.manifest) {
        let manifest = DatasetManifest::load(m)?;
        set = set.select(&SamplePool::from(pool).ids(&manifest))?;
    }
    if a.standardize {
        set = set.standardized();
    }
    if a.restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let params = KMeansParams {
        k: a.k,
        max_iter: a.max_iter,
        tol: a.tol,
        seed: a.seed.seed,
    };
    let model = kmeans_best_of(&set, params, a.restarts)?;
    model.save(&a.out)?;
    let sizes = model.cluster_sizes();
    Ok(format!(
        "k={} points={} inertia={:.6} smallest={} largest={}\n",
        model.k(),
        set.len(),
        model.inertia(),
        sizes.iter().min().copied().unwrap_or(0),
        sizes.iter().max().copied().unwrap_or(0)
    ))
}

fn cmd_sample(a: SampleArgs) -> Result<String> {
    require_file(&a.manifest)?;
    if let Some(c) = &a.clusters {
        require_file(c)?;
    }
    require_parent(&a.out)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let seed = a.seed.seed;
    let subset = match a.method {
        MethodArg::Eds => {
            let model = ClusterModel::load(a.clusters.as_deref().expect("checked by usage_problem"))?;
            for id in model.assignments().keys() {
                manifest.require(id)?;
            }
            match a.budget {
                Some(b) => sampler::eds_sample_budget(&model, b, seed)?,
                None => sampler::eds_sample(&model, a.n, seed)?,
            }
        }
        MethodArg::Random => {
            sampler::random_sample(&manifest, a.pool.into(), a.budget.unwrap_or(10 * 300), seed)?
        }
    };
    sampler::write_subset(&subset, &manifest, &a.out)?;
    Ok(format!("wrote {} ids ({}) to {}\n", subset.len(), subset.method, a.out.display()))
}

fn diagnostics_text(diags: &[sampler::AxisDiagnostic]) -> String {
    let mut out = String::new();
    for d in diags {
        for (value, p) in &d.density.density {
            let _ = writeln!(out, "{} {value} {p:.6}", d.density.axis);
        }
        let _ = writeln!(out, "{} kl {:.6}", d.density.axis, d.kl_to_uniform);
    }
    out
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<String> {
    require_file(&a.manifest)?;
    if let Some(s) = &a.subset {
        require_file(s)?;
    }
    if let Some(o) = &a.out {
        require_parent(o)?;
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ids: Vec<String> = match &a.subset {
        Some(path) => sampler::read_subset(path)?.0.ids,
        None => manifest.records().iter().map(|r| r.id.clone()).collect(),
    };
    let diags = sampler::diagnose(&ids, &manifest)?;
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&diags).expect("diagnostics serialize");
        write_text(out, &(json + "\n"))?;
    }
    Ok(diagnostics_text(&diags))
}

fn subset_ids(path: Option<&Path>, manifest: &DatasetManifest, default: Split) -> Result<Vec<String>> {
    match path {
        Some(p) => Ok(sampler::read_subset(p)?.0.ids),
        None => Ok(manifest.split_records(default).into_iter().map(|r| r.id.clone()).collect()),
    }
}

fn train_log_csv(outcome: &segmodel::TrainOutcome) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for (i, loss) in outcome.loss_trace.iter().enumerate() {
        let val = outcome.val_trace.get(i).map_or(String::new(), |v| format!("{v:.9}"));
        let _ = writeln!(out, "{},{loss:.9},{val}", i + 1);
    }
    out
}

fn train_and_save(
    corpus: &Corpus,
    data: &[(&PixelFeatures, &Mask)],
    hp: &Hyperparams,
    out: &Path,
    log: Option<&Path>,
) -> Result<String> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val_ids: Vec<&str> = corpus
        .manifest()
        .split_records(Split::Val)
        .into_iter()
        .map(|r| r.id.as_str())
        .collect();
    let val = corpus.labeled(&val_ids)?;
    let init = SegModel::zeros(corpus.manifest().num_classes(), segmodel::FEATURE_DIM)?;
    let outcome = segmodel::train(&init, data, hp, (!val.is_empty()).then_some(&val[..]))?;
    outcome.model.save(out)?;
    if let Some(log) = log {
        write_text(log, &train_log_csv(&outcome))?;
    }
    Ok(format!(
        "trained on {} images for {} epochs (best epoch {}), wrote {}\n",
        data.len(),
        outcome.epochs_run,
        outcome.best_epoch,
        out.display()
    ))
}

fn cmd_train_teacher(a: TrainTeacherArgs, lr_explicit: bool) -> Result<String> {
    require_file(&a.manifest)?;
    if let Some(s) = &a.subset {
        require_file(s)?;
    }
    require_parent(&a.out)?;
    let hp = a.train.hyperparams(a.seed.seed, lr_explicit);
    hp.validate()?;
    let corpus = Corpus::load(&a.manifest)?;
    let ids = subset_ids(a.subset.as_deref(), corpus.manifest(), Split::LabeledTrain)?;
    let data = corpus.labeled(&ids)?;
    train_and_save(&corpus, &data, &hp, &a.out, a.log.as_deref())
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn cmd_pseudo_label(a: PseudoLabelArgs) -> Result<String> {
    require_file(&a.manifest)?;
    require_file(&a.model)?;
    if let Some(s) = &a.subset {
        require_file(s)?;
    }
    let model = SegModel::load(&a.model)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    if model.num_classes() != manifest.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: manifest.num_classes(),
            actual: model.num_classes(),
        });
    }
    let ids = subset_ids(a.subset.as_deref(), &manifest, Split::Unlabeled)?;
    let root = a.manifest.parent().unwrap_or(Path::new("."));
    create_dir(&a.out_dir.join("masks"))?;
    let mut records = Vec::with_capacity(ids.len());
    for id in &ids {
        let r = manifest.require(id)?;
        let image_path = absolute(&root.join(&r.image_path))?;
        let image = crate::raster::Raster::read_ppm(&image_path)?;
        let mask = segmodel::pseudo_label(&model, &PixelFeatures::from_raster(&image))?;
        let label_path = PathBuf::from(format!("masks/{id}.pgm"));
        mask.write_pgm(&a.out_dir.join(&label_path))?;
        records.push(ImageRecord {
            id: id.clone(),
            image_path,
            label_path: Some(label_path),
            scenario: r.scenario,
            split: Split::LabeledTrain,
        });
    }
    let pseudo = DatasetManifest::new(manifest.class_names().to_vec(), records)?;
    let path = a.out_dir.join("pseudo.jsonl");
    pseudo.save(&path)?;
    Ok(format!("wrote {} pseudo-labels to {}\n", ids.len(), path.display()))
}

fn cmd_train_student(a: TrainStudentArgs, lr_explicit: bool) -> Result<String> {
    require_file(&a.manifest)?;
    require_file(&a.pseudo)?;
    if let Some(s) = &a.subset {
        require_file(s)?;
    }
    require_parent(&a.out)?;
    let hp = a.train.hyperparams(a.seed.seed, lr_explicit);
    hp.validate()?;
    let corpus = Corpus::load(&a.manifest)?;
    let pseudo = Corpus::load(&a.pseudo)?;
    if pseudo.manifest().class_names() != corpus.manifest().class_names() {
        return Err(Error::invalid("pseudo-label manifest has different class names"));
    }
    let ids = subset_ids(a.subset.as_deref(), corpus.manifest(), Split::LabeledTrain)?;
    let mut data = corpus.labeled(&ids)?;
    let pseudo_ids: Vec<&str> = pseudo.manifest().records().iter().map(|r| r.id.as_str()).collect();
    data.extend(pseudo.labeled(&pseudo_ids)?);
    train_and_save(&corpus, &data, &hp, &a.out, a.log.as_deref())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<String> {
    require_file(&a.manifest)?;
    require_file(&a.model)?;
    for p in [&a.out, &a.csv].into_iter().flatten() {
        require_parent(p)?;
    }
    let model = SegModel::load(&a.model)?;
    let corpus = Corpus::load(&a.manifest)?;
    let ids: Vec<&str> = corpus
        .manifest()
        .split_records(a.split.into())
        .into_iter()
        .map(|r| r.id.as_str())
        .collect();
    let data = corpus.labeled(&ids)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let report = segmodel::iou_report(&segmodel::evaluate(&model, &data)?);
    let table = pipeline::iou_table_csv(corpus.manifest().class_names(), &[("model".to_string(), &report)]);
    if let Some(out) = &a.out {
        write_text(out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    if let Some(csv) = &a.csv {
        write_text(csv, &table)?;
    }
    Ok(format!("{table}miou {:.6}\n", report.miou))
}

/// Runs `f` on every seed, splitting the seeds across `jobs` threads.
/// Results come back in seed order.
fn par_seeds<T, F>(seeds: &[u64], jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let jobs = jobs.clamp(1, seeds.len().max(1));
    if jobs == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let chunk = seeds.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(|&s| f(s)).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("experiment worker panicked")?);
        }
        Ok(out)
    })
}

fn cmd_experiment(a: ExperimentArgs, lr_explicit: bool) -> Result<String> {
    if let Some(m) = &a.manifest {
        require_file(m)?;
    }
    if let Some(e) = &a.embeddings {
        require_file(e)?;
    }
    if a.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if a.jobs == 0 {
        return Err(Error::invalid("jobs must be at least 1"));
    }
    let corpus = match &a.manifest {
        Some(m) => Corpus::load(m)?,
        None => {
            let spec = SynthSpec {
                corpus_size: a.synth_size,
                ..SynthSpec::benchmark(a.synth_seed)
            };
            Corpus::from_generated(synth::generate(&spec)?)?
        }
    };
    let teacher = a.train_args.hyperparams(0, lr_explicit);
    let student = Hyperparams {
        epochs: a.student_epochs.unwrap_or(teacher.epochs),
        lr: a.student_lr.unwrap_or(teacher.lr),
        ..teacher
    };
    let seeds: Vec<u64> = (0..a.trials as u64).map(|t| a.seed.seed.wrapping_add(t)).collect();
    let cfg = ExperimentConfig {
        k: a.k,
        n: a.n,
        pseudo_k: a.pseudo_k,
        pseudo_budget: a.pseudo_budget.last().copied().unwrap_or(0),
        seeds: seeds.clone(),
        sampler: SamplerKind::Eds,
        pool: a.pool.into(),
        teacher,
        student,
        roi_bottom_fraction: a.encoder.roi,
        encoder: match &a.embeddings {
            Some(path) => EncoderChoice::File { path: path.clone() },
            None => EncoderChoice::Grid { grid: a.encoder.grid },
        },
        standardize: a.standardize,
        kmeans_max_iter: a.max_iter,
        kmeans_tol: a.tol,
    };
    cfg.validate(&corpus)?;
    create_dir(&a.out)?;
    let samplers: Vec<SamplerKind> = match a.sampler {
        SamplerArg::Eds => vec![SamplerKind::Eds],
        SamplerArg::Random => vec![SamplerKind::Random],
        SamplerArg::Both => vec![SamplerKind::Eds, SamplerKind::Random],
    };
    let names = corpus.manifest().class_names();

    if a.mode == ModeArg::Compare {
        let cmp = pipeline::compare_samplers(&cfg, &corpus, a.trials, a.train)?;
        write_text(
            &a.out.join("comparison.json"),
            &(serde_json::to_string_pretty(&cmp).expect("comparison serializes") + "\n"),
        )?;
        let text = cmp.to_text();
        write_text(&a.out.join("summary.txt"), &text)?;
        if a.plot {
            write_text(&a.out.join("density.csv"), &cmp.density_csv())?;
            write_text(&a.out.join("kl.csv"), &cmp.kl_csv())?;
        }
        return Ok(text);
    }

    let mut reports: Vec<ExperimentReport> = Vec::new();
    for &kind in &samplers {
        let exp = Experiment::new(ExperimentConfig { sampler: kind, ..cfg.clone() }, &corpus)?;
        let per_seed = par_seeds(&seeds, a.jobs, |seed| match a.mode {
            ModeArg::Supervised => Ok(vec![exp.run_supervised(seed)?]),
            _ => exp.run_self_training_ladder(seed, &a.pseudo_budget),
        })?;
        reports.extend(per_seed.into_iter().flatten());
    }

    write_text(
        &a.out.join("report.json"),
        &(serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n"),
    )?;
    let mut rows: Vec<(String, &segmodel::IoUReport)> = Vec::new();
    for r in &reports {
        let label = format!("{} seed {} pseudo {}", r.sampler, r.seed, r.pseudo_count);
        rows.push((format!("teacher {label}"), &r.teacher_iou));
        if let Some(s) = &r.student_iou {
            rows.push((format!("student {label}"), s));
        }
    }
    write_text(&a.out.join("iou.csv"), &pipeline::iou_table_csv(names, &rows))?;
    if a.mode == ModeArg::SelfTraining {
        write_text(&a.out.join("ladder.csv"), &pipeline::ladder_table_csv(&reports))?;
    }
    if a.plot {
        let mut kl = String::from("sampler,seed,subset,axis,value,density,kl\n");
        for r in &reports {
            let mut subsets = vec![("labeled", &r.labeled_kl)];
            if let Some(p) = &r.pseudo_kl {
                subsets.push(("pseudo", p));
            }
            for (name, diags) in subsets {
                for d in diags.iter() {
                    for (value, p) in &d.density.density {
                        let _ = writeln!(
                            kl,
                            "{},{},{name},{},{value},{p:.9},{:.9}",
                            r.sampler, r.seed, d.density.axis, d.kl_to_uniform
                        );
                    }
                }
            }
        }
        write_text(&a.out.join("density.csv"), &kl)?;
    }

    let mut out = String::new();
    for &kind in &samplers {
        let of_kind: Vec<&ExperimentReport> = reports.iter().filter(|r| r.sampler == kind).collect();
        let teacher: Vec<f64> = of_kind.iter().map(|r| r.teacher_miou).collect();
        let _ = write!(out, "{kind}: median teacher miou {:.6}", pipeline::median(&teacher));
        if a.mode == ModeArg::SelfTraining {
            for &b in &a.pseudo_budget {
                let st: Vec<f64> = of_kind
                    .iter()
                    .filter(|r| r.pseudo_count == b.min(SamplePool::Unlabeled.ids(corpus.manifest()).len()))
                    .filter_map(|r| r.student_miou)
                    .collect();
                let _ = write!(out, ", student@{b} {:.6}", pipeline::median(&st));
            }
        }
        out.push('\n');
    }
    write_text(&a.out.join("summary.txt"), &out)?;
    Ok(out)
}

