//! End-to-end experiments: select a labeled subset, train a teacher,
//! pseudo-label part of the unlabeled pool, train a student on the union and
//! evaluate both on the test split.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_fit, ClusterModel, KMeansParams, DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::corpus::Corpus;
use crate::embed::{self, Embedding, EmbeddingSet, RoiSpec, DEFAULT_GRID};
use crate::error::{Error, Result};
use crate::manifest::{ScenarioAxis, Split};
use crate::raster::Mask;
use crate::sampler::{
    diagnose, eds_sample_budget, random_sample_ids, AxisDiagnostic, SamplePool, SampledSubset, SamplerKind,
};
use crate::segmodel::{self, evaluate, iou_report, Hyperparams, IoUReport, PixelFeatures, SegModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderChoice {
    /// Built-in ROI + grid-mean encoder.
    Grid { grid: usize },
    /// Precomputed embeddings in an EDSE file covering the sampled pools.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Clusters used to select the labeled subset.
    pub k: usize,
    /// Picks per cluster; the labeled budget is `n * k`.
    pub n: usize,
    /// Clusters fitted on the unlabeled pool for pseudo-label selection.
    pub pseudo_k: usize,
    pub pseudo_budget: usize,
    pub seeds: Vec<u64>,
    pub sampler: SamplerKind,
    /// Records the labeled subset is drawn from.
    pub pool: SamplePool,
    pub teacher: Hyperparams,
    pub student: Hyperparams,
    pub roi_bottom_fraction: f64,
    pub encoder: EncoderChoice,
    pub standardize: bool,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            k: DEFAULT_K,
            n: 10,
            pseudo_k: DEFAULT_K,
            pseudo_budget: 0,
            seeds: vec![0],
            sampler: SamplerKind::Eds,
            pool: SamplePool::Labeled,
            teacher: Hyperparams::default(),
            student: Hyperparams::default(),
            roi_bottom_fraction: RoiSpec::default().bottom_fraction(),
            encoder: EncoderChoice::Grid { grid: DEFAULT_GRID },
            standardize: false,
            kmeans_max_iter: DEFAULT_MAX_ITER,
            kmeans_tol: DEFAULT_TOL,
        }
    }
}

/// Self-training budgets used by the benchmark ladder.
pub const BENCHMARK_LADDER: [usize; 5] = [200, 400, 800, 1600, 3200];

impl ExperimentConfig {
    /// Settings tuned for the toy per-pixel model on the synthetic benchmark
    /// corpus: 30 clusters of 10 labeled images, 100 pseudo clusters, a 4x4
    /// grid encoder and 20 epochs. The learning rate is scaled up for the
    /// linear model and weight decay is scaled down so that the per-step
    /// decay `lr * weight_decay` matches the default hyperparameters.
    pub fn benchmark() -> Self {
        let defaults = Hyperparams::default();
        let lr = 1.0;
        let hp = Hyperparams {
            lr,
            epochs: 20,
            weight_decay: defaults.lr * defaults.weight_decay / lr,
            ..defaults
        };
        ExperimentConfig {
            k: 30,
            n: 10,
            pseudo_k: 100,
            teacher: hp,
            student: hp,
            encoder: EncoderChoice::Grid { grid: 4 },
            ..Self::default()
        }
    }

    pub fn labeled_budget(&self) -> usize {
        self.n.saturating_mul(self.k)
    }

    /// Checks the config on its own and against the corpus pools.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.k == 0 || self.n == 0 || self.pseudo_k == 0 {
            return Err(Error::invalid("k, n and pseudo_k must be positive"));
        }
        RoiSpec::new(self.roi_bottom_fraction)?;
        self.teacher.validate()?;
        self.student.validate()?;
        let pool = self.pool.ids(corpus.manifest()).len();
        if self.labeled_budget() > pool {
            return Err(Error::PoolTooSmall {
                requested: self.labeled_budget(),
                available: pool,
            });
        }
        Ok(())
    }

    /// A copy of the config using `sampler` for both labeled and pseudo subsets.
    pub fn with_sampler(&self, sampler: SamplerKind) -> ExperimentConfig {
        ExperimentConfig {
            sampler,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub sampler: SamplerKind,
    pub labeled_count: usize,
    pub pseudo_count: usize,
    pub teacher_miou: f64,
    pub student_miou: Option<f64>,
    pub teacher_iou: IoUReport,
    pub student_iou: Option<IoUReport>,
    /// Scenario diagnostics of the labeled subset.
    pub labeled_kl: Vec<AxisDiagnostic>,
    /// Scenario diagnostics of the pseudo-labeled subset.
    pub pseudo_kl: Option<Vec<AxisDiagnostic>>,
    pub teacher_epochs: usize,
    pub student_epochs: Option<usize>,
    /// Kept out of the serialized report so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_PSEUDO_CLUSTER: u64 = 2;
const STREAM_PSEUDO_SAMPLE: u64 = 3;

/// Embeds every record of the corpus with the configured encoder.
pub fn embed_corpus(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<EmbeddingSet> {
    let set = match &cfg.encoder {
        EncoderChoice::Grid { grid } => {
            let roi = RoiSpec::new(cfg.roi_bottom_fraction)?;
            let entries = corpus
                .manifest()
                .records()
                .iter()
                .map(|r| {
                    Ok(Embedding {
                        id: r.id.clone(),
                        values: embed::encode_image(corpus.image(&r.id)?, &roi, *grid)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            EmbeddingSet::new(3 * grid * grid, entries)?
        }
        EncoderChoice::File { path } => embed::read_embeddings(path)?,
    };
    Ok(if cfg.standardize { set.standardized() } else { set })
}

/// A corpus plus the embeddings and config shared by every trial.
pub struct Experiment<'a> {
    cfg: ExperimentConfig,
    corpus: &'a Corpus,
    embeddings: EmbeddingSet,
}

/// Labeled ids and teacher outcome of one trial.
struct TeacherRun {
    subset: SampledSubset,
    model: SegModel,
    iou: IoUReport,
    epochs: usize,
}

impl<'a> Experiment<'a> {
    pub fn new(cfg: ExperimentConfig, corpus: &'a Corpus) -> Result<Self> {
        cfg.validate(corpus)?;
        let embeddings = embed_corpus(corpus, &cfg)?;
        Ok(Experiment {
            cfg,
            corpus,
            embeddings,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn split_data(&self, split: Split) -> Result<Vec<(&'a PixelFeatures, &'a Mask)>> {
        let ids: Vec<&str> = self
            .corpus
            .manifest()
            .split_records(split)
            .into_iter()
            .map(|r| r.id.as_str())
            .collect();
        self.corpus.labeled(&ids)
    }

    fn fit_clusters(&self, pool: &[&str], k: usize, seed: u64) -> Result<ClusterModel> {
        let set = self.embeddings.select(pool)?;
        kmeans_fit(
            &set,
            KMeansParams {
                k,
                max_iter: self.cfg.kmeans_max_iter,
                tol: self.cfg.kmeans_tol,
                seed,
            },
        )
    }

    /// The labeled subset of one trial.
    pub fn select_labeled(&self, sampler: SamplerKind, seed: u64) -> Result<SampledSubset> {
        let pool = self.cfg.pool.ids(self.corpus.manifest());
        let budget = self.cfg.labeled_budget();
        match sampler {
            SamplerKind::Eds => {
                let model = self.fit_clusters(&pool, self.cfg.k, seed)?;
                eds_sample_budget(&model, budget, seed)
            }
            SamplerKind::Random => random_sample_ids(&pool, budget, seed),
        }
    }

    fn train_model(
        &self,
        data: &[(&PixelFeatures, &Mask)],
        hp: &Hyperparams,
        seed: u64,
    ) -> Result<segmodel::TrainOutcome> {
        let val = self.split_data(Split::Val)?;
        let hp = Hyperparams {
            seed: mix(seed, STREAM_TRAIN),
            ..*hp
        };
        let init = SegModel::zeros(self.corpus.manifest().num_classes(), segmodel::FEATURE_DIM)?;
        segmodel::train(&init, data, &hp, (!val.is_empty()).then_some(&val[..]))
    }

    fn test_iou(&self, model: &SegModel) -> Result<IoUReport> {
        let test = self.split_data(Split::Test)?;
        if test.is_empty() {
            return Err(Error::invalid("corpus has no test split"));
        }
        Ok(iou_report(&evaluate(model, &test)?))
    }

    fn run_teacher(&self, seed: u64) -> Result<TeacherRun> {
        let subset = self.select_labeled(self.cfg.sampler, seed)?;
        let data = self.corpus.labeled(&subset.ids)?;
        let out = self.train_model(&data, &self.cfg.teacher, seed)?;
        let iou = self.test_iou(&out.model)?;
        Ok(TeacherRun {
            subset,
            model: out.model,
            iou,
            epochs: out.epochs_run,
        })
    }

    /// Trains one model on the selected labeled subset and evaluates it.
    pub fn run_supervised(&self, seed: u64) -> Result<ExperimentReport> {
        let start = Instant::now();
        let t = self.run_teacher(seed)?;
        Ok(ExperimentReport {
            seed,
            sampler: self.cfg.sampler,
            labeled_count: t.subset.len(),
            pseudo_count: 0,
            teacher_miou: t.iou.miou,
            student_miou: None,
            teacher_iou: t.iou,
            student_iou: None,
            labeled_kl: diagnose(&t.subset.ids, self.corpus.manifest())?,
            pseudo_kl: None,
            teacher_epochs: t.epochs,
            student_epochs: None,
            wall_clock: start.elapsed(),
        })
    }

    /// Teacher, then one student per pseudo-label budget, sharing the teacher
    /// and the unlabeled-pool clustering across budgets.
    pub fn run_self_training_ladder(&self, seed: u64, budgets: &[usize]) -> Result<Vec<ExperimentReport>> {
        let start = Instant::now();
        let manifest = self.corpus.manifest();
        let unlabeled = SamplePool::Unlabeled.ids(manifest);
        if unlabeled.is_empty() {
            return Err(Error::invalid("unlabeled pool is empty"));
        }
        let t = self.run_teacher(seed)?;
        let teacher_time = start.elapsed();
        let labeled_kl = diagnose(&t.subset.ids, manifest)?;
        let labeled = self.corpus.labeled(&t.subset.ids)?;

        let clusters = match self.cfg.sampler {
            SamplerKind::Eds => Some(self.fit_clusters(
                &unlabeled,
                self.cfg.pseudo_k.min(unlabeled.len()),
                mix(seed, STREAM_PSEUDO_CLUSTER),
            )?),
            SamplerKind::Random => None,
        };

        let mut reports = Vec::with_capacity(budgets.len());
        for &budget in budgets {
            let rung_start = Instant::now();
            let budget = budget.min(unlabeled.len());
            let sample_seed = mix(seed, STREAM_PSEUDO_SAMPLE);
            let picked = match &clusters {
                _ if budget == 0 => None,
                Some(model) => Some(eds_sample_budget(model, budget, sample_seed)?),
                None => Some(random_sample_ids(&unlabeled, budget, sample_seed)?),
            };
            let pseudo_ids: Vec<String> = picked.map(|s| s.ids).unwrap_or_default();
            let pseudo_masks = pseudo_ids
                .iter()
                .map(|id| segmodel::pseudo_label(&t.model, self.corpus.features(id)?))
                .collect::<Result<Vec<_>>>()?;
            let mut data = labeled.clone();
            for (id, mask) in pseudo_ids.iter().zip(&pseudo_masks) {
                data.push((self.corpus.features(id)?, mask));
            }
            let out = self.train_model(&data, &self.cfg.student, seed)?;
            let student_iou = self.test_iou(&out.model)?;
            reports.push(ExperimentReport {
                seed,
                sampler: self.cfg.sampler,
                labeled_count: t.subset.len(),
                pseudo_count: pseudo_ids.len(),
                teacher_miou: t.iou.miou,
                student_miou: Some(student_iou.miou),
                teacher_iou: t.iou.clone(),
                student_iou: Some(student_iou),
                labeled_kl: labeled_kl.clone(),
                pseudo_kl: Some(diagnose(&pseudo_ids, manifest)?),
                teacher_epochs: t.epochs,
                student_epochs: Some(out.epochs_run),
                wall_clock: teacher_time + rung_start.elapsed(),
            });
        }
        Ok(reports)
    }

    pub fn run_self_training(&self, seed: u64) -> Result<ExperimentReport> {
        let mut r = self.run_self_training_ladder(seed, &[self.cfg.pseudo_budget])?;
        Ok(r.pop().unwrap())
    }
}

pub fn run_supervised(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<ExperimentReport>> {
    let exp = Experiment::new(cfg.clone(), corpus)?;
    cfg.seeds.iter().map(|&s| exp.run_supervised(s)).collect()
}

pub fn run_self_training(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<ExperimentReport>> {
    let exp = Experiment::new(cfg.clone(), corpus)?;
    cfg.seeds.iter().map(|&s| exp.run_self_training(s)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrial {
    pub trial: usize,
    pub seed: u64,
    pub eds: Vec<AxisDiagnostic>,
    pub random: Vec<AxisDiagnostic>,
    pub eds_miou: Option<f64>,
    pub random_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerComparison {
    pub subset_size: usize,
    pub trials: Vec<SamplerTrial>,
    /// `(axis, median KL of EDS, median KL of random)`.
    pub median_kl: Vec<(ScenarioAxis, f64, f64)>,
    pub median_miou: Option<(f64, f64)>,
}

fn axis_kl(diags: &[AxisDiagnostic], axis: ScenarioAxis) -> f64 {
    diags
        .iter()
        .find(|d| d.density.axis == axis)
        .map_or(f64::NAN, |d| d.kl_to_uniform)
}

impl SamplerTrial {
    pub fn kl(&self, sampler: SamplerKind, axis: ScenarioAxis) -> f64 {
        match sampler {
            SamplerKind::Eds => axis_kl(&self.eds, axis),
            SamplerKind::Random => axis_kl(&self.random, axis),
        }
    }
}

/// Draws an EDS and a random subset per trial (seed `seeds[0] + trial`),
/// reporting per-axis densities and KL, and optionally the teacher mIoU.
pub fn compare_samplers(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    trials: usize,
    with_training: bool,
) -> Result<SamplerComparison> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let base = *cfg.seeds.first().ok_or_else(|| Error::invalid("at least one seed is required"))?;
    let exp = Experiment::new(cfg.clone(), corpus)?;
    let manifest = corpus.manifest();
    let mut rows = Vec::with_capacity(trials);
    for trial in 0..trials {
        let seed = base.wrapping_add(trial as u64);
        let eds = exp.select_labeled(SamplerKind::Eds, seed)?;
        let random = exp.select_labeled(SamplerKind::Random, seed)?;
        let (eds_miou, random_miou) = if with_training {
            let e = Experiment { cfg: exp.cfg.with_sampler(SamplerKind::Eds), ..exp.clone_shallow() };
            let r = Experiment { cfg: exp.cfg.with_sampler(SamplerKind::Random), ..exp.clone_shallow() };
            (Some(e.run_supervised(seed)?.teacher_miou), Some(r.run_supervised(seed)?.teacher_miou))
        } else {
            (None, None)
        };
        rows.push(SamplerTrial {
            trial,
            seed,
            eds: diagnose(&eds.ids, manifest)?,
            random: diagnose(&random.ids, manifest)?,
            eds_miou,
            random_miou,
        });
    }
    let median_kl = ScenarioAxis::ALL
        .iter()
        .map(|&axis| {
            let e: Vec<f64> = rows.iter().map(|t| t.kl(SamplerKind::Eds, axis)).collect();
            let r: Vec<f64> = rows.iter().map(|t| t.kl(SamplerKind::Random, axis)).collect();
            (axis, median(&e), median(&r))
        })
        .collect();
    let median_miou = with_training.then(|| {
        let e: Vec<f64> = rows.iter().filter_map(|t| t.eds_miou).collect();
        let r: Vec<f64> = rows.iter().filter_map(|t| t.random_miou).collect();
        (median(&e), median(&r))
    });
    Ok(SamplerComparison {
        subset_size: cfg.labeled_budget(),
        trials: rows,
        median_kl,
        median_miou,
    })
}

impl Experiment<'_> {
    fn clone_shallow(&self) -> Self {
        Experiment {
            cfg: self.cfg.clone(),
            corpus: self.corpus,
            embeddings: self.embeddings.clone(),
        }
    }
}

impl SamplerComparison {
    /// Plain-text summary: one line per trial and per-axis medians.
    pub fn to_text(&self) -> String {
        let mut out = format!("subset size {}\n", self.subset_size);
        for t in &self.trials {
            let _ = write!(out, "trial {} seed {}:", t.trial, t.seed);
            for axis in ScenarioAxis::ALL {
                let _ = write!(
                    out,
                    " {axis} eds={:.6} random={:.6}",
                    t.kl(SamplerKind::Eds, *axis),
                    t.kl(SamplerKind::Random, *axis)
                );
            }
            if let (Some(e), Some(r)) = (t.eds_miou, t.random_miou) {
                let _ = write!(out, " miou eds={e:.6} random={r:.6}");
            }
            out.push('\n');
        }
        for (axis, e, r) in &self.median_kl {
            let _ = writeln!(out, "median kl {axis}: eds={e:.6} random={r:.6}");
        }
        if let Some((e, r)) = self.median_miou {
            let _ = writeln!(out, "median miou: eds={e:.6} random={r:.6}");
        }
        out
    }

    /// `trial,sampler,axis,value,density` rows for density bar charts.
    pub fn density_csv(&self) -> String {
        let mut out = String::from("trial,sampler,axis,value,density\n");
        for t in &self.trials {
            for (name, diags) in [("eds", &t.eds), ("random", &t.random)] {
                for d in diags.iter() {
                    for (value, p) in &d.density.density {
                        let _ = writeln!(out, "{},{name},{},{value},{p:.9}", t.trial, d.density.axis);
                    }
                }
            }
        }
        out
    }

    /// `trial,axis,eds_kl,random_kl` rows for KL bar charts.
    pub fn kl_csv(&self) -> String {
        let mut out = String::from("trial,axis,eds_kl,random_kl\n");
        for t in &self.trials {
            for axis in ScenarioAxis::ALL {
                let _ = writeln!(
                    out,
                    "{},{axis},{:.9},{:.9}",
                    t.trial,
                    t.kl(SamplerKind::Eds, *axis),
                    t.kl(SamplerKind::Random, *axis)
                );
            }
        }
        out
    }
}

/// Per-class IoU table in percent: one row per model, one column per class
/// plus mIoU. Undefined classes print as `-`.
pub fn iou_table_csv(class_names: &[String], rows: &[(String, &IoUReport)]) -> String {
    let mut out = String::from("model");
    for name in class_names {
        let _ = write!(out, ",{name}");
    }
    out.push_str(",miou\n");
    for (label, report) in rows {
        out.push_str(label);
        for v in &report.per_class {
            match v {
                Some(v) => {
                    let _ = write!(out, ",{:.2}", 100.0 * v);
                }
                None => out.push_str(",-"),
            }
        }
        let _ = writeln!(out, ",{:.2}", 100.0 * report.miou);
    }
    out
}

/// Self-training ladder table: real count, pseudo count, teacher and student
/// mIoU in percent.
pub fn ladder_table_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("sampler,seed,real,pseudo,teacher_miou,student_miou\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.2},{}",
            r.sampler,
            r.seed,
            r.labeled_count,
            r.pseudo_count,
            100.0 * r.teacher_miou,
            r.student_miou.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m))
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};
    use std::collections::BTreeSet;
    use std::sync::OnceLock;

    fn corpus() -> &'static Corpus {
        static CORPUS: OnceLock<Corpus> = OnceLock::new();
        CORPUS.get_or_init(|| {
            let mut spec = SynthSpec::imbalanced(400, 11);
            spec.labeled_fraction = 0.2;
            spec.val_fraction = 0.05;
            spec.test_fraction = 0.1;
            Corpus::from_generated(generate(&spec).unwrap()).unwrap()
        })
    }

    fn config() -> ExperimentConfig {
        let hp = Hyperparams {
            lr: 0.5,
            epochs: 3,
            ..Hyperparams::default()
        };
        ExperimentConfig {
            k: 5,
            n: 4,
            pseudo_k: 5,
            pseudo_budget: 30,
            seeds: vec![1, 2],
            teacher: hp,
            student: Hyperparams { epochs: 2, ..hp },
            encoder: EncoderChoice::Grid { grid: 4 },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_pseudo_budget_equals_supervised_student() {
        let cfg = ExperimentConfig {
            pseudo_budget: 0,
            ..config()
        };
        let st = Experiment::new(cfg.clone(), corpus()).unwrap().run_self_training(1).unwrap();
        let sup_cfg = ExperimentConfig {
            teacher: cfg.student,
            ..cfg
        };
        let sup = Experiment::new(sup_cfg, corpus()).unwrap().run_supervised(1).unwrap();
        assert_eq!(st.pseudo_count, 0);
        assert_eq!(st.student_iou.as_ref(), Some(&sup.teacher_iou));
        assert_eq!(st.student_epochs, Some(sup.teacher_epochs));
    }

    #[test]
    fn full_pool_budget_gives_identical_subsets() {
        let pool = SamplePool::Labeled.ids(corpus().manifest()).len();
        let cfg = ExperimentConfig { k: 4, n: pool / 4, ..config() };
        assert_eq!(cfg.labeled_budget(), pool, "corpus pool must split evenly");
        let exp = Experiment::new(cfg, corpus()).unwrap();
        let eds: BTreeSet<String> = exp.select_labeled(SamplerKind::Eds, 3).unwrap().ids.into_iter().collect();
        let rnd: BTreeSet<String> = exp.select_labeled(SamplerKind::Random, 3).unwrap().ids.into_iter().collect();
        assert_eq!(eds.len(), pool);
        assert_eq!(eds, rnd);
    }

    #[test]
    fn reports_are_deterministic_per_seed() {
        let a = run_self_training(&config(), corpus()).unwrap();
        let b = run_self_training(&config(), corpus()).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_json(), y.to_json());
        }
        assert_ne!(a[0].to_json(), a[1].to_json());
    }

    #[test]
    fn report_counts_match_config() {
        let exp = Experiment::new(config(), corpus()).unwrap();
        let unlabeled = SamplePool::Unlabeled.ids(corpus().manifest()).len();
        let ladder = exp.run_self_training_ladder(0, &[0, 7, 30, unlabeled + 50]).unwrap();
        let counts: Vec<usize> = ladder.iter().map(|r| r.pseudo_count).collect();
        assert_eq!(counts, vec![0, 7, 30, unlabeled]);
        for r in &ladder {
            assert_eq!(r.labeled_count, 20);
            assert_eq!(r.teacher_miou, ladder[0].teacher_miou);
            for m in [r.teacher_miou, r.student_miou.unwrap()] {
                assert!((0.0..=1.0).contains(&m));
            }
            assert_eq!(r.labeled_kl.len(), ScenarioAxis::ALL.len());
        }
    }

    #[test]
    fn config_validation() {
        let c = corpus();
        let pool = SamplePool::Labeled.ids(c.manifest()).len();
        let too_big = ExperimentConfig { k: 1, n: pool + 1, ..config() };
        assert!(matches!(too_big.validate(c), Err(Error::PoolTooSmall { .. })));
        let no_seeds = ExperimentConfig { seeds: vec![], ..config() };
        assert!(no_seeds.validate(c).is_err());
        let bad_roi = ExperimentConfig { roi_bottom_fraction: 0.0, ..config() };
        assert!(bad_roi.validate(c).is_err());
        let defaults = ExperimentConfig::default();
        assert_eq!((defaults.k, defaults.labeled_budget()), (300, 3000));
    }

    #[test]
    fn compare_samplers_is_deterministic_and_complete() {
        let cfg = ExperimentConfig { k: 6, n: 5, ..config() };
        let a = compare_samplers(&cfg, corpus(), 1, false).unwrap();
        let b = compare_samplers(&cfg, corpus(), 1, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 1);
        assert_eq!(a.subset_size, 30);
        for diags in [&a.trials[0].eds, &a.trials[0].random] {
            let axes: Vec<ScenarioAxis> = diags.iter().map(|d| d.density.axis).collect();
            assert_eq!(axes, ScenarioAxis::ALL.to_vec());
        }
        assert!(a.median_miou.is_none());
        assert!(compare_samplers(&cfg, corpus(), 0, false).is_err());
        let csv = a.density_csv();
        assert!(csv.starts_with("trial,sampler,axis,value,density\n"));
        assert!(csv.contains(",eds,weather,sunny,") && csv.contains(",random,weather,sunny,"));
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn iou_table_layout() {
        let names = vec!["bg".to_string(), "road".to_string(), "rare".to_string()];
        let r = IoUReport {
            per_class: vec![Some(0.5), Some(2.0 / 3.0), None],
            miou: 0.583_333_333_333_333_4,
        };
        let t = iou_table_csv(&names, &[("teacher".into(), &r)]);
        assert_eq!(t, "model,bg,road,rare,miou\nteacher,50.00,66.67,-,58.33\n");
    }
}
