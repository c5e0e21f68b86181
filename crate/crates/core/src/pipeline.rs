//! Staged pipeline: annotate, score, agree, ensemble, evaluate.
//!
//! Every stage reads its inputs from the artifacts of earlier stages under
//! `{output}/{run_id}/{stage}/`, so running `all` and running each stage in
//! turn produce the same files. Artifacts carry a header with the schema
//! version, run id and config digest: the first line of a JSONL file, a `#`
//! comment line of a CSV file, top-level fields of a JSON file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{
    bootstrap_ci, coefficient, detect_outliers, rating_matrix_from_labels,
    rating_matrix_from_scores, AgreementError, Coefficient, OutlierReport, RatingMatrix,
};
use crate::annotator::{
    annotate_corpus, AnnotateOptions, AnnotationMatrix, AnnotatorError, ChatClient, ResponseCache,
    TopicAnnotation,
};
use crate::config::{ConfigError, LoadedConfig};
use crate::corpus::{load_corpus, load_topics, CorpusError, TextItem, TopicSet};
use crate::ensemble::{ensemble_topic, EnsembleError, TopicInputs};
use crate::eval::{compare_raters, group_summary, model_subsets, Candidate, EvalError};
use crate::relevancy::embedding::{EmbeddingCache, EmbeddingClient};
use crate::relevancy::{
    score_matrix, texts_to_embed, topic_scores, RelevancyError, RelevancyRecord, TopicScore,
};
use crate::transport::TransportError;
use crate::util::write_atomic;

pub const SCHEMA_VERSION: u32 = 1;

/// Topic name used for agreement rows pooled over all topics.
pub const POOLED_TOPIC: &str = "_pooled";

/// Candidate name of the fused labels in evaluation reports.
pub const ENSEMBLE_CANDIDATE: &str = "ensemble";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Annotate,
    Score,
    Agree,
    Ensemble,
    Evaluate,
    All,
}

impl Stage {
    pub const SEQUENCE: [Stage; 5] = [
        Stage::Annotate,
        Stage::Score,
        Stage::Agree,
        Stage::Ensemble,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Annotate => "annotate",
            Stage::Score => "score",
            Stage::Agree => "agree",
            Stage::Ensemble => "ensemble",
            Stage::Evaluate => "evaluate",
            Stage::All => "all",
        }
    }

    fn expand(self) -> Vec<Stage> {
        match self {
            Stage::All => Self::SEQUENCE.to_vec(),
            s => vec![s],
        }
    }

    /// Whether this selection starts a fresh run.
    fn starts_run(self) -> bool {
        matches!(self, Stage::Annotate | Stage::All)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::SEQUENCE
            .iter()
            .copied()
            .chain([Stage::All])
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum StageFailure {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Relevancy(#[from] RelevancyError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed artifact {}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing upstream artifact {}; run the {needs} stage first", path.display())]
    MissingUpstreamArtifact { needs: Stage, path: PathBuf },
    #[error("artifact {} was produced under config {found}, current config is {expected}", path.display())]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageFailure,
    },
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingUpstreamArtifact { .. } | PipelineError::StaleArtifact { .. } => 3,
            PipelineError::Stage { source, .. } => match source {
                StageFailure::Annotator(AnnotatorError::FailureBudgetExceeded { .. })
                | StageFailure::Transport(_)
                | StageFailure::Relevancy(RelevancyError::Transport(_)) => 4,
                StageFailure::Corpus(_) | StageFailure::Input(_) => 2,
                _ => 1,
            },
        }
    }
}

fn stage_err(stage: Stage) -> impl Fn(StageFailure) -> PipelineError {
    move |source| PipelineError::Stage { stage, source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub schema_version: u32,
    pub artifact: String,
    pub run_id: String,
    pub config_digest: String,
}

/// A resolved run: where its artifacts live and what produced them.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: LoadedConfig,
    pub run_id: String,
    pub run_dir: PathBuf,
}

fn is_valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}

/// Latest run directory whose name starts with the config digest prefix.
pub fn latest_run(config: &LoadedConfig) -> Option<String> {
    let prefix = format!("{}-", digest_prefix(config));
    let entries = fs::read_dir(config.output_dir()).ok()?;
    entries
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with(&prefix))
        .max()
}

fn digest_prefix(config: &LoadedConfig) -> &str {
    &config.digest()[..12]
}

impl RunContext {
    /// Pick the run directory for `stage`: the explicit id if given, a fresh
    /// id when the selection starts at annotation, otherwise the latest run
    /// made with this config.
    pub fn resolve(
        config: LoadedConfig,
        stage: Stage,
        run_id: Option<&str>,
    ) -> Result<Self, PipelineError> {
        let run_id = match run_id {
            Some(id) if is_valid_run_id(id) => id.to_string(),
            Some(id) => {
                return Err(ConfigError::Invalid(vec![format!("run id {id:?} is not a plain name")]).into())
            }
            None if stage.starts_run() => format!(
                "{}-{}",
                digest_prefix(&config),
                Utc::now().format("%Y%m%dT%H%M%SZ")
            ),
            None => latest_run(&config).ok_or_else(|| PipelineError::MissingUpstreamArtifact {
                needs: Stage::Annotate,
                path: config.output_dir(),
            })?,
        };
        let run_dir = config.output_dir().join(&run_id);
        Ok(Self {
            config,
            run_id,
            run_dir,
        })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.name())
    }

    fn header(&self, artifact: &str) -> ArtifactHeader {
        ArtifactHeader {
            schema_version: SCHEMA_VERSION,
            artifact: artifact.to_string(),
            run_id: self.run_id.clone(),
            config_digest: self.config.digest().to_string(),
        }
    }

    fn csv_preamble(&self) -> String {
        format!(
            "# schema_version={} run_id={} config_digest={}\n",
            SCHEMA_VERSION,
            self.run_id,
            self.config.digest()
        )
    }

    fn write(&self, path: &Path, contents: &[u8]) -> Result<(), StageFailure> {
        write_atomic(path, contents).map_err(|source| StageFailure::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    fn write_jsonl<T: Serialize>(&self, path: &Path, artifact: &str, rows: &[T]) -> Result<(), StageFailure> {
        let mut out = serde_json::to_string(&self.header(artifact)).expect("header serializes");
        out.push('\n');
        for row in rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        self.write(path, out.as_bytes())
    }

    fn write_json<T: Serialize>(&self, path: &Path, artifact: &str, body: &T) -> Result<(), StageFailure> {
        #[derive(Serialize)]
        struct Wrapped<'a, T> {
            #[serde(flatten)]
            header: ArtifactHeader,
            #[serde(flatten)]
            body: &'a T,
        }
        let wrapped = Wrapped {
            header: self.header(artifact),
            body,
        };
        let mut out = serde_json::to_string_pretty(&wrapped).expect("artifact serializes");
        out.push('\n');
        self.write(path, out.as_bytes())
    }

    fn write_csv(&self, path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), StageFailure> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut push = |rec: &[String]| {
            w.write_record(rec).map_err(|e| StageFailure::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        };
        push(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        for row in rows {
            push(row)?;
        }
        let body = w.into_inner().expect("in-memory writer");
        let mut out = self.csv_preamble().into_bytes();
        out.extend(body);
        self.write(path, &out)
    }

    fn check_header(&self, path: &Path, header: &ArtifactHeader) -> Result<(), PipelineError> {
        if header.config_digest != self.config.digest() {
            return Err(PipelineError::StaleArtifact {
                path: path.to_path_buf(),
                expected: self.config.digest().to_string(),
                found: header.config_digest.clone(),
            });
        }
        Ok(())
    }

    fn read_upstream(&self, needs: Stage, path: &Path, current: Stage) -> Result<String, PipelineError> {
        if !path.is_file() {
            return Err(PipelineError::MissingUpstreamArtifact {
                needs,
                path: path.to_path_buf(),
            });
        }
        fs::read_to_string(path).map_err(|source| {
            stage_err(current)(StageFailure::Io {
                path: path.to_path_buf(),
                source,
            })
        })
    }

    fn read_jsonl<T: DeserializeOwned>(
        &self,
        needs: Stage,
        path: &Path,
        current: Stage,
    ) -> Result<Vec<T>, PipelineError> {
        let raw = self.read_upstream(needs, path, current)?;
        let malformed = |reason: String| {
            stage_err(current)(StageFailure::Malformed {
                path: path.to_path_buf(),
                reason,
            })
        };
        let mut lines = raw.lines();
        let header: ArtifactHeader = lines
            .next()
            .ok_or_else(|| malformed("empty file".into()))
            .and_then(|l| serde_json::from_str(l).map_err(|e| malformed(format!("header: {e}"))))?;
        self.check_header(path, &header)?;
        lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| malformed(format!("line {}: {e}", i + 2))))
            .collect()
    }

    fn read_json<T: DeserializeOwned>(
        &self,
        needs: Stage,
        path: &Path,
        current: Stage,
    ) -> Result<T, PipelineError> {
        let raw = self.read_upstream(needs, path, current)?;
        let malformed = |e: serde_json::Error| {
            stage_err(current)(StageFailure::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        };
        let header: ArtifactHeader = serde_json::from_str(&raw).map_err(malformed)?;
        self.check_header(path, &header)?;
        serde_json::from_str(&raw).map_err(malformed)
    }
}

/// What a stage did, for the run log.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub network_requests: usize,
    pub cache_hits: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub stages: Vec<StageReport>,
}

/// Run one stage or the whole chain.
pub async fn run(
    config: LoadedConfig,
    stage: Stage,
    run_id: Option<&str>,
) -> Result<RunSummary, PipelineError> {
    let ctx = RunContext::resolve(config, stage, run_id)?;
    let mut stages = Vec::new();
    for s in stage.expand() {
        tracing::info!(stage = %s, run_id = %ctx.run_id, "starting stage");
        let report = match s {
            Stage::Annotate => annotate_stage(&ctx).await?,
            Stage::Score => score_stage(&ctx).await?,
            Stage::Agree => agree_stage(&ctx)?,
            Stage::Ensemble => ensemble_stage(&ctx)?,
            Stage::Evaluate => evaluate_stage(&ctx)?,
            Stage::All => unreachable!("expanded above"),
        };
        stages.push(report);
    }
    Ok(RunSummary {
        run_id: ctx.run_id.clone(),
        run_dir: ctx.run_dir.clone(),
        stages,
    })
}

struct Inputs {
    corpus: Vec<TextItem>,
    topics: TopicSet,
}

fn load_inputs(ctx: &RunContext, stage: Stage) -> Result<Inputs, PipelineError> {
    let c = &ctx.config;
    let corpus = load_corpus(&c.corpus_path(), c.corpus_format())
        .map_err(|e| stage_err(stage)(e.into()))?;
    let topics = load_topics(&c.topics_path()).map_err(|e| stage_err(stage)(e.into()))?;
    Ok(Inputs { corpus, topics })
}

fn text_ids(corpus: &[TextItem]) -> Vec<String> {
    corpus.iter().map(|t| t.id.clone()).collect()
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const RELEVANCY_FILE: &str = "relevancy.jsonl";
pub const TOPIC_SCORES_FILE: &str = "topic_scores.jsonl";
pub const AGREEMENT_FILE: &str = "agreement.csv";
pub const OUTLIERS_FILE: &str = "outliers.json";
pub const ENSEMBLE_SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GROUPS_FILE: &str = "groups.csv";
pub const TRIAGE_FILE: &str = "triage.csv";

async fn annotate_stage(ctx: &RunContext) -> Result<StageReport, PipelineError> {
    let stage = Stage::Annotate;
    let err = stage_err(stage);
    let inputs = load_inputs(ctx, stage)?;
    let cache = ResponseCache::new(ctx.config.cache_dir());
    let clients = ctx
        .config
        .config
        .backends
        .iter()
        .map(|b| ChatClient::new(b.clone(), cache.clone()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| err(e.into()))?;
    let options = AnnotateOptions {
        max_failure_fraction: ctx.config.config.max_failure_fraction,
    };
    let (matrix, stats) = annotate_corpus(&inputs.corpus, &inputs.topics, &clients, options)
        .await
        .map_err(|e| err(e.into()))?;
    let path = ctx.stage_dir(stage).join(ANNOTATIONS_FILE);
    ctx.write_jsonl(&path, "annotations", matrix.entries())
        .map_err(&err)?;
    Ok(StageReport {
        stage: stage.name().into(),
        network_requests: stats.network_requests,
        cache_hits: stats.cache_hits,
        notes: vec![
            format!("{} prompts", stats.prompts),
            format!("{} reminders", stats.reminders_sent),
            format!("{} failed cells", stats.failed_cells),
            format!("{} parse warnings", stats.warnings),
        ],
    })
}

async fn score_stage(ctx: &RunContext) -> Result<StageReport, PipelineError> {
    let stage = Stage::Score;
    let err = stage_err(stage);
    let inputs = load_inputs(ctx, stage)?;
    let entries: Vec<TopicAnnotation> = ctx.read_jsonl(
        Stage::Annotate,
        &ctx.stage_dir(Stage::Annotate).join(ANNOTATIONS_FILE),
        stage,
    )?;
    let models = ctx.config.model_names();
    let ids = text_ids(&inputs.corpus);
    let leaves: Vec<String> = inputs
        .topics
        .leaves()
        .iter()
        .map(|t| t.short_name.clone())
        .collect();
    let matrix = AnnotationMatrix::from_entries(models.clone(), ids.clone(), leaves, entries)
        .map_err(|e| err(e.into()))?;

    let client = EmbeddingClient::new(
        ctx.config.config.embedding.clone(),
        EmbeddingCache::new(ctx.config.cache_dir()),
    )
    .map_err(|e| err(e.into()))?;
    let store = client
        .embed_all(texts_to_embed(&matrix, &inputs.topics))
        .await
        .map_err(|e| err(e.into()))?;
    let records = score_matrix(&matrix, &inputs.topics, &store).map_err(|e| err(e.into()))?;
    let rolled = topic_scores(&records, &inputs.topics, &models, &ids).map_err(|e| err(e.into()))?;

    let dir = ctx.stage_dir(stage);
    ctx.write_jsonl(&dir.join(RELEVANCY_FILE), "relevancy", &records)
        .map_err(&err)?;
    ctx.write_jsonl(&dir.join(TOPIC_SCORES_FILE), "topic_scores", &rolled)
        .map_err(&err)?;
    let flagged = records.iter().filter(|r| r.potential_false_positive).count();
    Ok(StageReport {
        stage: stage.name().into(),
        network_requests: client.requests_sent(),
        cache_hits: 0,
        notes: vec![
            format!("{} embedded strings", store.len()),
            format!("{flagged} positives without phrases"),
        ],
    })
}

/// Arrange topic-level scores into one table per configured topic.
pub fn topic_tables(
    scores: &[TopicScore],
    models: &[String],
    text_ids: &[String],
    topics: &TopicSet,
) -> Result<Vec<TopicInputs>, String> {
    let by_cell: HashMap<(&str, &str, &str), &TopicScore> = scores
        .iter()
        .map(|s| ((s.model.as_str(), s.text_id.as_str(), s.topic.as_str()), s))
        .collect();
    topics
        .topics()
        .iter()
        .map(|topic| {
            let name = topic.short_name.as_str();
            let mut labels = Vec::with_capacity(text_ids.len());
            let mut values = Vec::with_capacity(text_ids.len());
            for t in text_ids {
                let mut lrow = Vec::with_capacity(models.len());
                let mut srow = Vec::with_capacity(models.len());
                for m in models {
                    let cell = by_cell
                        .get(&(m.as_str(), t.as_str(), name))
                        .ok_or_else(|| format!("no score for ({m}, {t}, {name})"))?;
                    lrow.push(cell.label);
                    srow.push(cell.score);
                }
                labels.push(lrow);
                values.push(srow);
            }
            Ok(TopicInputs {
                topic: name.to_string(),
                models: models.to_vec(),
                text_ids: text_ids.to_vec(),
                labels,
                scores: values,
            })
        })
        .collect()
}

fn load_tables(ctx: &RunContext, stage: Stage) -> Result<(Inputs, Vec<TopicInputs>), PipelineError> {
    let inputs = load_inputs(ctx, stage)?;
    let path = ctx.stage_dir(Stage::Score).join(TOPIC_SCORES_FILE);
    let scores: Vec<TopicScore> = ctx.read_jsonl(Stage::Score, &path, stage)?;
    let tables = topic_tables(
        &scores,
        &ctx.config.model_names(),
        &text_ids(&inputs.corpus),
        &inputs.topics,
    )
    .map_err(|reason| stage_err(stage)(StageFailure::Malformed { path, reason }))?;
    Ok((inputs, tables))
}

fn transpose<T: Copy>(rows: &[Vec<T>]) -> Vec<Vec<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    (0..cols).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_na(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

/// One row of the agreement report.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementRow {
    pub topic: String,
    pub kind: Coefficient,
    pub target: &'static str,
    pub coefficient: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub note: String,
}

fn agreement_rows(
    topic: &str,
    target: &'static str,
    m: &RatingMatrix,
    resamples: usize,
    seed: u64,
) -> Vec<AgreementRow> {
    [Coefficient::Ac1, Coefficient::Fleiss]
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let (value, mut note) = match coefficient(kind, m) {
                Ok(r) => (Some(r.coefficient), String::new()),
                Err(e) => (None, e.to_string()),
            };
            let ci = if value.is_some() {
                match bootstrap_ci(kind, m, resamples, seed.wrapping_add(i as u64)) {
                    Ok(ci) => Some(ci),
                    Err(e) => {
                        note = e.to_string();
                        None
                    }
                }
            } else {
                None
            };
            AgreementRow {
                topic: topic.to_string(),
                kind,
                target,
                coefficient: value,
                ci,
                note,
            }
        })
        .collect()
}

/// Outlier screening outcome as persisted by the agree stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierArtifact {
    pub models: Vec<String>,
    pub excluded: Vec<String>,
    /// Absent when fewer than 3 models make leave-one-out undefined.
    pub report: Option<OutlierReport>,
}

fn agree_stage(ctx: &RunContext) -> Result<StageReport, PipelineError> {
    let stage = Stage::Agree;
    let err = stage_err(stage);
    let (_, tables) = load_tables(ctx, stage)?;
    let models = ctx.config.model_names();
    let boot = ctx.config.config.bootstrap;

    let mut rows = Vec::new();
    let mut pooled: Vec<Vec<bool>> = vec![Vec::new(); models.len()];
    for (t, table) in tables.iter().enumerate() {
        let seed = boot.seed.wrapping_add(4 * t as u64);
        let by_model = transpose(&table.labels);
        for (acc, col) in pooled.iter_mut().zip(&by_model) {
            acc.extend(col);
        }
        let labels = rating_matrix_from_labels(&by_model).map_err(|e| err(e.into()))?;
        rows.extend(agreement_rows(&table.topic, "labels", &labels, boot.resamples, seed));
        let scores =
            rating_matrix_from_scores(&transpose(&table.scores)).map_err(|e| err(e.into()))?;
        rows.extend(agreement_rows(&table.topic, "scores", &scores, boot.resamples, seed + 2));
    }
    let pooled_matrix = rating_matrix_from_labels(&pooled).map_err(|e| err(e.into()))?;
    rows.extend(agreement_rows(
        POOLED_TOPIC,
        "labels",
        &pooled_matrix,
        boot.resamples,
        boot.seed.wrapping_add(4 * tables.len() as u64),
    ));

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.topic.clone(),
                r.kind.to_string(),
                r.target.to_string(),
                fmt_opt(r.coefficient),
                fmt_opt(r.ci.map(|c| c.0)),
                fmt_opt(r.ci.map(|c| c.1)),
                if r.ci.is_some() {
                    "bootstrap-percentile".to_string()
                } else {
                    String::new()
                },
                r.note.clone(),
            ]
        })
        .collect();
    let dir = ctx.stage_dir(stage);
    ctx.write_csv(
        &dir.join(AGREEMENT_FILE),
        &["topic", "kind", "target", "coefficient", "ci_lo", "ci_hi", "ci_method", "note"],
        &csv_rows,
    )
    .map_err(&err)?;

    let mut notes = Vec::new();
    let report = if models.len() >= 3 {
        let labelled: Vec<(String, Vec<bool>)> = models.iter().cloned().zip(pooled).collect();
        match detect_outliers(&labelled, ctx.config.config.outlier_threshold) {
            Ok(r) => Some(r),
            Err(AgreementError::DegenerateChance) => {
                notes.push("pooled labels are degenerate; outlier screening skipped".into());
                None
            }
            Err(e) => return Err(err(e.into())),
        }
    } else {
        notes.push("fewer than 3 models; outlier screening skipped".into());
        None
    };
    let excluded = report.as_ref().map(|r| r.excluded.clone()).unwrap_or_default();
    if !excluded.is_empty() {
        notes.push(format!("excluded {}", excluded.join(", ")));
    }
    let artifact = OutlierArtifact {
        models,
        excluded,
        report,
    };
    ctx.write_json(&dir.join(OUTLIERS_FILE), "outliers", &artifact)
        .map_err(&err)?;
    Ok(StageReport {
        stage: stage.name().into(),
        notes,
        ..Default::default()
    })
}

/// One line of a per-topic decision audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub text_id: String,
    pub per_model_labels: BTreeMap<String, bool>,
    pub per_model_scores: BTreeMap<String, f64>,
    pub pc1: f64,
    pub union: bool,
    pub intersection: bool,
    #[serde(rename = "final")]
    pub final_label: bool,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSummary {
    pub topic: String,
    pub models: Vec<String>,
    pub weights: BTreeMap<String, f64>,
    pub explained_variance: f64,
    pub orientation_sign: f64,
    pub degenerate: bool,
    pub tau: f64,
    pub union_positives: usize,
    pub intersection_positives: usize,
    pub final_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub excluded: Vec<String>,
    pub topics: Vec<TopicSummary>,
}

pub fn decisions_file(topic: &str) -> String {
    format!("{topic}.jsonl")
}

pub fn sweep_file(topic: &str) -> String {
    format!("{topic}_sweep.csv")
}

fn ensemble_stage(ctx: &RunContext) -> Result<StageReport, PipelineError> {
    let stage = Stage::Ensemble;
    let err = stage_err(stage);
    let (_, tables) = load_tables(ctx, stage)?;
    let outliers: OutlierArtifact = ctx.read_json(
        Stage::Agree,
        &ctx.stage_dir(Stage::Agree).join(OUTLIERS_FILE),
        stage,
    )?;
    let excluded: BTreeSet<String> = outliers.excluded.iter().cloned().collect();
    let dir = ctx.stage_dir(stage);
    let mut summaries = Vec::new();
    let mut notes = Vec::new();
    for table in &tables {
        let fused = ensemble_topic(table, &excluded).map_err(|e| err(e.into()))?;
        let d = &fused.decision;
        if fused.degenerate {
            notes.push(format!("{}: all score columns constant", table.topic));
        }
        let records: Vec<DecisionRecord> = table
            .text_ids
            .iter()
            .enumerate()
            .map(|(i, id)| DecisionRecord {
                text_id: id.clone(),
                per_model_labels: table.models.iter().cloned().zip(table.labels[i].iter().copied()).collect(),
                per_model_scores: table.models.iter().cloned().zip(table.scores[i].iter().copied()).collect(),
                pc1: fused.scores.pc1[i],
                union: d.union_label[i],
                intersection: d.intersection_label[i],
                final_label: d.final_label[i],
                tau: d.tau,
            })
            .collect();
        ctx.write_jsonl(&dir.join(decisions_file(&table.topic)), "decisions", &records)
            .map_err(&err)?;
        let sweep: Vec<Vec<String>> = d
            .sweep
            .iter()
            .map(|p| {
                vec![
                    p.threshold.to_string(),
                    fmt_na(p.precision),
                    fmt_na(p.sensitivity),
                    p.f1.to_string(),
                ]
            })
            .collect();
        ctx.write_csv(
            &dir.join(sweep_file(&table.topic)),
            &["threshold", "precision", "sensitivity", "f1"],
            &sweep,
        )
        .map_err(&err)?;
        let count = |v: &[bool]| v.iter().filter(|&&b| b).count();
        summaries.push(TopicSummary {
            topic: table.topic.clone(),
            models: d.models.clone(),
            weights: d.models.iter().cloned().zip(fused.scores.weights.iter().copied()).collect(),
            explained_variance: fused.scores.explained_variance,
            orientation_sign: fused.scores.orientation_sign,
            degenerate: fused.degenerate,
            tau: d.tau,
            union_positives: count(&d.union_label),
            intersection_positives: count(&d.intersection_label),
            final_positives: count(&d.final_label),
        });
    }
    let summary = EnsembleSummary {
        excluded: outliers.excluded,
        topics: summaries,
    };
    ctx.write_json(&dir.join(ENSEMBLE_SUMMARY_FILE), "ensemble_summary", &summary)
        .map_err(&err)?;
    Ok(StageReport {
        stage: stage.name().into(),
        notes,
        ..Default::default()
    })
}

/// Read the fused decisions of every topic, in topic order.
pub fn read_decisions(
    ctx: &RunContext,
    topics: &TopicSet,
    current: Stage,
) -> Result<Vec<(String, Vec<DecisionRecord>)>, PipelineError> {
    let dir = ctx.stage_dir(Stage::Ensemble);
    topics
        .topics()
        .iter()
        .map(|t| {
            let records =
                ctx.read_jsonl(Stage::Ensemble, &dir.join(decisions_file(&t.short_name)), current)?;
            Ok((t.short_name.clone(), records))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
struct GoldRecord {
    text_id: String,
    topic: String,
    label: bool,
}

fn load_gold(
    path: &Path,
    ids: &[String],
    topics: &TopicSet,
) -> Result<BTreeMap<String, HashMap<String, bool>>, StageFailure> {
    let raw = fs::read_to_string(path).map_err(|source| StageFailure::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let known: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut out: BTreeMap<String, HashMap<String, bool>> = BTreeMap::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: String| StageFailure::Input(format!("gold line {}: {reason}", i + 1));
        let rec: GoldRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if topics.topics().iter().all(|t| t.short_name != rec.topic) {
            return Err(bad(format!("unknown topic {:?}", rec.topic)));
        }
        if !known.contains(rec.text_id.as_str()) {
            return Err(bad(format!("unknown text id {:?}", rec.text_id)));
        }
        if out
            .entry(rec.topic.clone())
            .or_default()
            .insert(rec.text_id.clone(), rec.label)
            .is_some()
        {
            return Err(bad(format!("duplicate label for ({}, {})", rec.text_id, rec.topic)));
        }
    }
    Ok(out)
}

fn evaluate_stage(ctx: &RunContext) -> Result<StageReport, PipelineError> {
    let stage = Stage::Evaluate;
    let err = stage_err(stage);
    let (inputs, tables) = load_tables(ctx, stage)?;
    let decisions = read_decisions(ctx, &inputs.topics, stage)?;
    let groups: Vec<&str> = inputs.corpus.iter().map(TextItem::group_or_default).collect();
    let ids = text_ids(&inputs.corpus);
    let dir = ctx.stage_dir(stage);

    let mut group_rows = Vec::new();
    for (topic, records) in &decisions {
        if records.len() != ids.len() || records.iter().zip(&ids).any(|(r, id)| &r.text_id != id) {
            return Err(err(StageFailure::Malformed {
                path: ctx.stage_dir(Stage::Ensemble).join(decisions_file(topic)),
                reason: "decision records do not follow corpus order".into(),
            }));
        }
        let labels: Vec<bool> = records.iter().map(|r| r.final_label).collect();
        let scores: Vec<f64> = records
            .iter()
            .map(|r| if r.final_label { r.pc1 } else { 0.0 })
            .collect();
        for g in group_summary(topic, &labels, &scores, &groups).map_err(|e| err(e.into()))? {
            group_rows.push(vec![
                g.group,
                g.topic,
                g.occurrence_rate.to_string(),
                g.mean_score.to_string(),
                g.count.to_string(),
            ]);
        }
    }
    ctx.write_csv(
        &dir.join(GROUPS_FILE),
        &["group", "topic", "occurrence_rate", "mean_score", "count"],
        &group_rows,
    )
    .map_err(&err)?;

    let mut notes = Vec::new();
    let Some(gold_path) = ctx.config.gold_path() else {
        notes.push("no gold labels configured; metrics skipped".into());
        return Ok(StageReport {
            stage: stage.name().into(),
            notes,
            ..Default::default()
        });
    };
    let gold = load_gold(&gold_path, &ids, &inputs.topics).map_err(&err)?;
    let outliers: OutlierArtifact = ctx.read_json(
        Stage::Agree,
        &ctx.stage_dir(Stage::Agree).join(OUTLIERS_FILE),
        stage,
    )?;
    let excluded: BTreeSet<String> = outliers.excluded.into_iter().collect();
    let models = ctx.config.model_names();
    let subsets = if ctx.config.config.subset_ensembles {
        model_subsets(&models, 2)
    } else {
        Vec::new()
    };

    let mut metric_rows = Vec::new();
    for (table, (topic, records)) in tables.iter().zip(&decisions) {
        let Some(topic_gold) = gold.get(topic) else {
            notes.push(format!("{topic}: no gold labels"));
            continue;
        };
        let keep: Vec<usize> = (0..ids.len()).filter(|&i| topic_gold.contains_key(&ids[i])).collect();
        let gold_vec: Vec<bool> = keep.iter().map(|&i| topic_gold[&ids[i]]).collect();
        let pick_b = |v: &[bool]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pick_f = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();

        let mut candidates: Vec<Candidate> = models
            .iter()
            .enumerate()
            .map(|(j, m)| Candidate {
                name: m.clone(),
                labels: pick_b(&table.labels.iter().map(|r| r[j]).collect::<Vec<_>>()),
                scores: pick_f(&table.scores.iter().map(|r| r[j]).collect::<Vec<_>>()),
            })
            .collect();
        candidates.push(Candidate {
            name: ENSEMBLE_CANDIDATE.into(),
            labels: pick_b(&records.iter().map(|r| r.final_label).collect::<Vec<_>>()),
            scores: pick_f(&records.iter().map(|r| r.pc1).collect::<Vec<_>>()),
        });
        for subset in &subsets {
            let drop: BTreeSet<String> = models
                .iter()
                .filter(|m| !subset.contains(m))
                .cloned()
                .collect();
            if subset.len() == models.len() && excluded.is_empty() {
                continue;
            }
            let fused = ensemble_topic(table, &drop).map_err(|e| err(e.into()))?;
            candidates.push(Candidate {
                name: format!("{ENSEMBLE_CANDIDATE}[{}]", subset.join("+")),
                labels: pick_b(&fused.decision.final_label),
                scores: pick_f(&fused.scores.pc1),
            });
        }
        for row in compare_raters(&candidates, &gold_vec).map_err(|e| err(e.into()))? {
            metric_rows.push(vec![
                row.candidate,
                topic.clone(),
                fmt_na(row.metrics.precision),
                fmt_na(row.metrics.sensitivity),
                row.metrics.f1.to_string(),
                fmt_na(row.auprc),
            ]);
        }
    }
    ctx.write_csv(
        &dir.join(METRICS_FILE),
        &["candidate", "topic", "precision", "sensitivity", "f1", "auprc"],
        &metric_rows,
    )
    .map_err(&err)?;
    Ok(StageReport {
        stage: stage.name().into(),
        notes,
        ..Default::default()
    })
}

/// Write a review list per topic: final positives with the lowest ensemble
/// score and final negatives with the highest, `limit` of each.
pub fn export_triage(
    config: LoadedConfig,
    run_id: Option<&str>,
    limit: usize,
) -> Result<PathBuf, PipelineError> {
    let stage = Stage::Evaluate;
    let ctx = RunContext::resolve(config, stage, run_id)?;
    let inputs = load_inputs(&ctx, stage)?;
    let texts: HashMap<&str, &str> = inputs
        .corpus
        .iter()
        .map(|t| (t.id.as_str(), t.text.as_str()))
        .collect();
    let decisions = read_decisions(&ctx, &inputs.topics, stage)?;
    let mut rows = Vec::new();
    for (topic, records) in &decisions {
        let mut positives: Vec<&DecisionRecord> = records.iter().filter(|r| r.final_label).collect();
        positives.sort_by(|a, b| a.pc1.total_cmp(&b.pc1).then_with(|| a.text_id.cmp(&b.text_id)));
        let mut negatives: Vec<&DecisionRecord> = records.iter().filter(|r| !r.final_label).collect();
        negatives.sort_by(|a, b| b.pc1.total_cmp(&a.pc1).then_with(|| a.text_id.cmp(&b.text_id)));
        for (kind, list) in [("low_score_positive", positives), ("high_score_negative", negatives)] {
            for (rank, r) in list.into_iter().take(limit).enumerate() {
                let voters = r.per_model_labels.values().filter(|&&l| l).count();
                rows.push(vec![
                    topic.clone(),
                    kind.to_string(),
                    (rank + 1).to_string(),
                    r.text_id.clone(),
                    r.pc1.to_string(),
                    r.tau.to_string(),
                    voters.to_string(),
                    texts.get(r.text_id.as_str()).copied().unwrap_or_default().to_string(),
                ]);
            }
        }
    }
    let path = ctx.run_dir.join("triage").join(TRIAGE_FILE);
    ctx.write_csv(
        &path,
        &["topic", "kind", "rank", "text_id", "pc1", "tau", "positive_votes", "text"],
        &rows,
    )
    .map_err(stage_err(stage))?;
    Ok(path)
}

/// Relevancy records of a finished score stage.
pub fn read_relevancy(ctx: &RunContext) -> Result<Vec<RelevancyRecord>, PipelineError> {
    ctx.read_jsonl(
        Stage::Score,
        &ctx.stage_dir(Stage::Score).join(RELEVANCY_FILE),
        Stage::Evaluate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::SEQUENCE.iter().chain([Stage::All].iter()) {
            assert_eq!(s.name().parse::<Stage>().unwrap(), *s);
        }
        assert!("bogus".parse::<Stage>().is_err());
        assert_eq!(Stage::All.expand().len(), 5);
    }

    #[test]
    fn run_ids_are_plain_names() {
        assert!(is_valid_run_id("abc-20240101T000000Z"));
        assert!(!is_valid_run_id("../escape"));
        assert!(!is_valid_run_id(".hidden"));
        assert!(!is_valid_run_id(""));
    }

    #[test]
    fn tables_follow_config_order() {
        let topics = TopicSet::new(vec![crate::corpus::Topic::new("a", "d")]).unwrap();
        let cell = |m: &str, t: &str, label: bool, score: f64| TopicScore {
            model: m.into(),
            text_id: t.into(),
            topic: "a".into(),
            label,
            score,
        };
        let scores = vec![
            cell("y", "t2", false, 0.0),
            cell("x", "t1", true, 0.5),
            cell("y", "t1", true, 0.25),
            cell("x", "t2", false, 0.0),
        ];
        let models = vec!["x".to_string(), "y".to_string()];
        let ids = vec!["t1".to_string(), "t2".to_string()];
        let tables = topic_tables(&scores, &models, &ids, &topics).unwrap();
        assert_eq!(tables[0].scores, vec![vec![0.5, 0.25], vec![0.0, 0.0]]);
        assert_eq!(tables[0].labels[0], vec![true, true]);
        assert!(topic_tables(&scores[..3], &models, &ids, &topics).is_err());
    }

    #[test]
    fn exit_codes() {
        let missing = PipelineError::MissingUpstreamArtifact {
            needs: Stage::Score,
            path: PathBuf::from("x"),
        };
        assert_eq!(missing.exit_code(), 3);
        assert_eq!(PipelineError::Config(ConfigError::Invalid(vec![])).exit_code(), 2);
        let budget = PipelineError::Stage {
            stage: Stage::Annotate,
            source: StageFailure::Annotator(AnnotatorError::FailureBudgetExceeded {
                failed: 3,
                total: 10,
                allowed: 0.01,
            }),
        };
        assert_eq!(budget.exit_code(), 4);
    }
}
