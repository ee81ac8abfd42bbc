//! Stage orchestration: outcomes → approaches per outcome type → requirements
//! per approach → methods per step, with a JSON checkpoint after each stage
//! and a run report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::dai::{run_dai_stage, DaiStageOutput};
use crate::gateway::{CallCounts, Gateway, GatewayError};
use crate::graph::{assemble, task_slug, ConsistencyError, Flag, FlagReason, PipelineReport, StageResults, TaskGraph};
use crate::method::{run_methods_stage, MethodsStageOutput};
use crate::outcome::{run_outcome_stage, OutcomeStageOutput};
use crate::requirements::{run_requirements_stage, RequirementsStageOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Outcomes,
    Dai,
    Requirements,
    Methods,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Outcomes, Stage::Dai, Stage::Requirements, Stage::Methods];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Outcomes => "outcomes",
            Stage::Dai => "dai",
            Stage::Requirements => "requirements",
            Stage::Methods => "methods",
        }
    }

    /// The stage whose output this one consumes.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Outcomes => None,
            Stage::Dai => Some(Stage::Outcomes),
            Stage::Requirements | Stage::Methods => Some(Stage::Dai),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| format!("unknown stage {s:?} (expected outcomes, dai, requirements or methods)"))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// `None` uses the per-cluster default.
    pub min_support: Option<usize>,
    pub seed: u64,
    pub stages: BTreeSet<Stage>,
    /// Cap on parallel workers; `None` uses all cores.
    pub workers: Option<usize>,
    /// Parent of the per-task checkpoint directory; `None` disables checkpoints.
    pub runs_dir: Option<PathBuf>,
    /// Reuse checkpoints whose fingerprint matches.
    pub resume: bool,
    /// Identifies the backend and its configuration in checkpoint fingerprints.
    pub backend_fingerprint: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_support: None,
            seed: 0,
            stages: Stage::ALL.into_iter().collect(),
            workers: None,
            runs_dir: None,
            resume: false,
            backend_fingerprint: String::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        /// Where completed stages were checkpointed, for `resume`.
        checkpoint_dir: Option<PathBuf>,
        #[source]
        source: GatewayError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint<T> {
    stage: Stage,
    fingerprint: String,
    call_counts: CallCounts,
    output: T,
}

/// Per-run telemetry; unlike the graph it includes timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task_name: String,
    pub task_slug: String,
    pub summary: PipelineReport,
    pub stage_wall_time_s: BTreeMap<Stage, f64>,
    /// Stages whose output came from a checkpoint.
    pub resumed: Vec<Stage>,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let path = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
        let bytes = fs::read(&path).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Checkpoint {
            path,
            message: e.to_string(),
        })
    }
}

/// Raw stage outputs behind a graph; absent when the stage was not needed.
#[derive(Debug, Clone, Default)]
pub struct StageOutputs {
    pub outcomes: OutcomeStageOutput,
    pub dai: Option<DaiStageOutput>,
    pub requirements: Option<RequirementsStageOutput>,
    pub methods: Option<MethodsStageOutput>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub graph: TaskGraph,
    pub report: RunReport,
    pub outputs: StageOutputs,
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json_digest<T: Serialize>(value: &T) -> String {
    digest(&[&serde_json::to_vec(value).expect("stage output serializes")])
}

struct Checkpoints {
    dir: Option<PathBuf>,
}

impl Checkpoints {
    fn path(&self, stage: Stage) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stage}.json")))
    }

    fn load<T: DeserializeOwned>(&self, stage: Stage, fingerprint: &str) -> Option<(T, CallCounts)> {
        let path = self.path(stage)?;
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<Checkpoint<T>>(&bytes) {
            Ok(cp) if cp.stage == stage && cp.fingerprint == fingerprint => Some((cp.output, cp.call_counts)),
            Ok(_) => {
                tracing::info!(path = %path.display(), "stale checkpoint ignored");
                None
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "unreadable checkpoint ignored");
                None
            }
        }
    }

    fn save<T: Serialize>(&self, stage: Stage, fingerprint: &str, calls: &CallCounts, output: &T) -> Result<(), PipelineError> {
        let Some(path) = self.path(stage) else {
            return Ok(());
        };
        let cp = Checkpoint {
            stage,
            fingerprint: fingerprint.to_string(),
            call_counts: calls.clone(),
            output,
        };
        let bytes = serde_json::to_vec_pretty(&cp).expect("checkpoint serializes");
        write_file(&path, &bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn diff_counts(after: &CallCounts, before: &CallCounts) -> CallCounts {
    after
        .iter()
        .map(|(t, n)| (*t, n - before.get(t).copied().unwrap_or(0)))
        .filter(|(_, n)| *n > 0)
        .collect()
}

/// Stages that must produce output: the requested ones plus their
/// prerequisites.
fn needed_stages(requested: &BTreeSet<Stage>) -> BTreeSet<Stage> {
    let mut needed = requested.clone();
    for s in requested {
        let mut cur = s.prerequisite();
        while let Some(p) = cur {
            needed.insert(p);
            cur = p.prerequisite();
        }
    }
    needed
}

struct Runner<'a> {
    gateway: &'a Gateway,
    config: &'a PipelineConfig,
    pool: rayon::ThreadPool,
    checkpoints: Checkpoints,
    base: String,
    calls: CallCounts,
    stage_times: BTreeMap<Stage, f64>,
    resumed: Vec<Stage>,
}

impl Runner<'_> {
    /// Loads the stage from its checkpoint when allowed, otherwise runs it and
    /// writes the checkpoint.
    fn stage<T, F>(&mut self, stage: Stage, upstream: &str, run: F) -> Result<T, PipelineError>
    where
        T: Serialize + DeserializeOwned + Send,
        F: FnOnce(&Gateway) -> Result<T, GatewayError> + Send,
    {
        let fingerprint = digest(&[self.base.as_bytes(), stage.as_str().as_bytes(), upstream.as_bytes()]);
        let requested = self.config.stages.contains(&stage);
        if self.config.resume || !requested {
            if let Some((output, calls)) = self.checkpoints.load::<T>(stage, &fingerprint) {
                tracing::info!(%stage, "loaded from checkpoint");
                for (t, n) in calls {
                    *self.calls.entry(t).or_default() += n;
                }
                self.resumed.push(stage);
                return Ok(output);
            }
        }
        if !requested {
            return Err(PipelineError::Config(format!(
                "stage {stage} is needed by a requested stage but was not requested and has no usable checkpoint"
            )));
        }
        let started = Instant::now();
        let before = self.gateway.call_counts();
        let gateway = self.gateway;
        let output = self.pool.install(|| run(gateway)).map_err(|source| PipelineError::Stage {
            stage,
            checkpoint_dir: self.checkpoints.dir.clone(),
            source,
        })?;
        let calls = diff_counts(&self.gateway.call_counts(), &before);
        for (t, n) in &calls {
            *self.calls.entry(*t).or_default() += n;
        }
        self.checkpoints.save(stage, &fingerprint, &calls, &output)?;
        self.stage_times.insert(stage, started.elapsed().as_secs_f64());
        tracing::info!(%stage, secs = started.elapsed().as_secs_f64(), "stage complete");
        Ok(output)
    }
}

fn distinct_subjects(flags: &[Flag], stage: Stage) -> usize {
    flags
        .iter()
        .filter(|f| f.stage == stage)
        .map(|f| f.subject.as_str())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Runs the requested stages in fixed order and assembles the graph.
pub fn run_pipeline(corpus: &Corpus, gateway: &Gateway, config: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    let started = Instant::now();
    if config.stages.is_empty() {
        return Err(PipelineError::Config("no stages requested".into()));
    }
    if config.workers == Some(0) {
        return Err(PipelineError::Config("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let slug = task_slug(&corpus.task_name);
    let corpus_bytes = serde_json::to_vec(corpus).expect("corpus serializes");
    let base = digest(&[
        &corpus_bytes,
        &config.seed.to_le_bytes(),
        format!("{:?}", config.min_support).as_bytes(),
        config.backend_fingerprint.as_bytes(),
    ]);
    let mut runner = Runner {
        gateway,
        config,
        pool,
        checkpoints: Checkpoints {
            dir: config.runs_dir.as_ref().map(|d| d.join(&slug)),
        },
        base,
        calls: CallCounts::new(),
        stage_times: BTreeMap::new(),
        resumed: Vec::new(),
    };
    let needed = needed_stages(&config.stages);
    let seed = config.seed;
    let min_support = config.min_support;

    let outcomes: OutcomeStageOutput =
        runner.stage(Stage::Outcomes, "", |g| run_outcome_stage(g, corpus, seed))?;
    let outcomes_digest = json_digest(&outcomes);

    let dai: Option<DaiStageOutput> = if needed.contains(&Stage::Dai) {
        Some(runner.stage(Stage::Dai, &outcomes_digest, |g| {
            run_dai_stage(g, corpus, &outcomes, min_support)
        })?)
    } else {
        None
    };
    let dai_digest = dai.as_ref().map(json_digest).unwrap_or_default();

    let requirements: Option<RequirementsStageOutput> = match &dai {
        Some(d) if needed.contains(&Stage::Requirements) => {
            let ids: BTreeSet<String> = d
                .clusters
                .iter()
                .flat_map(|c| &c.approaches)
                .flat_map(|a| a.supporting_video_ids.iter().cloned())
                .collect();
            Some(runner.stage(Stage::Requirements, &dai_digest, |g| {
                run_requirements_stage(g, corpus, &ids)
            })?)
        }
        _ => None,
    };

    let methods: Option<MethodsStageOutput> = match &dai {
        Some(d) if needed.contains(&Stage::Methods) => {
            Some(runner.stage(Stage::Methods, &dai_digest, |g| run_methods_stage(g, corpus, d))?)
        }
        _ => None,
    };

    let mut flags: Vec<Flag> = outcomes.flags.clone();
    flags.extend(dai.iter().flat_map(|d| d.flags.iter().cloned()));
    flags.extend(requirements.iter().flat_map(|r| r.flags.iter().cloned()));
    flags.extend(methods.iter().flat_map(|m| m.flags.iter().cloned()));
    flags.sort();

    let clustered = outcomes.clustered_video_ids();
    let mut stages = vec![Stage::Outcomes];
    let mut exclusions = BTreeMap::from([(Stage::Outcomes, corpus.len() - clustered.len())]);
    if let Some(d) = &dai {
        stages.push(Stage::Dai);
        let grounded: usize = d.clusters.iter().map(|c| c.spans.len()).sum();
        exclusions.insert(Stage::Dai, clustered.len() - grounded);
    }
    if let Some(r) = &requirements {
        stages.push(Stage::Requirements);
        let failed = r.flags.iter().filter(|f| f.reason == FlagReason::RequirementsFailed).count();
        exclusions.insert(Stage::Requirements, failed);
    }
    if methods.is_some() {
        stages.push(Stage::Methods);
        exclusions.insert(Stage::Methods, 0);
    }
    let flagged = stages.iter().map(|s| (*s, distinct_subjects(&flags, *s))).collect();

    let summary = PipelineReport {
        seed,
        min_support,
        stages,
        videos_ingested: corpus.len(),
        clustered_videos: clustered.len(),
        flagged,
        exclusions,
        flags,
        call_counts: runner.calls.clone(),
    };
    let graph = assemble(
        corpus,
        StageResults {
            outcomes: &outcomes,
            dai: dai.as_ref(),
            requirements: requirements.as_ref(),
            methods: methods.as_ref(),
        },
        summary.clone(),
    )?;
    let report = RunReport {
        task_name: corpus.task_name.clone(),
        task_slug: slug,
        summary,
        stage_wall_time_s: runner.stage_times,
        resumed: runner.resumed,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &runner.checkpoints.dir {
        let bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        write_file(&dir.join("report.json"), &bytes)?;
    }
    Ok(PipelineRun {
        graph,
        report,
        outputs: StageOutputs {
            outcomes,
            dai,
            requirements,
            methods,
        },
    })
}
