//! The persisted task hierarchy: task → outcome types → approaches → steps →
//! methods → clips and tips, with a run report and referential checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{quantize, to_canonical_string};
use crate::corpus::{Corpus, FrameAsset};
use crate::dai::{ApproachKind, ClusterDai, DaiStageOutput};
use crate::gateway::TemplateId;
use crate::method::{MethodsStageOutput, StepMethods, Tip, MAX_TIPS};
use crate::outcome::OutcomeStageOutput;
use crate::pipeline::Stage;
use crate::requirements::{tally_requirements, RequirementSet, RequirementTally, RequirementsStageOutput};

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    NoOutcome,
    SchemaError,
    Unassigned,
    TaxonomySkipped,
    NoSteps,
    AllVideosFailed,
    RequirementsFailed,
    MethodClusterFallback,
    MethodUnassigned,
    TipsFailed,
    SummaryFallback,
    DescriptionFallback,
}

/// Something a stage could not do cleanly. `subject` is a video id, an
/// outcome cluster name, or `cluster/step`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Flag {
    pub stage: Stage,
    pub subject: String,
    pub reason: FlagReason,
}

impl Flag {
    pub fn new(stage: Stage, subject: &str, reason: FlagReason) -> Self {
        Flag {
            stage,
            subject: subject.to_string(),
            reason,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub min_support: Option<usize>,
    pub stages: Vec<Stage>,
    pub videos_ingested: usize,
    pub clustered_videos: usize,
    /// Distinct flagged subjects per stage.
    pub flagged: BTreeMap<Stage, usize>,
    /// Videos dropped from further processing, per stage.
    pub exclusions: BTreeMap<Stage, usize>,
    pub flags: Vec<Flag>,
    pub call_counts: BTreeMap<TemplateId, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub playback_ref: String,
    pub degraded: bool,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipNode {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub sentence_start: usize,
    pub sentence_end: usize,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodNode {
    pub name: String,
    pub clips: Vec<ClipNode>,
    pub tips: Vec<Tip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepNode {
    pub step_name: String,
    pub description: String,
    pub methods: Vec<MethodNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachNode {
    pub kind: ApproachKind,
    pub step_sequence: Vec<String>,
    pub support: usize,
    pub supporting_video_ids: Vec<String>,
    pub requirements: RequirementTally,
    pub steps: Vec<StepNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeNode {
    pub name: String,
    pub member_video_ids: Vec<String>,
    pub representative_frames: Vec<FrameAsset>,
    pub min_support: Option<usize>,
    pub approaches: Vec<ApproachNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub schema_version: String,
    pub task_name: String,
    pub videos: Vec<VideoEntry>,
    pub outcome_clusters: Vec<OutcomeNode>,
    pub pipeline_report: PipelineReport,
}

impl TaskGraph {
    pub fn video(&self, video_id: &str) -> Option<&VideoEntry> {
        self.videos
            .binary_search_by(|v| v.video_id.as_str().cmp(video_id))
            .ok()
            .map(|i| &self.videos[i])
    }

    pub fn clips(&self) -> impl Iterator<Item = &ClipNode> {
        self.outcome_clusters
            .iter()
            .flat_map(|o| &o.approaches)
            .flat_map(|a| &a.steps)
            .flat_map(|s| &s.methods)
            .flat_map(|m| &m.clips)
    }

    /// Summary of the clip with these bounds, if the graph has one.
    pub fn clip_summary(&self, video_id: &str, start_s: f64, end_s: f64) -> Option<&str> {
        self.clips()
            .find(|c| c.video_id == video_id && (c.start_s - start_s).abs() < 5e-4 && (c.end_s - end_s).abs() < 5e-4)
            .map(|c| c.summary.as_str())
    }

    pub fn to_canonical_string(&self) -> String {
        to_canonical_string(self).expect("graph serializes")
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConsistencyError {
    #[error("{context}: video {video_id} is not in the corpus")]
    DanglingVideo { context: String, video_id: String },
    #[error("{context}: step {step_name} is not part of the taxonomy")]
    DanglingStep { context: String, step_name: String },
    #[error("{context}: {message}")]
    Invalid { context: String, message: String },
}

fn invalid(context: impl Into<String>, message: impl Into<String>) -> ConsistencyError {
    ConsistencyError::Invalid {
        context: context.into(),
        message: message.into(),
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed graph file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema_version {found:?}, expected {SCHEMA_VERSION:?}")]
    Version { found: String },
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
}

/// Stage outputs to assemble. Absent stages leave their layer empty.
#[derive(Debug, Clone, Copy)]
pub struct StageResults<'a> {
    pub outcomes: &'a OutcomeStageOutput,
    pub dai: Option<&'a DaiStageOutput>,
    pub requirements: Option<&'a RequirementsStageOutput>,
    pub methods: Option<&'a MethodsStageOutput>,
}

fn approach_key(cluster: &str, kind: ApproachKind) -> String {
    let kind = serde_json::to_value(kind).expect("kind serializes");
    format!("{cluster}/{}", kind.as_str().unwrap_or_default())
}

fn quantize_tally(mut t: RequirementTally) -> RequirementTally {
    for item in &mut t.items {
        item.fraction = quantize(item.fraction);
    }
    t
}

fn step_node(step_name: &str, methods: Option<&StepMethods>) -> StepNode {
    let Some(sm) = methods else {
        return StepNode {
            step_name: step_name.to_string(),
            description: step_name.to_string(),
            methods: Vec::new(),
        };
    };
    let mut nodes: Vec<MethodNode> = sm
        .methods
        .iter()
        .map(|m| {
            let mut clips: Vec<ClipNode> = m
                .clips
                .iter()
                .map(|c| ClipNode {
                    video_id: c.span.video_id.clone(),
                    start_s: quantize(c.span.start_s),
                    end_s: quantize(c.span.end_s),
                    sentence_start: c.span.sentence_start,
                    sentence_end: c.span.sentence_end,
                    summary: c.summary.clone(),
                })
                .collect();
            clips.sort_by(|a, b| {
                a.video_id
                    .cmp(&b.video_id)
                    .then(a.start_s.total_cmp(&b.start_s))
                    .then(a.sentence_start.cmp(&b.sentence_start))
            });
            MethodNode {
                name: m.name.clone(),
                clips,
                tips: m.tips.clone(),
            }
        })
        .collect();
    nodes.sort_by(|a, b| a.name.cmp(&b.name));
    StepNode {
        step_name: step_name.to_string(),
        description: sm.description.clone(),
        methods: nodes,
    }
}

fn approach_nodes(
    dai: &ClusterDai,
    requirement_sets: Option<&[RequirementSet]>,
    methods: &BTreeMap<(&str, &str), &StepMethods>,
) -> Vec<ApproachNode> {
    let mut out: Vec<ApproachNode> = dai
        .approaches
        .iter()
        .map(|a| {
            let key = approach_key(&dai.cluster_name, a.kind);
            let requirements = match requirement_sets {
                Some(sets) => quantize_tally(tally_requirements(sets, &a.supporting_video_ids, &key)),
                None => RequirementTally {
                    approach_key: key,
                    items: Vec::new(),
                },
            };
            ApproachNode {
                kind: a.kind,
                step_sequence: a.sequence.steps.clone(),
                support: a.sequence.support,
                supporting_video_ids: a.supporting_video_ids.iter().cloned().collect(),
                requirements,
                steps: a
                    .sequence
                    .steps
                    .iter()
                    .map(|s| step_node(s, methods.get(&(dai.cluster_name.as_str(), s.as_str())).copied()))
                    .collect(),
            }
        })
        .collect();
    out.sort_by_key(|a| a.kind);
    out
}

/// Builds the graph from stage outputs and checks it against the corpus.
pub fn assemble(
    corpus: &Corpus,
    results: StageResults<'_>,
    report: PipelineReport,
) -> Result<TaskGraph, ConsistencyError> {
    let requirement_sets: Option<Vec<RequirementSet>> =
        results.requirements.map(|r| r.sets.values().cloned().collect());
    let methods: BTreeMap<(&str, &str), &StepMethods> = results
        .methods
        .into_iter()
        .flat_map(|m| &m.steps)
        .map(|s| ((s.cluster_name.as_str(), s.step_name.as_str()), s))
        .collect();
    let dai_by_cluster: BTreeMap<&str, &ClusterDai> = results
        .dai
        .into_iter()
        .flat_map(|d| &d.clusters)
        .map(|c| (c.cluster_name.as_str(), c))
        .collect();

    let mut clusters: Vec<OutcomeNode> = results
        .outcomes
        .clusters
        .iter()
        .map(|c| {
            let dai = dai_by_cluster.get(c.name.as_str());
            OutcomeNode {
                name: c.name.clone(),
                member_video_ids: c.member_video_ids.iter().cloned().collect(),
                representative_frames: c
                    .representative_frames
                    .iter()
                    .map(|f| FrameAsset {
                        t_s: quantize(f.t_s),
                        ..f.clone()
                    })
                    .collect(),
                min_support: dai.map(|d| d.min_support),
                approaches: dai
                    .map(|d| approach_nodes(d, requirement_sets.as_deref(), &methods))
                    .unwrap_or_default(),
            }
        })
        .collect();
    clusters.sort_by(|a, b| a.name.cmp(&b.name));

    for name in dai_by_cluster.keys() {
        if !clusters.iter().any(|c| c.name == *name) {
            return Err(invalid("dai", format!("results for unknown outcome cluster {name}")));
        }
    }

    let graph = TaskGraph {
        schema_version: SCHEMA_VERSION.to_string(),
        task_name: corpus.task_name.clone(),
        videos: corpus
            .videos
            .values()
            .map(|v| VideoEntry {
                video_id: v.video_id.clone(),
                playback_ref: v.playback_ref.clone(),
                degraded: v.degraded,
                duration_s: quantize(v.duration_s()),
            })
            .collect(),
        outcome_clusters: clusters,
        pipeline_report: report,
    };
    validate(&graph, Some(corpus))?;
    Ok(graph)
}

/// Referential and structural checks over a whole graph. With a corpus,
/// also checks that every listed video belongs to it.
pub fn validate(graph: &TaskGraph, corpus: Option<&Corpus>) -> Result<(), ConsistencyError> {
    if graph.schema_version != SCHEMA_VERSION {
        return Err(invalid("graph", format!("schema_version {:?}", graph.schema_version)));
    }
    if graph.task_name.trim().is_empty() {
        return Err(invalid("graph", "empty task_name"));
    }
    if !graph.videos.windows(2).all(|w| w[0].video_id < w[1].video_id) {
        return Err(invalid("videos", "not sorted by video_id or duplicated"));
    }
    if let Some(corpus) = corpus {
        if corpus.task_name != graph.task_name {
            return Err(invalid("graph", "task_name differs from the corpus"));
        }
        for v in &graph.videos {
            if corpus.get(&v.video_id).is_none() {
                return Err(ConsistencyError::DanglingVideo {
                    context: "videos".into(),
                    video_id: v.video_id.clone(),
                });
            }
        }
    }
    let known = |context: &str, id: &str| -> Result<(), ConsistencyError> {
        if graph.video(id).is_some() {
            Ok(())
        } else {
            Err(ConsistencyError::DanglingVideo {
                context: context.to_string(),
                video_id: id.to_string(),
            })
        }
    };

    if !graph.outcome_clusters.windows(2).all(|w| w[0].name < w[1].name) {
        return Err(invalid("outcome_clusters", "not sorted by name or duplicated"));
    }
    let mut seen_members: BTreeSet<&str> = BTreeSet::new();
    for o in &graph.outcome_clusters {
        let ctx = format!("outcome {}", o.name);
        if o.member_video_ids.is_empty() {
            return Err(invalid(&ctx, "no member videos"));
        }
        for id in &o.member_video_ids {
            known(&ctx, id)?;
            if !seen_members.insert(id) {
                return Err(invalid(&ctx, format!("video {id} belongs to two outcome clusters")));
            }
        }
        for f in &o.representative_frames {
            if !o.member_video_ids.contains(&f.video_id) {
                return Err(invalid(&ctx, format!("representative frame from non-member {}", f.video_id)));
            }
        }
        if o.approaches.len() > 3 {
            return Err(invalid(&ctx, "more than three approaches"));
        }
        if !o.approaches.windows(2).all(|w| w[0].kind < w[1].kind) {
            return Err(invalid(&ctx, "approach kinds repeated or out of order"));
        }
        if let Some(first) = o.approaches.first() {
            if first.kind != ApproachKind::Standard {
                return Err(invalid(&ctx, "approaches without a STANDARD one"));
            }
        }
        let standard_len = o.approaches.first().map(|a| a.step_sequence.len()).unwrap_or(0);
        for a in &o.approaches {
            let actx = format!("{ctx} approach {:?}", a.kind);
            match a.kind {
                ApproachKind::Simple if a.step_sequence.len() > standard_len => {
                    return Err(invalid(&actx, "longer than STANDARD"))
                }
                ApproachKind::Complex if a.step_sequence.len() < standard_len => {
                    return Err(invalid(&actx, "shorter than STANDARD"))
                }
                _ => {}
            }
            if a.supporting_video_ids.is_empty() {
                return Err(invalid(&actx, "no supporting videos"));
            }
            for id in &a.supporting_video_ids {
                if !o.member_video_ids.contains(id) {
                    return Err(ConsistencyError::DanglingVideo {
                        context: actx.clone(),
                        video_id: id.clone(),
                    });
                }
            }
            let names: Vec<&str> = a.steps.iter().map(|s| s.step_name.as_str()).collect();
            let sequence: Vec<&str> = a.step_sequence.iter().map(String::as_str).collect();
            if names != sequence {
                let missing = sequence
                    .iter()
                    .zip(names.iter().map(Some).chain(std::iter::repeat(None)))
                    .find(|(s, n)| Some(*s) != *n)
                    .map(|(s, _)| s.to_string())
                    .or_else(|| names.get(sequence.len()).map(|s| s.to_string()))
                    .unwrap_or_default();
                return Err(ConsistencyError::DanglingStep {
                    context: actx,
                    step_name: missing,
                });
            }
            for step in &a.steps {
                validate_step(&known, &actx, step)?;
            }
        }
    }
    Ok(())
}

fn validate_step(
    known: &dyn Fn(&str, &str) -> Result<(), ConsistencyError>,
    actx: &str,
    step: &StepNode,
) -> Result<(), ConsistencyError> {
    let sctx = format!("{actx} step {}", step.step_name);
    if step.description.trim().is_empty() {
        return Err(invalid(&sctx, "empty description"));
    }
    if step.methods.len() > 3 {
        return Err(invalid(&sctx, "more than three methods"));
    }
    let mut clip_keys: BTreeSet<(String, usize)> = BTreeSet::new();
    for m in &step.methods {
        let mctx = format!("{sctx} method {}", m.name);
        if m.clips.is_empty() {
            return Err(invalid(&mctx, "no clips"));
        }
        for c in &m.clips {
            known(&mctx, &c.video_id)?;
            if c.sentence_start > c.sentence_end || c.start_s > c.end_s {
                return Err(invalid(&mctx, format!("inverted clip in {}", c.video_id)));
            }
            if !clip_keys.insert((c.video_id.clone(), c.sentence_start)) {
                return Err(invalid(&mctx, format!("clip {}@{} in two methods", c.video_id, c.sentence_start)));
            }
        }
        if m.tips.len() > MAX_TIPS {
            return Err(invalid(&mctx, "more than three tips"));
        }
        for t in &m.tips {
            if t.groundings.is_empty() {
                return Err(invalid(&mctx, "ungrounded tip"));
            }
            for g in &t.groundings {
                known(&mctx, &g.video_id)?;
                let inside = m.clips.iter().any(|c| {
                    c.video_id == g.video_id && c.sentence_start <= g.sentence_start && g.sentence_end <= c.sentence_end
                });
                if !inside || g.sentence_start > g.sentence_end {
                    return Err(invalid(&mctx, format!("tip grounding outside member spans in {}", g.video_id)));
                }
            }
        }
    }
    Ok(())
}

/// Lowercase ASCII alphanumerics joined by single dashes.
pub fn task_slug(task_name: &str) -> String {
    let mut slug = String::new();
    for c in task_name.chars() {
        if c.is_ascii_alphanumeric() {
            slug.push(c.to_ascii_lowercase());
        } else if !slug.is_empty() && !slug.ends_with('-') {
            slug.push('-');
        }
    }
    while slug.ends_with('-') {
        slug.pop();
    }
    if slug.is_empty() {
        "task".to_string()
    } else {
        slug
    }
}

/// Parses a graph, rejecting unsupported schema versions before decoding.
pub fn from_slice(bytes: &[u8]) -> Result<TaskGraph, GraphError> {
    let value: Value = serde_json::from_slice(bytes)?;
    let found = value.get("schema_version").and_then(Value::as_str).unwrap_or("");
    if found != SCHEMA_VERSION {
        return Err(GraphError::Version {
            found: found.to_string(),
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn save(graph: &TaskGraph, path: &Path) -> Result<(), GraphError> {
    if graph.schema_version != SCHEMA_VERSION {
        return Err(GraphError::Version {
            found: graph.schema_version.clone(),
        });
    }
    let io = |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, graph.to_canonical_string()).map_err(io)
}

pub fn load(path: &Path) -> Result<TaskGraph, GraphError> {
    let bytes = fs::read(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_slice(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::method::Grounding;
    use crate::requirements::{ItemKind, TallyItem};

    pub(crate) fn sample() -> TaskGraph {
        let clip = |vid: &str, a: usize, b: usize| ClipNode {
            video_id: vid.into(),
            start_s: a as f64 * 2.0,
            end_s: b as f64 * 2.0 + 2.0,
            sentence_start: a,
            sentence_end: b,
            summary: format!("clip {vid}"),
        };
        TaskGraph {
            schema_version: SCHEMA_VERSION.into(),
            task_name: "Make Jambalaya".into(),
            videos: ["v1", "v2"]
                .iter()
                .map(|id| VideoEntry {
                    video_id: id.to_string(),
                    playback_ref: format!("https://example.org/{id}"),
                    degraded: false,
                    duration_s: 60.0,
                })
                .collect(),
            outcome_clusters: vec![OutcomeNode {
                name: "Creole".into(),
                member_video_ids: vec!["v1".into(), "v2".into()],
                representative_frames: vec![FrameAsset {
                    video_id: "v1".into(),
                    t_s: 58.0,
                    uri: "frames/v1_0058.jpg".into(),
                }],
                min_support: Some(2),
                approaches: vec![ApproachNode {
                    kind: ApproachKind::Standard,
                    step_sequence: vec!["Cook rice".into()],
                    support: 2,
                    supporting_video_ids: vec!["v1".into(), "v2".into()],
                    requirements: RequirementTally {
                        approach_key: "Creole/STANDARD".into(),
                        items: vec![TallyItem {
                            name: "rice".into(),
                            kind: ItemKind::Ingredient,
                            count: 2,
                            fraction: 1.0,
                        }],
                    },
                    steps: vec![StepNode {
                        step_name: "Cook rice".into(),
                        description: "Simmer the rice.".into(),
                        methods: vec![MethodNode {
                            name: "Cook in pot".into(),
                            clips: vec![clip("v1", 3, 5), clip("v2", 1, 2)],
                            tips: vec![Tip {
                                text: "Rinse first".into(),
                                groundings: vec![Grounding {
                                    video_id: "v1".into(),
                                    sentence_start: 4,
                                    sentence_end: 5,
                                }],
                            }],
                        }],
                    }],
                }],
            }],
            pipeline_report: PipelineReport::default(),
        }
    }

    #[test]
    fn sample_is_valid() {
        validate(&sample(), None).unwrap();
    }

    #[test]
    fn save_load_round_trip_and_bytes_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b/b.json"));
        let g = sample();
        save(&g, &a).unwrap();
        save(&g, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(load(&a).unwrap(), g);
    }

    #[test]
    fn old_version_rejected() {
        let mut v = serde_json::to_value(sample()).unwrap();
        v["schema_version"] = "0.0".into();
        let err = from_slice(v.to_string().as_bytes()).unwrap_err();
        assert!(matches!(err, GraphError::Version { found } if found == "0.0"));
    }

    #[test]
    fn dangling_clip_video_rejected() {
        let mut g = sample();
        g.outcome_clusters[0].approaches[0].steps[0].methods[0].clips[0].video_id = "ghost".into();
        assert!(matches!(
            validate(&g, None),
            Err(ConsistencyError::DanglingVideo { video_id, .. }) if video_id == "ghost"
        ));
    }

    #[test]
    fn sequence_mismatch_rejected() {
        let mut g = sample();
        g.outcome_clusters[0].approaches[0].step_sequence.push("Serve".into());
        assert!(matches!(validate(&g, None), Err(ConsistencyError::DanglingStep { step_name, .. }) if step_name == "Serve"));
    }

    #[test]
    fn tip_outside_span_rejected() {
        let mut g = sample();
        g.outcome_clusters[0].approaches[0].steps[0].methods[0].tips[0].groundings[0].sentence_end = 9;
        assert!(validate(&g, None).is_err());
    }

    #[test]
    fn empty_methods_allowed() {
        let mut g = sample();
        g.outcome_clusters[0].approaches[0].steps[0].methods.clear();
        validate(&g, None).unwrap();
    }

    #[test]
    fn slugs() {
        assert_eq!(task_slug("Make Jambalaya"), "make-jambalaya");
        assert_eq!(task_slug("  Build a desk!! "), "build-a-desk");
        assert_eq!(task_slug("???"), "task");
    }

    #[test]
    fn clip_lookup() {
        let g = sample();
        assert_eq!(g.clip_summary("v1", 6.0, 12.0), Some("clip v1"));
        assert_eq!(g.clip_summary("v1", 6.0, 13.0), None);
    }
}
