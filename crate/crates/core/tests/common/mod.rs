//! Shared fixtures: a 24-video annotated corpus, random DAI corpora and
//! scripted gateways.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vmx_core::corpus::{ManifestEntry, TaskManifest, TranscriptFile};
use vmx_core::gateway::scripted::{Rule, Ruleset, ScriptedBackend};
use vmx_core::gateway::{Backend, BackendError, BackendRequest, GatewayConfig};
use vmx_core::{Corpus, FrameAsset, Gateway, Sentence, TemplateId, VideoRecord};

pub const TASK: &str = "Make Jambalaya";
pub const SENTENCE_S: f64 = 4.0;
pub const CLUSTER_NAMES: [&str; 2] = ["Creole red jambalaya", "Cajun brown jambalaya"];

struct StepDef {
    name: &'static str,
    methods: [&'static str; 2],
    tip: &'static str,
    ingredient: Option<&'static str>,
    tool: Option<&'static str>,
}

const STEPS: &[StepDef] = &[
    StepDef { name: "Make the stock", methods: ["Simmer shrimp shells", "Simmer chicken bones"], tip: "Skim the foam often", ingredient: Some("shrimp shells"), tool: Some("stock pot") },
    StepDef { name: "Chop the vegetables", methods: ["Chop by hand", "Chop with a food processor"], tip: "Cut everything the same size", ingredient: Some("onions"), tool: Some("chef's knife") },
    StepDef { name: "Brown the sausage", methods: ["Brown in the dutch oven", "Brown in a skillet"], tip: "Do not crowd the pan", ingredient: Some("andouille sausage"), tool: Some("dutch oven") },
    StepDef { name: "Brown the chicken", methods: ["Brown skin side down", "Brown in batches"], tip: "Pat the chicken dry first", ingredient: Some("chicken thighs"), tool: Some("dutch oven") },
    StepDef { name: "Make a roux", methods: ["Stir constantly with a whisk", "Stir with a wooden spoon"], tip: "Never walk away from the roux", ingredient: Some("flour"), tool: Some("whisk") },
    StepDef { name: "Saute the trinity", methods: ["Saute over medium heat", "Saute with the lid on"], tip: "Scrape up the browned bits", ingredient: Some("celery"), tool: None },
    StepDef { name: "Add the tomatoes", methods: ["Add crushed tomatoes", "Add diced tomatoes"], tip: "Cook the paste for a minute", ingredient: Some("tomatoes"), tool: None },
    StepDef { name: "Pour in the stock", methods: ["Pour in warm stock", "Pour in cold stock"], tip: "Warm stock keeps the boil going", ingredient: Some("chicken stock"), tool: Some("ladle") },
    StepDef { name: "Stir in the rice", methods: ["Stir in rinsed rice", "Stir in dry rice"], tip: "Rinse the rice until clear", ingredient: Some("long grain rice"), tool: Some("wooden spoon") },
    StepDef { name: "Simmer the pot", methods: ["Simmer covered", "Simmer in the oven"], tip: "Keep the lid on", ingredient: Some("a pinch of salt"), tool: None },
    StepDef { name: "Garnish the dish", methods: ["Garnish with green onions", "Garnish with parsley"], tip: "Slice the onions thin", ingredient: Some("green onions"), tool: None },
];

fn step_def(name: &str) -> &'static StepDef {
    STEPS.iter().find(|s| s.name == name).expect("known step")
}

/// Standard, simple and complex sequences per outcome type.
pub const CREOLE: [&[&str]; 3] = [
    &["Chop the vegetables", "Brown the sausage", "Saute the trinity", "Add the tomatoes", "Stir in the rice", "Simmer the pot"],
    &["Brown the sausage", "Add the tomatoes", "Stir in the rice", "Simmer the pot"],
    &["Make the stock", "Chop the vegetables", "Brown the sausage", "Saute the trinity", "Add the tomatoes", "Stir in the rice", "Simmer the pot", "Garnish the dish"],
];
pub const CAJUN: [&[&str]; 3] = [
    &["Chop the vegetables", "Brown the chicken", "Saute the trinity", "Pour in the stock", "Stir in the rice", "Simmer the pot"],
    &["Brown the chicken", "Stir in the rice", "Simmer the pot"],
    &["Chop the vegetables", "Brown the chicken", "Make a roux", "Saute the trinity", "Pour in the stock", "Stir in the rice", "Simmer the pot"],
];
const DESCRIPTIONS: [&str; 2] = [
    "Red creole jambalaya with tomato sauce and sausage",
    "Brown cajun jambalaya with smoked chicken",
];

/// Variant index (0 standard, 1 simple, 2 complex) of the k-th video in a cluster.
pub fn variant_of(k: usize) -> usize {
    match k {
        0..=6 => 0,
        7..=9 => 1,
        _ => 2,
    }
}

pub struct FixtureVideo {
    pub video_id: String,
    pub outcome: usize,
    pub steps: Vec<&'static str>,
}

pub fn fixture_plan(n: usize) -> Vec<FixtureVideo> {
    (0..n)
        .map(|i| {
            let outcome = i % 2;
            let variant = variant_of(i / 2);
            let table = if outcome == 0 { CREOLE } else { CAJUN };
            FixtureVideo {
                video_id: format!("vid{:02}", i + 1),
                outcome,
                steps: table[variant].to_vec(),
            }
        })
        .collect()
}

fn sentences_from(texts: Vec<String>) -> Vec<Sentence> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Sentence {
            index: i,
            text,
            start_s: i as f64 * SENTENCE_S,
            end_s: i as f64 * SENTENCE_S + SENTENCE_S - 0.5,
        })
        .collect()
}

fn frames_for(video_id: &str, n_sentences: usize) -> Vec<FrameAsset> {
    let end = n_sentences as f64 * SENTENCE_S;
    (0..)
        .map(|k| k as f64 * 2.0)
        .take_while(|t| *t <= end)
        .map(|t| FrameAsset {
            video_id: video_id.to_string(),
            t_s: t,
            uri: format!("frames/{video_id}_{:04}.jpg", t as u64),
        })
        .collect()
}

pub fn fixture_video(i: usize, plan: &FixtureVideo) -> VideoRecord {
    let mut texts = vec![format!("Welcome back, today we make jambalaya number {}.", i + 1)];
    for (j, step) in plan.steps.iter().enumerate() {
        let def = step_def(step);
        let method = def.methods[(i / 2 + j) % 2];
        let mut first = format!("Next we {} [[step:{}]] [[method:{}]]", step.to_lowercase(), step, method);
        if let Some(item) = def.ingredient {
            first.push_str(&format!(" [[ingredient:{item}]]"));
        }
        if let Some(tool) = def.tool {
            first.push_str(&format!(" [[tool:{tool}]]"));
        }
        texts.push(first);
        let mut second = format!("Keep going with this part [[step:{step}]]");
        if (i + j) % 3 != 0 {
            second.push_str(&format!(" [[tip:{}]]", def.tip));
        }
        texts.push(second);
        if j % 2 == 1 {
            texts.push("Let me show you the pot for a second.".to_string());
        }
    }
    texts.push(format!(
        "Here is the finished dish [[outcome]] [[desc:{}]]",
        DESCRIPTIONS[plan.outcome]
    ));
    texts.push("Look at that beautiful result [[outcome]]".to_string());
    texts.push("Thanks for watching.".to_string());
    let sentences = sentences_from(texts);
    let frames = if i % 3 == 0 { Vec::new() } else { frames_for(&plan.video_id, sentences.len()) };
    VideoRecord {
        video_id: plan.video_id.clone(),
        task_name: TASK.to_string(),
        category: "cooking".to_string(),
        degraded: frames.is_empty(),
        frames,
        sentences,
        playback_ref: format!("https://videos.example.org/watch?v={}", plan.video_id),
    }
}

/// The n-video jambalaya corpus (24 in the standard fixture).
pub fn jambalaya_corpus(n: usize) -> Corpus {
    let mut corpus = Corpus::new(TASK);
    for (i, plan) in fixture_plan(n).iter().enumerate() {
        corpus.insert(fixture_video(i, plan)).unwrap();
    }
    corpus
}

pub fn jambalaya_rules() -> Ruleset {
    Ruleset::default().respond(TemplateId::OutcomeCluster, json!({ "clusters": CLUSTER_NAMES }))
}

/// Rule that answers every call mentioning `marker` with unparsable text.
pub fn poison_rule(marker: &str) -> Rule {
    Rule {
        template: "*".into(),
        when: BTreeMap::from([("*".to_string(), marker.to_string())]),
        respond_raw: Some("{\"not\": \"what you asked for\"".into()),
        ..Rule::default()
    }
}

pub fn scripted_gateway(rules: Ruleset) -> Gateway {
    Gateway::new(Arc::new(ScriptedBackend::new(rules)), GatewayConfig::default()).unwrap()
}

/// Wraps a backend and fails with a transport error on one template while armed.
pub struct FailingBackend {
    pub inner: ScriptedBackend,
    pub fail_on: TemplateId,
    pub armed: AtomicBool,
}

impl FailingBackend {
    pub fn new(rules: Ruleset, fail_on: TemplateId) -> Self {
        Self {
            inner: ScriptedBackend::new(rules),
            fail_on,
            armed: AtomicBool::new(true),
        }
    }

    pub fn disarm(&self) {
        self.armed.store(false, Ordering::SeqCst);
    }
}

impl Backend for FailingBackend {
    fn complete(&self, request: &BackendRequest<'_>) -> Result<String, BackendError> {
        if request.call.template == self.fail_on && self.armed.load(Ordering::SeqCst) {
            return Err(BackendError::Transport("connection reset".into()));
        }
        self.inner.complete(request)
    }
}

/// Writes transcripts, frame files and a manifest; returns the manifest path.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> PathBuf {
    let mut entries = Vec::new();
    for v in corpus.videos.values() {
        let tpath = dir.join("transcripts").join(format!("{}.json", v.video_id));
        fs::create_dir_all(tpath.parent().unwrap()).unwrap();
        fs::write(&tpath, serde_json::to_string_pretty(&TranscriptFile::from(v)).unwrap()).unwrap();
        let frames_dir = if v.frames.is_empty() {
            None
        } else {
            let fdir = dir.join("frames").join(&v.video_id);
            fs::create_dir_all(&fdir).unwrap();
            for f in &v.frames {
                fs::write(fdir.join(format!("{}_{:04}.jpg", v.video_id, f.t_s as u64)), b"jpg").unwrap();
            }
            Some(PathBuf::from("frames").join(&v.video_id))
        };
        entries.push(ManifestEntry {
            transcript: PathBuf::from("transcripts").join(format!("{}.json", v.video_id)),
            frames_dir,
            playback_ref: None,
        });
    }
    let manifest = TaskManifest {
        task_name: corpus.task_name.clone(),
        videos: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

pub const DAI_STEP_POOL: [&str; 8] = [
    "Measure the board",
    "Cut the board",
    "Sand the edges",
    "Drill pilot holes",
    "Attach the legs",
    "Apply wood glue",
    "Clamp the joint",
    "Finish the surface",
];

/// A random cluster for approach identification: the ground-truth step
/// sequence per video plus annotated transcripts that encode it.
pub struct DaiCase {
    pub videos: Vec<VideoRecord>,
    pub truth: BTreeMap<String, Vec<String>>,
}

pub fn random_dai_case(seed: u64) -> DaiCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_videos = rng.gen_range(1..=12);
    let n_steps = rng.gen_range(1..=8);
    let pool: Vec<&str> = DAI_STEP_POOL[..n_steps].to_vec();
    let random_seq = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(1..=pool.len());
        let mut picked: Vec<&str> = pool.choose_multiple(rng, len).copied().collect();
        if rng.gen_bool(0.5) {
            picked.sort_by_key(|s| pool.iter().position(|p| p == s));
        }
        picked.into_iter().map(str::to_string).collect()
    };
    // a few base sequences reused across videos so supports exceed one
    let bases: Vec<Vec<String>> = (0..rng.gen_range(1..=4)).map(|_| random_seq(&mut rng)).collect();
    let mut videos = Vec::new();
    let mut truth = BTreeMap::new();
    for v in 0..n_videos {
        let seq = if rng.gen_bool(0.75) {
            bases.choose(&mut rng).unwrap().clone()
        } else {
            random_seq(&mut rng)
        };
        let video_id = format!("case{seed}_v{v:02}");
        let mut texts = vec!["Hi there.".to_string()];
        for step in &seq {
            for _ in 0..rng.gen_range(1..=3) {
                texts.push(format!("Working on it [[step:{step}]]"));
            }
            if rng.gen_bool(0.3) {
                texts.push("Quick aside about my shop.".to_string());
            }
        }
        let sentences = sentences_from(texts);
        videos.push(VideoRecord {
            video_id: video_id.clone(),
            task_name: "Build a table".into(),
            category: "woodworking".into(),
            sentences,
            frames: Vec::new(),
            playback_ref: format!("https://videos.example.org/{video_id}"),
            degraded: true,
        });
        truth.insert(video_id, seq);
    }
    DaiCase { videos, truth }
}

/// Normalized midpoint of each step in `truth`, read off the annotated
/// sentences of the video.
pub fn truth_midpoints(video: &VideoRecord, truth: &[String]) -> Vec<f64> {
    let duration = video.sentences.last().map(|s| s.end_s).unwrap_or(0.0);
    truth
        .iter()
        .map(|step| {
            let tag = format!("[[step:{step}]]");
            let hits: Vec<&Sentence> = video.sentences.iter().filter(|s| s.text.contains(&tag)).collect();
            let (a, b) = (hits.first().unwrap().start_s, hits.last().unwrap().end_s);
            (a + b) / 2.0 / duration
        })
        .collect()
}

pub type OracleApproach = (&'static str, Vec<String>, Vec<String>);

/// Brute-force approach selection by enumerating every distinct sequence.
pub fn oracle_approaches(
    truth: &BTreeMap<String, Vec<String>>,
    midpoints: &BTreeMap<String, Vec<f64>>,
    min_support: usize,
) -> Vec<OracleApproach> {
    let ids: Vec<&String> = truth.keys().filter(|id| !truth[*id].is_empty()).collect();
    let mut candidates: Vec<&Vec<String>> = Vec::new();
    for id in &ids {
        if !candidates.contains(&&truth[*id]) {
            candidates.push(&truth[*id]);
        }
    }
    let support = |seq: &Vec<String>| -> Vec<String> {
        ids.iter().filter(|id| truth[**id] == *seq).map(|id| id.to_string()).collect()
    };
    let mut ranked = candidates.clone();
    ranked.sort_by(|a, b| {
        support(b)
            .len()
            .cmp(&support(a).len())
            .then(a.len().cmp(&b.len()))
            .then(a.cmp(b))
    });
    let modal = ranked[0];
    let mut standard: (Vec<String>, Vec<String>) = (modal.clone(), support(modal));

    if standard.1.len() == 1 && ids.len() > 1 {
        let mut universe: Vec<&String> = ids.iter().flat_map(|id| truth[*id].iter()).collect();
        universe.sort();
        universe.dedup();
        let mut common: Vec<(f64, &String)> = Vec::new();
        for step in universe {
            let containing = ids.iter().filter(|id| truth[**id].contains(step)).count();
            if 2 * containing <= ids.len() {
                continue;
            }
            let (mut sum, mut k) = (0.0, 0usize);
            for id in &ids {
                for (s, m) in truth[*id].iter().zip(&midpoints[*id]) {
                    if s == step {
                        sum += m;
                        k += 1;
                    }
                }
            }
            common.push((sum / k as f64, step));
        }
        common.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        let steps: Vec<String> = common.iter().map(|(_, s)| s.to_string()).collect();
        let holders: Vec<String> = ids
            .iter()
            .filter(|id| steps.iter().all(|s| truth[**id].contains(s)))
            .map(|id| id.to_string())
            .collect();
        if !steps.is_empty() && !holders.is_empty() {
            standard = (steps, holders);
        }
    }
    let std_len = standard.0.len();
    let eligible: Vec<&Vec<String>> = candidates
        .iter()
        .copied()
        .filter(|c| support(c).len() >= min_support && **c != standard.0)
        .collect();
    let mut shorter: Vec<&Vec<String>> = eligible.iter().copied().filter(|c| c.len() < std_len).collect();
    shorter.sort_by(|a, b| a.len().cmp(&b.len()).then(support(b).len().cmp(&support(a).len())).then(a.cmp(b)));
    let mut longer: Vec<&Vec<String>> = eligible.iter().copied().filter(|c| c.len() > std_len).collect();
    longer.sort_by(|a, b| b.len().cmp(&a.len()).then(support(b).len().cmp(&support(a).len())).then(a.cmp(b)));

    let mut out = vec![("STANDARD", standard.0, standard.1)];
    if let Some(s) = shorter.first() {
        out.push(("SIMPLE", (*s).clone(), support(s)));
    }
    if let Some(c) = longer.first() {
        out.push(("COMPLEX", (*c).clone(), support(c)));
    }
    out
}

/// Runs one random cluster through the scripted gateway and compares the
/// result with the oracle. Returns the regimes the case exercised.
pub fn check_dai_seed(seed: u64) -> Result<Vec<&'static str>, String> {
    use vmx_core::dai::{default_min_support, run_cluster, ApproachKind};

    let case = random_dai_case(seed);
    let gw = scripted_gateway(Ruleset::default());
    let refs: Vec<&VideoRecord> = case.videos.iter().collect();
    let mut flags = Vec::new();
    let min_support = default_min_support(refs.len());
    let got = run_cluster(&gw, "cluster", &refs, Some(min_support), &mut flags).map_err(|e| e.to_string())?;
    if !flags.is_empty() {
        return Err(format!("seed {seed}: unexpected flags {flags:?}"));
    }
    for w in got.taxonomy.history.windows(2) {
        if !w[1].is_superset_of(&w[0]) {
            return Err(format!("seed {seed}: taxonomy lost a step"));
        }
    }
    let sequences: BTreeMap<String, Vec<String>> = got
        .spans
        .iter()
        .map(|(id, spans)| (id.clone(), spans.iter().map(|s| s.step_name.clone()).collect()))
        .collect();
    if sequences != case.truth {
        return Err(format!("seed {seed}: grounded sequences differ from the fixture"));
    }
    let midpoints: BTreeMap<String, Vec<f64>> = case
        .videos
        .iter()
        .map(|v| (v.video_id.clone(), truth_midpoints(v, &case.truth[&v.video_id])))
        .collect();
    let want = oracle_approaches(&case.truth, &midpoints, min_support);
    let have: Vec<OracleApproach> = got
        .approaches
        .iter()
        .map(|a| {
            let kind = match a.kind {
                ApproachKind::Standard => "STANDARD",
                ApproachKind::Simple => "SIMPLE",
                ApproachKind::Complex => "COMPLEX",
            };
            (kind, a.sequence.steps.clone(), a.supporting_video_ids.iter().cloned().collect())
        })
        .collect();
    if have != want {
        return Err(format!("seed {seed}: got {have:?}, oracle {want:?}"));
    }
    let mut regimes: Vec<&'static str> = have.iter().map(|(k, _, _)| *k).collect();
    if case.videos.len() == 1 {
        regimes.push("single video");
    }
    if !case.truth.values().any(|t| *t == have[0].1) {
        regimes.push("composite");
    }
    Ok(regimes)
}
