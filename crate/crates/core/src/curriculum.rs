//! Training corpora for both stages.
//!
//! Stage 1 places expert queries in the input context ahead of the question
//! so the model learns what each expert's observation slots should encode.
//! Stage 2 gives every task three alternative chains, one per coverage
//! category, over which the training loss takes its minimum.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{parse_chain, validate_chain, ExpertKind, ReasoningChain, TaskConstraintRule};
use crate::world::seed::derive;
use crate::world::{expert_features, generate_task, render_scene, ExpertFeatureBundle, TaskKind, TaskSample};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_STAGE1: u64 = 3;
const STREAM_STAGE2: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathCategory {
    Full,
    TaskSpecific,
    Minimal,
}

impl PathCategory {
    pub const ALL: [PathCategory; 3] = [PathCategory::Full, PathCategory::TaskSpecific, PathCategory::Minimal];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageMix {
    pub full: f64,
    pub task_specific: f64,
    pub minimal: f64,
}

impl Default for CoverageMix {
    fn default() -> Self {
        Self {
            full: 0.20,
            task_specific: 0.60,
            minimal: 0.20,
        }
    }
}

impl CoverageMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.full, self.task_specific, self.minimal];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("coverage mix must be nonnegative and sum to 1: {self:?}")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> PathCategory {
        let u: f64 = rng.random();
        if u < self.full {
            PathCategory::Full
        } else if u < self.full + self.task_specific {
            PathCategory::TaskSpecific
        } else {
            PathCategory::Minimal
        }
    }
}

/// Seed of the `index`-th scene in a split; the two splits draw from
/// separate streams so no scene is shared.
pub fn scene_seed(root: u64, split: Split, index: u64) -> u64 {
    let stream = match split {
        Split::Train => STREAM_TRAIN,
        Split::Test => STREAM_TEST,
    };
    derive(root, stream, index)
}

/// Task kinds cycle so every corpus is balanced across kinds.
fn task_for(root: u64, split: Split, index: u64) -> TaskSample {
    let kind = TaskKind::ALL[(index % TaskKind::ALL.len() as u64) as usize];
    generate_task(kind, crate::world::DEFAULT_GRID_SIZE, scene_seed(root, split, index))
}

/// Words the think templates can emit.
pub fn think_words() -> &'static [&'static str] {
    &["compare", "and", "count", "the", "objects", "find", "shape", "colors", "ok"]
}

fn think_intro(task: &TaskSample) -> String {
    match task.task_kind {
        TaskKind::DepthOrder => {
            let w: Vec<&str> = task.question.split(' ').collect();
            format!("compare {} and {}", w[4], w[6])
        }
        TaskKind::Count => "count the objects".into(),
        TaskKind::ContourClass => "find the shape".into(),
        TaskKind::TextureMatch => "compare the colors".into(),
    }
}

/// A think-then-answer chain querying `experts` in canonical order.
pub fn templated_chain(task: &TaskSample, experts: &BTreeSet<ExpertKind>, slot_count: usize) -> Result<ReasoningChain> {
    let mut b = ReasoningChain::builder(slot_count).think().think_text(&think_intro(task));
    for &e in experts {
        b = b.think_query(e).think_text("ok");
    }
    b.answer(&task.answer).build()
}

#[derive(Clone, Debug)]
pub struct Stage1Sample {
    pub id: u64,
    pub task: TaskSample,
    pub context_chain: ReasoningChain,
    pub targets: ExpertFeatureBundle,
}

impl Stage1Sample {
    pub fn question(&self) -> &str {
        &self.task.question
    }

    pub fn answer(&self) -> &str {
        &self.task.answer
    }
}

fn features(task: &TaskSample) -> Result<ExpertFeatureBundle> {
    expert_features(&render_scene(&task.scene)?, &task.scene)
}

/// Every non-empty expert subset, in a fixed order.
fn nonempty_subsets() -> Vec<BTreeSet<ExpertKind>> {
    (1u32..16)
        .map(|mask| {
            ExpertKind::ALL
                .into_iter()
                .filter(|e| mask & (1 << e.index()) != 0)
                .collect()
        })
        .collect()
}

pub fn build_stage1_corpus(n: usize, seed: u64, slot_count: usize) -> Result<Vec<Stage1Sample>> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let subsets = nonempty_subsets();
    (0..n as u64)
        .map(|i| {
            let task = task_for(seed, Split::Train, i);
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, STREAM_STAGE1, i));
            let subset = subsets.choose(&mut rng).expect("fifteen subsets");
            let mut b = ReasoningChain::builder(slot_count);
            for &e in subset {
                b = b.context_query(e);
            }
            let context_chain = b.answer(&task.answer).build()?;
            let targets = features(&task)?;
            Ok(Stage1Sample {
                id: i,
                task,
                context_chain,
                targets,
            })
        })
        .collect()
}

/// Alternative chains for one task, primary path first.
#[derive(Clone, Debug)]
pub struct PathCandidateSet {
    pub id: u64,
    pub split: Split,
    pub task: TaskSample,
    pub paths: Vec<ReasoningChain>,
    pub categories: Vec<PathCategory>,
    pub targets: ExpertFeatureBundle,
}

impl PathCandidateSet {
    pub fn primary(&self) -> (&ReasoningChain, PathCategory) {
        (&self.paths[0], self.categories[0])
    }
}

/// Constraint rule a path of `category` must satisfy.
pub fn category_rule(rule: &TaskConstraintRule, category: PathCategory) -> TaskConstraintRule {
    match category {
        PathCategory::Full => rule.permissive(),
        PathCategory::TaskSpecific => rule.clone(),
        PathCategory::Minimal => rule.strict(),
    }
}

fn category_experts(task: &TaskSample, category: PathCategory, rng: &mut ChaCha8Rng) -> BTreeSet<ExpertKind> {
    let required = task.rule.required_experts.clone();
    match category {
        PathCategory::Full => ExpertKind::ALL.into(),
        PathCategory::Minimal => required,
        PathCategory::TaskSpecific => {
            let extras: Vec<ExpertKind> = task.rule.allowed_extras.iter().copied().collect();
            let mut set = required;
            if let Some(&e) = extras.choose(rng) {
                set.insert(e);
            }
            set
        }
    }
}

fn candidate_set(task: TaskSample, id: u64, split: Split, category: PathCategory, rng: &mut ChaCha8Rng, slot_count: usize) -> Result<PathCandidateSet> {
    let mut categories = vec![category];
    categories.extend(PathCategory::ALL.into_iter().filter(|c| *c != category));
    let mut paths = Vec::with_capacity(3);
    for &c in &categories {
        let chain = templated_chain(&task, &category_experts(&task, c, rng), slot_count)?;
        let report = validate_chain(&chain, &category_rule(&task.rule, c));
        if !report.valid {
            return Err(Error::MalformedChain {
                position: 0,
                reason: format!("generated {c:?} path violates its rule: {report:?}"),
            });
        }
        paths.push(chain);
    }
    let targets = features(&task)?;
    Ok(PathCandidateSet {
        id,
        split,
        task,
        paths,
        categories,
        targets,
    })
}

pub fn build_stage2_corpus(n: usize, mix: CoverageMix, seed: u64, slot_count: usize) -> Result<Vec<PathCandidateSet>> {
    build_stage2_split(n, mix, seed, slot_count, Split::Train)
}

/// Stage-2 style candidate sets for either split; the test split supplies
/// evaluation tasks on scenes disjoint from training.
pub fn build_stage2_split(n: usize, mix: CoverageMix, seed: u64, slot_count: usize, split: Split) -> Result<Vec<PathCandidateSet>> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    mix.validate()?;
    (0..n as u64)
        .map(|i| {
            let task = task_for(seed, split, i);
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed ^ split as u64, STREAM_STAGE2, i));
            let category = mix.sample(&mut rng);
            candidate_set(task, i, split, category, &mut rng, slot_count)
        })
        .collect()
}

/// Evaluation tasks drawn from the test split.
pub fn test_suite(n: usize, seed: u64) -> Vec<TaskSample> {
    (0..n as u64).map(|i| task_for(seed, Split::Test, i)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    /// Primary-path categories.
    pub categories: BTreeMap<PathCategory, usize>,
    /// Primary paths querying each expert at least once.
    pub expert_usage: BTreeMap<ExpertKind, usize>,
    pub avg_decision_tokens: f64,
}

pub fn corpus_stats(corpus: &[PathCandidateSet]) -> CorpusStats {
    let mut s = CorpusStats {
        samples: corpus.len(),
        ..Default::default()
    };
    let mut decisions = 0usize;
    for set in corpus {
        let (chain, cat) = set.primary();
        *s.categories.entry(cat).or_insert(0) += 1;
        for e in chain.experts() {
            *s.expert_usage.entry(e).or_insert(0) += 1;
        }
        decisions += chain.query_count();
    }
    if !corpus.is_empty() {
        s.avg_decision_tokens = decisions as f64 / corpus.len() as f64;
    }
    s
}

/// One line of a persisted corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: u64,
    pub split: Split,
    pub task: TaskSample,
    pub paths: Vec<String>,
    /// Empty for stage-1 records.
    pub categories: Vec<PathCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub stage: u8,
    pub seed: u64,
    pub slot_count: usize,
    pub mix: Option<CoverageMix>,
    pub count: usize,
    pub stats: Option<CorpusStats>,
    pub config_hash: String,
}

impl From<&Stage1Sample> for CorpusRecord {
    fn from(s: &Stage1Sample) -> Self {
        Self {
            id: s.id,
            split: Split::Train,
            task: s.task.clone(),
            paths: vec![s.context_chain.serialize()],
            categories: Vec::new(),
        }
    }
}

impl From<&PathCandidateSet> for CorpusRecord {
    fn from(s: &PathCandidateSet) -> Self {
        Self {
            id: s.id,
            split: s.split,
            task: s.task.clone(),
            paths: s.paths.iter().map(ReasoningChain::serialize).collect(),
            categories: s.categories.clone(),
        }
    }
}

/// Writes `records.jsonl` and `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, records: &[CorpusRecord], manifest: &CorpusManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("records.jsonl"))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<CorpusRecord>)> {
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| Error::DataSchemaMismatch(format!("manifest: {e}")))?;
    if manifest.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(Error::DataSchemaMismatch(format!(
            "corpus schema {} but this build reads {CORPUS_SCHEMA_VERSION}",
            manifest.schema_version
        )));
    }
    let mut records = Vec::with_capacity(manifest.count);
    for (i, line) in BufReader::new(fs::File::open(dir.join("records.jsonl"))?).lines().enumerate() {
        let r: CorpusRecord = serde_json::from_str(&line?)
            .map_err(|e| Error::DataSchemaMismatch(format!("record {i}: {e}")))?;
        records.push(r);
    }
    if records.len() != manifest.count {
        return Err(Error::DataSchemaMismatch(format!(
            "manifest lists {} records, file has {}",
            manifest.count,
            records.len()
        )));
    }
    Ok((manifest, records))
}

/// Rebuilds stage-1 samples from records, recomputing expert targets.
pub fn stage1_from_records(records: &[CorpusRecord], slot_count: usize) -> Result<Vec<Stage1Sample>> {
    records
        .iter()
        .map(|r| {
            let [chain] = r.paths.as_slice() else {
                return Err(Error::DataSchemaMismatch(format!("record {} is not a stage-1 record", r.id)));
            };
            let context_chain = parse_chain(chain, slot_count)?;
            if context_chain.has_think() || context_chain.context_len() == 0 {
                return Err(Error::DataSchemaMismatch(format!("record {} lacks a context-only chain", r.id)));
            }
            Ok(Stage1Sample {
                id: r.id,
                task: r.task.clone(),
                context_chain,
                targets: features(&r.task)?,
            })
        })
        .collect()
}

pub fn stage2_from_records(records: &[CorpusRecord], slot_count: usize) -> Result<Vec<PathCandidateSet>> {
    records
        .iter()
        .map(|r| {
            if r.paths.len() != r.categories.len() || r.paths.len() < 2 {
                return Err(Error::DataSchemaMismatch(format!("record {} is not a stage-2 record", r.id)));
            }
            let paths = r
                .paths
                .iter()
                .map(|p| parse_chain(p, slot_count))
                .collect::<Result<Vec<_>>>()?;
            Ok(PathCandidateSet {
                id: r.id,
                split: r.split,
                task: r.task.clone(),
                paths,
                categories: r.categories.clone(),
                targets: features(&r.task)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::query_signature;

    #[test]
    fn stage1_template_shape() {
        let c = build_stage1_corpus(1, 7, 4).unwrap();
        let text = c[0].context_chain.serialize();
        assert!(text.starts_with("<query_"));
        assert!(text.ends_with("</answer>"));
        assert!(!c[0].context_chain.has_think());
        let first = c[0].context_chain.spans().next().unwrap().expert;
        assert!(text.contains(&format!("{} {}", first.decision_token(), [first.pad_token(); 4].join(" "))));
    }

    #[test]
    fn deterministic_corpora() {
        let a: Vec<_> = build_stage2_corpus(20, CoverageMix::default(), 3, 4).unwrap().iter().map(CorpusRecord::from).collect();
        let b: Vec<_> = build_stage2_corpus(20, CoverageMix::default(), 3, 4).unwrap().iter().map(CorpusRecord::from).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn minimal_depth_order_path() {
        let corpus = build_stage2_corpus(40, CoverageMix::default(), 5, 4).unwrap();
        for set in corpus.iter().filter(|s| s.task.task_kind == TaskKind::DepthOrder) {
            let i = set.categories.iter().position(|c| *c == PathCategory::Minimal).unwrap();
            assert_eq!(set.paths[i].experts(), [ExpertKind::Depth, ExpertKind::Seg].into());
        }
    }

    #[test]
    fn every_set_has_a_minimal_path() {
        for set in build_stage2_corpus(100, CoverageMix::default(), 9, 4).unwrap() {
            assert_eq!(set.paths.len(), 3);
            let minimal = set
                .paths
                .iter()
                .filter(|p| query_signature(p).keys().copied().collect::<BTreeSet<_>>() == set.task.rule.required_experts)
                .count();
            assert!(minimal >= 1);
            for p in &set.paths {
                assert_eq!(&parse_chain(&p.serialize(), 4).unwrap(), p);
            }
        }
    }

    #[test]
    fn stats_by_hand() {
        assert_eq!(corpus_stats(&[]), CorpusStats::default());
        let full = CoverageMix {
            full: 1.0,
            task_specific: 0.0,
            minimal: 0.0,
        };
        let s = corpus_stats(&build_stage2_corpus(12, full, 1, 4).unwrap());
        assert_eq!(s.avg_decision_tokens, 4.0);
        assert_eq!(s.categories[&PathCategory::Full], 12);
        assert_eq!(s.expert_usage[&ExpertKind::Patch], 12);
    }

    #[test]
    fn mix_must_sum_to_one() {
        let bad = CoverageMix {
            full: 0.5,
            task_specific: 0.5,
            minimal: 0.5,
        };
        assert!(build_stage2_corpus(1, bad, 0, 4).is_err());
        assert!(build_stage1_corpus(0, 0, 4).is_err());
    }

    #[test]
    fn splits_do_not_share_scenes() {
        let train: BTreeSet<_> = (0..300).map(|i| format!("{:?}", task_for(4, Split::Train, i).scene.objects)).collect();
        for i in 0..300 {
            assert!(!train.contains(&format!("{:?}", task_for(4, Split::Test, i).scene.objects)));
        }
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = build_stage2_corpus(6, CoverageMix::default(), 2, 4).unwrap();
        let records: Vec<CorpusRecord> = corpus.iter().map(CorpusRecord::from).collect();
        let manifest = CorpusManifest {
            schema_version: CORPUS_SCHEMA_VERSION,
            stage: 2,
            seed: 2,
            slot_count: 4,
            mix: Some(CoverageMix::default()),
            count: records.len(),
            stats: Some(corpus_stats(&corpus)),
            config_hash: "x".into(),
        };
        write_corpus(dir.path(), &records, &manifest).unwrap();
        let (m, back) = read_corpus(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back, records);
        let sets = stage2_from_records(&back, 4).unwrap();
        assert_eq!(sets[3].paths, corpus[3].paths);
    }
}
