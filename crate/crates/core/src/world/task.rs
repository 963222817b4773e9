//! Question/answer tasks over scenes.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Color, Scene, SceneObject, Shape, MAX_DEPTH_LAYERS};
use crate::error::{Error, Result};
use crate::grammar::{ExpertKind, TaskConstraintRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DepthOrder,
    Count,
    ContourClass,
    TextureMatch,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::DepthOrder,
        TaskKind::Count,
        TaskKind::ContourClass,
        TaskKind::TextureMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::DepthOrder => "depth_order",
            TaskKind::Count => "count",
            TaskKind::ContourClass => "contour_class",
            TaskKind::TextureMatch => "texture_match",
        }
    }

    /// Minimal expert set whose features determine the answer.
    pub fn required_experts(self) -> BTreeSet<ExpertKind> {
        use ExpertKind::*;
        match self {
            TaskKind::DepthOrder => [Depth, Seg].into(),
            TaskKind::Count => [Seg].into(),
            TaskKind::ContourClass => [Edge].into(),
            TaskKind::TextureMatch => [Patch].into(),
        }
    }

    /// Extras a task-specific chain may add on top of the required set.
    pub fn allowed_extras(self) -> BTreeSet<ExpertKind> {
        use ExpertKind::*;
        match self {
            TaskKind::DepthOrder => [Edge].into(),
            TaskKind::Count => [Depth, Edge].into(),
            TaskKind::ContourClass => [Seg].into(),
            TaskKind::TextureMatch => [Seg].into(),
        }
    }

    pub fn rule(self) -> TaskConstraintRule {
        TaskConstraintRule {
            task_kind: self,
            required_experts: self.required_experts(),
            allowed_extras: self.allowed_extras(),
        }
    }

    /// Words of the question templates, for vocabulary construction.
    pub fn template_words() -> &'static [&'static str] {
        &[
            "how", "many", "objects", "are", "there", "?", "which", "is", "closer", ":", "or",
            "what", "shape", "the", "object", "do", "two", "share", "a", "color",
        ]
    }

    /// Every possible answer string, for vocabulary construction.
    pub fn answer_words() -> Vec<&'static str> {
        let mut out = vec!["1", "2", "3", "4", "5", "6", "yes", "no"];
        out.extend(Color::ALL.map(Color::name));
        out.extend(Shape::ALL.map(Shape::name));
        out
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSample {
    pub scene: Scene,
    pub task_kind: TaskKind,
    pub question: String,
    pub answer: String,
    pub rule: TaskConstraintRule,
}

fn unsupported(kind: TaskKind, reason: impl Into<String>) -> Error {
    Error::UnsupportedTask {
        kind: kind.name().into(),
        reason: reason.into(),
    }
}

/// Builds the question and answer for `kind` on `scene`.
///
/// `rng_seed` only picks among equivalent phrasings (which object pair to ask
/// about, mention order); the answer is a deterministic function of the scene.
pub fn make_task(scene: &Scene, kind: TaskKind, rng_seed: u64) -> Result<TaskSample> {
    let areas = scene.visible_areas()?;
    let visible: Vec<usize> = (0..scene.objects.len()).filter(|&i| areas[i] > 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (question, answer) = match kind {
        TaskKind::Count => {
            if visible.is_empty() {
                return Err(unsupported(kind, "no visible objects"));
            }
            ("how many objects are there ?".to_string(), visible.len().to_string())
        }
        TaskKind::DepthOrder => {
            let unique: Vec<usize> = visible
                .iter()
                .copied()
                .filter(|&i| {
                    visible
                        .iter()
                        .filter(|&&j| scene.objects[j].color == scene.objects[i].color)
                        .count()
                        == 1
                })
                .collect();
            let mut pairs = Vec::new();
            for (a, &i) in unique.iter().enumerate() {
                for &j in &unique[a + 1..] {
                    if scene.objects[i].depth_layer != scene.objects[j].depth_layer {
                        pairs.push((i, j));
                    }
                }
            }
            let &(i, j) = pairs
                .choose(&mut rng)
                .ok_or_else(|| unsupported(kind, "needs two uniquely colored objects on different layers"))?;
            let (first, second) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            let (a, b) = (&scene.objects[first], &scene.objects[second]);
            let nearer = if a.depth_layer < b.depth_layer { a } else { b };
            (
                format!("which is closer : {} or {} ?", a.color, b.color),
                nearer.color.name().to_string(),
            )
        }
        TaskKind::ContourClass => {
            if visible.len() != 1 {
                return Err(unsupported(kind, "needs exactly one visible object"));
            }
            (
                "what shape is the object ?".to_string(),
                scene.objects[visible[0]].shape.name().to_string(),
            )
        }
        TaskKind::TextureMatch => {
            if visible.len() != 2 {
                return Err(unsupported(kind, "needs exactly two visible objects"));
            }
            let same = scene.objects[visible[0]].color == scene.objects[visible[1]].color;
            (
                "do the two objects share a color ?".to_string(),
                if same { "yes" } else { "no" }.to_string(),
            )
        }
    };
    Ok(TaskSample {
        scene: scene.clone(),
        task_kind: kind,
        question,
        answer,
        rule: kind.rule(),
    })
}

/// Minimum visible pixels per object in generated scenes.
const MIN_VISIBLE: usize = 8;

fn random_object(rng: &mut ChaCha8Rng, g: usize, radius: (usize, usize)) -> SceneObject {
    let r = rng.random_range(radius.0..=radius.1);
    SceneObject {
        shape: Shape::ALL[rng.random_range(0..3)],
        color: Color::ALL[rng.random_range(0..6)],
        center: (rng.random_range(r..g - r), rng.random_range(r..g - r)),
        radius: r,
        depth_layer: rng.random_range(0..MAX_DEPTH_LAYERS),
    }
}

/// Samples a scene that supports `kind`, then the task on it.
///
/// Rejection-samples until every object keeps at least a few visible pixels
/// and the task's preconditions hold; answers are balanced where the task
/// has a binary outcome.
pub fn generate_task(kind: TaskKind, grid_size: usize, seed: u64) -> TaskSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = match kind {
            TaskKind::Count => rng.random_range(1..=5),
            TaskKind::DepthOrder => rng.random_range(2..=3),
            TaskKind::ContourClass => 1,
            TaskKind::TextureMatch => 2,
        };
        let radius = if kind == TaskKind::Count { (3, 5) } else { (4, 7) };
        let mut objects: Vec<SceneObject> =
            (0..n).map(|_| random_object(&mut rng, grid_size, radius)).collect();
        if kind == TaskKind::TextureMatch {
            let want_same = rng.random_bool(0.5);
            if want_same {
                objects[1].color = objects[0].color;
            } else if objects[1].color == objects[0].color {
                continue;
            }
        }
        let scene = Scene {
            grid_size,
            objects,
            seed,
        };
        let Ok(areas) = scene.visible_areas() else {
            continue;
        };
        if areas.iter().any(|&a| a < MIN_VISIBLE) {
            continue;
        }
        if let Ok(task) = make_task(&scene, kind, rng.random()) {
            return task;
        }
    }
}
