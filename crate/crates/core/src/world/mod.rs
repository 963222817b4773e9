//! Procedural scenes, synthetic experts and question/answer tasks.

mod experts;
mod scene;
pub mod seed;
mod task;

pub use experts::{
    expert_call_count, expert_features, patch_projection, region_boundary, Expert,
    ExpertFeatureBundle, SegMask, SyntheticExperts, COLOR_BINS, PATCH_DIM, PATCH_GRID,
};
pub use scene::{
    render_scene, Color, Image, Scene, SceneObject, Shape, DEFAULT_GRID_SIZE, MAX_DEPTH_LAYERS,
    MAX_OBJECTS,
};
pub use task::{generate_task, make_task, TaskKind, TaskSample};
