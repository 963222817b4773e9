//! Deterministic synthetic experts.
//!
//! Each expert is a pure function of the rendered scene with the output
//! shape the projection heads are trained against. They stand in for frozen
//! vision models; anything implementing [`Expert`] can replace them.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{render_scene, Color, Image, Scene, MAX_DEPTH_LAYERS};
use crate::error::{Error, Result};

/// Patches per side of the patch-embedding grid.
pub const PATCH_GRID: usize = 4;
pub const PATCH_DIM: usize = 16;
/// Background plus six colors.
pub const COLOR_BINS: usize = 7;
const PATCH_PROJECTION_SEED: u64 = 0x0DD5_EED5;

thread_local! {
    static EXPERT_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of expert evaluations made on the current thread.
///
/// Inference must never move this counter.
pub fn expert_call_count() -> u64 {
    EXPERT_CALLS.with(|c| c.get())
}

/// One visible object's segmentation mask with its color class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMask {
    pub color: Color,
    pub mask: Vec<f32>,
}

impl SegMask {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&v| v > 0.5).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFeatureBundle {
    pub grid_size: usize,
    /// One mask per visible object, in scene order.
    pub seg: Vec<SegMask>,
    /// `1 - layer / 4` on object pixels, 0 on background.
    pub depth: Vec<f32>,
    /// 1 on the boundary of the object union, else 0.
    pub edge: Vec<f32>,
    /// `PATCH_GRID²` embeddings of dimension `PATCH_DIM`, row-major.
    pub patch: Vec<Vec<f32>>,
}

/// Frozen-expert interface.
pub trait Expert {
    fn features(&self, image: &Image, scene: &Scene) -> Result<ExpertFeatureBundle>;
}

/// The built-in synthetic oracle.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticExperts;

impl Expert for SyntheticExperts {
    fn features(&self, image: &Image, scene: &Scene) -> Result<ExpertFeatureBundle> {
        expert_features(image, scene)
    }
}

/// Fixed random map from a normalized color histogram to a patch embedding,
/// `COLOR_BINS × PATCH_DIM`, row-major.
pub fn patch_projection() -> &'static [f32] {
    use std::sync::OnceLock;
    static MATRIX: OnceLock<Vec<f32>> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PATCH_PROJECTION_SEED);
        (0..COLOR_BINS * PATCH_DIM)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect()
    })
}

/// Boundary of a binary region: member pixels with a 4-neighbour outside it
/// (the image border counts as outside).
pub fn region_boundary(region: &[bool], g: usize) -> Vec<bool> {
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < g && (y as usize) < g && region[y as usize * g + x as usize]
    };
    let mut out = vec![false; g * g];
    for y in 0..g as isize {
        for x in 0..g as isize {
            if inside(x, y)
                && !(inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1))
            {
                out[y as usize * g + x as usize] = true;
            }
        }
    }
    out
}

pub fn expert_features(image: &Image, scene: &Scene) -> Result<ExpertFeatureBundle> {
    EXPERT_CALLS.with(|c| c.set(c.get() + 1));
    let rendered = render_scene(scene)?;
    if rendered != *image {
        return Err(Error::InvalidScene("image is not the rendering of the scene".into()));
    }
    let g = scene.grid_size;
    let owners = scene.owners()?;

    let mut seg = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        let mask: Vec<f32> = owners
            .iter()
            .map(|&w| if w == Some(i) { 1.0 } else { 0.0 })
            .collect();
        if mask.iter().any(|&v| v > 0.0) {
            seg.push(SegMask { color: o.color, mask });
        }
    }

    let depth = owners
        .iter()
        .map(|w| match w {
            Some(i) => 1.0 - scene.objects[*i].depth_layer as f32 / MAX_DEPTH_LAYERS as f32,
            None => 0.0,
        })
        .collect();

    let union: Vec<bool> = owners.iter().map(Option::is_some).collect();
    let edge = region_boundary(&union, g)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();

    let proj = patch_projection();
    let cell = g / PATCH_GRID;
    let mut patch = Vec::with_capacity(PATCH_GRID * PATCH_GRID);
    for py in 0..PATCH_GRID {
        for px in 0..PATCH_GRID {
            let mut hist = [0f32; COLOR_BINS];
            for y in py * cell..(py + 1) * cell {
                for x in px * cell..(px + 1) * cell {
                    hist[image.get(x, y) as usize] += 1.0;
                }
            }
            let total = (cell * cell) as f32;
            let emb = (0..PATCH_DIM)
                .map(|j| {
                    (0..COLOR_BINS)
                        .map(|b| hist[b] / total * proj[b * PATCH_DIM + j])
                        .sum()
                })
                .collect();
            patch.push(emb);
        }
    }

    Ok(ExpertFeatureBundle {
        grid_size: g,
        seg,
        depth,
        edge,
        patch,
    })
}

#[cfg(test)]
mod tests {
    use super::super::scene::{SceneObject, Shape};
    use super::*;

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene {
            grid_size: 32,
            objects,
            seed: 3,
        }
    }

    fn obj(shape: Shape, color: Color, c: (usize, usize), r: usize, layer: u32) -> SceneObject {
        SceneObject {
            shape,
            color,
            center: c,
            radius: r,
            depth_layer: layer,
        }
    }

    #[test]
    fn single_square_mask() {
        let s = scene(vec![obj(Shape::Square, Color::Green, (10, 20), 3, 2)]);
        let img = render_scene(&s).unwrap();
        let b = expert_features(&img, &s).unwrap();
        assert_eq!(b.seg.len(), 1);
        for y in 0..32 {
            for x in 0..32 {
                let inside = (7..=13).contains(&x) && (17..=23).contains(&y);
                assert_eq!(b.seg[0].mask[y * 32 + x], if inside { 1.0 } else { 0.0 });
                assert_eq!(b.depth[y * 32 + x], if inside { 0.5 } else { 0.0 });
            }
        }
        // 7x7 square: 49 pixels, 25 interior
        assert_eq!(b.edge.iter().filter(|&&e| e > 0.0).count(), 49 - 25);
    }

    #[test]
    fn empty_scene_features() {
        let s = scene(vec![]);
        let img = render_scene(&s).unwrap();
        let b = expert_features(&img, &s).unwrap();
        assert!(b.seg.is_empty());
        assert!(b.depth.iter().all(|&v| v == 0.0));
        assert!(b.edge.iter().all(|&v| v == 0.0));
        assert_eq!(b.patch.len(), PATCH_GRID * PATCH_GRID);
        assert!(b.patch.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_areas_sum_to_foreground() {
        let s = scene(vec![
            obj(Shape::Circle, Color::Red, (12, 12), 6, 0),
            obj(Shape::Triangle, Color::Blue, (17, 15), 6, 1),
        ]);
        let img = render_scene(&s).unwrap();
        let b = expert_features(&img, &s).unwrap();
        let area: usize = b.seg.iter().map(SegMask::area).sum();
        let foreground = img.pixels.iter().filter(|&&p| p != 0).count();
        assert_eq!(area, foreground);
        // near object is untouched, far one loses the overlap
        assert_eq!(b.seg[0].area(), 113);
        assert!(b.seg[1].area() < 85, "triangle of radius 6 covers 85 pixels");
    }

    #[test]
    fn rejects_foreign_image() {
        let s = scene(vec![obj(Shape::Circle, Color::Red, (12, 12), 6, 0)]);
        let mut img = render_scene(&s).unwrap();
        img.pixels[0] = 3;
        assert!(expert_features(&img, &s).is_err());
    }

    #[test]
    fn counter_tracks_calls() {
        let s = scene(vec![]);
        let img = render_scene(&s).unwrap();
        let before = expert_call_count();
        SyntheticExperts.features(&img, &s).unwrap();
        expert_features(&img, &s).unwrap();
        assert_eq!(expert_call_count(), before + 2);
    }
}
