//! Procedural scenes of flat shapes on a square grid.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID_SIZE: usize = 32;
pub const MAX_OBJECTS: usize = 6;
/// Layers `0..MAX_DEPTH_LAYERS` are drawable; layer `k` has depth `1 - k / 4`.
pub const MAX_DEPTH_LAYERS: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the pixel offset `(dx, dy)` from the center is covered.
    ///
    /// Triangles point up: apex at `dy = -r`, base of width `2r + 1` at `dy = r`.
    pub fn covers(self, dx: i32, dy: i32, r: i32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    /// Pixel value in a rendered image; 0 is background.
    pub fn index(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub center: (usize, usize),
    pub radius: usize,
    pub depth_layer: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub grid_size: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let g = self.grid_size;
        if g == 0 {
            return Err(Error::InvalidScene("grid size must be positive".into()));
        }
        if self.objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidScene(format!(
                "{} objects exceeds the maximum of {MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let (x, y) = o.center;
            if x < o.radius || y < o.radius || x + o.radius >= g || y + o.radius >= g {
                return Err(Error::InvalidScene(format!("object {i} does not fit the grid")));
            }
            if o.depth_layer >= MAX_DEPTH_LAYERS {
                return Err(Error::InvalidScene(format!(
                    "object {i} depth layer {} out of range",
                    o.depth_layer
                )));
            }
            if self.objects[..i].iter().any(|p| p.center == o.center) {
                return Err(Error::InvalidScene(format!("object {i} repeats a center")));
            }
        }
        Ok(())
    }

    /// Index of the object visible at each pixel (topmost after occlusion).
    ///
    /// Objects are drawn far-to-near; within a layer, later objects draw over
    /// earlier ones.
    pub fn owners(&self) -> Result<Vec<Option<usize>>> {
        self.validate()?;
        let g = self.grid_size;
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(self.objects[i].depth_layer), i));
        let mut owner = vec![None; g * g];
        for i in order {
            let o = &self.objects[i];
            let r = o.radius as i32;
            let (cx, cy) = (o.center.0 as i32, o.center.1 as i32);
            for y in (cy - r)..=(cy + r) {
                for x in (cx - r)..=(cx + r) {
                    if o.shape.covers(x - cx, y - cy, r) {
                        owner[y as usize * g + x as usize] = Some(i);
                    }
                }
            }
        }
        Ok(owner)
    }

    /// Visible pixel count per object.
    pub fn visible_areas(&self) -> Result<Vec<usize>> {
        let mut areas = vec![0; self.objects.len()];
        for o in self.owners()?.into_iter().flatten() {
            areas[o] += 1;
        }
        Ok(areas)
    }
}

/// A rendered scene: one color index per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub grid_size: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.grid_size + x]
    }
}

pub fn render_scene(scene: &Scene) -> Result<Image> {
    let owners = scene.owners()?;
    let pixels = owners
        .iter()
        .map(|o| o.map_or(0, |i| scene.objects[i].color.index()))
        .collect();
    Ok(Image {
        grid_size: scene.grid_size,
        pixels,
    })
}
