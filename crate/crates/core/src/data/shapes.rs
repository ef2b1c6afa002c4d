//! Procedural 32×32 shape images.
//!
//! Class `k` draws shape `k mod 4` in color family `k div 4`, with jittered
//! position, size, hue and background.

use rand::Rng;

use super::{ImageTensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether the offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            ShapeKind::Triangle => {
                // apex up, base at dy = +r
                dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5
            }
            ShapeKind::Cross => {
                let arm = r * 0.3;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Hue centers (degrees) and names of the color families.
const COLOR_FAMILIES: [(f32, &str); 4] = [
    (0.0, "red"),
    (215.0, "blue"),
    (120.0, "green"),
    (52.0, "yellow"),
];

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(|u| u.clamp(0.0, 1.0))
}

pub fn class_name(class: usize) -> String {
    format!(
        "{}-{}",
        COLOR_FAMILIES[class / 4].1,
        ShapeKind::ALL[class % 4].name()
    )
}

fn render<R: Rng>(class: usize, rng: &mut R) -> ImageTensor {
    let shape = ShapeKind::ALL[class % 4];
    let (hue, _) = COLOR_FAMILIES[class / 4];
    let fg = hsv_to_rgb(
        hue + rng.random_range(-15.0..15.0),
        rng.random_range(0.6..1.0),
        rng.random_range(0.7..1.0),
    );
    let bg_level = rng.random_range(0.05..0.3);
    let bg_tint: [f32; 3] = std::array::from_fn(|_| bg_level + rng.random_range(-0.03..0.03));
    let half = IMAGE_SIZE as f32 / 2.0;
    let cx = half + rng.random_range(-5.0..5.0);
    let cy = half + rng.random_range(-5.0..5.0);
    let r = rng.random_range(6.0..10.0);
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            // 2×2 supersampling for soft edges
            let mut cover = 0.0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if shape.contains(x as f32 + sx - cx, y as f32 + sy - cy, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let v = cover * fg[c] + (1.0 - cover) * bg_tint[c];
                // stored at 8-bit precision so PPM round trips are exact
                data.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    ImageTensor::new(IMAGE_SIZE, IMAGE_SIZE, data).expect("valid render")
}

/// Renders `count` labeled images; item `i` has class `i mod num_classes`.
pub fn gen_shapes(seed: u64, count: usize, num_classes: usize) -> Result<LabeledDataset> {
    if !(2..=16).contains(&num_classes) {
        return Err(Error::InvalidParameter(format!(
            "num_classes must lie in [2, 16], got {num_classes}"
        )));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % num_classes;
        let mut rng = stream(seed, "shapes", i as u64);
        images.push(render(class, &mut rng));
        labels.push(class);
        names.push(format!("{i:06}.ppm"));
    }
    LabeledDataset::new(
        images,
        labels,
        names,
        (0..num_classes).map(class_name).collect(),
    )
}
