//! Synthetic scene generator.
//!
//! Every image is a mid-gray field (optionally textured) with one class cue near the
//! center and several clutter patches around the border. The cue is a small
//! square whose color and internal pattern identify the class. Clutter is
//! drawn from a pool shared by every class: exact copies of all class cues
//! (decoys, which look important to several classes at once) plus neutral
//! patterns. Decoys only appear outside the central cue envelope, so a model
//! that learns *where* to look can ignore them, while a model that pools the
//! whole frame uniformly sees conflicting evidence. With probability
//! `occlusion_prob` one neutral patch is drawn partly over the cue, never
//! covering its center pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::netpbm::Image8;
use crate::exec::Exec;
use crate::{rng, Error, Result};

const BACKGROUND: i32 = 128;

fn default_jitter() -> usize {
    3
}

fn default_texture() -> u8 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub cue_size: usize,
    pub clutter_count: usize,
    pub occlusion_prob: f64,
    pub seed: u64,
    /// Maximum offset of the cue from the image center, in pixels.
    #[serde(default = "default_jitter")]
    pub cue_jitter: usize,
    /// Per-pixel texture is uniform in `±texture_amplitude`; off by default so
    /// that test-time noise is a corruption the models never saw in training.
    #[serde(default = "default_texture")]
    pub texture_amplitude: u8,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            images_per_class: 200,
            height: 32,
            width: 32,
            cue_size: 6,
            clutter_count: 5,
            occlusion_prob: 0.3,
            seed: 0,
            cue_jitter: default_jitter(),
            texture_amplitude: default_texture(),
        }
    }
}

/// Pixel box of the class cue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueBox {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl CueBox {
    pub fn center(&self) -> (usize, usize) {
        (self.row + self.size / 2, self.col + self.size / 2)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row
            && row < self.row + self.size
            && col >= self.col
            && col < self.col + self.size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image8,
    pub label: usize,
    pub cue: CueBox,
}

const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 180, 60],
    [50, 80, 220],
    [230, 200, 40],
    [200, 60, 200],
    [40, 200, 200],
    [240, 140, 30],
    [120, 60, 20],
];

const NEUTRAL_KINDS: usize = 4;

fn class_color(class: usize) -> [u8; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    // Beyond the fixed palette, spread hues by the golden angle.
    let hue = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = (1.0 - (hue % 2.0 - 1.0).abs()) * 200.0 + 30.0;
    let (hi, lo) = (230.0, 30.0);
    let rgb = match hue as usize {
        0 => [hi, x, lo],
        1 => [x, hi, lo],
        2 => [lo, hi, x],
        3 => [lo, x, hi],
        4 => [x, lo, hi],
        _ => [hi, lo, x],
    };
    rgb.map(|v| v as u8)
}

/// Color of cell `(r, c)` of the cue for `class`. The pattern family cycles
/// with the class; the center cell always shows the full class color.
fn cue_pixel(class: usize, size: usize, r: usize, c: usize) -> [u8; 3] {
    let color = class_color(class);
    let dark = color.map(|v| v / 3);
    let center = size / 2;
    let lit = match class % 4 {
        0 => true,
        1 => (r + center).is_multiple_of(2),
        2 => (c + center).is_multiple_of(2),
        _ => (r + c).is_multiple_of(2),
    };
    if lit {
        color
    } else {
        dark
    }
}

fn neutral_pixel(kind: usize, size: usize, r: usize, c: usize) -> [u8; 3] {
    let edge = r == 0 || c == 0 || r + 1 == size || c + 1 == size;
    let v = match kind {
        0 => {
            if edge {
                0
            } else {
                245
            }
        }
        1 => 60,
        2 => {
            if (r / 2 + c / 2).is_multiple_of(2) {
                200
            } else {
                90
            }
        }
        _ => {
            if edge {
                20
            } else {
                160
            }
        }
    };
    [v; 3]
}

/// A patch from the shared clutter pool: indices below `n_classes` are cue
/// decoys, the rest neutral patterns.
fn pool_pixel(n_classes: usize, item: usize, size: usize, r: usize, c: usize) -> [u8; 3] {
    if item < n_classes {
        cue_pixel(item, size, r, c)
    } else {
        neutral_pixel(item - n_classes, size, r, c)
    }
}

struct Canvas {
    height: usize,
    width: usize,
    rgb: Vec<[i32; 3]>,
}

impl Canvas {
    fn stamp(
        &mut self,
        row: isize,
        col: isize,
        size: usize,
        pixel: impl Fn(usize, usize) -> [u8; 3],
    ) {
        for r in 0..size {
            for c in 0..size {
                let (y, x) = (row + r as isize, col + c as isize);
                if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
                    self.rgb[y as usize * self.width + x as usize] = pixel(r, c).map(i32::from);
                }
            }
        }
    }
}

impl SceneSpec {
    /// Range of cue top-left coordinates along an axis of length `len`.
    fn cue_range(&self, len: usize) -> (usize, usize) {
        let mid = (len - self.cue_size) / 2;
        (
            mid.saturating_sub(self.cue_jitter),
            (mid + self.cue_jitter).min(len - self.cue_size),
        )
    }

    /// Square clutter must stay out of: the cue envelope grown by two pixels.
    fn keep_out(&self) -> ((usize, usize), (usize, usize)) {
        let grow = |(lo, hi): (usize, usize), len: usize| {
            (lo.saturating_sub(2), (hi + self.cue_size + 2).min(len))
        };
        (
            grow(self.cue_range(self.height), self.height),
            grow(self.cue_range(self.width), self.width),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.images_per_class == 0 {
            return Err(Error::config(
                "n_classes and images_per_class must be positive",
            ));
        }
        if self.cue_size < 3 || self.cue_size >= self.height.min(self.width) {
            return Err(Error::config(format!(
                "cue_size {} must be at least 3 and smaller than the image edge",
                self.cue_size
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::config("occlusion_prob must lie in [0, 1]"));
        }
        let ((r0, r1), (c0, c1)) = self.keep_out();
        let fits =
            |lo: usize, hi: usize, len: usize| lo >= self.cue_size || len - hi >= self.cue_size;
        if self.clutter_count > 0 && !fits(r0, r1, self.height) && !fits(c0, c1, self.width) {
            return Err(Error::config(
                "image too small to place clutter outside the cue region",
            ));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.n_classes * self.images_per_class
    }

    /// Class of image `index` in generation order (class-major).
    pub fn label_of(&self, index: usize) -> usize {
        index / self.images_per_class
    }

    /// Renders image `index`. Pure in `(self, index)`.
    pub fn render(&self, index: usize) -> Scene {
        let label = self.label_of(index);
        let mut rng = rng::rng(rng::derive_seed(self.seed, index as u64));
        let (h, w, s) = (self.height, self.width, self.cue_size);
        let mut canvas = Canvas {
            height: h,
            width: w,
            rgb: vec![[BACKGROUND; 3]; h * w],
        };

        let (rr, cr) = (self.cue_range(h), self.cue_range(w));
        let cue = CueBox {
            row: rng.random_range(rr.0..=rr.1),
            col: rng.random_range(cr.0..=cr.1),
            size: s,
        };

        let occluded = self.clutter_count > 0 && rng.random_bool(self.occlusion_prob);
        let free = self.clutter_count - usize::from(occluded);
        let pool = self.n_classes + NEUTRAL_KINDS;
        let ((k_r0, k_r1), (k_c0, k_c1)) = self.keep_out();
        for _ in 0..free {
            let item = rng.random_range(0..pool);
            let (row, col) = loop {
                let row = rng.random_range(0..=h - s);
                let col = rng.random_range(0..=w - s);
                let overlaps = row < k_r1 && row + s > k_r0 && col < k_c1 && col + s > k_c0;
                if !overlaps {
                    break (row, col);
                }
            };
            canvas.stamp(row as isize, col as isize, s, |r, c| {
                pool_pixel(self.n_classes, item, s, r, c)
            });
        }

        canvas.stamp(cue.row as isize, cue.col as isize, s, |r, c| {
            cue_pixel(label, s, r, c)
        });

        if occluded {
            let kind = rng.random_range(0..NEUTRAL_KINDS);
            let near = (s / 2 + 1) as i64;
            let far = (s - 1) as i64;
            let half = (s / 2) as i64;
            let along =
                (rng.random_range(near..=far) * if rng.random_bool(0.5) { 1 } else { -1 }) as isize;
            let across = rng.random_range(-half..=half) as isize;
            let (dr, dc) = if rng.random_bool(0.5) {
                (along, across)
            } else {
                (across, along)
            };
            canvas.stamp(cue.row as isize + dr, cue.col as isize + dc, s, |r, c| {
                neutral_pixel(kind, s, r, c)
            });
        }

        let amp = i32::from(self.texture_amplitude);
        let mut data = Vec::with_capacity(h * w * 3);
        for px in &canvas.rgb {
            for &v in px {
                let t = if amp > 0 {
                    rng.random_range(-amp..=amp)
                } else {
                    0
                };
                data.push((v + t).clamp(0, 255) as u8);
            }
        }
        Scene {
            image: Image8::new(w, h, 3, data).expect("canvas size"),
            label,
            cue,
        }
    }
}

/// Renders every image of `spec` in class-major order.
pub fn generate_scenes(spec: &SceneSpec, exec: Exec) -> Result<Vec<Scene>> {
    spec.validate()?;
    Ok(exec.map_range(spec.total_images(), |i| spec.render(i)))
}
