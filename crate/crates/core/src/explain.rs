//! Grad-CAM heatmaps and mask statistics.
//!
//! Grad-CAM taps the feature map that feeds global pooling: `E ⊙ M` for a
//! masked model, `E` for a baseline. Channel weights are the spatial means of
//! the target logit's gradient; the heatmap is the ReLU of the weighted
//! channel sum, scaled so its maximum is 1.

use crate::data::Image8;
use crate::mask::SUPPRESSED_THRESHOLD;
use crate::model::{self, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Nonnegative `d × k` grid, max-normalized unless identically zero.
    pub grid: Tensor,
    /// Nearest-neighbor enlargement of `grid` to the input size, `round(255·v)`.
    pub upsampled: Image8,
    pub target_class: usize,
    /// Softmax probability of `target_class`.
    pub confidence: f64,
}

impl Heatmap {
    /// Grid values enlarged to `height × width` by nearest neighbor, row-major.
    pub fn upsampled_values(&self) -> Vec<f64> {
        let (h, w) = (self.upsampled.height, self.upsampled.width);
        let (rows, cols) = (self.grid.shape()[0], self.grid.shape()[1]);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let gy = y * rows / h;
            for x in 0..w {
                out.push(self.grid.data()[gy * cols + x * cols / w]);
            }
        }
        out
    }

    /// Sum of upsampled heat over a `size × size` window at `(row, col)`.
    pub fn window_mass(&self, values: &[f64], row: usize, col: usize, size: usize) -> f64 {
        let w = self.upsampled.width;
        (row..row + size)
            .map(|y| values[y * w + col..y * w + col + size].iter().sum::<f64>())
            .sum()
    }
}

fn upsample(grid: &Tensor, height: usize, width: usize) -> Image8 {
    let (rows, cols) = (grid.shape()[0], grid.shape()[1]);
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let v = grid.data()[(y * rows / height) * cols + x * cols / width];
            data.push((v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8);
        }
    }
    Image8::new(width, height, 1, data).expect("sized buffer")
}

pub fn grad_cam(params: &ModelParams, image: &Tensor, target_class: usize) -> Result<Heatmap> {
    let n = params.config.n_classes;
    if target_class >= n {
        return Err(Error::input(format!(
            "class {target_class} out of range for {n} classes"
        )));
    }
    let mut fp = model::forward(params, image, params.variant())?;
    let target = fp.tape.select(fp.logits, target_class)?;
    let grads = fp.tape.backward(target)?;
    let g = grads.wrt(fp.selected);
    let e = fp.tape.value(fp.selected);
    let (c, rows, cols) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let area = rows * cols;

    let mut cam = vec![0.0; area];
    for ch in 0..c {
        let gplane = &g.data()[ch * area..(ch + 1) * area];
        let alpha = gplane.iter().sum::<f64>() / area as f64;
        let eplane = &e.data()[ch * area..(ch + 1) * area];
        for (acc, &v) in cam.iter_mut().zip(eplane) {
            *acc += alpha * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = cam.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        cam.iter_mut().for_each(|v| *v /= max);
    }
    let grid = Tensor::new(vec![rows, cols], cam)?;

    let logits = fp.logits();
    let top = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.data().iter().map(|v| (v - top).exp()).sum();
    let confidence = (logits.data()[target_class] - top).exp() / z;

    let upsampled = upsample(&grid, params.config.height, params.config.width);
    Ok(Heatmap {
        grid,
        upsampled,
        target_class,
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskReport {
    pub rows: usize,
    pub cols: usize,
    /// Row-major mask values.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Cells below [`SUPPRESSED_THRESHOLD`].
    pub suppressed: usize,
}

impl MaskReport {
    /// `stat,row,col,value`: one `cell` row per mask entry, then `mean` and
    /// `suppressed` summary rows with empty coordinates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stat,row,col,value\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("cell,{},{},{}\n", i / self.cols, i % self.cols, v));
        }
        out.push_str(&format!("mean,,,{}\n", self.mean));
        out.push_str(&format!("suppressed,,,{}\n", self.suppressed));
        out
    }
}

pub fn mask_report(params: &ModelParams) -> Result<MaskReport> {
    let mask = params
        .mask
        .as_ref()
        .ok_or_else(|| Error::input("model has no mask"))?;
    let (rows, cols) = mask.grid();
    let values = mask.values().into_data();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let suppressed = values.iter().filter(|&&v| v < SUPPRESSED_THRESHOLD).count();
    Ok(MaskReport {
        rows,
        cols,
        values,
        mean,
        suppressed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, Variant};

    fn image() -> Tensor {
        Tensor::new(
            vec![3, 32, 32],
            (0..3072).map(|i| ((i * 13) % 29) as f64 / 29.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn heatmap_is_nonnegative_and_normalized() {
        let p = ModelParams::init(&EncoderConfig::default(), Variant::Masked, 1).unwrap();
        for class in 0..4 {
            let h = grad_cam(&p, &image(), class).unwrap();
            let max = h.grid.data().iter().cloned().fold(0.0, f64::max);
            assert!(h.grid.data().iter().all(|&v| v >= 0.0));
            assert!(max == 0.0 || (max - 1.0).abs() < 1e-15);
            assert_eq!((h.upsampled.width, h.upsampled.height), (32, 32));
            assert!(h.confidence > 0.0 && h.confidence < 1.0);
        }
    }

    #[test]
    fn zero_head_row_gives_zero_map() {
        let mut p = ModelParams::init(&EncoderConfig::default(), Variant::Baseline, 1).unwrap();
        p.head_weights.data_mut()[16..32].fill(0.0);
        let h = grad_cam(&p, &image(), 1).unwrap();
        assert!(h.grid.data().iter().all(|&v| v == 0.0));
        assert!(h.upsampled.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_channel_uniform_gradient_tracks_features() {
        let cfg = EncoderConfig {
            block_channels: vec![4, 1],
            n_classes: 2,
            ..Default::default()
        };
        let mut p = ModelParams::init(&cfg, Variant::Baseline, 2).unwrap();
        p.head_weights = Tensor::new(vec![2, 1], vec![0.7, -0.7]).unwrap();
        let img = image();
        let e = model::encode(&p, &img).unwrap();
        let h = grad_cam(&p, &img, 0).unwrap();
        let max = e.data().iter().cloned().fold(0.0, f64::max);
        assert!(max > 0.0);
        for (a, b) in h.grid.data().iter().zip(e.data()) {
            assert!((a - b / max).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_class() {
        let p = ModelParams::init(&EncoderConfig::default(), Variant::Masked, 1).unwrap();
        assert!(matches!(grad_cam(&p, &image(), 4), Err(Error::Input(_))));
    }

    #[test]
    fn fresh_and_saturated_mask_reports() {
        let mut p = ModelParams::init(&EncoderConfig::default(), Variant::Masked, 0).unwrap();
        let r = mask_report(&p).unwrap();
        assert!((r.mean - 0.9).abs() < 1e-6);
        assert_eq!(r.suppressed, 0);
        assert!(r.to_csv().lines().count() == 1 + 64 + 2);

        *p.mask.as_mut().unwrap().logits_mut() = Tensor::filled(&[8, 8], -40.0);
        assert_eq!(mask_report(&p).unwrap().suppressed, 64);

        let b = ModelParams::init(&EncoderConfig::default(), Variant::Baseline, 0).unwrap();
        assert!(mask_report(&b)
            .unwrap_err()
            .to_string()
            .contains("model has no mask"));
    }
}
