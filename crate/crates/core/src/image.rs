//! `H×W×C` images with intensities in `[0, 1]`, and conversion to the
//! `[N, C, H, W]` layout used by the networks.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use s3e_autograd::Tensor;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((height, width, channels), value),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Self {
        Self {
            data: Array3::from_shape_fn((height, width, channels), f),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[[y, x, c]]
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rec. 601 luma as a single-channel image; single-channel input is
    /// returned unchanged.
    pub fn luma(&self) -> Self {
        if self.channels() == 1 {
            return self.clone();
        }
        let d = &self.data;
        Self::from_fn(self.height(), self.width(), 1, |(y, x, _)| {
            0.299 * d[[y, x, 0]] + 0.587 * d[[y, x, 1]] + 0.114 * d[[y, x, 2]]
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, 3, |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        }))
    }

    /// Writes an 8-bit RGB PNG. Single-channel images are written as gray.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.dims();
        if c != 1 && c != 3 {
            return Err(shape_err!("cannot write {c}-channel image"));
        }
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| quantize(self.data[[y as usize, x as usize, if c == 1 { 0 } else { ch }]]);
            Rgb([px(0), px(1), px(2)])
        });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rounds through 8-bit storage, matching what a PNG round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.mapv(|v| quantize(v) as f64 / 255.0),
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks equally sized images into `[N, C, H, W]`.
pub fn to_batch(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput("empty image batch".into()))?;
    let (h, w, c) = first.dims();
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dims() != (h, w, c) {
            return Err(shape_err!(
                "batch image {i} is {:?}, expected {:?}",
                img.dims(),
                (h, w, c)
            ));
        }
        out.slice_mut(s![i, .., .., ..])
            .assign(&img.data.view().permuted_axes([2, 0, 1]));
    }
    Ok(out.into_dyn())
}

/// Extracts image `index` from an `[N, C, H, W]` tensor.
pub fn from_batch(batch: &Tensor, index: usize) -> ImageTensor {
    let view = batch.index_axis(Axis(0), index);
    let view: ArrayView3<f64> = view.into_dimensionality().expect("batch must be rank 4");
    ImageTensor {
        data: view.permuted_axes([1, 2, 0]).to_owned(),
    }
}

pub fn split_batch(batch: &Tensor) -> Vec<ImageTensor> {
    (0..batch.shape()[0]).map(|i| from_batch(batch, i)).collect()
}
