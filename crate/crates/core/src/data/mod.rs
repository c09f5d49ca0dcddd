//! Image data model, domain transfer operators, file formats and the
//! synthetic exposure-bracketed scene generator.
//!
//! All images are stored row-major with interleaved channels (`[H, W, C]`).

mod io;
mod scene;
mod transfer;

pub use io::{
    list_scenes, load_scene, read_exposures, read_hdr_raw, read_ldr_ppm, save_scene,
    write_exposures, write_hdr_raw, write_ldr_ppm, HDR_MAGIC,
};
pub use scene::{generate_scene, SceneSpec};
pub use transfer::{
    build_model_input, gamma_to_hdr, pixel_shuffle, pixel_unshuffle, tonemap, tonemap_value,
    DEFAULT_GAMMA, DEFAULT_MU,
};

use crate::error::{shape_err, Error, Result};

/// A dense `[H, W, C]` float tensor, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(shape_err!("empty image {height}x{width}x{channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&ImageTensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("nothing to concatenate"))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(shape_err!("spatial size mismatch in channel concat"));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for px in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[px * p.channels..(px + 1) * p.channels]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            channels,
            data,
        })
    }

    /// Copies out a `[h, w]` window starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(shape_err!(
                "crop {h}x{w}@({y0},{x0}) outside {}x{}",
                self.height,
                self.width
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }
}

fn check_unit_range(t: &ImageTensor, what: &str) -> Result<()> {
    if let Some(v) = t
        .data
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::Domain(format!(
            "{what} value {v} outside the normalized [0, 1] range"
        )));
    }
    Ok(())
}

/// Linear-radiance image normalized to `[0, 1]`, three channels.
///
/// Spatial divisibility by 8 is required only by the networks and is checked
/// there (see [`HdrImage::check_model_dims`]); files and metrics accept any size.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    pixels: ImageTensor,
}

impl HdrImage {
    pub fn new(pixels: ImageTensor) -> Result<Self> {
        if pixels.channels != 3 {
            return Err(shape_err!(
                "HDR image needs 3 channels, got {}",
                pixels.channels
            ));
        }
        check_unit_range(&pixels, "HDR")?;
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &ImageTensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> ImageTensor {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn check_model_dims(height: usize, width: usize) -> Result<()> {
        if height % 8 != 0 || width % 8 != 0 {
            return Err(shape_err!(
                "image {height}x{width} must have both sides divisible by 8"
            ));
        }
        Ok(())
    }
}

/// Display-referred exposure in `[0, 1]`, three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrImage {
    pixels: ImageTensor,
    /// log2 exposure relative to the reference frame.
    pub exposure_value: f32,
}

impl LdrImage {
    pub fn new(pixels: ImageTensor, exposure_value: f32) -> Result<Self> {
        if pixels.channels != 3 {
            return Err(shape_err!(
                "LDR image needs 3 channels, got {}",
                pixels.channels
            ));
        }
        if !exposure_value.is_finite() {
            return Err(Error::Domain(format!("exposure value {exposure_value}")));
        }
        check_unit_range(&pixels, "LDR")?;
        Ok(Self {
            pixels,
            exposure_value,
        })
    }

    pub fn pixels(&self) -> &ImageTensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    /// Linear exposure time `2^ev`.
    pub fn exposure_time(&self) -> f32 {
        self.exposure_value.exp2()
    }
}

/// Three exposure-bracketed frames; the middle one is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureStack {
    frames: [LdrImage; 3],
    ground_truth: Option<HdrImage>,
}

impl ExposureStack {
    pub const REFERENCE_INDEX: usize = 1;

    pub fn new(frames: [LdrImage; 3], ground_truth: Option<HdrImage>) -> Result<Self> {
        let (h, w) = (frames[0].height(), frames[0].width());
        if frames.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(shape_err!("exposure frames differ in size"));
        }
        if !(frames[0].exposure_value < frames[1].exposure_value
            && frames[1].exposure_value < frames[2].exposure_value)
        {
            return Err(Error::Data(format!(
                "exposure values must be strictly increasing, got {:?}",
                frames.iter().map(|f| f.exposure_value).collect::<Vec<_>>()
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.height() != h || gt.width() != w {
                return Err(shape_err!(
                    "ground truth {}x{} does not match frames {h}x{w}",
                    gt.height(),
                    gt.width()
                ));
            }
        }
        Ok(Self {
            frames,
            ground_truth,
        })
    }

    pub fn frames(&self) -> &[LdrImage; 3] {
        &self.frames
    }

    pub fn reference(&self) -> &LdrImage {
        &self.frames[Self::REFERENCE_INDEX]
    }

    pub fn ground_truth(&self) -> Option<&HdrImage> {
        self.ground_truth.as_ref()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn exposure_values(&self) -> [f32; 3] {
        [
            self.frames[0].exposure_value,
            self.frames[1].exposure_value,
            self.frames[2].exposure_value,
        ]
    }

    /// Crops every frame and the ground truth to the same window.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let crop_ldr = |f: &LdrImage| -> Result<LdrImage> {
            Ok(LdrImage {
                pixels: f.pixels.crop(y0, x0, h, w)?,
                exposure_value: f.exposure_value,
            })
        };
        let frames = [
            crop_ldr(&self.frames[0])?,
            crop_ldr(&self.frames[1])?,
            crop_ldr(&self.frames[2])?,
        ];
        let ground_truth = match &self.ground_truth {
            Some(gt) => Some(HdrImage {
                pixels: gt.pixels.crop(y0, x0, h, w)?,
            }),
            None => None,
        };
        Ok(Self {
            frames,
            ground_truth,
        })
    }
}
