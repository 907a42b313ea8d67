//! A planar textured scene seen by a pinhole camera that rolls about its
//! optical axis and translates parallel to the plane, plus the image-space
//! warps that mirror those camera motions.
//!
//! Image coordinates put the origin at the image center with `x` to the
//! right and `y` up; row 0 is the top row.

mod dataset;
mod io;

pub use dataset::{
    convert_7scenes, generate_dataset, load_dataset, planar_motion, DatasetSpec, GeneratedDataset, Meta,
    PoseDataset, PoseRecord,
};
pub use io::{read_image, write_image, write_poses, read_poses};

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::geom::{cos_sin, CameraIntrinsics, Frame, Se2Motion};
use crate::tensor::{seeded_rng, Element, Tensor};

/// Channel-major pixel grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            channels == 1 || channels == 3,
            "images have 1 or 3 channels, got {channels}"
        );
        ensure!(
            data.len() == width * height * channels,
            "{width}x{height}x{channels} image needs {} values, got {}",
            width * height * channels,
            data.len()
        );
        ensure!(data.iter().all(|v| v.is_finite()), "image values must be finite");
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.channels, self.height, self.width], |i| T::of(self.data[i]))
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        ensure!(t.rank() == 3, "image tensor must be [C,H,W], got {:?}", t.shape());
        let s = t.shape();
        Self::new(s[2], s[1], s[0], t.to_f64_vec())
    }

    /// Rounds every value to the nearest multiple of 1/255, as stored on disk.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Self { data, ..self.clone() }
    }

    /// Bilinear sample of channel `c` at fractional pixel `(col, row)`;
    /// zero outside the grid.
    fn sample(&self, c: usize, col: f64, row: f64) -> f64 {
        let (j0, i0) = (col.floor(), row.floor());
        let (fj, fi) = (col - j0, row - i0);
        let mut acc = 0.0;
        for (di, wi) in [(0.0, 1.0 - fi), (1.0, fi)] {
            for (dj, wj) in [(0.0, 1.0 - fj), (1.0, fj)] {
                let w = wi * wj;
                let (i, j) = (i0 + di, j0 + dj);
                if w == 0.0 || i < 0.0 || j < 0.0 || i >= self.height as f64 || j >= self.width as f64 {
                    continue;
                }
                acc += w * self.at(c, i as usize, j as usize);
            }
        }
        acc
    }
}

/// Procedural texture families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    /// White noise smoothed by a Gaussian blur.
    Noise,
    /// Checkerboard with scattered blobs, smoothed by the same blur.
    CheckerBlob,
}

impl Texture {
    pub fn name(&self) -> &'static str {
        match self {
            Texture::Noise => "noise",
            Texture::CheckerBlob => "checker-blob",
        }
    }
}

impl std::str::FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Texture::Noise),
            "checker-blob" => Ok(Texture::CheckerBlob),
            _ => Err(Error::contract(format!(
                "unknown texture `{s}` (expected noise or checker-blob)"
            ))),
        }
    }
}

/// Intensity field on the plane `Z = Z0`, stored as a square grid covering
/// `[-extent/2, extent/2]^2` meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarScene {
    grid: Vec<f64>,
    side: usize,
    extent: f64,
    cam: CameraIntrinsics,
}

impl PlanarScene {
    pub fn new(grid: Vec<f64>, side: usize, extent: f64, cam: CameraIntrinsics) -> Result<Self> {
        ensure!(side >= 2 && grid.len() == side * side, "scene grid must be side x side");
        ensure!(extent > 0.0 && extent.is_finite(), "scene extent must be positive");
        ensure!(
            grid.iter().all(|v| (0.0..=1.0).contains(v)),
            "scene intensities must lie in [0, 1]"
        );
        Ok(Self {
            grid,
            side,
            extent,
            cam,
        })
    }

    /// A seeded band-limited texture, rescaled to span `[0, 1]`.
    pub fn procedural(
        texture: Texture,
        side: usize,
        extent: f64,
        blur: f64,
        cam: CameraIntrinsics,
        seed: u64,
    ) -> Result<Self> {
        ensure!(side >= 2, "scene grid side must be at least 2");
        ensure!(blur >= 0.0, "blur must be non-negative");
        let mut rng = seeded_rng(seed);
        // Generate with a margin so the blur sees no artificial edge.
        let margin = (3.0 * blur).ceil() as usize;
        let big = side + 2 * margin;
        let mut raw: Vec<f64> = match texture {
            Texture::Noise => (0..big * big).map(|_| rng.gen::<f64>()).collect(),
            Texture::CheckerBlob => {
                let period = (big / 8).max(2);
                let mut g: Vec<f64> = (0..big * big)
                    .map(|p| (((p / big) / period + (p % big) / period) % 2) as f64 * 0.5)
                    .collect();
                for _ in 0..12 {
                    let (cy, cx) = (rng.gen_range(0.0..big as f64), rng.gen_range(0.0..big as f64));
                    let r = rng.gen_range(0.03..0.1) * big as f64;
                    let amp = rng.gen_range(0.3..0.5);
                    for (p, v) in g.iter_mut().enumerate() {
                        let (y, x) = ((p / big) as f64, (p % big) as f64);
                        let d2 = ((y - cy).powi(2) + (x - cx).powi(2)) / (r * r);
                        *v += amp * (-d2).exp();
                    }
                }
                g
            }
        };
        if blur > 0.0 {
            raw = gaussian_blur(&raw, big, blur);
        }
        let mut grid = Vec::with_capacity(side * side);
        for i in 0..side {
            grid.extend_from_slice(&raw[(i + margin) * big + margin..][..side]);
        }
        let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in grid.iter_mut() {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
        Self::new(grid, side, extent, cam)
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.cam
    }

    /// Intensity at scene point `(X, Y)`, bilinear between cell centers and
    /// zero outside the extent.
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        let h = self.extent / 2.0;
        if x < -h || x > h || y < -h || y > h {
            return 0.0;
        }
        let cell = self.extent / self.side as f64;
        let col = ((x + h) / cell - 0.5).clamp(0.0, (self.side - 1) as f64);
        let row = ((h - y) / cell - 0.5).clamp(0.0, (self.side - 1) as f64);
        let (j0, i0) = (col.floor() as usize, row.floor() as usize);
        let (j1, i1) = ((j0 + 1).min(self.side - 1), (i0 + 1).min(self.side - 1));
        let (fj, fi) = (col - j0 as f64, row - i0 as f64);
        let g = |i: usize, j: usize| self.grid[i * self.side + j];
        let top = g(i0, j0) * (1.0 - fj) + g(i0, j1) * fj;
        let bottom = g(i1, j0) * (1.0 - fj) + g(i1, j1) * fj;
        top * (1.0 - fi) + bottom * fi
    }
}

fn gaussian_blur(src: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let (ii, jj) = if horizontal {
                        (i as isize, (j as isize + d).clamp(0, n as isize - 1))
                    } else {
                        ((i as isize + d).clamp(0, n as isize - 1), j as isize)
                    };
                    acc += w * src[ii as usize * n + jj as usize];
                }
                out[i * n + j] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Pixel-center coordinates `(x, y)` of row `i`, column `j`.
fn pixel_coords(i: usize, j: usize, w: usize, h: usize) -> (f64, f64) {
    (j as f64 - (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0 - i as f64)
}

/// The camera image after the scene-frame motion `cam`: pixel `p` shows the
/// scene point `R p Z0 / f + T`.
pub fn render(scene: &PlanarScene, cam: &Se2Motion, width: usize, height: usize) -> Result<Image> {
    ensure!(cam.frame() == Frame::Scene, "render needs a scene-frame motion");
    let s = 1.0 / scene.cam.scale();
    let (c, sn) = cos_sin(cam.theta());
    let t = cam.translation();
    let mut data = Vec::with_capacity(width * height);
    for i in 0..height {
        for j in 0..width {
            let (x, y) = pixel_coords(i, j, width, height);
            let (px, py) = (x * s, y * s);
            data.push(scene.intensity(c * px - sn * py + t[0], sn * px + c * py + t[1]));
        }
    }
    Image::new(width, height, 1, data)
}

/// The image-space action of an image-frame motion: the output at `q` is the
/// input at `R q + t`. Quarter turns without translation permute pixels.
pub fn warp_image(img: &Image, m: &Se2Motion) -> Result<Image> {
    ensure!(m.frame() == Frame::Image, "warp needs an image-frame motion");
    let (w, h) = (img.width, img.height);
    let (c, sn) = cos_sin(m.theta());
    let t = m.translation();
    let mut data = Vec::with_capacity(img.data.len());
    for ch in 0..img.channels {
        for i in 0..h {
            for j in 0..w {
                let (x, y) = pixel_coords(i, j, w, h);
                let (sx, sy) = (c * x - sn * y + t[0], sn * x + c * y + t[1]);
                let col = sx + (w as f64 - 1.0) / 2.0;
                let row = (h as f64 - 1.0) / 2.0 - sy;
                data.push(img.sample(ch, col, row));
            }
        }
    }
    Image::new(w, h, img.channels, data)
}

/// Pixels whose warp source lies at least `margin` pixels inside the input.
pub fn warp_interior(w: usize, h: usize, m: &Se2Motion, margin: f64) -> Vec<bool> {
    let (c, sn) = cos_sin(m.theta());
    let t = m.translation();
    let mut out = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = pixel_coords(i, j, w, h);
            let col = c * x - sn * y + t[0] + (w as f64 - 1.0) / 2.0;
            let row = (h as f64 - 1.0) / 2.0 - (sn * x + c * y + t[1]);
            out.push(
                col >= margin && row >= margin && col <= w as f64 - 1.0 - margin && row <= h as f64 - 1.0 - margin,
            );
        }
    }
    out
}
