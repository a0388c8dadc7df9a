//! Images, bounding boxes, cropping, and the visual feature function Φ.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var, GATHER_ZERO};

/// Cells per side of the mean-patch grid.
pub const GRID_CELLS: usize = 4;
/// Length of the mean-patch descriptor (4×4 cells × RGB).
pub const PATCH_FEATURES: usize = GRID_CELLS * GRID_CELLS * 3;

/// RGB image with values in [0,1], stored row-major as H×W×3.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("image of size {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("pixel value outside [0,1]".into()));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Image::new(height, width, pixels)
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[i + c] = v.clamp(0.0, 1.0);
        }
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }

    /// Reads a binary 8-bit PPM (P6).
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Data("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Data(format!("unsupported PPM magic {}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad PPM header field {s}")))
        };
        let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max != 255 {
            return Err(Error::Data(format!("PPM maxval {max}, expected 255")));
        }
        let body = bytes
            .get(pos..pos + w * h * 3)
            .ok_or_else(|| Error::Data("truncated PPM body".into()))?;
        Image::from_u8(h, w, body)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_u8());
        out
    }
}

/// Axis-aligned box given by opposite corners in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoundingBox { x1, y1, x2, y2 }
    }

    pub fn validate(&self, image: &Image) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Box(format!("non-finite corner in {self:?}")));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Box(format!("degenerate or inverted corners {self:?}")));
        }
        if self.x2 <= 0.0
            || self.y2 <= 0.0
            || self.x1 >= image.width as f64
            || self.y1 >= image.height as f64
        {
            return Err(Error::Box(format!(
                "{self:?} does not intersect the {}x{} image",
                image.width, image.height
            )));
        }
        Ok(())
    }

    /// Clipped, integer-rounded pixel range `(x0, y0, x1, y1)`, end-exclusive.
    pub fn pixel_range(&self, image: &Image) -> Result<(usize, usize, usize, usize)> {
        self.validate(image)?;
        let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        let (x0, x1) = (clip(self.x1, image.width), clip(self.x2, image.width));
        let (y0, y1) = (clip(self.y1, image.height), clip(self.y2, image.height));
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Box(format!(
                "{self:?} rounds to an empty pixel region"
            )));
        }
        Ok((x0, y0, x1, y1))
    }
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == image.height && out_w == image.width {
        return image.clone();
    }
    let sy = image.height as f64 / out_h as f64;
    let sx = image.width as f64 / out_w as f64;
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    let src = |v: f64, n: usize| {
        let c = v.clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, c - lo as f64)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = src((oy as f64 + 0.5) * sy - 0.5, image.height);
        for ox in 0..out_w {
            let (x0, x1, fx) = src((ox as f64 + 0.5) * sx - 0.5, image.width);
            let (p00, p01) = (image.pixel(y0, x0), image.pixel(y0, x1));
            let (p10, p11) = (image.pixel(y1, x0), image.pixel(y1, x1));
            for c in 0..3 {
                let top = p00[c] * (1.0 - fx) + p01[c] * fx;
                let bottom = p10[c] * (1.0 - fx) + p11[c] * fx;
                pixels.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image {
        height: out_h,
        width: out_w,
        pixels,
    }
}

/// Crops to the clipped, rounded box; resizes to `size`×`size` when given.
pub fn crop(image: &Image, b: &BoundingBox, size: Option<usize>) -> Result<Image> {
    let (x0, y0, x1, y1) = b.pixel_range(image)?;
    let (h, w) = (y1 - y0, x1 - x0);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in y0..y1 {
        let start = (y * image.width + x0) * 3;
        pixels.extend_from_slice(&image.pixels[start..start + w * 3]);
    }
    let cropped = Image {
        height: h,
        width: w,
        pixels,
    };
    Ok(match size {
        Some(s) => resize_bilinear(&cropped, s, s),
        None => cropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    MeanPatch,
    TinyCnn,
}

/// Configuration of the visual backbone Φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub kind: BackboneKind,
    pub out_dim: usize,
    pub input_size: usize,
    pub seed: u64,
    pub frozen: bool,
    pub cnn_channels: [usize; 3],
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            kind: BackboneKind::MeanPatch,
            out_dim: 32,
            input_size: 16,
            seed: 7,
            frozen: true,
            cnn_channels: [8, 16, 16],
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 {
            return Err(Error::Config("vision out_dim must be positive".into()));
        }
        if self.input_size < GRID_CELLS {
            return Err(Error::Config(format!(
                "vision input_size {} below {GRID_CELLS}",
                self.input_size
            )));
        }
        if self.kind == BackboneKind::TinyCnn && !self.input_size.is_multiple_of(8) {
            return Err(Error::Config(
                "tiny_cnn input_size must be divisible by 8".into(),
            ));
        }
        Ok(())
    }
}

pub const PROJECTION: &str = "vision.projection";

fn cnn_name(leaf: &str) -> String {
    format!("vision.cnn.{leaf}")
}

/// Adds backbone parameters to `store`. Their trainability follows `frozen`.
pub fn init_params(cfg: &VisionConfig, store: &mut ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trainable = !cfg.frozen;
    let gaussian = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        t
    };
    match cfg.kind {
        BackboneKind::MeanPatch => {
            let proj = gaussian(
                &[cfg.out_dim, PATCH_FEATURES],
                1.0 / (PATCH_FEATURES as f64).sqrt(),
                &mut rng,
            );
            store.insert(PROJECTION, proj, false);
        }
        BackboneKind::TinyCnn => {
            let mut c_in = 3;
            for (i, &c_out) in cfg.cnn_channels.iter().enumerate() {
                let fan_in = 9 * c_in;
                let w = gaussian(&[fan_in, c_out], (2.0 / fan_in as f64).sqrt(), &mut rng);
                store.insert(cnn_name(&format!("conv{i}.w")), w, trainable);
                store.insert(
                    cnn_name(&format!("conv{i}.b")),
                    Tensor::zeros(&[c_out]),
                    trainable,
                );
                c_in = c_out;
            }
            let w = gaussian(&[c_in, cfg.out_dim], (1.0 / c_in as f64).sqrt(), &mut rng);
            store.insert(cnn_name("fc.w"), w, trainable);
            store.insert(cnn_name("fc.b"), Tensor::zeros(&[cfg.out_dim]), trainable);
        }
    }
}

/// Per-cell RGB means over a 4×4 grid, ordered (cell row, cell column, channel).
pub fn cell_means(image: &Image) -> Vec<f64> {
    let mut out = Vec::with_capacity(PATCH_FEATURES);
    for gy in 0..GRID_CELLS {
        let (ya, yb) = (
            gy * image.height / GRID_CELLS,
            ((gy + 1) * image.height / GRID_CELLS).max(gy * image.height / GRID_CELLS + 1),
        );
        for gx in 0..GRID_CELLS {
            let (xa, xb) = (
                gx * image.width / GRID_CELLS,
                ((gx + 1) * image.width / GRID_CELLS).max(gx * image.width / GRID_CELLS + 1),
            );
            let mut sum = [0.0; 3];
            let ya = ya.min(image.height - 1);
            let xa = xa.min(image.width - 1);
            let (yb, xb) = (yb.min(image.height), xb.min(image.width));
            for y in ya..yb {
                for x in xa..xb {
                    let p = image.pixel(y, x);
                    (0..3).for_each(|c| sum[c] += p[c]);
                }
            }
            let count = ((yb - ya) * (xb - xa)) as f64;
            out.extend(sum.iter().map(|s| s / count));
        }
    }
    out
}

/// im2col for a 3×3, stride-1, zero-padded convolution over an `h×w` map
/// stored as (h·w)×c.
fn im2col_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * 9 * c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (sy, sx) = (y + dy, x + dx);
                    let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                    for ch in 0..c {
                        index.push(if inside {
                            (sy as usize * w + sx as usize) * c + ch
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    index
}

/// Index of one of the four 2×2 pooling taps over an `h×w` map of `c` channels.
fn pool_tap_index(h: usize, w: usize, c: usize, oy: usize, ox: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h / 2 * w / 2 * c);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for ch in 0..c {
                index.push(((2 * y + oy) * w + 2 * x + ox) * c + ch);
            }
        }
    }
    index
}

/// Φ on a graph: returns a 1×d feature row for an image at the backbone input size.
pub fn phi(g: &mut Graph, cfg: &VisionConfig, image: &Image) -> Result<Var> {
    let image = if image.height != cfg.input_size || image.width != cfg.input_size {
        resize_bilinear(image, cfg.input_size, cfg.input_size)
    } else {
        image.clone()
    };
    match cfg.kind {
        BackboneKind::MeanPatch => {
            let means = g
                .tape
                .constant(Tensor::new(vec![1, PATCH_FEATURES], cell_means(&image))?);
            let proj = g.param(PROJECTION)?;
            let pt = g.tape.transpose(proj)?;
            g.tape.matmul(means, pt)
        }
        BackboneKind::TinyCnn => {
            let (mut h, mut w, mut c) = (image.height, image.width, 3);
            let mut x = g
                .tape
                .constant(Tensor::new(vec![h * w, c], image.pixels.clone())?);
            for (i, &c_out) in cfg.cnn_channels.iter().enumerate() {
                let cols = g.tape.gather(x, im2col_index(h, w, c), vec![h * w, 9 * c])?;
                let wt = g.param(&cnn_name(&format!("conv{i}.w")))?;
                let b = g.param(&cnn_name(&format!("conv{i}.b")))?;
                let conv = g.tape.matmul(cols, wt)?;
                let conv = g.tape.add_bias(conv, b)?;
                let act = g.tape.relu(conv);
                let mut pooled = None;
                for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let tap = g.tape.gather(
                        act,
                        pool_tap_index(h, w, c_out, oy, ox),
                        vec![h / 2 * (w / 2), c_out],
                    )?;
                    pooled = Some(match pooled {
                        None => tap,
                        Some(acc) => g.tape.add(acc, tap)?,
                    });
                }
                x = g.tape.scale(pooled.expect("four taps"), 0.25);
                h /= 2;
                w /= 2;
                c = c_out;
            }
            let ones = g
                .tape
                .constant(Tensor::filled(&[1, h * w], 1.0 / (h * w) as f64));
            let gap = g.tape.matmul(ones, x)?;
            let fw = g.param(&cnn_name("fc.w"))?;
            let fb = g.param(&cnn_name("fc.b"))?;
            let out = g.tape.matmul(gap, fw)?;
            g.tape.add_bias(out, fb)
        }
    }
}

/// Φ evaluated without gradients.
pub fn phi_value(store: &ParamStore, cfg: &VisionConfig, image: &Image) -> Result<Vec<f64>> {
    let mut g = Graph::inference(store);
    let v = phi(&mut g, cfg, image)?;
    Ok(g.tape.data(v).to_vec())
}

/// Convenience for tests and generators: a random image.
pub fn random_image<R: Rng>(height: usize, width: usize, rng: &mut R) -> Image {
    let pixels = (0..height * width * 3).map(|_| rng.random::<f64>()).collect();
    Image {
        height,
        width,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize) -> Image {
        let mut img = Image::filled(n, n, [0.0; 3]).unwrap();
        for y in 0..n {
            for x in 0..n {
                if (x + y) % 2 == 0 {
                    img.set_pixel(y, x, [1.0, 0.5, 0.25]);
                }
            }
        }
        img
    }

    #[test]
    fn full_box_on_target_size_is_identity() {
        let img = random_image(16, 16, &mut ChaCha8Rng::seed_from_u64(1));
        let out = crop(&img, &img.full_box(), Some(16)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn left_half_of_checkerboard() {
        let img = checkerboard(4);
        let out = crop(&img, &BoundingBox::new(0.0, 0.0, 2.0, 4.0), None).unwrap();
        assert_eq!((out.height(), out.width()), (4, 2));
        for y in 0..4 {
            for x in 0..2 {
                assert_eq!(out.pixel(y, x), img.pixel(y, x));
            }
        }
    }

    #[test]
    fn degenerate_and_outside_boxes_fail() {
        let img = checkerboard(4);
        let bad = [
            BoundingBox::new(1.0, 0.0, 1.0, 3.0),
            BoundingBox::new(3.0, 0.0, 1.0, 3.0),
            BoundingBox::new(5.0, 5.0, 8.0, 8.0),
        ];
        for b in bad {
            assert!(matches!(crop(&img, &b, None), Err(Error::Box(_))));
        }
    }

    #[test]
    fn out_of_frame_box_is_clipped() {
        let img = checkerboard(4);
        let out = crop(&img, &BoundingBox::new(-3.0, 2.0, 9.0, 7.0), None).unwrap();
        assert_eq!((out.height(), out.width()), (2, 4));
    }

    #[test]
    fn crop_of_crop_is_idempotent() {
        let img = random_image(12, 9, &mut ChaCha8Rng::seed_from_u64(4));
        let once = crop(&img, &img.full_box(), Some(16)).unwrap();
        let twice = crop(&once, &once.full_box(), Some(16)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mean_patch_on_gray_is_projection_of_halves() {
        let cfg = VisionConfig::default();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store);
        let img = Image::filled(16, 16, [0.5; 3]).unwrap();
        let feat = phi_value(&store, &cfg, &img).unwrap();
        assert!(cell_means(&img).iter().all(|&m| m == 0.5));
        let proj = store.get(PROJECTION).unwrap();
        for (i, f) in feat.iter().enumerate() {
            let row = proj.row(i).unwrap();
            let direct: f64 = row.iter().map(|p| p * 0.5).sum();
            assert!((f - direct).abs() < 1e-12);
        }
        assert_eq!(feat.len(), cfg.out_dim);
    }

    #[test]
    fn mean_patch_ignores_permutation_within_cell() {
        let cfg = VisionConfig::default();
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store);
        let img = random_image(16, 16, &mut ChaCha8Rng::seed_from_u64(9));
        let mut swapped = img.clone();
        // (0,0) and (3,2) share the top-left 4x4 cell
        swapped.set_pixel(0, 0, img.pixel(3, 2));
        swapped.set_pixel(3, 2, img.pixel(0, 0));
        let a = phi_value(&store, &cfg, &img).unwrap();
        let b = phi_value(&store, &cfg, &swapped).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_cnn_output_dimension() {
        let cfg = VisionConfig {
            kind: BackboneKind::TinyCnn,
            ..VisionConfig::default()
        };
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store);
        for size in [5, 16, 23] {
            let img = random_image(size, size + 2, &mut ChaCha8Rng::seed_from_u64(size as u64));
            assert_eq!(phi_value(&store, &cfg, &img).unwrap().len(), cfg.out_dim);
        }
    }

    #[test]
    fn frozen_backbone_gets_no_gradient() {
        let cfg = VisionConfig {
            kind: BackboneKind::TinyCnn,
            ..VisionConfig::default()
        };
        let mut store = ParamStore::new();
        init_params(&cfg, &mut store);
        let img = random_image(16, 16, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new(&store);
        let f = phi(&mut g, &cfg, &img).unwrap();
        let loss = g.tape.sum(f);
        let grads = g.backward(loss).unwrap();
        assert!(grads.0.keys().all(|k| !k.starts_with("vision.")));
    }

    #[test]
    fn ppm_round_trip() {
        let img = Image::from_u8(2, 3, &(0..18).map(|v| v * 10).collect::<Vec<u8>>()).unwrap();
        let back = Image::decode_ppm(&img.encode_ppm()).unwrap();
        assert_eq!(back, img);
    }
}
