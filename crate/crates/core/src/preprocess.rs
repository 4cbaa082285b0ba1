//! Clothing erasure, part-mask supervision and paired training augmentation.

use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ImageSample, LabelVocabulary, NUM_PARTS};
use crate::error::{Error, Result};

/// Sets every clothes-labelled pixel to zero in all three channels.
pub fn erase_clothing(sample: &ImageSample, vocab: &LabelVocabulary) -> Array3<f32> {
    erase_labels(&sample.image, &sample.parsing, &vocab.clothes_table())
}

fn erase_labels(image: &Array3<f32>, parsing: &Array2<u8>, erase: &[bool]) -> Array3<f32> {
    let mut out = image.clone();
    for ((y, x), &label) in parsing.indexed_iter() {
        if erase.get(label as usize).copied().unwrap_or(false) {
            out.slice_mut(s![y, x, ..]).fill(0.0);
        }
    }
    out
}

/// Binary part masks at feature resolution, `[K, h, w]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMaskSet {
    pub masks: Array3<u8>,
}

impl PartMaskSet {
    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.masks.dim();
        (h, w)
    }

    /// Checks that every cell belongs to at most one part.
    pub fn validate(&self) -> Result<()> {
        let (k, h, w) = self.masks.dim();
        if k != NUM_PARTS {
            return Err(Error::validation(format!("part mask set has {k} channels")));
        }
        for i in 0..h {
            for j in 0..w {
                let total: u32 = (0..k).map(|c| self.masks[[c, i, j]] as u32).sum();
                if total > 1 || (0..k).any(|c| self.masks[[c, i, j]] > 1) {
                    return Err(Error::validation(format!("cell ({i}, {j}) is not one-hot")));
                }
            }
        }
        Ok(())
    }
}

/// Half-open source range `[start, end)` covered by output cell `i` of `n`
/// when `len >= n` source pixels are split proportionally.
pub fn cell_bounds(i: usize, n: usize, len: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

/// Downsamples the parsing map to `h x w` part masks by majority vote in
/// each cell. Ties between parts go to the lower part index and background
/// loses ties to any part.
pub fn build_part_masks(
    parsing: &Array2<u8>,
    vocab: &LabelVocabulary,
    h: usize,
    w: usize,
) -> Result<PartMaskSet> {
    let (ph, pw) = parsing.dim();
    if h == 0 || w == 0 || h > ph || w > pw {
        return Err(Error::shape(format!(
            "cannot build {h}x{w} part masks from a {ph}x{pw} parsing map"
        )));
    }
    let table = vocab.part_table();
    let mut masks = Array3::<u8>::zeros((NUM_PARTS, h, w));
    for i in 0..h {
        let (y0, y1) = cell_bounds(i, h, ph);
        for j in 0..w {
            let (x0, x1) = cell_bounds(j, w, pw);
            let mut votes = [0usize; NUM_PARTS];
            let mut background = 0usize;
            for &label in parsing.slice(s![y0..y1, x0..x1]).iter() {
                match table.get(label as usize).copied().flatten() {
                    Some(k) => votes[k] += 1,
                    None => background += 1,
                }
            }
            let (best, count) = votes
                .iter()
                .enumerate()
                .fold((0, 0), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            if count > 0 && count >= background {
                masks[[best, i, j]] = 1;
            }
        }
    }
    Ok(PartMaskSet { masks })
}

/// Training-time augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub flip_probability: f64,
    pub crop_padding: usize,
    pub erase_probability: f64,
    pub erase_area_range: (f64, f64),
    pub erase_aspect_range: (f64, f64),
    /// Label written into the parsing view under an erased rectangle.
    pub erase_label: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_height: 384,
            target_width: 192,
            flip_probability: 0.5,
            crop_padding: 10,
            erase_probability: 0.5,
            erase_area_range: (0.02, 0.4),
            erase_aspect_range: (0.3, 1.0 / 0.3),
            erase_label: 0,
        }
    }
}

impl AugmentConfig {
    /// Resize only; every random transform disabled.
    pub fn identity(target_height: usize, target_width: usize) -> Self {
        Self {
            target_height,
            target_width,
            flip_probability: 0.0,
            crop_padding: 0,
            erase_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::validation("augment target dimensions must be positive"));
        }
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("erase_probability", self.erase_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        let (a0, a1) = self.erase_area_range;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::validation("erase_area_range must satisfy 0 < lo <= hi <= 1"));
        }
        let (r0, r1) = self.erase_aspect_range;
        if !(0.0 < r0 && r0 <= r1) {
            return Err(Error::validation("erase_aspect_range must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// Augmented raw view, black-clothing view and parsing view.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedViews {
    pub raw: Array3<f32>,
    pub black: Array3<f32>,
    pub parsing: Array2<u8>,
}

/// Applies one random draw of resize, pad-and-crop, flip and random erasing
/// identically to the two image views and the parsing map.
pub fn augment<R: Rng + ?Sized>(
    raw: &Array3<f32>,
    black: &Array3<f32>,
    parsing: &Array2<u8>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedViews> {
    if raw.dim() != black.dim() {
        return Err(Error::shape("raw and black-clothing images differ in size"));
    }
    let (h, w, _) = raw.dim();
    if parsing.dim() != (h, w) {
        return Err(Error::shape("parsing map does not match the image size"));
    }
    let (th, tw) = (cfg.target_height, cfg.target_width);
    let mut raw_v = resize_bilinear(raw, th, tw);
    let mut black_v = resize_bilinear(black, th, tw);
    let mut parse_v = resize_nearest(parsing, th, tw);

    if cfg.crop_padding > 0 {
        let span = 2 * cfg.crop_padding;
        let oy = rng.random_range(0..=span);
        let ox = rng.random_range(0..=span);
        raw_v = pad_crop(&raw_v, cfg.crop_padding, oy, ox);
        black_v = pad_crop(&black_v, cfg.crop_padding, oy, ox);
        parse_v = pad_crop_map(&parse_v, cfg.crop_padding, oy, ox, cfg.erase_label);
    }

    if cfg.flip_probability > 0.0 && rng.random_bool(cfg.flip_probability) {
        raw_v.invert_axis(ndarray::Axis(1));
        black_v.invert_axis(ndarray::Axis(1));
        parse_v.invert_axis(ndarray::Axis(1));
        raw_v = raw_v.as_standard_layout().to_owned();
        black_v = black_v.as_standard_layout().to_owned();
        parse_v = parse_v.as_standard_layout().to_owned();
    }

    if cfg.erase_probability > 0.0 && rng.random_bool(cfg.erase_probability) {
        if let Some((y0, x0, eh, ew)) = erase_rectangle(th, tw, cfg, rng) {
            raw_v.slice_mut(s![y0..y0 + eh, x0..x0 + ew, ..]).fill(0.0);
            black_v.slice_mut(s![y0..y0 + eh, x0..x0 + ew, ..]).fill(0.0);
            parse_v.slice_mut(s![y0..y0 + eh, x0..x0 + ew]).fill(cfg.erase_label);
        }
    }

    Ok(AugmentedViews {
        raw: raw_v,
        black: black_v,
        parsing: parse_v,
    })
}

fn erase_rectangle<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    let (a0, a1) = cfg.erase_area_range;
    let (r0, r1) = cfg.erase_aspect_range;
    for _ in 0..100 {
        let target = area * rng.random_range(a0..=a1);
        let aspect = rng.random_range(r0.ln()..=r1.ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh > 0 && ew > 0 && eh < h && ew < w {
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            return Some((y0, x0, eh, ew));
        }
    }
    None
}

fn pad_crop(img: &Array3<f32>, pad: usize, oy: usize, ox: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let sy = (y + oy) as isize - pad as isize;
        let sx = (x + ox) as isize - pad as isize;
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            img[[sy as usize, sx as usize, ch]]
        } else {
            0.0
        }
    })
}

fn pad_crop_map(map: &Array2<u8>, pad: usize, oy: usize, ox: usize, fill: u8) -> Array2<u8> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (y + oy) as isize - pad as isize;
        let sx = (x + ox) as isize - pad as isize;
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            map[[sy as usize, sx as usize]]
        } else {
            fill
        }
    })
}

/// Bilinear resize with half-pixel centers. Same-size input is returned
/// unchanged.
pub fn resize_bilinear(img: &Array3<f32>, th: usize, tw: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    if (h, w) == (th, tw) {
        return img.as_standard_layout().to_owned();
    }
    let sy = h as f32 / th as f32;
    let sx = w as f32 / tw as f32;
    let coord = |d: usize, scale: f32, len: usize| {
        let src = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f32)
    };
    Array3::from_shape_fn((th, tw, c), |(y, x, ch)| {
        let (y0, y1, fy) = coord(y, sy, h);
        let (x0, x1, fx) = coord(x, sx, w);
        let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
        let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Nearest-neighbour resize for label maps.
pub fn resize_nearest(map: &Array2<u8>, th: usize, tw: usize) -> Array2<u8> {
    let (h, w) = map.dim();
    if (h, w) == (th, tw) {
        return map.as_standard_layout().to_owned();
    }
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / th as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / tw as f64).floor() as usize;
        map[[sy.min(h - 1), sx.min(w - 1)]]
    })
}
