//! Procedural cloth-changing pedestrian dataset.
//!
//! Every person is a flat-shaded stick figure whose *identity* fixes the
//! clothing-independent attributes: hair colour and cut, skin tone, head
//! width, body height, leg proportions and shoe colour. The *outfit* fixes
//! garment colours, patterns and cut over the torso and hips. The *camera*
//! fixes the background, a global illumination gain and a horizontal offset.
//! The renderer writes the exact parsing map for every pixel.
//!
//! Identity is therefore recoverable only from the head and the legs/feet,
//! while garments are large, saturated and change between outfits, which is
//! the trap a clothing-colour model falls into on the cloth-changing split.
//!
//! Split: the last outfit of every identity goes to `query`. For the other
//! outfits the first half of each outfit's images (rounded up) goes to
//! `train` and the rest to `gallery`; with one image per outfit the outfits
//! alternate between `train` and `gallery` instead.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{
    labels, save_image, save_parsing, DatasetIndex, IndexEntry, LabelVocabulary, Split,
};
use crate::error::{Error, Result};
use crate::seeding::derived_rng;

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub outfits_per_identity: usize,
    pub images_per_outfit: usize,
    pub num_cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 8,
            outfits_per_identity: 3,
            images_per_outfit: 4,
            num_cameras: 2,
            image_height: 128,
            image_width: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_identities", self.num_identities),
            ("outfits_per_identity", self.outfits_per_identity),
            ("images_per_outfit", self.images_per_outfit),
            ("num_cameras", self.num_cameras),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be positive")));
        }
        if self.outfits_per_identity < 2 {
            return Err(Error::validation(
                "outfits_per_identity must be at least 2 so queries can change clothes",
            ));
        }
        if (self.outfits_per_identity - 1) * self.images_per_outfit < 2 {
            return Err(Error::validation(
                "need at least two non-query images per identity (one train, one gallery)",
            ));
        }
        if self.image_height < 32 || self.image_width < 16 {
            return Err(Error::validation("images must be at least 32x16"));
        }
        if self.num_identities > 999 || self.outfits_per_identity > 99 || self.images_per_outfit > 99 {
            return Err(Error::validation("dataset too large for the file naming scheme"));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.num_identities * self.outfits_per_identity * self.images_per_outfit
    }

    /// Split assigned to image `image` of outfit `outfit`.
    pub fn split_of(&self, outfit: usize, image: usize) -> Split {
        if outfit + 1 == self.outfits_per_identity {
            Split::Query
        } else if self.images_per_outfit == 1 {
            if outfit % 2 == 0 {
                Split::Train
            } else {
                Split::Gallery
            }
        } else if image < self.images_per_outfit.div_ceil(2) {
            Split::Train
        } else {
            Split::Gallery
        }
    }

    pub fn camera_of(&self, image: usize) -> usize {
        image % self.num_cameras
    }
}

type Rgb = [f32; 3];

/// Clothing-independent appearance of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTraits {
    pub hair: Rgb,
    pub skin: Rgb,
    pub shoes: Rgb,
    /// Fraction of the head ellipse covered by hair, from the top.
    pub hair_cut: f32,
    pub head_width: f32,
    pub height: f32,
    /// Hip position as a fraction of body height.
    pub hip: f32,
    pub leg_width: f32,
    pub wears_sunglasses: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    HorizontalStripes,
    VerticalStripes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutfitTraits {
    pub upper: Rgb,
    pub upper_accent: Rgb,
    pub upper_pattern: Pattern,
    /// `upper-clothes` or `coat`.
    pub upper_label: u8,
    pub sleeve: f32,
    pub lower: Rgb,
    /// `pants` or `skirt`.
    pub lower_label: u8,
    /// Garment length below the hip as a fraction of leg length.
    pub lower_length: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraTraits {
    pub background_top: Rgb,
    pub background_bottom: Rgb,
    pub gain: f32,
    pub offset: i32,
}

fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    derived_rng(seed, parts)
}

fn hsv(h: f32, s: f32, v: f32) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const GOLDEN: f32 = 0.618_034;

pub fn identity_traits(seed: u64, person: usize) -> IdentityTraits {
    let mut rng = stream(seed, &[1, person as u64]);
    // low-discrepancy hue / tone sequences keep identities apart
    let phase = (person as f32 * GOLDEN).fract();
    let tone = ((person as f32 + 0.5) * 0.381_966).fract();
    let hair = hsv(phase, 0.85 + 0.15 * rng.random::<f32>(), 0.55 + 0.45 * tone);
    let skin = {
        let base = [0.95, 0.80, 0.68];
        let dark = [0.42, 0.28, 0.18];
        let t = (tone * 1.7).fract();
        [0, 1, 2].map(|c| base[c] + (dark[c] - base[c]) * t)
    };
    let shoes = hsv(phase + 0.5, 0.9, 0.45 + 0.55 * ((person as f32 * 0.754_877).fract()));
    IdentityTraits {
        hair,
        skin,
        shoes,
        hair_cut: 0.4 + 0.35 * ((person as f32 * 0.569_840).fract()),
        head_width: 0.8 + 0.4 * rng.random::<f32>(),
        height: 0.84 + 0.14 * ((person as f32 * 0.445_041).fract()),
        hip: 0.50 + 0.06 * rng.random::<f32>(),
        leg_width: 0.8 + 0.4 * rng.random::<f32>(),
        wears_sunglasses: person % 3 == 1,
    }
}

/// Garment hues shared by everyone, so a colour alone never names a person.
const GARMENT_HUES: [f32; 6] = [0.0, 0.08, 0.17, 0.33, 0.55, 0.72];
const LOWER_TONES: [(f32, f32, f32); 4] = [(0.62, 0.6, 0.45), (0.0, 0.0, 0.22), (0.08, 0.35, 0.5), (0.0, 0.0, 0.7)];

pub fn outfit_traits(seed: u64, person: usize, outfit: usize) -> OutfitTraits {
    let mut rng = stream(seed, &[2, person as u64, outfit as u64]);
    let pick = |rng: &mut ChaCha8Rng| GARMENT_HUES[rng.random_range(0..GARMENT_HUES.len())] + rng.random_range(-0.02..0.02);
    let upper = hsv(pick(&mut rng), 0.35 + 0.2 * rng.random::<f32>(), 0.5 + 0.3 * rng.random::<f32>());
    let upper_accent = hsv(pick(&mut rng), 0.4, 0.35 + 0.4 * rng.random::<f32>());
    let upper_pattern = match rng.random_range(0..3) {
        0 => Pattern::Solid,
        1 => Pattern::HorizontalStripes,
        _ => Pattern::VerticalStripes,
    };
    let (lh, ls, lv) = LOWER_TONES[rng.random_range(0..LOWER_TONES.len())];
    let lower = hsv(lh, ls, lv + rng.random_range(-0.05..0.05));
    let skirt = rng.random_bool(0.25);
    OutfitTraits {
        upper,
        upper_accent,
        upper_pattern,
        upper_label: if rng.random_bool(0.3) { labels::COAT } else { labels::UPPER_CLOTHES },
        sleeve: rng.random_range(0.25..1.0),
        lower,
        lower_label: if skirt { labels::SKIRT } else { labels::PANTS },
        lower_length: if skirt { rng.random_range(0.3..0.5) } else { rng.random_range(0.45..0.8) },
    }
}

pub fn camera_traits(seed: u64, camera: usize) -> CameraTraits {
    let mut rng = stream(seed, &[3, camera as u64]);
    let hue: f32 = rng.random();
    CameraTraits {
        background_top: hsv(hue, 0.15 + 0.2 * rng.random::<f32>(), 0.45 + 0.35 * rng.random::<f32>()),
        background_bottom: hsv(hue + 0.1, 0.1 + 0.2 * rng.random::<f32>(), 0.3 + 0.3 * rng.random::<f32>()),
        gain: 0.8 + 0.4 * rng.random::<f32>(),
        offset: rng.random_range(-4..=4),
    }
}

/// Rendered image and its exact parsing map.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub image: Array3<f32>,
    pub parsing: Array2<u8>,
}

struct Canvas {
    image: Array3<f32>,
    parsing: Array2<u8>,
}

impl Canvas {
    fn put(&mut self, y: isize, x: isize, color: Rgb, label: u8) {
        let (h, w) = self.parsing.dim();
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            return;
        }
        let (y, x) = (y as usize, x as usize);
        self.parsing[[y, x]] = label;
        for c in 0..3 {
            self.image[[y, x, c]] = color[c];
        }
    }

    fn ellipse(&mut self, cy: f32, cx: f32, ry: f32, rx: f32, mut paint: impl FnMut(f32, f32) -> Option<(Rgb, u8)>) {
        let (y0, y1) = ((cy - ry).floor() as isize, (cy + ry).ceil() as isize);
        let (x0, x1) = ((cx - rx).floor() as isize, (cx + rx).ceil() as isize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    if let Some((c, l)) = paint(dy, dx) {
                        self.put(y, x, c, l);
                    }
                }
            }
        }
    }

    /// Fills the convex quadrilateral `pts` (y, x) in order.
    fn quad(&mut self, pts: [(f32, f32); 4], mut paint: impl FnMut(f32, f32) -> (Rgb, u8)) {
        let ys = pts.iter().map(|p| p.0);
        let xs = pts.iter().map(|p| p.1);
        let y0 = ys.clone().fold(f32::INFINITY, f32::min).floor() as isize;
        let y1 = ys.fold(f32::NEG_INFINITY, f32::max).ceil() as isize;
        let x0 = xs.clone().fold(f32::INFINITY, f32::min).floor() as isize;
        let x1 = xs.fold(f32::NEG_INFINITY, f32::max).ceil() as isize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                let mut sign = 0i8;
                let mut inside = true;
                for i in 0..4 {
                    let (ay, ax) = pts[i];
                    let (by, bx) = pts[(i + 1) % 4];
                    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                    let s = if cross > 0.0 { 1 } else if cross < 0.0 { -1 } else { 0 };
                    if s != 0 {
                        if sign == 0 {
                            sign = s;
                        } else if s != sign {
                            inside = false;
                            break;
                        }
                    }
                }
                if inside {
                    let (c, l) = paint(py, px);
                    self.put(y, x, c, l);
                }
            }
        }
    }

    /// Thick segment from `a` to `b`.
    fn limb(&mut self, a: (f32, f32), b: (f32, f32), half: f32, paint: impl FnMut(f32, f32) -> (Rgb, u8)) {
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len = (dy * dy + dx * dx).sqrt().max(1e-3);
        let (ny, nx) = (-dx / len * half, dy / len * half);
        self.quad(
            [
                (a.0 + ny, a.1 + nx),
                (b.0 + ny, b.1 + nx),
                (b.0 - ny, b.1 - nx),
                (a.0 - ny, a.1 - nx),
            ],
            paint,
        );
    }
}

fn shade(c: Rgb, gain: f32) -> Rgb {
    c.map(|v| (v * gain).clamp(0.0, 1.0))
}

/// Renders one image of `person` wearing `outfit` under `camera`; `variation`
/// selects the per-image pose jitter.
pub fn render(cfg: &SynthConfig, person: usize, outfit: usize, camera: usize, variation: usize) -> Rendering {
    let id = identity_traits(cfg.seed, person);
    let fit = outfit_traits(cfg.seed, person, outfit);
    let cam = camera_traits(cfg.seed, camera);
    let mut rng = stream(cfg.seed, &[4, person as u64, outfit as u64, camera as u64, variation as u64]);

    let (h, w) = (cfg.image_height, cfg.image_width);
    let (hf, wf) = (h as f32, w as f32);
    let mut canvas = Canvas {
        image: Array3::zeros((h, w, 3)),
        parsing: Array2::zeros((h, w)),
    };
    for y in 0..h {
        let t = y as f32 / (h - 1) as f32;
        for x in 0..w {
            let n = 0.04 * (rng.random::<f32>() - 0.5);
            let c = [0, 1, 2].map(|k| cam.background_top[k] * (1.0 - t) + cam.background_bottom[k] * t + n);
            canvas.put(y as isize, x as isize, shade(c, cam.gain), labels::BACKGROUND);
        }
    }

    let g = cam.gain * (0.95 + 0.1 * rng.random::<f32>());
    let scale = wf / 64.0;
    let body = hf * 0.9 * id.height;
    let bottom = hf * 0.96 + rng.random_range(-1.0..1.0) * scale;
    let top = bottom - body;
    let cx = wf / 2.0 + cam.offset as f32 * scale + rng.random_range(-2.0..2.0) * scale;
    let at = |f: f32| top + f * body;

    let head_ry = 0.095 * body;
    let head_rx = (0.07 * body * id.head_width).min(wf * 0.22);
    let head_cy = at(0.095);
    let shoulder = at(0.2);
    let hip = at(id.hip);
    let ankle = at(0.95);
    let torso_half = 0.13 * body * 0.5 + 3.0 * scale;
    let leg_half = 2.2 * scale * id.leg_width;
    let stride = rng.random_range(1.0..4.0) * scale;

    // legs, then lower garment over them
    let feet = [cx - torso_half * 0.45 - stride, cx + torso_half * 0.45 + stride];
    let hips = [cx - torso_half * 0.45, cx + torso_half * 0.45];
    let leg_labels = [labels::LEFT_LEG, labels::RIGHT_LEG];
    for side in 0..2 {
        let skin = shade(id.skin, g);
        canvas.limb((hip, hips[side]), (ankle, feet[side]), leg_half, |_, _| (skin, leg_labels[side]));
    }
    let lower = shade(fit.lower, g);
    let hem = hip + (ankle - hip) * fit.lower_length;
    if fit.lower_label == labels::SKIRT {
        let flare = torso_half * 1.25 + (hem - hip) * 0.25;
        canvas.quad(
            [(hip - 1.0, cx - torso_half), (hip - 1.0, cx + torso_half), (hem, cx + flare), (hem, cx - flare)],
            |_, _| (lower, labels::SKIRT),
        );
    } else {
        for side in 0..2 {
            let t = fit.lower_length;
            let knee_x = hips[side] + (feet[side] - hips[side]) * t;
            canvas.limb((hip - 1.0, hips[side]), (hem, knee_x), leg_half + 1.5 * scale, |_, _| (lower, labels::PANTS));
        }
        canvas.quad(
            [(hip - 1.0, cx - torso_half), (hip - 1.0, cx + torso_half), (hip + 3.0 * scale, cx + torso_half), (hip + 3.0 * scale, cx - torso_half)],
            |_, _| (lower, labels::PANTS),
        );
    }
    let shoes = shade(id.shoes, g);
    for &fx in &feet {
        canvas.ellipse(ankle + 1.5 * scale, fx + 1.0 * scale, 2.2 * scale, 3.6 * scale, |_, _| Some((shoes, labels::SHOES)));
    }

    // arms: sleeve from the shoulder, skin below
    let arm_labels = [labels::LEFT_ARM, labels::RIGHT_ARM];
    let upper = shade(fit.upper, g);
    let accent = shade(fit.upper_accent, g);
    for side in 0..2 {
        let dir = if side == 0 { -1.0 } else { 1.0 };
        let swing = rng.random_range(0.05..0.35);
        let root = (shoulder + 1.0 * scale, cx + dir * (torso_half - 1.0 * scale));
        let hand = (root.0 + 0.34 * body, root.1 + dir * swing * 0.34 * body * 0.5);
        let skin = shade(id.skin, g);
        canvas.limb(root, hand, 1.8 * scale, |_, _| (skin, arm_labels[side]));
        let elbow = (root.0 + (hand.0 - root.0) * fit.sleeve, root.1 + (hand.1 - root.1) * fit.sleeve);
        canvas.limb(root, elbow, 2.3 * scale, |_, _| (upper, fit.upper_label));
    }

    // torso
    let stripe = (3.0 * scale).max(2.0);
    canvas.quad(
        [(shoulder, cx - torso_half), (shoulder, cx + torso_half), (hip + 1.0, cx + torso_half * 0.92), (hip + 1.0, cx - torso_half * 0.92)],
        |py, px| {
            let banded = match fit.upper_pattern {
                Pattern::Solid => false,
                Pattern::HorizontalStripes => ((py / stripe) as i32) % 2 == 0,
                Pattern::VerticalStripes => (((px - cx + 64.0) / stripe) as i32) % 2 == 0,
            };
            (if banded { accent } else { upper }, fit.upper_label)
        },
    );

    // neck and head
    let skin = shade(id.skin, g);
    canvas.quad(
        [(head_cy + head_ry * 0.6, cx - 2.0 * scale), (head_cy + head_ry * 0.6, cx + 2.0 * scale), (shoulder + 1.0, cx + 2.0 * scale), (shoulder + 1.0, cx - 2.0 * scale)],
        |_, _| (skin, labels::FACE),
    );
    let hair = shade(id.hair, g);
    let cut = 1.0 - 2.0 * id.hair_cut;
    canvas.ellipse(head_cy, cx, head_ry, head_rx, |dy, dx| {
        if dy <= -cut || (dx.abs() > 0.8 && dy < 0.2) {
            Some((hair, labels::HAIR))
        } else {
            Some((skin, labels::FACE))
        }
    });
    if id.wears_sunglasses {
        let glasses = shade([0.05, 0.05, 0.08], g);
        let gy = head_cy - head_ry * 0.05;
        canvas.quad(
            [(gy - 1.2 * scale, cx - head_rx * 0.75), (gy - 1.2 * scale, cx + head_rx * 0.75), (gy + 1.2 * scale, cx + head_rx * 0.75), (gy + 1.2 * scale, cx - head_rx * 0.75)],
            |_, _| (glasses, labels::SUNGLASSES),
        );
    }

    canvas.image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Rendering {
        image: canvas.image,
        parsing: canvas.parsing,
    }
}

/// Renders the whole dataset into `out_dir` and writes `index.tsv` plus the
/// vocabulary beside it.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    let parsing_dir = out_dir.join("parsing");
    for d in [out_dir, &images_dir, &parsing_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(cfg.total_images());
    for person in 0..cfg.num_identities {
        for outfit in 0..cfg.outfits_per_identity {
            for image in 0..cfg.images_per_outfit {
                let camera = cfg.camera_of(image);
                let r = render(cfg, person, outfit, camera, image);
                let name = format!("p{person:03}_o{outfit:02}_i{image:02}_c{camera}.png");
                let image_path = PathBuf::from("images").join(&name);
                let parsing_path = PathBuf::from("parsing").join(&name);
                save_image(&out_dir.join(&image_path), &r.image)?;
                save_parsing(&out_dir.join(&parsing_path), &r.parsing)?;
                entries.push(IndexEntry {
                    image_path,
                    parsing_path,
                    person_id: person as u32,
                    clothes_id: (person * cfg.outfits_per_identity + outfit) as u32,
                    camera_id: camera as u32,
                    split: cfg.split_of(outfit, image),
                });
            }
        }
    }
    let index = DatasetIndex {
        entries,
        vocabulary: LabelVocabulary::default(),
        root: out_dir.to_path_buf(),
    };
    index.validate()?;
    index.write(&out_dir.join(INDEX_FILE))?;
    Ok(index)
}
