//! Samples, dataset index files and the parsing-label vocabulary.
//!
//! Index file: UTF-8, one record per line, tab separated
//! `image_path  parsing_path  person_id  clothes_id  camera_id  split`,
//! `#` starts a comment line. Relative paths resolve against the directory
//! holding the index.
//!
//! Vocabulary file (`vocabulary.tsv` next to the index, optional):
//! `label_id  name  flags`, flags a comma-separated subset of
//! `clothes, head, upper, lower, feet, background`, or `-` for none.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Number of body parts supervised by the attention maps
/// (head, upper body, lower body, feet).
pub const NUM_PARTS: usize = 4;

/// File name of the optional vocabulary that sits beside an index.
pub const VOCABULARY_FILE: &str = "vocabulary.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}` (expected train, query or gallery)")),
        }
    }
}

/// Body part index used by [`LabelVocabulary::part_groups`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Head = 0,
    Upper = 1,
    Lower = 2,
    Feet = 3,
}

impl Part {
    pub const ALL: [Part; NUM_PARTS] = [Part::Head, Part::Upper, Part::Lower, Part::Feet];

    fn flag(self) -> &'static str {
        match self {
            Part::Head => "head",
            Part::Upper => "upper",
            Part::Lower => "lower",
            Part::Feet => "feet",
        }
    }
}

/// One pedestrian observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `[height, width, 3]`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[height, width]` parsing label ids.
    pub parsing: Array2<u8>,
    pub person_id: u32,
    pub clothes_id: u32,
    pub camera_id: u32,
    pub split: Split,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn validate(&self, vocab: &LabelVocabulary) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return Err(Error::validation(format!("image has {c} channels, expected 3")));
        }
        if self.parsing.dim() != (h, w) {
            return Err(Error::validation(format!(
                "image is {h}x{w} but parsing is {}x{}",
                self.parsing.dim().0,
                self.parsing.dim().1
            )));
        }
        if let Some(&bad) = self.parsing.iter().find(|&&l| l as usize >= vocab.len()) {
            return Err(Error::validation(format!(
                "parsing label {bad} outside vocabulary of {} labels",
                vocab.len()
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("image values outside [0, 1]"));
        }
        Ok(())
    }
}

/// Parsing label names plus the clothes / body-part grouping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    pub names: Vec<String>,
    pub clothes_labels: BTreeSet<u8>,
    pub part_groups: [BTreeSet<u8>; NUM_PARTS],
    pub background_labels: BTreeSet<u8>,
}

/// Label ids of the default 18-label human-parsing palette.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const HAT: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const SUNGLASSES: u8 = 3;
    pub const UPPER_CLOTHES: u8 = 4;
    pub const DRESS: u8 = 5;
    pub const COAT: u8 = 6;
    pub const SOCKS: u8 = 7;
    pub const PANTS: u8 = 8;
    pub const JUMPSUIT: u8 = 9;
    pub const SCARF: u8 = 10;
    pub const SKIRT: u8 = 11;
    pub const FACE: u8 = 12;
    pub const LEFT_ARM: u8 = 13;
    pub const RIGHT_ARM: u8 = 14;
    pub const LEFT_LEG: u8 = 15;
    pub const RIGHT_LEG: u8 = 16;
    pub const SHOES: u8 = 17;
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        use labels::*;
        let names = [
            "background",
            "hat",
            "hair",
            "sunglasses",
            "upper-clothes",
            "dress",
            "coat",
            "socks",
            "pants",
            "jumpsuit",
            "scarf",
            "skirt",
            "face",
            "left-arm",
            "right-arm",
            "left-leg",
            "right-leg",
            "shoes",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let set = |ids: &[u8]| ids.iter().copied().collect::<BTreeSet<u8>>();
        Self {
            names,
            clothes_labels: set(&[UPPER_CLOTHES, DRESS, COAT, PANTS, JUMPSUIT, SCARF, SKIRT]),
            part_groups: [
                set(&[HAT, HAIR, SUNGLASSES, FACE]),
                set(&[UPPER_CLOTHES, DRESS, COAT, SCARF, LEFT_ARM, RIGHT_ARM, JUMPSUIT]),
                set(&[PANTS, SKIRT, LEFT_LEG, RIGHT_LEG]),
                set(&[SOCKS, SHOES]),
            ],
            background_labels: set(&[BACKGROUND]),
        }
    }
}

impl LabelVocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() || self.names.len() > 256 {
            return Err(Error::validation(format!(
                "vocabulary must have 1..=256 labels, has {}",
                self.names.len()
            )));
        }
        if self.clothes_labels.is_empty() {
            return Err(Error::validation("vocabulary declares no clothes labels"));
        }
        let in_range = |id: u8| (id as usize) < self.names.len();
        let all = self
            .clothes_labels
            .iter()
            .chain(self.background_labels.iter())
            .chain(self.part_groups.iter().flatten());
        if let Some(id) = all.copied().find(|&id| !in_range(id)) {
            return Err(Error::validation(format!("label id {id} is not in the vocabulary")));
        }
        for (a, ga) in self.part_groups.iter().enumerate() {
            if let Some(id) = ga.intersection(&self.background_labels).next() {
                return Err(Error::validation(format!(
                    "label {id} is both part {a} and background"
                )));
            }
            for (b, gb) in self.part_groups.iter().enumerate().skip(a + 1) {
                if let Some(id) = ga.intersection(gb).next() {
                    return Err(Error::validation(format!(
                        "label {id} belongs to parts {a} and {b}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Lookup table from label id to part index (`None` for background and
    /// unassigned labels).
    pub fn part_table(&self) -> Vec<Option<usize>> {
        let mut table = vec![None; self.names.len()];
        for (k, group) in self.part_groups.iter().enumerate() {
            for &id in group {
                table[id as usize] = Some(k);
            }
        }
        table
    }

    /// Per-label clothes flag.
    pub fn clothes_table(&self) -> Vec<bool> {
        let mut table = vec![false; self.names.len()];
        for &id in &self.clothes_labels {
            table[id as usize] = true;
        }
        table
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut rows: BTreeMap<usize, (String, Vec<String>)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(i + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("invalid label id `{}`", fields[0])))?;
            let flags = if fields[2] == "-" {
                Vec::new()
            } else {
                fields[2].split(',').map(|f| f.trim().to_string()).collect()
            };
            if rows.insert(id, (fields[1].to_string(), flags)).is_some() {
                return Err(parse_err(i + 1, format!("label id {id} defined twice")));
            }
        }
        if rows.keys().copied().ne(0..rows.len()) {
            return Err(Error::validation("vocabulary label ids must be contiguous from 0"));
        }
        let mut vocab = LabelVocabulary {
            names: Vec::with_capacity(rows.len()),
            clothes_labels: BTreeSet::new(),
            part_groups: Default::default(),
            background_labels: BTreeSet::new(),
        };
        for (id, (name, flags)) in rows {
            let id8 = u8::try_from(id).map_err(|_| Error::validation("more than 256 labels"))?;
            vocab.names.push(name);
            for flag in flags {
                match flag.as_str() {
                    "clothes" => {
                        vocab.clothes_labels.insert(id8);
                    }
                    "background" => {
                        vocab.background_labels.insert(id8);
                    }
                    other => {
                        let part = Part::ALL
                            .iter()
                            .find(|p| p.flag() == other)
                            .ok_or_else(|| Error::validation(format!("unknown vocabulary flag `{other}`")))?;
                        vocab.part_groups[*part as usize].insert(id8);
                    }
                }
            }
        }
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# label_id\tname\tflags\n");
        for (id, name) in self.names.iter().enumerate() {
            let id8 = id as u8;
            let mut flags = Vec::new();
            if self.clothes_labels.contains(&id8) {
                flags.push("clothes");
            }
            for part in Part::ALL {
                if self.part_groups[part as usize].contains(&id8) {
                    flags.push(part.flag());
                }
            }
            if self.background_labels.contains(&id8) {
                flags.push("background");
            }
            let flags = if flags.is_empty() { "-".to_string() } else { flags.join(",") };
            out.push_str(&format!("{id}\t{name}\t{flags}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// One line of a dataset index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub image_path: PathBuf,
    pub parsing_path: PathBuf,
    pub person_id: u32,
    pub clothes_id: u32,
    pub camera_id: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub vocabulary: LabelVocabulary,
    /// Directory that relative entry paths are resolved against.
    pub root: PathBuf,
}

impl DatasetIndex {
    pub fn validate(&self) -> Result<()> {
        self.vocabulary.validate()?;
        if self.entries.is_empty() {
            return Err(Error::validation("no entries"));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image_path) {
                return Err(Error::validation(format!(
                    "duplicate image path {}",
                    e.image_path.display()
                )));
            }
        }
        let gallery: HashSet<u32> = self
            .split(Split::Gallery)
            .map(|e| e.person_id)
            .collect();
        let missing: BTreeSet<u32> = self
            .split(Split::Query)
            .map(|e| e.person_id)
            .filter(|p| !gallery.contains(p))
            .collect();
        if let Some(p) = missing.first() {
            return Err(Error::validation(format!(
                "query person {p} has no gallery entry"
            )));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> + '_ {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out =
            String::from("# image_path\tparsing_path\tperson_id\tclothes_id\tcamera_id\tsplit\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.image_path.display(),
                e.parsing_path.display(),
                e.person_id,
                e.clothes_id,
                e.camera_id,
                e.split
            ));
        }
        out
    }

    /// Writes the index and, next to it, its vocabulary.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        self.vocabulary.write(&dir.join(VOCABULARY_FILE))
    }

    /// Loads one sample referenced by `entry`, checking it against the
    /// vocabulary.
    pub fn load_sample(&self, entry: &IndexEntry) -> Result<ImageSample> {
        load_sample(entry, &self.root, &self.vocabulary)
    }
}

/// Parses and validates an index file. Uses `vocabulary.tsv` from the same
/// directory when present, otherwise the default 18-label vocabulary.
pub fn load_index(path: &Path) -> Result<DatasetIndex> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let vocab_path = root.join(VOCABULARY_FILE);
    let vocabulary = if vocab_path.exists() {
        LabelVocabulary::load(&vocab_path)?
    } else {
        LabelVocabulary::default()
    };
    load_index_with_vocabulary(path, vocabulary)
}

pub fn load_index_with_vocabulary(path: &Path, vocabulary: LabelVocabulary) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let index = DatasetIndex {
        entries: parse_index_text(&text, path)?,
        vocabulary,
        root,
    };
    index.validate()?;
    Ok(index)
}

fn parse_index_text(text: &str, path: &Path) -> Result<Vec<IndexEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!(
                "expected 6 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let int = |name: &str, s: &str| -> Result<u32> {
            s.trim()
                .parse()
                .map_err(|_| err(format!("{name} `{s}` is not a non-negative integer")))
        };
        entries.push(IndexEntry {
            image_path: PathBuf::from(fields[0]),
            parsing_path: PathBuf::from(fields[1]),
            person_id: int("person_id", fields[2])?,
            clothes_id: int("clothes_id", fields[3])?,
            camera_id: int("camera_id", fields[4])?,
            split: fields[5].trim().parse().map_err(err)?,
        });
    }
    Ok(entries)
}

/// Decodes an RGB image into `[h, w, 3]` floats in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        raw[(y * w as usize + x) * 3 + c] as f32 / 255.0
    }))
}

/// Decodes a single-channel 8-bit parsing map.
pub fn load_parsing(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::Load {
            path: path.to_path_buf(),
            message: format!("parsing map must be 8-bit grayscale, found {:?}", img.color()),
        });
    }
    let img = img.to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_parsing(path: &Path, parsing: &Array2<u8>) -> Result<()> {
    let (h, w) = parsing.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, parsing.iter().copied().collect())
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the image and parsing map of an index entry.
pub fn load_sample(entry: &IndexEntry, root: &Path, vocab: &LabelVocabulary) -> Result<ImageSample> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    let image_path = resolve(&entry.image_path);
    let parsing_path = resolve(&entry.parsing_path);
    let image = load_image(&image_path)?;
    let parsing = load_parsing(&parsing_path)?;
    let sample = ImageSample {
        image,
        parsing,
        person_id: entry.person_id,
        clothes_id: entry.clothes_id,
        camera_id: entry.camera_id,
        split: entry.split,
    };
    sample.validate(vocab).map_err(|e| Error::Load {
        path: image_path,
        message: e.to_string(),
    })?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIX_LINES: &str = "# demo\n\
a.png\ta_p.png\t1\t10\t0\ttrain\n\
b.png\tb_p.png\t1\t11\t1\tgallery\n\
c.png\tc_p.png\t1\t12\t0\tquery\n\
d.png\td_p.png\t2\t20\t0\ttrain\n\
e.png\te_p.png\t2\t21\t1\tgallery\n\
f.png\tf_p.png\t2\t22\t1\tquery\n";

    fn write_tmp(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn six_line_index_parses() {
        let dir = tempfile::tempdir().unwrap();
        let idx = load_index(&write_tmp(dir.path(), "index.tsv", SIX_LINES)).unwrap();
        assert_eq!(idx.entries.len(), 6);
        assert_eq!(idx.split(Split::Query).count(), 2);
        assert_eq!(idx.entries[4].clothes_id, 21);
        assert_eq!(idx.vocabulary, LabelVocabulary::default());
    }

    #[test]
    fn empty_index_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_index(&write_tmp(dir.path(), "index.tsv", "# nothing\n")).unwrap_err();
        assert!(err.to_string().contains("no entries"), "{err}");
    }

    #[test]
    fn query_person_without_gallery_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let text = "a.png\ta_p.png\t1\t1\t0\tgallery\nb.png\tb_p.png\t7\t2\t0\tquery\n";
        let err = load_index(&write_tmp(dir.path(), "index.tsv", text)).unwrap_err();
        assert!(err.to_string().contains("person 7"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let text = "a.png\ta_p.png\t1\t1\t0\tgallery\nb.png\tb_p.png\tx\t2\t0\tquery\n";
        match load_index(&write_tmp(dir.path(), "index.tsv", text)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_image_path_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = "a.png\ta_p.png\t1\t1\t0\tgallery\na.png\tb_p.png\t1\t2\t0\tquery\n";
        let err = load_index(&write_tmp(dir.path(), "index.tsv", text)).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn default_vocabulary_is_valid_and_round_trips() {
        let v = LabelVocabulary::default();
        v.validate().unwrap();
        assert_eq!(v.len(), 18);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        v.write(&p).unwrap();
        assert_eq!(LabelVocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn overlapping_part_groups_fail_validation() {
        let mut v = LabelVocabulary::default();
        v.part_groups[1].insert(labels::FACE);
        assert!(v.validate().is_err());
        let mut v = LabelVocabulary::default();
        v.clothes_labels.clear();
        assert!(v.validate().is_err());
    }

    fn write_pair(dir: &Path, img: (usize, usize), parse: (usize, usize), label: u8) -> IndexEntry {
        let image = Array3::from_shape_fn((img.0, img.1, 3), |(y, x, c)| (((y + x + c) % 5) * 51) as f32 / 255.0);
        save_image(&dir.join("i.png"), &image).unwrap();
        save_parsing(&dir.join("p.png"), &Array2::from_elem(parse, label)).unwrap();
        IndexEntry {
            image_path: "i.png".into(),
            parsing_path: "p.png".into(),
            person_id: 0,
            clothes_id: 0,
            camera_id: 0,
            split: Split::Train,
        }
    }

    #[test]
    fn load_sample_checks_dimensions_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = LabelVocabulary::default();

        let entry = write_pair(dir.path(), (64, 32), (64, 32), labels::FACE);
        let s = load_sample(&entry, dir.path(), &vocab).unwrap();
        assert_eq!(s.image.dim(), (64, 32, 3));
        assert_eq!(s.image[[1, 1, 0]], 102.0 / 255.0);
        let again = load_sample(&entry, dir.path(), &vocab).unwrap();
        assert_eq!(s, again);

        let entry = write_pair(dir.path(), (64, 32), (64, 32), 18);
        assert!(matches!(load_sample(&entry, dir.path(), &vocab), Err(Error::Load { .. })));

        let entry = write_pair(dir.path(), (64, 32), (32, 16), 0);
        let err = load_sample(&entry, dir.path(), &vocab).unwrap_err();
        assert!(err.to_string().contains("parsing is 32x16"), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn index_round_trips(rows in proptest::collection::vec((0u32..50, 0u32..500, 0u32..6), 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let mut entries: Vec<IndexEntry> = rows.iter().enumerate().map(|(i, &(p, c, cam))| IndexEntry {
                image_path: format!("img/{i}.png").into(),
                parsing_path: format!("parse/{i}.png").into(),
                person_id: p,
                clothes_id: c,
                camera_id: cam,
                split: if i % 3 == 0 { Split::Train } else { Split::Gallery },
            }).collect();
            // one query per gallery person keeps the index valid
            let first_gallery = entries.iter().find(|e| e.split == Split::Gallery).cloned();
            if let Some(g) = first_gallery {
                entries.push(IndexEntry { image_path: "q.png".into(), split: Split::Query, ..g });
            }
            let index = DatasetIndex { entries, vocabulary: LabelVocabulary::default(), root: dir.path().to_path_buf() };
            let path = dir.path().join("index.tsv");
            index.write(&path).unwrap();
            proptest::prop_assert_eq!(load_index(&path).unwrap(), index);
        }
    }
}
