//! Retrieval metrics: distances, gallery filtering, CMC and mAP.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_image, DatasetIndex, IndexEntry, Split};
use crate::error::{Error, Result};
use crate::network::ScNet;
use crate::preprocess::resize_bilinear;

pub const RANKS: [usize; 3] = [1, 5, 10];
pub const RESULT_HEADER: &str = "# setting\trank1\trank5\trank10\tmAP\tnum_queries";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SettingKind {
    General,
    ClothChanging,
    SameClothes,
}

impl SettingKind {
    pub const ALL: [SettingKind; 3] = [SettingKind::General, SettingKind::ClothChanging, SettingKind::SameClothes];

    pub fn short(self) -> &'static str {
        match self {
            SettingKind::General => "general",
            SettingKind::ClothChanging => "cc",
            SettingKind::SameClothes => "sc",
        }
    }
}

impl fmt::Display for SettingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for SettingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "general" => Ok(SettingKind::General),
            "cc" | "cloth_changing" => Ok(SettingKind::ClothChanging),
            "sc" | "same_clothes" => Ok(SettingKind::SameClothes),
            other => Err(Error::config(format!(
                "unknown setting `{other}` (valid: general, cc, sc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSetting {
    pub kind: SettingKind,
    pub discard_same_camera: bool,
}

impl EvalSetting {
    pub fn new(kind: SettingKind) -> Self {
        Self {
            kind,
            discard_same_camera: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Accuracy at each of `RANKS`.
    pub rank_k: [f64; 3],
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub num_valid_queries: usize,
}

impl EvalResult {
    pub fn rank1(&self) -> f64 {
        self.rank_k[0]
    }
}

/// Identity tags used by the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tags {
    pub person: u32,
    pub clothes: u32,
    pub camera: u32,
}

impl From<&IndexEntry> for Tags {
    fn from(e: &IndexEntry) -> Self {
        Self {
            person: e.person_id,
            clothes: e.clothes_id,
            camera: e.camera_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::config(format!("unknown metric `{other}` (valid: cosine, euclidean)"))),
        }
    }
}

/// Cosine distance; a zero vector is at distance 2 from everything.
pub fn distance_matrix(q: ArrayView2<f32>, g: ArrayView2<f32>) -> Array2<f64> {
    let norm = |a: ArrayView2<f32>| -> Vec<f64> {
        a.rows().into_iter().map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()).collect()
    };
    let (qn, gn) = (norm(q), norm(g));
    Array2::from_shape_fn((q.nrows(), g.nrows()), |(i, j)| {
        if qn[i] == 0.0 || gn[j] == 0.0 {
            return 2.0;
        }
        let dot: f64 = q.row(i).iter().zip(g.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum();
        1.0 - dot / (qn[i] * gn[j])
    })
}

pub fn euclidean_distance_matrix(q: ArrayView2<f32>, g: ArrayView2<f32>) -> Array2<f64> {
    Array2::from_shape_fn((q.nrows(), g.nrows()), |(i, j)| {
        q.row(i)
            .iter()
            .zip(g.row(j))
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    })
}

pub fn distances(q: ArrayView2<f32>, g: ArrayView2<f32>, metric: Metric) -> Array2<f64> {
    match metric {
        Metric::Cosine => distance_matrix(q, g),
        Metric::Euclidean => euclidean_distance_matrix(q, g),
    }
}

/// Gallery positions that take part in ranking for `query`.
pub fn filter_gallery(query: Tags, gallery: &[Tags], setting: EvalSetting) -> Vec<usize> {
    (0..gallery.len())
        .filter(|&j| {
            let g = gallery[j];
            let same_person = g.person == query.person;
            if setting.discard_same_camera && same_person && g.camera == query.camera {
                return false;
            }
            match setting.kind {
                SettingKind::General => true,
                SettingKind::ClothChanging => !(same_person && g.clothes == query.clothes),
                SettingKind::SameClothes => !(same_person && g.clothes != query.clothes),
            }
        })
        .collect()
}

/// CMC at `RANKS` and mAP over all queries that keep at least one positive.
pub fn cmc_map(dist: &Array2<f64>, queries: &[Tags], gallery: &[Tags], setting: EvalSetting) -> Result<EvalResult> {
    if dist.dim() != (queries.len(), gallery.len()) {
        return Err(Error::shape(format!(
            "distance matrix {:?} does not match {} queries x {} gallery",
            dist.dim(),
            queries.len(),
            gallery.len()
        )));
    }
    if dist.iter().any(|d| !d.is_finite()) {
        return Err(Error::Eval("distance matrix contains non-finite values".into()));
    }
    let mut hits = [0usize; 3];
    let mut aps = Vec::new();
    for (i, &q) in queries.iter().enumerate() {
        let mut valid = filter_gallery(q, gallery, setting);
        if !valid.iter().any(|&j| gallery[j].person == q.person) {
            continue;
        }
        let row = dist.row(i);
        valid.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let mut found = 0usize;
        let mut ap = 0.0;
        let mut first = None;
        for (r, &j) in valid.iter().enumerate() {
            if gallery[j].person == q.person {
                found += 1;
                ap += found as f64 / (r + 1) as f64;
                first.get_or_insert(r + 1);
            }
        }
        let first = first.expect("a positive exists");
        for (h, &k) in hits.iter_mut().zip(&RANKS) {
            if first <= k {
                *h += 1;
            }
        }
        aps.push(ap / found as f64);
    }
    if aps.is_empty() {
        return Err(Error::Eval("no valid queries".into()));
    }
    let n = aps.len() as f64;
    Ok(EvalResult {
        rank_k: hits.map(|h| h as f64 / n),
        map: aps.iter().sum::<f64>() / n,
        num_valid_queries: aps.len(),
        per_query_ap: aps,
    })
}

/// Embedded query and gallery splits.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    pub query: Array2<f32>,
    pub gallery: Array2<f32>,
    pub query_entries: Vec<IndexEntry>,
    pub gallery_entries: Vec<IndexEntry>,
}

impl SplitEmbeddings {
    pub fn evaluate(&self, setting: EvalSetting, metric: Metric) -> Result<EvalResult> {
        let d = distances(self.query.view(), self.gallery.view(), metric);
        let q: Vec<Tags> = self.query_entries.iter().map(Tags::from).collect();
        let g: Vec<Tags> = self.gallery_entries.iter().map(Tags::from).collect();
        cmc_map(&d, &q, &g, setting)
    }
}

/// Embeds the images of `entries` through the raw stream only. Parsing maps
/// are never opened.
pub fn embed_entries(model: &ScNet<f32>, index: &DatasetIndex, entries: &[IndexEntry], batch: usize) -> Result<Array2<f32>> {
    let b = &model.config.backbone;
    let (h, w) = (b.input_height, b.input_width);
    let mut out = Array2::zeros((entries.len(), model.embedding_dim()));
    for (c, chunk) in entries.chunks(batch.max(1)).enumerate() {
        let mut images = Vec::with_capacity(chunk.len());
        for e in chunk {
            let img = load_image(&index.resolve(&e.image_path))?;
            images.push(if img.dim() == (h, w, 3) { img } else { resize_bilinear(&img, h, w) });
        }
        let emb = model.embed_images(&images, chunk.len())?;
        let start = c * batch.max(1);
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&emb);
    }
    Ok(out)
}

pub fn embed_splits(model: &ScNet<f32>, index: &DatasetIndex, batch: usize) -> Result<SplitEmbeddings> {
    if !model.is_initialized() {
        return Err(Error::State("model has no trained weights".into()));
    }
    let query_entries: Vec<IndexEntry> = index.split(Split::Query).cloned().collect();
    let gallery_entries: Vec<IndexEntry> = index.split(Split::Gallery).cloned().collect();
    if query_entries.is_empty() || gallery_entries.is_empty() {
        return Err(Error::Eval(format!(
            "evaluation needs query and gallery entries, found {} and {}",
            query_entries.len(),
            gallery_entries.len()
        )));
    }
    Ok(SplitEmbeddings {
        query: embed_entries(model, index, &query_entries, batch)?,
        gallery: embed_entries(model, index, &gallery_entries, batch)?,
        query_entries,
        gallery_entries,
    })
}

pub fn evaluate(model: &ScNet<f32>, index: &DatasetIndex, setting: EvalSetting) -> Result<EvalResult> {
    embed_splits(model, index, 16)?.evaluate(setting, Metric::Cosine)
}

pub fn result_line(kind: SettingKind, r: &EvalResult) -> String {
    format!(
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
        kind, r.rank_k[0], r.rank_k[1], r.rank_k[2], r.map, r.num_valid_queries
    )
}

pub fn write_results(path: &Path, rows: &[(SettingKind, EvalResult)]) -> Result<()> {
    let mut text = format!("{RESULT_HEADER}\n");
    for (k, r) in rows {
        text.push_str(&result_line(*k, r));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const EMB_MAGIC: &[u8; 8] = b"SCNETEMB";

/// Binary dump: magic, u32 count, u32 dim, then per vector
/// u8 split, u32 person, u32 clothes, u32 camera, dim x f32 (little-endian).
pub fn write_embeddings(path: &Path, emb: &SplitEmbeddings) -> Result<()> {
    let dim = emb.query.ncols();
    let n = emb.query.nrows() + emb.gallery.nrows();
    let mut out = Vec::with_capacity(16 + n * (13 + 4 * dim));
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (m, entries) in [(&emb.query, &emb.query_entries), (&emb.gallery, &emb.gallery_entries)] {
        for (row, e) in m.rows().into_iter().zip(entries) {
            out.push(match e.split {
                Split::Train => 0,
                Split::Query => 1,
                Split::Gallery => 2,
            });
            for v in [e.person_id, e.clothes_id, e.camera_id] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a dump written by `write_embeddings` as (split, tags, vector) records.
pub fn read_embeddings(path: &Path) -> Result<Vec<(Split, Tags, Vec<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Load {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != EMB_MAGIC {
        return Err(bad("not an embedding dump"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (n, dim) = (u32_at(8) as usize, u32_at(12) as usize);
    let rec = 13 + 4 * dim;
    if bytes.len() != 16 + n * rec {
        return Err(bad("length does not match header"));
    }
    (0..n)
        .map(|i| {
            let o = 16 + i * rec;
            let split = match bytes[o] {
                0 => Split::Train,
                1 => Split::Query,
                2 => Split::Gallery,
                _ => return Err(bad("bad split tag")),
            };
            let tags = Tags {
                person: u32_at(o + 1),
                clothes: u32_at(o + 5),
                camera: u32_at(o + 9),
            };
            let v = (0..dim)
                .map(|d| f32::from_le_bytes(bytes[o + 13 + 4 * d..o + 17 + 4 * d].try_into().expect("4 bytes")))
                .collect();
            Ok((split, tags, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(person: u32, clothes: u32, camera: u32) -> Tags {
        Tags { person, clothes, camera }
    }

    #[test]
    fn cosine_examples() {
        let q = array![[1.0f32, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]];
        let g = array![[2.0f32, 0.0], [0.0, 3.0], [-1.0, 0.0]];
        let d = distance_matrix(q.view(), g.view());
        assert!(d[[0, 0]].abs() < 1e-12);
        assert!((d[[1, 1]] - 1.0).abs() < 1e-12);
        assert!((d[[2, 2]] - 2.0).abs() < 1e-12);
        assert!(d.row(3).iter().all(|&v| v == 2.0));
        let e = euclidean_distance_matrix(q.view(), g.view());
        assert!((e[[0, 1]] - 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn setting_names_parse() {
        assert_eq!("cc".parse::<SettingKind>().unwrap(), SettingKind::ClothChanging);
        assert_eq!("same_clothes".parse::<SettingKind>().unwrap(), SettingKind::SameClothes);
        let msg = "bogus".parse::<SettingKind>().unwrap_err().to_string();
        assert!(msg.contains("general, cc, sc"));
    }

    // Query (person 1, clothes 1, camera 0) against six gallery entries;
    // each expected keep/discard decision worked out by hand.
    fn toy_gallery() -> (Tags, Vec<Tags>) {
        (
            t(1, 1, 0),
            vec![t(1, 1, 1), t(1, 1, 0), t(1, 2, 1), t(1, 2, 0), t(2, 3, 0), t(2, 1, 1)],
        )
    }

    #[test]
    fn toy_gallery_decisions() {
        let (q, g) = toy_gallery();
        let cases = [
            (SettingKind::General, true, vec![0, 2, 4, 5]),
            (SettingKind::General, false, vec![0, 1, 2, 3, 4, 5]),
            (SettingKind::ClothChanging, true, vec![2, 4, 5]),
            (SettingKind::ClothChanging, false, vec![2, 3, 4, 5]),
            (SettingKind::SameClothes, true, vec![0, 4, 5]),
            (SettingKind::SameClothes, false, vec![0, 1, 4, 5]),
        ];
        for (kind, cam, want) in cases {
            let s = EvalSetting { kind, discard_same_camera: cam };
            assert_eq!(filter_gallery(q, &g, s), want, "{kind} camera-filter={cam}");
        }
    }

    #[test]
    fn small_cmc_examples() {
        let s = EvalSetting::new(SettingKind::General);
        let q = [t(1, 1, 0)];
        let g = [t(1, 1, 1), t(2, 2, 1), t(3, 3, 1)];
        let r = cmc_map(&array![[0.1, 0.5, 0.9]], &q, &g, s).unwrap();
        assert_eq!((r.rank1(), r.map), (1.0, 1.0));
        let g2 = [t(2, 2, 1), t(1, 1, 1)];
        let r = cmc_map(&array![[0.1, 0.2]], &q, &g2, s).unwrap();
        assert_eq!((r.rank1(), r.map), (0.0, 0.5));
        assert_eq!(r.rank_k[1], 1.0);
    }

    #[test]
    fn no_valid_queries_is_an_error() {
        let s = EvalSetting::new(SettingKind::ClothChanging);
        let err = cmc_map(&array![[0.3]], &[t(1, 1, 0)], &[t(1, 1, 1)], s).unwrap_err();
        assert!(err.to_string().contains("no valid queries"));
    }

    /// Ranks every gallery item by counting how many valid items precede it.
    pub(crate) fn brute_force(dist: &Array2<f64>, q: &[Tags], g: &[Tags], s: EvalSetting) -> Option<EvalResult> {
        let mut hits = [0usize; 3];
        let mut aps = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let keep = |j: usize| {
                let gj = g[j];
                let sp = gj.person == qi.person;
                let cam_ok = !(s.discard_same_camera && sp && gj.camera == qi.camera);
                let kind_ok = match s.kind {
                    SettingKind::General => true,
                    SettingKind::ClothChanging => !sp || gj.clothes != qi.clothes,
                    SettingKind::SameClothes => !sp || gj.clothes == qi.clothes,
                };
                cam_ok && kind_ok
            };
            let rank_of = |j: usize| {
                1 + (0..g.len())
                    .filter(|&o| keep(o) && (dist[[i, o]] < dist[[i, j]] || (dist[[i, o]] == dist[[i, j]] && o < j)))
                    .count()
            };
            let mut pos: Vec<usize> = (0..g.len()).filter(|&j| keep(j) && g[j].person == qi.person).map(rank_of).collect();
            if pos.is_empty() {
                continue;
            }
            pos.sort_unstable();
            for (h, &k) in hits.iter_mut().zip(&RANKS) {
                if pos[0] <= k {
                    *h += 1;
                }
            }
            let mut ap = 0.0;
            for (n, &r) in pos.iter().enumerate() {
                ap += (n + 1) as f64 / r as f64;
            }
            aps.push(ap / pos.len() as f64);
        }
        if aps.is_empty() {
            return None;
        }
        let n = aps.len() as f64;
        Some(EvalResult {
            rank_k: hits.map(|h| h as f64 / n),
            map: aps.iter().sum::<f64>() / n,
            num_valid_queries: aps.len(),
            per_query_ap: aps,
        })
    }

    pub(crate) fn random_instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<Tags>, Vec<Tags>, EvalSetting) {
        let nq = rng.random_range(1..=10);
        let ng = rng.random_range(1..=50);
        let people = rng.random_range(1..=5u32);
        let tag = |rng: &mut ChaCha8Rng| t(rng.random_range(0..people), rng.random_range(0..3), rng.random_range(0..2));
        let q: Vec<Tags> = (0..nq).map(|_| tag(rng)).collect();
        let g: Vec<Tags> = (0..ng).map(|_| tag(rng)).collect();
        // coarse values so ties are common
        let d = Array2::from_shape_fn((nq, ng), |_| rng.random_range(0..6) as f64 / 5.0);
        let kind = SettingKind::ALL[rng.random_range(0..3)];
        (d, q, g, EvalSetting { kind, discard_same_camera: rng.random() })
    }

    #[test]
    fn cmc_map_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 50 {
            let (d, q, g, s) = random_instance(&mut rng);
            match (cmc_map(&d, &q, &g, s), brute_force(&d, &q, &g, s)) {
                (Ok(a), Some(b)) => {
                    assert_eq!(a, b);
                    checked += 1;
                }
                (Err(_), None) => {}
                (a, b) => panic!("disagreement: {a:?} vs {b:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn general_contains_cloth_changing(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, q, g, s) = random_instance(&mut rng);
            for qi in &q {
                let gen = filter_gallery(*qi, &g, EvalSetting { kind: SettingKind::General, ..s });
                let cc = filter_gallery(*qi, &g, EvalSetting { kind: SettingKind::ClothChanging, ..s });
                prop_assert!(cc.iter().all(|j| gen.contains(j)));
            }
        }

        #[test]
        fn cmc_monotone_and_ap_bounded(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, q, g, s) = random_instance(&mut rng);
            if let Ok(r) = cmc_map(&d, &q, &g, s) {
                prop_assert!(r.rank_k[0] <= r.rank_k[1] && r.rank_k[1] <= r.rank_k[2]);
                prop_assert!(r.per_query_ap.iter().all(|&a| (0.0..=1.0).contains(&a)));
                prop_assert!((0.0..=1.0).contains(&r.map));
                prop_assert_eq!(cmc_map(&d, &q, &g, s).unwrap(), r);
            }
        }

        #[test]
        fn positive_scale_leaves_metrics_unchanged(seed in 0u64..200, scale in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, q, g, s) = random_instance(&mut rng);
            let qe = Array2::from_shape_fn((q.len(), 6), |_| rng.random_range(-1.0f32..1.0));
            let ge = Array2::from_shape_fn((g.len(), 6), |_| rng.random_range(-1.0f32..1.0));
            let a = cmc_map(&distance_matrix(qe.view(), ge.view()), &q, &g, s);
            let b = cmc_map(&distance_matrix((&qe * scale).view(), (&ge * scale).view()), &q, &g, s);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert_eq!(a.rank_k, b.rank_k);
                prop_assert!((a.map - b.map).abs() < 1e-9);
            }
        }
    }

    fn clustered(tags: &[Tags], key: impl Fn(&Tags) -> u32) -> Array2<f32> {
        Array2::from_shape_fn((tags.len(), 32), |(i, c)| if c == key(&tags[i]) as usize % 32 { 1.0 } else { 0.0 })
    }

    fn demo_split() -> (Vec<Tags>, Vec<Tags>) {
        // 6 people with 3 outfits each; query wears outfit 2, gallery 0 and 1
        let mut q = Vec::new();
        let mut g = Vec::new();
        for p in 0..6 {
            q.push(t(p, p * 3 + 2, 0));
            for o in 0..3 {
                for cam in 0..2 {
                    g.push(t(p, p * 3 + o, cam));
                }
            }
        }
        (q, g)
    }

    #[test]
    fn identity_clustered_embeddings_are_perfect_everywhere() {
        let (q, g) = demo_split();
        let d = distance_matrix(clustered(&q, |t| t.person).view(), clustered(&g, |t| t.person).view());
        for kind in SettingKind::ALL {
            let r = cmc_map(&d, &q, &g, EvalSetting::new(kind)).unwrap();
            assert_eq!(r.rank1(), 1.0, "{kind}");
            assert_eq!(r.map, 1.0, "{kind}");
        }
    }

    #[test]
    fn clothes_clustered_embeddings_fail_only_cloth_changing() {
        let (q, g) = demo_split();
        let d = distance_matrix(clustered(&q, |t| t.clothes).view(), clustered(&g, |t| t.clothes).view());
        let cc = cmc_map(&d, &q, &g, EvalSetting::new(SettingKind::ClothChanging)).unwrap();
        let sc = cmc_map(&d, &q, &g, EvalSetting::new(SettingKind::SameClothes)).unwrap();
        // 6 identities, so chance is about 1/6
        assert!(cc.rank1() <= 1.0 / 3.0, "cc rank1 {}", cc.rank1());
        assert_eq!(sc.rank1(), 1.0);
    }

    #[test]
    fn untrained_model_evaluates_to_finite_metrics() {
        use crate::network::NetworkConfig;
        use crate::synthdata::{generate, SynthConfig};
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_identities: 3,
            outfits_per_identity: 2,
            images_per_outfit: 2,
            ..SynthConfig::default()
        };
        let idx = generate(&cfg, dir.path()).unwrap();
        let mut net = ScNet::<f32>::new(NetworkConfig::toy(3), true).unwrap();
        assert!(matches!(evaluate(&net, &idx, EvalSetting::new(SettingKind::General)), Err(Error::State(_))));
        net.init(&mut ChaCha8Rng::seed_from_u64(0));
        // query outfits never reach the gallery, so same-clothes has no positives
        assert!(evaluate(&net, &idx, EvalSetting::new(SettingKind::SameClothes)).is_err());
        for kind in [SettingKind::General, SettingKind::ClothChanging] {
            let r = evaluate(&net, &idx, EvalSetting::new(kind)).unwrap();
            assert!(r.map.is_finite() && r.num_valid_queries > 0);
        }
        let mut no_query = idx.clone();
        no_query.entries.retain(|e| e.split != Split::Query);
        assert!(matches!(evaluate(&net, &no_query, EvalSetting::new(SettingKind::General)), Err(Error::Eval(_))));
    }

    #[test]
    fn embedding_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let e = |id: u32, split| IndexEntry {
            image_path: format!("{id}.png").into(),
            parsing_path: format!("{id}p.png").into(),
            person_id: id,
            clothes_id: id + 10,
            camera_id: 1,
            split,
        };
        let emb = SplitEmbeddings {
            query: array![[1.0f32, -2.0]],
            gallery: array![[0.5f32, 0.25], [3.0, 4.0]],
            query_entries: vec![e(1, Split::Query)],
            gallery_entries: vec![e(1, Split::Gallery), e(2, Split::Gallery)],
        };
        let path = dir.path().join("emb.bin");
        write_embeddings(&path, &emb).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2], (Split::Gallery, t(2, 12, 1), vec![3.0, 4.0]));
    }

    #[test]
    fn result_file_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalResult {
            rank_k: [0.5, 0.75, 1.0],
            map: 0.6,
            per_query_ap: vec![0.6],
            num_valid_queries: 4,
        };
        let path = dir.path().join("r.tsv");
        write_results(&path, &[(SettingKind::ClothChanging, r)]).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "cc\t0.500000\t0.750000\t1.000000\t0.600000\t4");
    }
}
