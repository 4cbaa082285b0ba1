//! Training objectives and their gradients.
//!
//! Every loss returns its value together with the gradient of that value
//! with respect to its direct inputs. `compute_losses` combines them into
//! the weighted objective and the upstream gradients for `ScNet::backward`.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{OutputGrads, Stream, StreamOutputs, StreamSet};
use crate::nn::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub triplet_margin: f64,
    pub log_epsilon: f64,
    pub enable_part: bool,
    pub enable_sc: bool,
    pub enable_id: bool,
    pub enable_triplet: bool,
    /// Streams whose identity and triplet terms enter the objective.
    pub streams: StreamSet,
    /// Divide the consistency loss by `h * w` as well as `N`.
    pub sc_pixel_mean: bool,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.01,
            triplet_margin: 0.3,
            log_epsilon: 1e-12,
            enable_part: true,
            enable_sc: true,
            enable_id: true,
            enable_triplet: true,
            streams: StreamSet::default(),
            sc_pixel_mean: false,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("triplet_margin", self.triplet_margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon.is_finite()) {
            return Err(Error::validation("log_epsilon must be a small positive number"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::validation("label_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Whether the part-matching term is evaluated at all.
    pub fn part_active(&self) -> bool {
        self.enable_part && self.lambda1 > 0.0
    }

    /// Whether the consistency term (and hence CAM fusion) is evaluated.
    pub fn sc_active(&self) -> bool {
        self.enable_sc && self.lambda2 > 0.0
    }
}

/// Scalar loss values; disabled terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub part: f64,
    pub sc: f64,
    /// Indexed by `Stream::index`.
    pub id: [f64; 3],
    pub tri: [f64; 3],
    pub total: f64,
}

impl LossReport {
    /// Weighted sum of the components under `cfg`.
    pub fn recombine(&self, lambda1: f64, lambda2: f64) -> f64 {
        lambda1 * self.part + lambda2 * self.sc + (0..3).map(|s| self.id[s] + self.tri[s]).sum::<f64>()
    }
}

/// Component values before weighting; `None` marks a term that was not computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub part: Option<f64>,
    pub sc: Option<f64>,
    pub id: [Option<f64>; 3],
    pub tri: [Option<f64>; 3],
}

/// Weighted objective. A term enabled by `cfg` but missing from `terms` is
/// an error; terms that `cfg` disables contribute exactly 0.
pub fn total_loss(terms: &LossTerms, cfg: &LossConfig) -> Result<LossReport> {
    let need = |enabled: bool, v: Option<f64>, what: &str| -> Result<f64> {
        if !enabled {
            return Ok(0.0);
        }
        v.ok_or_else(|| Error::config(format!("{what} enabled but not computed")))
    };
    let mut r = LossReport {
        part: need(cfg.part_active(), terms.part, "part-matching loss")?,
        sc: need(cfg.sc_active(), terms.sc, "semantic consistency loss")?,
        ..LossReport::default()
    };
    for s in Stream::ALL {
        let on = cfg.streams.contains(s);
        r.id[s.index()] = need(on && cfg.enable_id, terms.id[s.index()], &format!("identity loss of stream {}", s.tag()))?;
        r.tri[s.index()] = need(
            on && cfg.enable_triplet,
            terms.tri[s.index()],
            &format!("triplet loss of stream {}", s.tag()),
        )?;
    }
    r.total = r.recombine(if cfg.part_active() { cfg.lambda1 } else { 0.0 }, if cfg.sc_active() { cfg.lambda2 } else { 0.0 });
    Ok(r)
}

/// Cross-entropy between attention `m` and part masks `p`, both `[N, K, h, w]`,
/// averaged over `N * h * w`.
pub fn part_matching_loss<T: Real>(m: &Array4<T>, p: &Array4<T>, eps: f64) -> Result<(T, Array4<T>)> {
    if m.dim() != p.dim() {
        return Err(Error::shape(format!("attention {:?} vs masks {:?}", m.dim(), p.dim())));
    }
    let (n, _, h, w) = m.dim();
    let scale = T::one() / T::from_usize(n * h * w).expect("count");
    let eps = T::lit(eps);
    let mut loss = T::zero();
    let mut grad = Array4::<T>::zeros(m.raw_dim());
    Zip::from(&mut grad).and(m).and(p).for_each(|g, &mv, &pv| {
        if pv != T::zero() {
            loss -= pv * (mv + eps).ln();
            *g = -scale * pv / (mv + eps);
        }
    });
    Ok((loss * scale, grad))
}

/// Ground-truth channel of each sample's class activation maps: `[N, I, h, w]` to `[N, h, w]`.
pub fn select_label_maps<T: Real>(cam: &Array4<T>, labels: &[usize]) -> Result<Array3<T>> {
    let (n, classes, h, w) = cam.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut out = Array3::zeros((n, h, w));
    for (i, &t) in labels.iter().enumerate() {
        if t >= classes {
            return Err(Error::validation(format!("label {t} out of range for {classes} classes")));
        }
        out.index_axis_mut(Axis(0), i).assign(&cam.index_axis(Axis(0), i).index_axis(Axis(0), t));
    }
    Ok(out)
}

/// Pixelwise maximum over the per-stream maps. The result is a constant
/// target: nothing differentiates through it.
pub fn fuse_supervision<T: Real>(maps: &[ArrayView3<T>]) -> Result<Array3<T>> {
    let first = maps.first().ok_or_else(|| Error::shape("no maps to fuse"))?;
    let mut g = first.to_owned();
    for m in &maps[1..] {
        if m.dim() != g.dim() {
            return Err(Error::shape("fused maps differ in shape"));
        }
        Zip::from(&mut g).and(m).for_each(|a, &b| {
            if b > *a {
                *a = b;
            }
        });
    }
    Ok(g)
}

/// Channel mean of `[N, C, h, w]`.
pub fn saliency_map<T: Real>(f: &Array4<T>) -> Array3<T> {
    let c = T::from_usize(f.dim().1).expect("channels");
    f.sum_axis(Axis(1)).mapv(|v| v / c)
}

/// Gradient of `saliency_map` given the upstream gradient on the map.
pub fn saliency_map_backward<T: Real>(d: &Array3<T>, channels: usize) -> Array4<T> {
    let (n, h, w) = d.dim();
    let c = T::from_usize(channels).expect("channels");
    let per = d.mapv(|v| v / c).insert_axis(Axis(1));
    per.broadcast((n, channels, h, w)).expect("broadcast").to_owned()
}

/// `(1/N) * sum_x sum_pixels (g - F_a^x)^2`; with `pixel_mean` also divided
/// by `h * w`. Returns the gradient with respect to each `F_a^x`.
pub fn semantic_consistency_loss<T: Real>(
    g: &Array3<T>,
    saliency: &[Array3<T>],
    pixel_mean: bool,
) -> Result<(T, Vec<Array3<T>>)> {
    let (n, h, w) = g.dim();
    let denom = if pixel_mean { n * h * w } else { n };
    let scale = T::one() / T::from_usize(denom).expect("count");
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(saliency.len());
    for fa in saliency {
        if fa.dim() != g.dim() {
            return Err(Error::shape(format!("saliency {:?} vs target {:?}", fa.dim(), g.dim())));
        }
        let mut d = Array3::zeros(g.raw_dim());
        Zip::from(&mut d).and(g).and(fa).for_each(|d, &gv, &fv| {
            let r = gv - fv;
            loss += r * r;
            *d = -two * scale * r;
        });
        grads.push(d);
    }
    Ok((loss * scale, grads))
}

/// Mean cross-entropy of `logits [N, I]` against `labels`, with optional
/// label smoothing.
pub fn identity_loss<T: Real>(logits: &Array2<T>, labels: &[usize], smoothing: f64) -> Result<(T, Array2<T>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let inv_n = T::one() / T::from_usize(n).expect("count");
    let eps = T::lit(smoothing);
    let off = eps / T::from_usize(classes).expect("classes");
    let mut loss = T::zero();
    let mut grad = Array2::zeros((n, classes));
    for (i, &t) in labels.iter().enumerate() {
        if t >= classes {
            return Err(Error::validation(format!("label {t} out of range for {classes} classes")));
        }
        let row = logits.row(i);
        let mx = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        for (j, &v) in row.iter().enumerate() {
            let q = if j == t { T::one() - eps + off } else { off };
            if q != T::zero() {
                loss -= q * (v - lse);
            }
            grad[[i, j]] = ((v - lse).exp() - q) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Pairwise Euclidean distances of the rows of `f`.
pub fn euclidean_distances<T: Real>(f: &Array2<T>) -> Array2<T> {
    let n = f.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let s: T = f.row(i).iter().zip(f.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let v = s.sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Batch-hard triplet loss over unnormalized Euclidean distances. Ties pick
/// the lowest index.
pub fn triplet_loss<T: Real>(f: &Array2<T>, labels: &[usize], margin: f64) -> Result<(T, Array2<T>)> {
    let n = f.nrows();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let d = euclidean_distances(f);
    let margin = T::lit(margin);
    let inv_n = T::one() / T::from_usize(n).expect("count");
    let mut loss = T::zero();
    let mut grad = Array2::<T>::zeros(f.raw_dim());
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| d[[a, j]] > d[[a, p]]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| d[[a, j]] < d[[a, q]]) {
                neg = Some(j);
            }
        }
        let Some(q) = neg else {
            return Err(Error::validation("triplet loss needs at least two identities in the batch"));
        };
        let p = pos.expect("anchor is its own positive");
        let hinge = d[[a, p]] - d[[a, q]] + margin;
        if hinge <= T::zero() {
            continue;
        }
        loss += hinge;
        // d(dist)/d(f_a) = (f_a - f_j) / dist; zero distance contributes nothing
        for (j, sign) in [(p, T::one()), (q, -T::one())] {
            let dist = d[[a, j]];
            if dist <= T::zero() {
                continue;
            }
            for c in 0..f.ncols() {
                let u = (f[[a, c]] - f[[j, c]]) / dist * sign * inv_n;
                grad[[a, c]] += u;
                grad[[j, c]] -= u;
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Evaluates the weighted objective on a forward pass and returns the
/// gradients to feed back through the network. `masks` (`[N, K, h, w]`) is
/// only read when the part term is active.
pub fn compute_losses<T: Real>(
    out: &StreamOutputs<T>,
    labels: &[usize],
    masks: Option<&Array4<T>>,
    cfg: &LossConfig,
) -> Result<(LossReport, OutputGrads<T>)> {
    let mut terms = LossTerms::default();
    let mut grads = OutputGrads::default();

    if cfg.part_active() {
        let p = masks.ok_or_else(|| Error::config("part-matching loss needs part masks"))?;
        let (v, g) = part_matching_loss(&out.attention, p, cfg.log_epsilon)?;
        terms.part = Some(v.as_f64());
        grads.attention = Some(g * T::lit(cfg.lambda1));
    }

    if cfg.sc_active() {
        let present: Vec<Stream> = Stream::ALL.into_iter().filter(|&s| out.get(s).is_some()).collect();
        let mut label_maps = Vec::with_capacity(present.len());
        for &s in &present {
            let cam = out.get(s).and_then(|o| o.cam.as_ref()).ok_or_else(|| {
                Error::config(format!("semantic consistency loss needs activation maps from stream {}", s.tag()))
            })?;
            label_maps.push(select_label_maps(cam, labels)?);
        }
        let views: Vec<ArrayView3<T>> = label_maps.iter().map(|m| m.view()).collect();
        let g = fuse_supervision(&views)?;
        let saliency: Vec<Array3<T>> = present.iter().map(|&s| saliency_map(&out.get(s).expect("present").features)).collect();
        let (v, dfa) = semantic_consistency_loss(&g, &saliency, cfg.sc_pixel_mean)?;
        terms.sc = Some(v.as_f64());
        let lambda = T::lit(cfg.lambda2);
        for (&s, d) in present.iter().zip(dfa) {
            let channels = out.get(s).expect("present").features.dim().1;
            grads.streams[s.index()].features = Some(saliency_map_backward(&d, channels) * lambda);
        }
    }

    for s in cfg.streams.iter() {
        let o = out
            .get(s)
            .ok_or_else(|| Error::config(format!("stream {} enabled in the loss but absent from the forward pass", s.tag())))?;
        if cfg.enable_id {
            let (v, g) = identity_loss(&o.logits, labels, cfg.label_smoothing)?;
            terms.id[s.index()] = Some(v.as_f64());
            grads.streams[s.index()].logits = Some(g);
        }
        if cfg.enable_triplet {
            let (v, g) = triplet_loss(&o.pooled, labels, cfg.triplet_margin)?;
            terms.tri[s.index()] = Some(v.as_f64());
            grads.streams[s.index()].pooled = Some(g);
        }
    }

    Ok((total_loss(&terms, cfg)?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-6;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random4(dim: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn part_loss_perfect_prediction_is_near_zero() {
        let mut p = Array4::<f64>::zeros((1, 4, 2, 2));
        p[[0, 0, 0, 0]] = 1.0;
        p[[0, 1, 0, 1]] = 1.0;
        p[[0, 3, 1, 1]] = 1.0;
        let mut m = p.clone();
        m[[0, 2, 1, 0]] = 1.0;
        let (v, _) = part_matching_loss(&m, &p, 1e-12).unwrap();
        // log(1 + eps) makes the value slightly negative, bounded by h * w * eps
        assert!(v.abs() <= 4.0 * 1e-12);
    }

    #[test]
    fn part_loss_uniform_single_pixel() {
        let mut p = Array4::<f64>::zeros((1, 4, 1, 1));
        p[[0, 0, 0, 0]] = 1.0;
        let m = Array4::from_elem((1, 4, 1, 1), 0.25);
        let (v, _) = part_matching_loss(&m, &p, 1e-12).unwrap();
        assert!((v - 1.3862943611198906).abs() < TOL);
    }

    #[test]
    fn part_loss_ignores_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = crate::nn::softmax_channels(&random4((2, 4, 3, 3), &mut rng));
        let p = Array4::zeros((2, 4, 3, 3));
        let (v, g) = part_matching_loss(&m, &p, 1e-12).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(part_matching_loss(&m, &Array4::zeros((2, 4, 3, 2)), 1e-12).is_err());
    }

    #[test]
    fn fusion_examples() {
        let a = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i * 2 + j) as f64);
        let g = fuse_supervision(&[a.view(), a.view(), a.view()]).unwrap();
        assert_eq!(g, a);
        let ones = Array3::<f64>::ones((2, 3, 3));
        let zeros = Array3::<f64>::zeros((2, 3, 3));
        let g = fuse_supervision(&[ones.view(), zeros.view(), zeros.view()]).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn saliency_examples() {
        let f = Array4::from_elem((1, 5, 2, 2), 3.0);
        assert!(saliency_map(&f).iter().all(|&v| v == 3.0));
        let f = Array4::from_shape_vec((1, 2, 1, 1), vec![0.0, 2.0]).unwrap();
        assert_eq!(saliency_map(&f)[[0, 0, 0]], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random4((2, 3, 2, 4), &mut rng);
        let fa = saliency_map(&f);
        for n in 0..2 {
            for i in 0..2 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for c in 0..3 {
                        s += f[[n, c, i, j]];
                    }
                    assert!((fa[[n, i, j]] - s / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn consistency_examples() {
        let g = Array3::from_elem((1, 1, 1), 1.0f64);
        let (v, _) = semantic_consistency_loss(
            &g,
            &[Array3::zeros((1, 1, 1)), Array3::ones((1, 1, 1)), Array3::ones((1, 1, 1))],
            false,
        )
        .unwrap();
        assert!((v - 1.0).abs() < TOL);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Array3::from_shape_fn((2, 3, 2), |_| rng.random_range(-1.0..1.0));
        let (v, _) = semantic_consistency_loss(&g, &[g.clone(), g.clone(), g.clone()], false).unwrap();
        assert_eq!(v, 0.0);

        let fa: Vec<Array3<f64>> = (0..3).map(|_| Array3::from_shape_fn((2, 3, 2), |_| rng.random_range(-1.0..1.0))).collect();
        let (v1, _) = semantic_consistency_loss(&g, &fa, false).unwrap();
        let doubled: Vec<Array3<f64>> = fa.iter().map(|f| &g - &((&g - f) * 2.0)).collect();
        let (v2, _) = semantic_consistency_loss(&g, &doubled, false).unwrap();
        assert!((v2 - 4.0 * v1).abs() < TOL);
        let (vm, _) = semantic_consistency_loss(&g, &fa, true).unwrap();
        assert!((vm * 6.0 - v1).abs() < TOL);
    }

    #[test]
    fn identity_examples() {
        let logits = arr2(&[[1000.0f64, 0.0, 0.0], [0.0, 0.0, 1000.0]]);
        let (v, _) = identity_loss(&logits, &[0, 2], 0.0).unwrap();
        assert!(v.abs() < TOL);
        let (v, _) = identity_loss(&Array2::<f64>::zeros((3, 4)), &[0, 1, 3], 0.0).unwrap();
        assert!((v - 4f64.ln()).abs() < TOL);
        // per-sample closed forms: -log(e^2 / (e^2 + 2)) and -log(1 / (e + 1 + 1/e))
        let logits = arr2(&[[2.0, 0.0, 0.0], [1.0, 0.0, -1.0]]);
        let s0 = (1.0f64 + 2.0 * (-2.0f64).exp()).ln();
        let s1 = -(1.0 / (1f64.exp() + 1.0 + (-1f64).exp())).ln();
        let (v, _) = identity_loss(&logits, &[0, 1], 0.0).unwrap();
        assert!((v - (s0 + s1) / 2.0).abs() < TOL);
        assert!(identity_loss(&logits, &[0, 3], 0.0).is_err());
    }

    #[test]
    fn triplet_examples() {
        // two tight clusters 10 apart
        let f = arr2(&[[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]]);
        let (v, _) = triplet_loss(&f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(v, 0.0);
        // points on a line where every anchor has d_ap = 1 and d_an = 0.5
        let f = arr2(&[[0.0], [1.0], [0.5], [1.5]]);
        let labels = [0, 0, 1, 1];
        let d = euclidean_distances(&f);
        for a in 0..4 {
            let dap = (0..4).filter(|&j| labels[j] == labels[a]).map(|j| d[[a, j]]).fold(0.0, f64::max);
            let dan = (0..4).filter(|&j| labels[j] != labels[a]).map(|j| d[[a, j]]).fold(f64::INFINITY, f64::min);
            assert_eq!((dap, dan), (1.0, 0.5));
        }
        let (v, _) = triplet_loss(&f, &labels, 0.3).unwrap();
        assert!((v - 0.8).abs() < TOL);
        assert!(triplet_loss(&f, &[0, 0, 0, 0], 0.3).is_err());
    }

    #[test]
    fn triplet_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let f = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0f64..1.0));
            let mut labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let dist = |i: usize, j: usize| -> f64 { (0..3).map(|c| (f[[i, c]] - f[[j, c]]).powi(2)).sum::<f64>().sqrt() };
            let mut want = 0.0;
            for a in 0..8 {
                // hardest triplet over all (p, n) pairs
                let mut worst = f64::NEG_INFINITY;
                for p in (0..8).filter(|&p| labels[p] == labels[a]) {
                    for n in (0..8).filter(|&n| labels[n] != labels[a]) {
                        worst = worst.max(dist(a, p) - dist(a, n));
                    }
                }
                want += (worst + 0.3).max(0.0);
            }
            let (v, _) = triplet_loss(&f, &labels, 0.3).unwrap();
            assert!((v - want / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            streams: StreamSet::raw_only(),
            ..LossConfig::default()
        };
        let terms = LossTerms {
            part: Some(5.0),
            sc: Some(7.0),
            id: [Some(1.5), Some(9.0), Some(9.0)],
            tri: [Some(0.25), Some(9.0), Some(9.0)],
        };
        assert_eq!(total_loss(&terms, &cfg).unwrap().total, 1.75);

        let cfg = LossConfig::default();
        let ones = LossTerms {
            part: Some(1.0),
            sc: Some(1.0),
            id: [Some(1.0); 3],
            tri: [Some(1.0); 3],
        };
        assert!((total_loss(&ones, &cfg).unwrap().total - 6.02).abs() < TOL);

        // identity + triplet only
        let cfg = LossConfig {
            enable_part: false,
            enable_sc: false,
            ..LossConfig::default()
        };
        let r = total_loss(&ones, &cfg).unwrap();
        assert_eq!((r.part, r.sc, r.total), (0.0, 0.0, 6.0));

        let missing = LossTerms {
            id: [Some(1.0), None, Some(1.0)],
            ..ones
        };
        assert!(total_loss(&missing, &LossConfig::default()).is_err());
    }

    fn check_fd<F: Fn(&Array4<f64>) -> f64>(x: &Array4<f64>, analytic: &Array4<f64>, f: F) {
        let eps = 1e-6;
        for (idx, &a) in analytic.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!(rel_err(num, a) <= 1e-3 || (num - a).abs() < 1e-9, "{idx:?}: {num} vs {a}");
        }
    }

    #[test]
    fn part_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = crate::nn::softmax_channels(&random4((2, 4, 2, 2), &mut rng));
        let mut p = Array4::zeros((2, 4, 2, 2));
        for n in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let k = rng.random_range(0..5);
                    if k < 4 {
                        p[[n, k, i, j]] = 1.0;
                    }
                }
            }
        }
        let (_, g) = part_matching_loss(&m, &p, 1e-12).unwrap();
        check_fd(&m, &g, |m| part_matching_loss(m, &p, 1e-12).unwrap().0);
    }

    #[test]
    fn consistency_gradient_through_saliency() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Array3::from_shape_fn((2, 2, 2), |_| rng.random_range(-1.0..1.0));
        let fr = random4((2, 3, 2, 2), &mut rng);
        let others = [saliency_map(&random4((2, 3, 2, 2), &mut rng)), saliency_map(&random4((2, 3, 2, 2), &mut rng))];
        let f = |x: &Array4<f64>| {
            semantic_consistency_loss(&g, &[saliency_map(x), others[0].clone(), others[1].clone()], false)
                .unwrap()
                .0
        };
        let (_, d) = semantic_consistency_loss(&g, &[saliency_map(&fr), others[0].clone(), others[1].clone()], false).unwrap();
        check_fd(&fr, &saliency_map_backward(&d[0], 3), f);
    }

    #[test]
    fn identity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = random4((1, 1, 3, 5), &mut rng).into_shape_with_order((3, 5)).unwrap();
        let labels = [1, 4, 0];
        for smoothing in [0.0, 0.1] {
            let (_, g) = identity_loss(&logits, &labels, smoothing).unwrap();
            let g4 = g.clone().into_shape_with_order((1, 1, 3, 5)).unwrap();
            let x = logits.clone().into_shape_with_order((1, 1, 3, 5)).unwrap();
            check_fd(&x, &g4, |x| {
                identity_loss(&x.clone().into_shape_with_order((3, 5)).unwrap(), &labels, smoothing).unwrap().0
            });
        }
    }

    #[test]
    fn triplet_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random4((1, 1, 8, 4), &mut rng);
        let labels = [0, 0, 1, 1, 2, 2, 0, 1];
        let as2 = |x: &Array4<f64>| x.clone().into_shape_with_order((8, 4)).unwrap();
        let (_, g) = triplet_loss(&as2(&f), &labels, 0.3).unwrap();
        check_fd(&f, &g.into_shape_with_order((1, 1, 8, 4)).unwrap(), |x| {
            triplet_loss(&as2(x), &labels, 0.3).unwrap().0
        });
    }

    /// The consistency gradient must treat the fused target as a constant.
    #[test]
    fn fused_target_is_gradient_blocked() {
        use crate::network::{BackboneConfig, BlockKind, ClassifierKind, NetworkConfig, ScNet};
        use crate::nn::Mode;
        let cfg = NetworkConfig {
            backbone: BackboneConfig {
                stem_channels: 4,
                stage_channels: vec![4, 4, 6, 6],
                blocks_per_stage: vec![1, 1, 1, 1],
                block: BlockKind::Basic,
                last_stage_stride: 1,
                input_height: 64,
                input_width: 64,
            },
            classifier: ClassifierKind::Bgap,
            num_identities: 3,
            streams: StreamSet::default(),
        };
        let mut net = ScNet::<f64>::new(cfg, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        net.init(&mut rng);
        for c in net.classifiers.iter_mut().flatten() {
            c.conv.init_normal(0.5, &mut rng);
        }
        let raw = random4((2, 3, 64, 64), &mut rng);
        let black = random4((2, 3, 64, 64), &mut rng);
        let labels = [0usize, 2];
        let lcfg = LossConfig {
            lambda1: 0.0,
            lambda2: 1.0,
            enable_id: false,
            enable_triplet: false,
            ..LossConfig::default()
        };
        let (out, tape) = net.forward_train(&raw, Some(&black), Mode::Train).unwrap();
        net.zero_grad();
        let (_, grads) = compute_losses(&out, &labels, None, &lcfg).unwrap();
        net.backward(&out, &tape, &grads).unwrap();
        let frozen_g = {
            let maps: Vec<Array3<f64>> =
                Stream::ALL.iter().map(|&s| select_label_maps(out.get(s).unwrap().cam.as_ref().unwrap(), &labels).unwrap()).collect();
            fuse_supervision(&maps.iter().map(|m| m.view()).collect::<Vec<_>>()).unwrap()
        };
        let sc_with = |net: &ScNet<f64>, g: Option<&Array3<f64>>| {
            let (o, _) = net.forward_train(&raw, Some(&black), Mode::Train).unwrap();
            let maps: Vec<Array3<f64>> =
                Stream::ALL.iter().map(|&s| select_label_maps(o.get(s).unwrap().cam.as_ref().unwrap(), &labels).unwrap()).collect();
            let live = fuse_supervision(&maps.iter().map(|m| m.view()).collect::<Vec<_>>()).unwrap();
            let target = g.cloned().unwrap_or(live);
            let sal: Vec<Array3<f64>> = Stream::ALL.iter().map(|&s| saliency_map(&o.get(s).unwrap().features)).collect();
            semantic_consistency_loss(&target, &sal, false).unwrap().0
        };
        let name = "classifier.r.conv.weight";
        let analytic = net.params().into_iter().find(|(n, _)| n == name).unwrap().1.grad.clone();
        let eps = 1e-5;
        let mut live_differs = false;
        for k in 0..analytic.len() {
            let bump = |net: &mut ScNet<f64>, d: f64| {
                let mut ps = net.params_mut();
                ps.iter_mut().find(|(n, _)| n == name).unwrap().1.value.as_slice_mut().unwrap()[k] += d;
            };
            bump(&mut net, eps);
            let (fp, lp) = (sc_with(&net, Some(&frozen_g)), sc_with(&net, None));
            bump(&mut net, -2.0 * eps);
            let (fm, lm) = (sc_with(&net, Some(&frozen_g)), sc_with(&net, None));
            bump(&mut net, eps);
            let frozen = (fp - fm) / (2.0 * eps);
            let live = (lp - lm) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[k];
            assert!((frozen - a).abs() < 1e-7, "weight {k}: frozen-target slope {frozen} vs analytic {a}");
            live_differs |= (live - a).abs() > 1e-4;
        }
        // perturbing classifier weights moves the live target
        assert!(live_differs);
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = crate::nn::softmax_channels(&random4((2, 4, 2, 2), &mut rng));
            let p = Array4::from_shape_fn((2, 4, 2, 2), |(_, k, i, j)| if (k + i + j + seed as usize) % 4 == 0 { 1.0 } else { 0.0 });
            prop_assert!(part_matching_loss(&m, &p, 1e-12).unwrap().0 >= 0.0);
            let logits = Array2::from_shape_fn((4, 3), |_| rng.random_range(-5.0..5.0));
            prop_assert!(identity_loss(&logits, &[0, 1, 2, 1], 0.0).unwrap().0 >= 0.0);
            let f = Array2::from_shape_fn((4, 3), |_| rng.random_range(-5.0..5.0));
            prop_assert!(triplet_loss(&f, &[0, 1, 0, 1], 0.3).unwrap().0 >= 0.0);
            let g = Array3::from_shape_fn((2, 2, 2), |_| rng.random_range(-1.0..1.0));
            let fa = Array3::from_shape_fn((2, 2, 2), |_| rng.random_range(-1.0..1.0));
            prop_assert!(semantic_consistency_loss(&g, &[fa], false).unwrap().0 >= 0.0);
        }

        #[test]
        fn fused_target_dominates_inputs(vals in proptest::collection::vec(-10.0f64..10.0, 3 * 2 * 3 * 2)) {
            let maps: Vec<Array3<f64>> = vals.chunks(12).map(|c| Array3::from_shape_vec((2, 3, 2), c.to_vec()).unwrap()).collect();
            let g = fuse_supervision(&maps.iter().map(|m| m.view()).collect::<Vec<_>>()).unwrap();
            for (idx, &v) in g.indexed_iter() {
                prop_assert!(maps.iter().all(|m| v >= m[idx]));
                prop_assert!(maps.iter().any(|m| v == m[idx]));
            }
        }

        #[test]
        fn part_loss_decreases_toward_masks(seed in 0u64..10_000, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assume!(hi - lo > 1e-6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Array1<usize> = Array1::from_shape_fn(6, |_| rng.random_range(0..4));
            let p = Array4::from_shape_fn((1, 4, 2, 3), |(_, k, i, j)| if labels[i * 3 + j] == k { 1.0 } else { 0.0 });
            let at = |t: f64| p.mapv(|v| (1.0 - t) * 0.25 + t * v);
            let a = part_matching_loss(&at(lo), &p, 1e-12).unwrap().0;
            let b = part_matching_loss(&at(hi), &p, 1e-12).unwrap().0;
            prop_assert!(b < a);
        }
    }
}
