//! Synthetic distribution-shift datasets.
//!
//! Each sample is `P` patches of dimension `K` (one per class). Patch 0
//! carries a pixel-level cue (a single coordinate set to 1), one other patch
//! carries a patch-level cue (a feature vector `c_k`), and the rest is
//! Gaussian noise. Two shifted test splits each make one of the cues point
//! at the wrong class.
//!
//! The token-cluster set is a separate toy for routing telemetry: tokens are
//! drawn around well-separated centers and the label is the strict majority
//! cluster of a sample.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::rng::{standard_normal, StreamRng};
use crate::{Error, Result, Tensor};

pub const DEFAULT_PATCHES: usize = 10;
pub const DEFAULT_CLASSES: usize = 4;
pub const DEFAULT_TRAIN: usize = 100_000;
pub const DEFAULT_EVAL: usize = 2_000;

/// Parameters of the patch dataset. `p1 = p2 = 1` is the noiseless variant.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticSpec {
    pub patches: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub p1: f64,
    pub p2: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            patches: DEFAULT_PATCHES,
            classes: DEFAULT_CLASSES,
            n_train: DEFAULT_TRAIN,
            n_eval: DEFAULT_EVAL,
            p1: 1.0,
            p2: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn noisy(p1: f64, p2: f64) -> Self {
        SyntheticSpec {
            p1,
            p2,
            ..Self::default()
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.p1 == 1.0 && self.p2 == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patches < 2 {
            problems.push(format!("patches must be at least 2, got {}", self.patches));
        }
        if self.classes < 2 {
            problems.push(format!("classes must be at least 2, got {}", self.classes));
        }
        for (name, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(p > 0.0 && p <= 1.0) {
                problems.push(format!("{name} must lie in (0, 1], got {p}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    /// Pixel cue points at `(y + 1) mod K`.
    Test1,
    /// Patch cue is `c_{(y + 1) mod K}`.
    Test2,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [SplitKind::Train, SplitKind::Val, SplitKind::Test1, SplitKind::Test2];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test1 => "test1",
            SplitKind::Test2 => "test2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Samples `[n × P × K]` with labels and the location of both cues.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub inputs: Tensor<f64>,
    pub labels: Vec<usize>,
    /// Coordinate of patch 0 that is set to 1.
    pub pixel_index: Vec<usize>,
    /// Patch (in `1..P`) holding the feature vector.
    pub feature_patch: Vec<usize>,
    /// Class `k` of the feature vector `c_k` placed there.
    pub feature_class: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// Feature vectors `c_k` as columns.
    pub basis: Tensor<f64>,
    pub train: Split,
    pub val: Split,
    pub test1: Split,
    pub test2: Split,
}

impl SyntheticDataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test1 => &self.test1,
            SplitKind::Test2 => &self.test2,
        }
    }

    pub fn splits(&self) -> [&Split; 4] {
        [&self.train, &self.val, &self.test1, &self.test2]
    }

    pub fn feature(&self, k: usize) -> Vec<f64> {
        (0..self.basis.rows()).map(|i| self.basis.at(i, k)).collect()
    }
}

/// Random orthonormal `[K × K]` matrix: Gram-Schmidt (applied twice) on a
/// Gaussian matrix.
pub fn make_feature_basis(k: usize, rng: &mut StreamRng) -> Result<Tensor<f64>> {
    if k == 0 {
        return Err(Error::invalid("make_feature_basis", "K must be at least 1"));
    }
    loop {
        let mut cols: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| standard_normal(rng)).collect()).collect();
        let mut ok = true;
        for j in 0..k {
            for _ in 0..2 {
                for i in 0..j {
                    let d: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                    let (head, tail) = cols.split_at_mut(j);
                    for (x, q) in tail[0].iter_mut().zip(&head[i]) {
                        *x -= d * q;
                    }
                }
            }
            let norm = libm::sqrt(cols[j].iter().map(|x| x * x).sum());
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            return Ok(Tensor::from_fn([k, k], |idx| cols[idx % k][idx / k]));
        }
    }
}

/// Builds the basis and the four splits, drawing everything from `rng` in a
/// fixed order.
pub fn generate(spec: &SyntheticSpec, rng: &mut StreamRng) -> Result<SyntheticDataset> {
    spec.validate()?;
    let basis = make_feature_basis(spec.classes, rng)?;
    let train = generate_split(spec, &basis, SplitKind::Train, spec.n_train, rng);
    let val = generate_split(spec, &basis, SplitKind::Val, spec.n_eval, rng);
    let test1 = generate_split(spec, &basis, SplitKind::Test1, spec.n_eval, rng);
    let test2 = generate_split(spec, &basis, SplitKind::Test2, spec.n_eval, rng);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        basis,
        train,
        val,
        test1,
        test2,
    })
}

/// `y` with probability `p`, otherwise uniform over the other classes.
fn noisy_class(y: usize, classes: usize, p: f64, rng: &mut StreamRng) -> usize {
    if rng.random::<f64>() < p {
        y
    } else {
        let other = rng.random_range(0..classes - 1);
        if other >= y {
            other + 1
        } else {
            other
        }
    }
}

fn generate_split(spec: &SyntheticSpec, basis: &Tensor<f64>, kind: SplitKind, n: usize, rng: &mut StreamRng) -> Split {
    let (p, k) = (spec.patches, spec.classes);
    let mut data = vec![0.0; n * p * k];
    let mut labels = Vec::with_capacity(n);
    let mut pixel_index = Vec::with_capacity(n);
    let mut feature_patch = Vec::with_capacity(n);
    let mut feature_class = Vec::with_capacity(n);
    for sample in data.chunks_exact_mut(p * k) {
        let y = rng.random_range(0..k);
        let shifted = (y + 1) % k;
        let pixel = match kind {
            SplitKind::Test1 => shifted,
            _ => noisy_class(y, k, spec.p1, rng),
        };
        let class = match kind {
            SplitKind::Test2 => shifted,
            _ => noisy_class(y, k, spec.p2, rng),
        };
        let at = rng.random_range(1..p);
        for (patch, values) in sample.chunks_exact_mut(k).enumerate() {
            if patch == at {
                for (i, v) in values.iter_mut().enumerate() {
                    *v = basis.at(i, class);
                }
            } else {
                for v in values.iter_mut() {
                    *v = standard_normal(rng);
                }
                if patch == 0 {
                    values[pixel] = 1.0;
                }
            }
        }
        labels.push(y);
        pixel_index.push(pixel);
        feature_patch.push(at);
        feature_class.push(class);
    }
    Split {
        kind,
        inputs: Tensor::new([n, p, k], data).expect("shape matches data"),
        labels,
        pixel_index,
        feature_patch,
        feature_class,
    }
}

/// Separation between cluster centers in units of the token noise std.
pub const CLUSTER_SEPARATION: f64 = 8.0;

/// Tokens drawn around `C` centers; `token_clusters[i·T + t]` is the cluster
/// of token `t` of sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenClusters {
    pub centers: Tensor<f64>,
    pub inputs: Tensor<f64>,
    pub token_clusters: Vec<usize>,
    pub labels: Vec<usize>,
    pub noise_std: f64,
}

impl TokenClusters {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[2]
    }

    /// The samples as `[n × d × 1 × T]` images, so that a patch size of 1
    /// turns token `t` into patch `t`.
    pub fn as_images(&self) -> Tensor<f64> {
        let (n, t, d) = (self.len(), self.tokens_per_sample(), self.dim());
        let src = self.inputs.data();
        Tensor::from_fn([n, d, 1, t], |idx| {
            let (i, rest) = (idx / (d * t), idx % (d * t));
            let (c, tok) = (rest / t, rest % t);
            src[(i * t + tok) * d + c]
        })
    }

    /// Index of the nearest center for every token.
    pub fn nearest_center(&self) -> Vec<usize> {
        let d = self.dim();
        self.inputs
            .data()
            .chunks_exact(d)
            .map(|tok| {
                let mut best = (0, f64::INFINITY);
                for c in 0..self.clusters() {
                    let dist: f64 = tok.iter().zip(self.centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best.1 {
                        best = (c, dist);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// Unique most frequent cluster, if any.
pub fn strict_majority(clusters: &[usize], n_clusters: usize) -> Option<usize> {
    let mut counts = vec![0usize; n_clusters];
    for &c in clusters {
        counts[c] += 1;
    }
    let max = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &n)| n == max);
    let first = winners.next().map(|(i, _)| i);
    if winners.next().is_some() {
        None
    } else {
        first
    }
}

/// `n` samples of `T` tokens in `d` dimensions around `C` centers at pairwise
/// distance at least [`CLUSTER_SEPARATION`] (token noise std 1). The label is
/// drawn uniformly first and token clusters are resampled until it is their
/// strict majority.
pub fn generate_token_clusters(c: usize, t: usize, d: usize, n: usize, rng: &mut StreamRng) -> Result<TokenClusters> {
    if c == 0 || t == 0 || d == 0 {
        return Err(Error::invalid("generate_token_clusters", "C, T and d must be positive"));
    }
    let centers = cluster_centers(c, d, rng)?;
    let mut inputs = Vec::with_capacity(n * t * d);
    let mut token_clusters = Vec::with_capacity(n * t);
    let mut labels = Vec::with_capacity(n);
    let mut draw = vec![0usize; t];
    for _ in 0..n {
        let y = rng.random_range(0..c);
        loop {
            draw.iter_mut().for_each(|v| *v = rng.random_range(0..c));
            if strict_majority(&draw, c) == Some(y) {
                break;
            }
        }
        for &cl in &draw {
            inputs.extend(centers.row(cl).iter().map(|&m| m + standard_normal::<f64, _>(rng)));
        }
        token_clusters.extend_from_slice(&draw);
        labels.push(y);
    }
    Ok(TokenClusters {
        centers,
        inputs: Tensor::new([n, t, d], inputs)?,
        token_clusters,
        labels,
        noise_std: 1.0,
    })
}

fn cluster_centers(c: usize, d: usize, rng: &mut StreamRng) -> Result<Tensor<f64>> {
    if c <= d {
        // Scaled orthonormal directions sit exactly CLUSTER_SEPARATION apart.
        let q = make_feature_basis(d, rng)?;
        let scale = CLUSTER_SEPARATION / core::f64::consts::SQRT_2;
        return Ok(Tensor::from_fn([c, d], |idx| scale * q.at(idx % d, idx / d)));
    }
    for _ in 0..10_000 {
        let centers = Tensor::from_fn([c, d], |_| CLUSTER_SEPARATION * standard_normal::<f64, _>(rng));
        let separated = (0..c).all(|i| {
            (0..i).all(|j| {
                let dist: f64 = centers.row(i).iter().zip(centers.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                libm::sqrt(dist) >= CLUSTER_SEPARATION
            })
        });
        if separated {
            return Ok(centers);
        }
    }
    Err(Error::invalid(
        "generate_token_clusters",
        String::from("could not place separated centers; increase d"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn rng(seed: u64) -> StreamRng {
        SeedTree::new(seed).stream("synthetic-test")
    }

    fn small(p1: f64, p2: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 4000,
            n_eval: 500,
            p1,
            p2,
            ..SyntheticSpec::default()
        }
    }

    fn three_sigma(n: usize, p: f64) -> f64 {
        3.0 * libm::sqrt(n as f64 * p * (1.0 - p))
    }

    #[test]
    fn defaults() {
        let s = SyntheticSpec::default();
        assert_eq!((s.patches, s.classes, s.n_train, s.n_eval), (10, 4, 100_000, 2_000));
        assert!(s.is_noiseless());
        assert!(s.validate().is_ok());
    }

    #[test]
    fn invalid_spec_lists_every_problem() {
        let s = SyntheticSpec {
            patches: 1,
            classes: 1,
            p1: 0.0,
            p2: 1.5,
            ..SyntheticSpec::default()
        };
        let Err(Error::InvalidConfig(msg)) = s.validate() else {
            panic!("expected config error");
        };
        for key in ["patches", "classes", "p1", "p2"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        for k in [1, 2, 4, 7, 16] {
            let g = make_feature_basis(k, &mut rng(k as u64)).unwrap();
            for i in 0..k {
                for j in 0..k {
                    let dot: f64 = (0..k).map(|r| g.at(r, i) * g.at(r, j)).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9, "K={k} ({i},{j}) {dot}");
                }
            }
        }
        let one = make_feature_basis(1, &mut rng(3)).unwrap();
        assert_eq!(one.data()[0].abs(), 1.0);
    }

    #[test]
    fn noiseless_cues_are_exact() {
        let ds = generate(&small(1.0, 1.0), &mut rng(1)).unwrap();
        let (p, k) = (10, 4);
        for split in [&ds.train, &ds.val] {
            for (i, &y) in split.labels.iter().enumerate() {
                let x = &split.inputs.data()[i * p * k..(i + 1) * p * k];
                assert_eq!(split.pixel_index[i], y);
                assert_eq!(x[y], 1.0);
                assert_eq!(split.feature_class[i], y);
                let at = split.feature_patch[i];
                assert!((1..p).contains(&at));
                assert_eq!(&x[at * k..(at + 1) * k], ds.feature(y).as_slice());
            }
        }
        for (i, &y) in ds.test1.labels.iter().enumerate() {
            assert_eq!(ds.test1.pixel_index[i], (y + 1) % k);
            assert_eq!(ds.test1.feature_class[i], y);
        }
        for (i, &y) in ds.test2.labels.iter().enumerate() {
            assert_eq!(ds.test2.pixel_index[i], y);
            assert_eq!(ds.test2.feature_class[i], (y + 1) % k);
        }
    }

    #[test]
    fn exactly_one_patch_is_a_feature_vector() {
        let ds = generate(&small(0.9, 0.9), &mut rng(2)).unwrap();
        let k = 4;
        let feats: Vec<Vec<f64>> = (0..k).map(|c| ds.feature(c)).collect();
        for split in ds.splits() {
            for i in 0..split.len() {
                let x = &split.inputs.data()[i * 40..(i + 1) * 40];
                let hits: Vec<usize> = (0..10)
                    .filter(|&pt| feats.iter().any(|f| f.as_slice() == &x[pt * k..(pt + 1) * k]))
                    .collect();
                assert_eq!(hits, vec![split.feature_patch[i]]);
            }
        }
    }

    #[test]
    fn test2_never_contains_own_class_feature() {
        let ds = generate(&small(0.9, 0.9), &mut rng(4)).unwrap();
        let k = 4;
        for (i, &y) in ds.test2.labels.iter().enumerate() {
            let x = &ds.test2.inputs.data()[i * 40..(i + 1) * 40];
            let own = ds.feature(y);
            assert!((0..10).all(|pt| x[pt * k..(pt + 1) * k] != own[..]));
        }
    }

    #[test]
    fn noisy_pixel_rate_is_binomial() {
        let spec = SyntheticSpec {
            n_train: 20_000,
            n_eval: 10,
            ..SyntheticSpec::noisy(0.9, 0.7)
        };
        let ds = generate(&spec, &mut rng(5)).unwrap();
        let n = ds.train.len();
        let pix = ds.train.labels.iter().zip(&ds.train.pixel_index).filter(|(y, j)| y == j).count();
        let pat = ds.train.labels.iter().zip(&ds.train.feature_class).filter(|(y, c)| y == c).count();
        assert!((pix as f64 - 0.9 * n as f64).abs() <= three_sigma(n, 0.9), "{pix}");
        assert!((pat as f64 - 0.7 * n as f64).abs() <= three_sigma(n, 0.7), "{pat}");
        // Wrong cues are spread evenly over the other classes.
        let mut off = [0usize; 3];
        for (&y, &j) in ds.train.labels.iter().zip(&ds.train.pixel_index) {
            if y != j {
                off[(j + 4 - y) % 4 - 1] += 1;
            }
        }
        let wrong = n - pix;
        for c in off {
            assert!((c as f64 - wrong as f64 / 3.0).abs() <= three_sigma(wrong, 1.0 / 3.0), "{off:?}");
        }
    }

    #[test]
    fn labels_are_balanced() {
        let ds = generate(&small(1.0, 1.0), &mut rng(6)).unwrap();
        let n = ds.train.len();
        let mut counts = [0usize; 4];
        ds.train.labels.iter().for_each(|&y| counts[y] += 1);
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() <= three_sigma(n, 0.25), "{counts:?}");
        }
    }

    #[test]
    fn nearest_basis_classifier_is_perfect_when_noiseless() {
        // Classify by the patch closest to any feature vector.
        let ds = generate(&small(1.0, 1.0), &mut rng(7)).unwrap();
        let k = 4;
        let feats: Vec<Vec<f64>> = (0..k).map(|c| ds.feature(c)).collect();
        for (i, &y) in ds.train.labels.iter().enumerate() {
            let x = &ds.train.inputs.data()[i * 40..(i + 1) * 40];
            let mut best = (usize::MAX, f64::INFINITY);
            for pt in 0..10 {
                for (c, f) in feats.iter().enumerate() {
                    let d: f64 = x[pt * k..(pt + 1) * k].iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (c, d);
                    }
                }
            }
            assert_eq!(best.0, y);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(0.9, 0.9), &mut rng(8)).unwrap();
        let b = generate(&small(0.9, 0.9), &mut rng(8)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(0.9, 0.9), &mut rng(9)).unwrap();
        assert_ne!(a.train.inputs, c.train.inputs);
    }

    #[test]
    fn token_clusters_are_recoverable() {
        let tc = generate_token_clusters(4, 8, 6, 2000, &mut rng(10)).unwrap();
        for i in 0..4 {
            for j in 0..i {
                let d: f64 = tc.centers.row(i).iter().zip(tc.centers.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(libm::sqrt(d) >= 6.0 * tc.noise_std);
            }
        }
        let hits = tc.nearest_center().iter().zip(&tc.token_clusters).filter(|(a, b)| a == b).count();
        assert!(hits as f64 / tc.token_clusters.len() as f64 >= 0.999);
    }

    #[test]
    fn token_cluster_labels_are_majorities_and_balanced() {
        let n = 4000;
        let tc = generate_token_clusters(4, 5, 4, n, &mut rng(11)).unwrap();
        let mut counts = [0usize; 4];
        for (i, &y) in tc.labels.iter().enumerate() {
            assert_eq!(strict_majority(&tc.token_clusters[i * 5..(i + 1) * 5], 4), Some(y));
            counts[y] += 1;
        }
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() <= three_sigma(n, 0.25), "{counts:?}");
        }
    }

    #[test]
    fn more_clusters_than_dims() {
        let tc = generate_token_clusters(5, 3, 2, 50, &mut rng(12)).unwrap();
        let hits = tc.nearest_center().iter().zip(&tc.token_clusters).filter(|(a, b)| a == b).count();
        assert!(hits >= 148);
    }

    #[test]
    fn single_cluster() {
        let tc = generate_token_clusters(1, 4, 3, 20, &mut rng(13)).unwrap();
        assert!(tc.token_clusters.iter().all(|&c| c == 0));
        assert!(tc.labels.iter().all(|&y| y == 0));
    }

    #[test]
    fn image_view_maps_tokens_to_pixels() {
        let tc = generate_token_clusters(2, 3, 4, 5, &mut rng(14)).unwrap();
        let img = tc.as_images();
        assert_eq!(img.shape(), &[5, 4, 1, 3]);
        let patches = crate::nn::extract_patches(&img, 1).unwrap();
        assert_eq!(patches.data(), tc.inputs.data());
    }
}
