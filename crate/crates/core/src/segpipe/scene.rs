//! Planted synthetic scenes standing in for image/text encoder features.
//!
//! Each class has a prototype direction and `N` attribute directions; each
//! prompt has a style direction shared across classes. A scene is a
//! Voronoi partition of the unit square into class regions, each split
//! further into attribute sub-regions. Pixel embeddings are
//! `(prototype + attribute) · S + noise` with `S = I + shift · G` a shared
//! random distortion of the image side; text embeddings are
//! `prototype + attribute + style + gap` with a per-class gap. The shared
//! distortion is learnable from any class; the per-class gap is not.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::prompt_align::EmbeddingBundle;

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub classes: usize,
    pub prompts: usize,
    pub dim: usize,
    /// Feature grid `(H, W)`.
    pub grid: (usize, usize),
    /// Label grid `(H_I, W_I)`.
    pub image: (usize, usize),
    /// Per-coordinate standard deviation of pixel noise.
    pub noise: f64,
    /// Norm of the per-class text offset.
    pub text_gap: f64,
    /// Strength of the shared image-side distortion.
    pub domain_shift: f64,
    /// Classes withheld from training labels.
    pub unseen: Vec<usize>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            classes: 6,
            prompts: 3,
            dim: 32,
            grid: (8, 8),
            image: (16, 16),
            noise: 0.15,
            text_gap: 0.4,
            domain_shift: 0.0,
            unseen: vec![4, 5],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(format!("scene.{f}"), r));
        if self.classes < 2 {
            return bad("classes", "need at least 2 classes");
        }
        if self.prompts == 0 {
            return bad("prompts", "must be positive");
        }
        if self.dim < 2 {
            return bad("dim", "must be at least 2");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid", "must be positive");
        }
        if self.image.0 < self.grid.0 || self.image.1 < self.grid.1 {
            return bad("image", "must be at least as large as the feature grid");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be finite and non-negative");
        }
        if !(self.text_gap >= 0.0 && self.text_gap.is_finite()) {
            return bad("text_gap", "must be finite and non-negative");
        }
        if !(self.domain_shift >= 0.0 && self.domain_shift.is_finite()) {
            return bad("domain_shift", "must be finite and non-negative");
        }
        if let Some(&c) = self.unseen.iter().find(|&&c| c >= self.classes) {
            return bad("unseen", &format!("class {c} out of range"));
        }
        let mut u = self.unseen.clone();
        u.sort_unstable();
        u.dedup();
        if u.len() != self.unseen.len() {
            return bad("unseen", "duplicate class");
        }
        if u.len() >= self.classes {
            return bad("unseen", "at least one class must be seen");
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn image_pixels(&self) -> usize {
        self.image.0 * self.image.1
    }
}

/// A generated scene. Ground-truth labels sit behind a counting accessor so
/// tests can assert that training code never consulted them.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub config: SceneConfig,
    pub seed: u64,
    /// `M x D` pixel embeddings on the feature grid.
    pub pixels: Mat,
    /// `K*N x D` frozen text embeddings, class-major.
    pub text: Mat,
    /// `K x D` class prototypes (for oracle baselines).
    pub prototypes: Mat,
    /// `K*N x D` attribute directions, class-major.
    pub attributes: Mat,
    /// `seen[k]` is false for withheld classes.
    pub seen: Vec<bool>,
    labels: Vec<usize>,
    cell_labels: Vec<usize>,
    cell_parts: Vec<usize>,
    targets: Vec<Option<usize>>,
    gt_reads: Cell<usize>,
}

impl ToyScene {
    /// Full label map on the image grid. Every call is counted.
    pub fn ground_truth(&self) -> &[usize] {
        self.gt_reads.set(self.gt_reads.get() + 1);
        &self.labels
    }

    /// Labels of feature-grid cells (class at each cell centre). Counted.
    pub fn cell_ground_truth(&self) -> &[usize] {
        self.gt_reads.set(self.gt_reads.get() + 1);
        &self.cell_labels
    }

    /// Number of ground-truth reads so far.
    pub fn gt_reads(&self) -> usize {
        self.gt_reads.get()
    }

    /// Training targets on the image grid: seen-class labels, `None` where
    /// the pixel belongs to a withheld class.
    pub fn training_targets(&self) -> &[Option<usize>] {
        &self.targets
    }

    /// Attribute index of each feature cell within its class.
    pub fn cell_parts(&self) -> &[usize] {
        &self.cell_parts
    }

    /// Makes every label available for training (fully supervised setting);
    /// the seen/unseen split still governs evaluation.
    pub fn with_full_supervision(mut self) -> Self {
        self.targets = self.labels.iter().map(|&c| Some(c)).collect();
        self
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn prompts(&self) -> usize {
        self.config.prompts
    }

    /// Embedding bundle with the mean pixel embedding as the global token.
    pub fn bundle(&self) -> EmbeddingBundle {
        let m = self.pixels.rows() as f64;
        let global = Mat::row_vector(&self.pixels.col_sums()).scale(1.0 / m);
        EmbeddingBundle {
            text: self.text.clone(),
            pixels: self.pixels.clone(),
            global,
            k: self.config.classes,
            n: self.config.prompts,
            h: self.config.grid.0,
            w: self.config.grid.1,
        }
    }

    pub(crate) fn from_parts(
        config: SceneConfig,
        seed: u64,
        pixels: Mat,
        text: Mat,
        prototypes: Mat,
        attributes: Mat,
        labels: Vec<usize>,
        cell_labels: Vec<usize>,
        cell_parts: Vec<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let (k, n, d) = (config.classes, config.prompts, config.dim);
        if pixels.shape() != (config.pixels(), d)
            || text.shape() != (k * n, d)
            || prototypes.shape() != (k, d)
            || attributes.shape() != (k * n, d)
            || labels.len() != config.image_pixels()
            || cell_labels.len() != config.pixels()
            || cell_parts.len() != config.pixels()
        {
            return Err(Error::Format("scene arrays do not match the header dimensions".into()));
        }
        if labels.iter().chain(&cell_labels).any(|&c| c >= k) || cell_parts.iter().any(|&p| p >= n) {
            return Err(Error::Format("label or part index out of range".into()));
        }
        let seen: Vec<bool> = (0..k).map(|c| !config.unseen.contains(&c)).collect();
        let targets = labels.iter().map(|&c| seen[c].then_some(c)).collect();
        Ok(ToyScene {
            config,
            seed,
            pixels,
            text,
            prototypes,
            attributes,
            seen,
            labels,
            cell_labels,
            cell_parts,
            targets,
            gt_reads: Cell::new(0),
        })
    }

    pub(crate) fn raw_labels(&self) -> (&[usize], &[usize]) {
        (&self.labels, &self.cell_labels)
    }
}

fn gaussian_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// `count` unit directions: orthonormal when they fit, else random unit vectors.
fn directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut raw = gaussian_rows(count, dim, rng);
    if count <= dim {
        for i in 0..count {
            for j in 0..i {
                let p: f64 = raw[i].iter().zip(&raw[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = raw.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= p * y;
                }
            }
            normalize(&mut raw[i]);
        }
    } else {
        raw.iter_mut().for_each(|v| normalize(v));
    }
    raw
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn nearest(points: &[(f64, f64)], y: f64, x: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, &(py, px)) in points.iter().enumerate() {
        let d = (py - y).powi(2) + (px - x).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Generates a planted scene and its embedding bundle; deterministic per seed.
pub fn gen_toy_scene(config: &SceneConfig, seed: u64) -> Result<(ToyScene, EmbeddingBundle)> {
    config.validate()?;
    let (k, n, d) = (config.classes, config.prompts, config.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dirs = directions(k + k * n + n, d, &mut rng);
    let proto = &dirs[..k];
    let attr = &dirs[k..k + k * n];
    let style = &dirs[k + k * n..];
    let gap_scale = config.text_gap / (d as f64).sqrt();
    let gaps = gaussian_rows(k, d, &mut rng);

    let text = Mat::from_fn(k * n, d, |r, c| {
        let (cls, p) = (r / n, r % n);
        proto[cls][c] + attr[r][c] + style[p][c] + gap_scale * gaps[cls][c]
    });

    let centres: Vec<(f64, f64)> = (0..k).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let parts: Vec<Vec<(f64, f64)>> =
        (0..k).map(|_| (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect()).collect();

    let (hi, wi) = config.image;
    let labels: Vec<usize> = (0..hi * wi)
        .map(|i| nearest(&centres, ((i / wi) as f64 + 0.5) / hi as f64, ((i % wi) as f64 + 0.5) / wi as f64))
        .collect();

    let (h, w) = config.grid;
    let mut cell_labels = Vec::with_capacity(h * w);
    let mut cell_parts = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let y = ((i / w) as f64 + 0.5) / h as f64;
        let x = ((i % w) as f64 + 0.5) / w as f64;
        let cls = nearest(&centres, y, x);
        cell_labels.push(cls);
        cell_parts.push(nearest(&parts[cls], y, x));
    }

    let shift = Mat::random_normal(d, d, config.domain_shift / (d as f64).sqrt(), &mut rng);
    let noise = gaussian_rows(h * w, d, &mut rng);
    let clean = Mat::from_fn(h * w, d, |r, c| proto[cell_labels[r]][c] + attr[cell_labels[r] * n + cell_parts[r]][c]);
    let shifted = crate::linalg::matmul(&clean, &shift)?;
    let pixels = Mat::from_fn(h * w, d, |r, c| clean[(r, c)] + shifted[(r, c)] + config.noise * noise[r][c]);

    let prototypes = Mat::from_fn(k, d, |r, c| proto[r][c]);
    let attributes = Mat::from_fn(k * n, d, |r, c| attr[r][c]);
    let scene = ToyScene::from_parts(config.clone(), seed, pixels, text, prototypes, attributes, labels, cell_labels, cell_parts)?;
    let bundle = scene.bundle();
    Ok((scene, bundle))
}

/// Feature-grid accuracy of the nearest `prototype + attribute` classifier,
/// the best any method can do from the pixel embeddings alone.
pub fn oracle_accuracy(scene: &ToyScene) -> f64 {
    let (k, n) = (scene.classes(), scene.prompts());
    let truth = scene.cell_ground_truth();
    let mut correct = 0usize;
    for (m, &label) in truth.iter().enumerate() {
        let px = scene.pixels.row(m);
        let mut best = (f64::INFINITY, 0);
        for r in 0..k * n {
            let dist: f64 = (0..px.len())
                .map(|c| (px[c] - scene.prototypes[(r / n, c)] - scene.attributes[(r, c)]).powi(2))
                .sum();
            if dist < best.0 {
                best = (dist, r / n);
            }
        }
        correct += usize::from(best.1 == label);
    }
    correct as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_align::score_map;

    fn score_argmax(bundle: &EmbeddingBundle) -> Vec<usize> {
        let s = score_map(bundle).unwrap();
        (0..s.pixels())
            .map(|m| {
                let mut best = (f64::NEG_INFINITY, 0);
                for k in 0..s.k {
                    let v: f64 = (0..s.n).map(|n| s.data[(m, k * s.n + n)]).sum();
                    if v > best.0 {
                        best = (v, k);
                    }
                }
                best.1
            })
            .collect()
    }

    #[test]
    fn noise_free_scene_is_separable() {
        for seed in 0..5 {
            let cfg = SceneConfig { noise: 0.0, ..SceneConfig::default() };
            let (scene, bundle) = gen_toy_scene(&cfg, seed).unwrap();
            assert_eq!(score_argmax(&bundle), scene.cell_ground_truth());
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let (a, ba) = gen_toy_scene(&cfg, 7).unwrap();
        let (b, bb) = gen_toy_scene(&cfg, 7).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
        assert_eq!(a.text.data(), b.text.data());
        assert_eq!(a.ground_truth(), b.ground_truth());
        assert_eq!(ba, bb);
        let (c, _) = gen_toy_scene(&cfg, 8).unwrap();
        assert_ne!(a.pixels.data(), c.pixels.data());
    }

    #[test]
    fn oracle_bounds_score_map_accuracy() {
        let cfg = SceneConfig { noise: 0.5, ..SceneConfig::default() };
        let (mut oracle, mut score) = (0.0, 0.0);
        for seed in 0..20 {
            let (scene, bundle) = gen_toy_scene(&cfg, seed).unwrap();
            oracle += oracle_accuracy(&scene);
            let truth = scene.cell_ground_truth();
            let pred = score_argmax(&bundle);
            score += pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        }
        assert!(oracle >= score, "oracle {oracle} vs score map {score}");
    }

    #[test]
    fn targets_hide_unseen_classes() {
        let (scene, _) = gen_toy_scene(&SceneConfig::default(), 3).unwrap();
        let reads = scene.gt_reads();
        for (t, &l) in scene.training_targets().iter().zip(scene.raw_labels().0) {
            match t {
                Some(c) => assert!(scene.seen[*c] && *c == l),
                None => assert!(!scene.seen[l]),
            }
        }
        assert_eq!(scene.gt_reads(), reads);
        scene.ground_truth();
        assert_eq!(scene.gt_reads(), reads + 1);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = [
            SceneConfig { classes: 1, unseen: vec![], ..SceneConfig::default() },
            SceneConfig { image: (4, 4), ..SceneConfig::default() },
            SceneConfig { unseen: vec![9], ..SceneConfig::default() },
            SceneConfig { unseen: vec![0, 1, 2, 3, 4, 5], ..SceneConfig::default() },
            SceneConfig { noise: f64::NAN, ..SceneConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(gen_toy_scene(&cfg, 0), Err(Error::Config { .. })));
        }
    }
}
