//! Synthetic desk-scale datasets.
//!
//! Two generators, both fully determined by their seed:
//!
//! * 16×16 images of blob and stripe patterns. Classes 0 and 1 are
//!   Gaussian blobs of different size and brightness; classes 2 and 3 are
//!   horizontal and vertical stripes. Every class statistic (mean
//!   intensity, orientation energy) survives global average pooling, so
//!   small convolutional trunks learn the task, and at zero noise the
//!   two-class blob variant is linearly separable on raw pixels.
//! * stochastic block-model graphs: balanced blocks, independent edge
//!   coins (denser inside a block than across), and per-block feature
//!   means with Gaussian jitter. Labels are the block ids; train/val
//!   masks are a stratified split.
//!
//! Datasets serialize through the record container; graph topology goes
//! to a sibling edge-list text file, keeping the on-disk graph format
//! human-readable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{atomic_write, Container};
use crate::error::{Error, Result};
use crate::graph::{format_edge_list, parse_edge_list, Graph};
use crate::layers::fnv1a64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 16;

#[derive(Debug, Clone)]
pub struct ImageDataset<T: Scalar> {
    /// `[n, channels, 16, 16]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> ImageDataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Copies the selected samples into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let shape = self.images.shape();
        let sample = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let batch = Tensor::new(vec![indices.len(), shape[1], shape[2], shape[3]], data).expect("batch shape");
        (batch, labels)
    }
}

/// Pattern value at (row, col) for one class, before jitter-independent
/// channel scaling and noise. Blob classes carry (amplitude, sigma);
/// stripe classes a 4-pixel period along one axis.
fn pattern(label: usize, r: f64, c: f64, jr: f64, jc: f64, phase: f64) -> f64 {
    match label {
        0 => 0.6 * (-((r - jr).powi(2) + (c - jc).powi(2)) / (2.0 * 1.5 * 1.5)).exp(),
        1 => 1.0 * (-((r - jr).powi(2) + (c - jc).powi(2)) / (2.0 * 3.0 * 3.0)).exp(),
        2 => 0.4 * (1.0 + (std::f64::consts::PI * (r + phase) / 2.0).sin()),
        _ => 0.4 * (1.0 + (std::f64::consts::PI * (c + phase) / 2.0).sin()),
    }
}

pub fn generate_images<T: Scalar>(
    n: usize,
    channels: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<ImageDataset<T>> {
    if n == 0 {
        return Err(Error::BadData("image dataset must have at least one sample".into()));
    }
    if !(1..=3).contains(&channels) {
        return Err(Error::BadData(format!("image channels must be 1..=3, got {}", channels)));
    }
    if !(2..=4).contains(&classes) {
        return Err(Error::BadData(format!("image classes must be 2..=4, got {}", classes)));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::BadData(format!("noise level must be finite and >= 0, got {}", noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = IMAGE_SIDE;
    let center = (side as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(n * channels * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        let jr = center + rng.random_range(-1..=1) as f64;
        let jc = center + rng.random_range(-1..=1) as f64;
        let phase = rng.random_range(0..4) as f64;
        for ch in 0..channels {
            // Later channels carry a dimmer copy so channels stay
            // informative but not identical.
            let gain = 1.0 / (1.0 + ch as f64 * 0.5);
            for r in 0..side {
                for c in 0..side {
                    let v = gain * pattern(label, r as f64, c as f64, jr, jc, phase);
                    let eps: f64 = rng.sample(rand_distr::StandardNormal);
                    data.push(T::of(v + noise * eps));
                }
            }
        }
    }
    let images = Tensor::new(vec![n, channels, side, side], data)?;
    Ok(ImageDataset { images, labels, classes })
}

#[derive(Debug, Clone)]
pub struct GraphDataset<T: Scalar> {
    pub graph: Graph<T>,
    pub labels: Vec<usize>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct SbmParams {
    pub nodes: usize,
    /// Number of blocks; also the number of classes.
    pub blocks: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Feature dimension; must be at least `blocks` so every block gets a
    /// distinct one-hot mean.
    pub features: usize,
    /// Std of the Gaussian jitter around the block mean.
    pub noise: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SbmParams {
    fn default() -> Self {
        SbmParams {
            nodes: 200,
            blocks: 3,
            p_intra: 0.1,
            p_inter: 0.01,
            features: 8,
            noise: 0.5,
            train_frac: 0.3,
            val_frac: 0.2,
        }
    }
}

impl SbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::BadData("graph dataset must have at least one node".into()));
        }
        if !(2..=4).contains(&self.blocks) {
            return Err(Error::BadData(format!("block count must be 2..=4, got {}", self.blocks)));
        }
        if self.nodes < self.blocks {
            return Err(Error::BadData(format!("{} nodes cannot cover {} blocks", self.nodes, self.blocks)));
        }
        for (name, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::BadData(format!("{} must lie in [0, 1], got {}", name, p)));
            }
        }
        if self.features < self.blocks {
            return Err(Error::BadData(format!(
                "feature dimension {} is below the block count {}",
                self.features, self.blocks
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::BadData(format!("noise level must be finite and >= 0, got {}", self.noise)));
        }
        if self.train_frac < 0.0 || self.val_frac < 0.0 || self.train_frac + self.val_frac > 1.0 {
            return Err(Error::BadData("train_frac + val_frac must fit in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn generate_sbm<T: Scalar>(params: &SbmParams, seed: u64) -> Result<GraphDataset<T>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.nodes;
    let labels: Vec<usize> = (0..n).map(|i| i % params.blocks).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { params.p_intra } else { params.p_inter };
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let mut feats = Vec::with_capacity(n * params.features);
    for &label in &labels {
        for f in 0..params.features {
            let mean = if f == label { 1.0 } else { 0.0 };
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            feats.push(T::of(mean + params.noise * eps));
        }
    }
    let features = Tensor::new(vec![n, params.features], feats)?;
    let graph = Graph::new(n, edges, features)?;

    // Stratified split: shuffle within each class, then cut.
    let mut train_mask = vec![false; n];
    let mut val_mask = vec![false; n];
    for class in 0..params.blocks {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        for i in (1..members.len()).rev() {
            members.swap(i, rng.random_range(0..=i));
        }
        let n_train = (members.len() as f64 * params.train_frac).round() as usize;
        let n_val = (members.len() as f64 * params.val_frac).round() as usize;
        for &i in members.iter().take(n_train) {
            train_mask[i] = true;
        }
        for &i in members.iter().skip(n_train).take(n_val) {
            val_mask[i] = true;
        }
    }
    Ok(GraphDataset { graph, labels, train_mask, val_mask, classes: params.blocks })
}

// ── container I/O ───────────────────────────────────────────────────────

fn image_tag() -> u64 {
    fnv1a64("dataset/image")
}

fn graph_tag() -> u64 {
    fnv1a64("dataset/graph")
}

pub fn save_image_dataset<T: Scalar>(ds: &ImageDataset<T>, path: &Path) -> Result<()> {
    let mut c = Container::new(image_tag());
    let values: Vec<f64> = ds.images.data().iter().map(|v| v.as_f64()).collect();
    c.push_f64("images", ds.images.shape(), values)?;
    c.push_i32("labels", &[ds.labels.len()], ds.labels.iter().map(|&l| l as i32).collect())?;
    c.push_i32("meta.classes", &[1], vec![ds.classes as i32])?;
    c.save(path)
}

pub fn load_image_dataset<T: Scalar>(path: &Path) -> Result<ImageDataset<T>> {
    let c = Container::load(path)?;
    if c.fingerprint != image_tag() {
        return Err(Error::BadData(format!("{} is not an image dataset", path.display())));
    }
    let (dims, values) = c.f64_record("images")?;
    if dims.len() != 4 {
        return Err(Error::BadData(format!("images record has rank {}, expected 4", dims.len())));
    }
    let images = Tensor::new(dims.to_vec(), values.iter().map(|&v| T::of(v)).collect())?;
    let (_, raw_labels) = c.i32_record("labels")?;
    let (_, classes) = c.i32_record("meta.classes")?;
    let classes = classes[0] as usize;
    if raw_labels.len() != dims[0] {
        return Err(Error::BadData(format!("{} labels for {} images", raw_labels.len(), dims[0])));
    }
    let mut labels = Vec::with_capacity(raw_labels.len());
    for &l in raw_labels {
        if l < 0 || l as usize >= classes {
            return Err(Error::BadData(format!("label {} outside 0..{}", l, classes)));
        }
        labels.push(l as usize);
    }
    Ok(ImageDataset { images, labels, classes })
}

/// Writes the features/labels/masks container plus the edge-list text file.
pub fn save_graph_dataset<T: Scalar>(ds: &GraphDataset<T>, data_path: &Path, edges_path: &Path) -> Result<()> {
    let mut c = Container::new(graph_tag());
    let values: Vec<f64> = ds.graph.features.data().iter().map(|v| v.as_f64()).collect();
    c.push_f64("features", ds.graph.features.shape(), values)?;
    c.push_i32("labels", &[ds.labels.len()], ds.labels.iter().map(|&l| l as i32).collect())?;
    c.push_i32("train_mask", &[ds.train_mask.len()], ds.train_mask.iter().map(|&m| m as i32).collect())?;
    c.push_i32("val_mask", &[ds.val_mask.len()], ds.val_mask.iter().map(|&m| m as i32).collect())?;
    c.push_i32("meta.classes", &[1], vec![ds.classes as i32])?;
    c.save(data_path)?;
    atomic_write(edges_path, format_edge_list(&ds.graph.edges).as_bytes())
}

pub fn load_graph_dataset<T: Scalar>(data_path: &Path, edges_path: &Path) -> Result<GraphDataset<T>> {
    let c = Container::load(data_path)?;
    if c.fingerprint != graph_tag() {
        return Err(Error::BadData(format!("{} is not a graph dataset", data_path.display())));
    }
    let (dims, values) = c.f64_record("features")?;
    if dims.len() != 2 {
        return Err(Error::BadData(format!("features record has rank {}, expected 2", dims.len())));
    }
    let n = dims[0];
    let features = Tensor::new(dims.to_vec(), values.iter().map(|&v| T::of(v)).collect())?;
    let edge_text = std::fs::read_to_string(edges_path)
        .map_err(|e| Error::BadData(format!("edge list {}: {}", edges_path.display(), e)))?;
    let edges = parse_edge_list(&edge_text)?;
    let graph = Graph::new(n, edges, features)?;
    let (_, raw_labels) = c.i32_record("labels")?;
    let (_, classes) = c.i32_record("meta.classes")?;
    let classes = classes[0] as usize;
    let (_, train) = c.i32_record("train_mask")?;
    let (_, val) = c.i32_record("val_mask")?;
    if raw_labels.len() != n || train.len() != n || val.len() != n {
        return Err(Error::BadData("labels/masks do not match the node count".into()));
    }
    let mut labels = Vec::with_capacity(n);
    for &l in raw_labels {
        if l < 0 || l as usize >= classes {
            return Err(Error::BadData(format!("label {} outside 0..{}", l, classes)));
        }
        labels.push(l as usize);
    }
    Ok(GraphDataset {
        graph,
        labels,
        train_mask: train.iter().map(|&m| m != 0).collect(),
        val_mask: val.iter().map(|&m| m != 0).collect(),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_classes_are_separable_without_noise() {
        // Probe: threshold on mean intensity. The two blob classes differ
        // in size and brightness, so at zero noise this must be perfect.
        let ds = generate_images::<f64>(64, 1, 2, 0.0, 7).unwrap();
        let px = IMAGE_SIDE * IMAGE_SIDE;
        let means: Vec<f64> = (0..ds.len())
            .map(|i| ds.images.data()[i * px..(i + 1) * px].iter().sum::<f64>() / px as f64)
            .collect();
        let class_mean = |class: usize| {
            let picked: Vec<f64> =
                means.iter().zip(&ds.labels).filter(|(_, &l)| l == class).map(|(m, _)| *m).collect();
            picked.iter().sum::<f64>() / picked.len() as f64
        };
        let threshold = (class_mean(0) + class_mean(1)) / 2.0;
        let correct = means
            .iter()
            .zip(&ds.labels)
            .filter(|(m, &l)| (**m > threshold) as usize == l)
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn stripe_classes_differ_in_orientation_energy() {
        let ds = generate_images::<f64>(40, 1, 4, 0.0, 3).unwrap();
        let px = IMAGE_SIDE * IMAGE_SIDE;
        for i in 0..ds.len() {
            let label = ds.labels[i];
            if label < 2 {
                continue;
            }
            let img = &ds.images.data()[i * px..(i + 1) * px];
            let mut row_energy = 0.0; // variation down columns
            let mut col_energy = 0.0; // variation along rows
            for r in 0..IMAGE_SIDE - 1 {
                for c in 0..IMAGE_SIDE {
                    row_energy += (img[(r + 1) * IMAGE_SIDE + c] - img[r * IMAGE_SIDE + c]).abs();
                }
            }
            for r in 0..IMAGE_SIDE {
                for c in 0..IMAGE_SIDE - 1 {
                    col_energy += (img[r * IMAGE_SIDE + c + 1] - img[r * IMAGE_SIDE + c]).abs();
                }
            }
            if label == 2 {
                assert!(row_energy > 10.0 * col_energy.max(1e-12));
            } else {
                assert!(col_energy > 10.0 * row_energy.max(1e-12));
            }
        }
    }

    #[test]
    fn image_generation_is_deterministic_per_seed() {
        let a = generate_images::<f64>(10, 2, 3, 0.3, 42).unwrap();
        let b = generate_images::<f64>(10, 2, 3, 0.3, 42).unwrap();
        let c = generate_images::<f64>(10, 2, 3, 0.3, 43).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn image_parameter_validation() {
        assert!(generate_images::<f64>(0, 1, 2, 0.0, 0).is_err());
        assert!(generate_images::<f64>(4, 4, 2, 0.0, 0).is_err());
        assert!(generate_images::<f64>(4, 1, 5, 0.0, 0).is_err());
        assert!(generate_images::<f64>(4, 1, 2, -1.0, 0).is_err());
        assert!(generate_images::<f64>(4, 1, 2, f64::NAN, 0).is_err());
    }

    #[test]
    fn sbm_structure_and_masks() {
        let params = SbmParams { nodes: 90, blocks: 3, ..SbmParams::default() };
        let ds = generate_sbm::<f64>(&params, 11).unwrap();
        assert_eq!(ds.labels.len(), 90);
        for class in 0..3 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == class).count(), 30);
        }
        // Masks are disjoint and roughly sized by the fractions.
        let both = ds.train_mask.iter().zip(&ds.val_mask).filter(|(a, b)| **a && **b).count();
        assert_eq!(both, 0);
        assert_eq!(ds.train_mask.iter().filter(|&&m| m).count(), 27);
        assert_eq!(ds.val_mask.iter().filter(|&&m| m).count(), 18);
    }

    #[test]
    fn sbm_cliques_split_into_block_components() {
        let params = SbmParams {
            nodes: 30,
            blocks: 3,
            p_intra: 1.0,
            p_inter: 0.0,
            ..SbmParams::default()
        };
        let ds = generate_sbm::<f64>(&params, 0).unwrap();
        assert_eq!(ds.graph.components(), 3);
        // Every edge joins same-label endpoints.
        for &(u, v) in &ds.graph.edges {
            assert_eq!(ds.labels[u], ds.labels[v]);
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = std::env::temp_dir().join(format!("sqnt-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let img = generate_images::<f64>(6, 2, 3, 0.2, 5).unwrap();
        let img_path = dir.join("img.sqnt");
        save_image_dataset(&img, &img_path).unwrap();
        let img_back = load_image_dataset::<f64>(&img_path).unwrap();
        assert_eq!(img.images, img_back.images);
        assert_eq!(img.labels, img_back.labels);

        let gr = generate_sbm::<f64>(&SbmParams { nodes: 40, ..SbmParams::default() }, 8).unwrap();
        let g_path = dir.join("graph.sqnt");
        let e_path = dir.join("graph.edges");
        save_graph_dataset(&gr, &g_path, &e_path).unwrap();
        let gr_back = load_graph_dataset::<f64>(&g_path, &e_path).unwrap();
        assert_eq!(gr.graph.features, gr_back.graph.features);
        assert_eq!(gr.graph.edges, gr_back.graph.edges);
        assert_eq!(gr.labels, gr_back.labels);
        assert_eq!(gr.train_mask, gr_back.train_mask);
        assert_eq!(gr.val_mask, gr_back.val_mask);

        // The two container kinds refuse each other.
        assert!(load_graph_dataset::<f64>(&img_path, &e_path).is_err());
        assert!(load_image_dataset::<f64>(&g_path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
