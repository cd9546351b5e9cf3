//! Labeled datasets, their container format, and synthetic generators.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{f64s_to_le, le_to_f64s, read_container, write_container};
use crate::error::{Error, Result};
use crate::flow::dequantize;
use crate::rng;
use crate::score::{AnalyticGmmScore, ClassMixture};
use crate::sde::SdeSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One flattened sample per row. Quantized data hold integer values.
    pub samples: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-sample shape: `[D]` for vectors, `[H, W]` for images.
    pub sample_shape: Vec<usize>,
    /// Quantization levels; `None` for continuous data.
    pub levels: Option<u32>,
    /// Value range of the raw samples.
    pub domain: (f64, f64),
}

impl Dataset {
    pub fn new(
        samples: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        sample_shape: Vec<usize>,
        levels: Option<u32>,
        domain: (f64, f64),
    ) -> Result<Self> {
        let ds = Self {
            samples,
            labels,
            num_classes,
            sample_shape,
            levels,
            domain,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.nrows() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                self.samples.nrows(),
                self.labels.len()
            )));
        }
        if self.sample_shape.iter().product::<usize>() != self.samples.ncols() {
            return Err(Error::Shape(format!(
                "sample shape {:?} does not match {} columns",
                self.sample_shape,
                self.samples.ncols()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::out_of_range(
                "label",
                bad as f64,
                format!("[0, {})", self.num_classes),
            ));
        }
        if !(self.domain.0 < self.domain.1) {
            return Err(Error::config("dataset domain must satisfy lo < hi"));
        }
        if let Some(levels) = self.levels {
            if !(2..=256).contains(&levels) {
                return Err(Error::config("quantized datasets need 2..=256 levels"));
            }
            let ok = self
                .samples
                .iter()
                .all(|&v| v.fract() == 0.0 && v >= 0.0 && v < levels as f64);
            if !ok {
                return Err(Error::config("quantized samples must be integers in [0, levels)"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.samples.row(i).to_vec()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: self.samples.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Range the model sees: `[0, 1]` for quantized data, else `domain`.
    pub fn model_domain(&self) -> (f64, f64) {
        match self.levels {
            Some(_) => (0.0, 1.0),
            None => self.domain,
        }
    }

    /// Model-space input for sample `i`. Quantized samples are dequantized
    /// with noise from the `(seed, i)` stream.
    pub fn model_input(&self, i: usize, seed: u64) -> Result<Vec<f64>> {
        match self.levels {
            None => Ok(self.row(i)),
            Some(levels) => {
                let mut r = rng::stream(seed, "dequantize", &[i as u64]);
                let q: Vec<u32> = self.samples.row(i).iter().map(|&v| v as u32).collect();
                let u: Vec<f64> = (0..q.len()).map(|_| r.random::<f64>()).collect();
                dequantize(&q, levels, &u)
            }
        }
    }

    fn dtype(&self) -> DType {
        if self.levels.is_some() {
            DType::U8
        } else {
            DType::F64
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut shape = vec![self.len()];
        shape.extend(&self.sample_shape);
        let meta = json!({
            "container": "dataset",
            "shape": shape,
            "dtype": self.dtype(),
            "num_classes": self.num_classes,
            "levels": self.levels,
            "domain": [self.domain.0, self.domain.1],
            "n": self.len(),
        });
        let mut payload = match self.dtype() {
            DType::U8 => self.samples.iter().map(|&v| v as u8).collect(),
            DType::F64 => f64s_to_le(self.samples.iter().copied()),
        };
        for &y in &self.labels {
            payload.extend((y as u32).to_le_bytes());
        }
        write_container(BufWriter::new(File::create(path)?), &meta, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            shape: Vec<usize>,
            dtype: DType,
            num_classes: usize,
            levels: Option<u32>,
            domain: (f64, f64),
        }
        let (meta, payload) = read_container(BufReader::new(File::open(path)?), "dataset")?;
        let meta: Meta = serde_json::from_value(meta)?;
        let (&n, sample_shape) = meta
            .shape
            .split_first()
            .ok_or_else(|| Error::Format("empty dataset shape".into()))?;
        let d: usize = sample_shape.iter().product();
        let width = match meta.dtype {
            DType::U8 => 1,
            DType::F64 => 8,
        };
        if payload.len() != n * d * width + 4 * n {
            return Err(Error::Format(format!(
                "dataset payload has {} bytes, expected {}",
                payload.len(),
                n * d * width + 4 * n
            )));
        }
        let (body, label_bytes) = payload.split_at(n * d * width);
        let values = match meta.dtype {
            DType::U8 => body.iter().map(|&b| f64::from(b)).collect(),
            DType::F64 => le_to_f64s(body)?,
        };
        let labels = label_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let samples = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(
            samples,
            labels,
            meta.num_classes,
            sample_shape.to_vec(),
            meta.levels,
            meta.domain,
        )
    }
}

/// Class-conditional isotropic Gaussian mixtures with a shared standard
/// deviation; each class mixes its modes uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    /// `modes[k]` lists the component means of class `k`.
    pub modes: Vec<Vec<Vec<f64>>>,
    pub scale: f64,
    pub domain: (f64, f64),
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.modes.is_empty() || d == 0 {
            return Err(Error::config("GMM needs K >= 1 classes and D >= 1"));
        }
        for (k, class) in self.modes.iter().enumerate() {
            if class.is_empty() || class.iter().any(|m| m.len() != d) {
                return Err(Error::config(format!("class {k}: modes must be nonempty with dimension {d}")));
            }
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("GMM scale must be positive"));
        }
        if !(self.domain.0 < self.domain.1) {
            return Err(Error::config("GMM domain must satisfy lo < hi"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.modes.first().and_then(|c| c.first()).map_or(0, Vec::len)
    }

    /// `K` single-mode classes evenly spaced on a circle in the first two
    /// coordinates, the first at angle π/2.
    pub fn ring(k: usize, dim: usize, radius: f64, scale: f64, domain: (f64, f64)) -> Self {
        let modes = (0..k)
            .map(|c| {
                let a = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * a.cos();
                if dim > 1 {
                    m[1] = radius * a.sin();
                }
                vec![m]
            })
            .collect();
        Self { modes, scale, domain }
    }

    /// The data distribution as an analytic score model under `sde`.
    pub fn analytic_model(&self, sde: SdeSpec) -> Result<AnalyticGmmScore> {
        self.validate()?;
        let var = self.scale * self.scale;
        AnalyticGmmScore::new(
            sde,
            self.modes.iter().map(|m| ClassMixture::equal_weights(m, var)).collect(),
        )
    }

    /// Closed-form class posterior `p(y | x)` under a uniform class prior
    /// (ignoring domain clipping, which the defaults make negligible).
    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let model = self.analytic_model(SdeSpec::default())?;
        let logs: Vec<f64> = (0..self.num_classes())
            .map(|y| model.log_density(x, 0.0, Some(y)))
            .collect::<Result<_>>()?;
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / z).collect())
    }

    /// Bayes decision (lowest class id on ties).
    pub fn bayes_predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::classify::argmax(&self.posterior(x)?))
    }
}

/// Draws `n_per_class` samples per class, interleaving classes
/// (`0, 1, …, K−1, 0, 1, …`), clamped to the domain.
pub fn gen_gmm_dataset(spec: &GmmSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (k, d) = (spec.num_classes(), spec.dim());
    let mut r = rng::stream(seed, "gmm-data", &[]);
    let n = k * n_per_class;
    let mut samples = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let modes = &spec.modes[y];
        let m = &modes[if modes.len() > 1 { r.random_range(0..modes.len()) } else { 0 }];
        for j in 0..d {
            let z: f64 = r.sample(StandardNormal);
            samples[[i, j]] = (m[j] + spec.scale * z).clamp(spec.domain.0, spec.domain.1);
        }
        labels.push(y);
    }
    Dataset::new(samples, labels, k, vec![d], None, spec.domain)
}

/// Number of built-in grating orientations.
pub const MAX_TOY_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyImageSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Grating frequency in cycles per image side.
    pub cycles: f64,
    /// Grating amplitude in pixel units.
    pub amplitude: f64,
    /// Standard deviation of the per-pixel noise, in pixel units.
    pub noise: f64,
}

impl Default for ToyImageSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            height: 8,
            width: 8,
            cycles: 2.0,
            amplitude: 90.0,
            noise: 6.0,
        }
    }
}

/// Oriented sinusoidal gratings, class `k` at angle `kπ/K`, plus Gaussian
/// pixel noise, rounded and clamped to 8-bit values.
pub fn gen_toyimage_dataset(spec: &ToyImageSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    let k = spec.num_classes;
    if k == 0 || k > MAX_TOY_CLASSES {
        return Err(Error::config(format!("toy images support 1..={MAX_TOY_CLASSES} classes")));
    }
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::config("image sides must be positive"));
    }
    let (h, w) = (spec.height, spec.width);
    let side = h.max(w) as f64;
    let templates: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let theta = std::f64::consts::PI * c as f64 / k as f64;
            let (ct, st) = (theta.cos(), theta.sin());
            (0..h * w)
                .map(|p| {
                    let (i, j) = ((p / w) as f64, (p % w) as f64);
                    let phase = 2.0 * std::f64::consts::PI * spec.cycles * (i * ct + j * st) / side;
                    127.5 + spec.amplitude * phase.cos()
                })
                .collect()
        })
        .collect();
    let mut r = rng::stream(seed, "toy-images", &[]);
    let n = k * n_per_class;
    let mut samples = Array2::zeros((n, h * w));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        for (p, base) in templates[y].iter().enumerate() {
            let z: f64 = r.sample(StandardNormal);
            samples[[i, p]] = (base + spec.noise * z).round().clamp(0.0, 255.0);
        }
        labels.push(y);
    }
    Dataset::new(samples, labels, k, vec![h, w], Some(256), (0.0, 255.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class() -> GmmSpec {
        GmmSpec {
            modes: vec![vec![vec![2.0, 0.0]], vec![vec![-2.0, 0.0]]],
            scale: 1.0,
            domain: (-10.0, 10.0),
        }
    }

    #[test]
    fn empty_dataset_keeps_metadata() {
        let ds = gen_gmm_dataset(&two_class(), 0, 1).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn class_means_concentrate() {
        let n = 4000;
        let ds = gen_gmm_dataset(&two_class(), n, 2).unwrap();
        for (y, target) in [(0usize, 2.0), (1, -2.0)] {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == y).collect();
            let mean0 = rows.iter().map(|&i| ds.samples[[i, 0]]).sum::<f64>() / n as f64;
            let mean1 = rows.iter().map(|&i| ds.samples[[i, 1]]).sum::<f64>() / n as f64;
            let bound = 4.0 / (n as f64).sqrt();
            assert!((mean0 - target).abs() < bound && mean1.abs() < bound);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_gmm_dataset(&two_class(), 50, 9).unwrap();
        let b = gen_gmm_dataset(&two_class(), 50, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_gmm_dataset(&two_class(), 50, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_gmm_dataset(&two_class(), 7, 3).unwrap();
        ds.save(dir.path().join("g.sbgc")).unwrap();
        assert_eq!(Dataset::load(dir.path().join("g.sbgc")).unwrap(), ds);
        let img = gen_toyimage_dataset(&ToyImageSpec::default(), 3, 4).unwrap();
        img.save(dir.path().join("i.sbgc")).unwrap();
        let back = Dataset::load(dir.path().join("i.sbgc")).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.sample_shape, vec![8, 8]);
    }

    #[test]
    fn toy_images_are_8_bit_and_noise_free_classes_are_constant() {
        let spec = ToyImageSpec { noise: 0.0, num_classes: 3, ..Default::default() };
        let ds = gen_toyimage_dataset(&spec, 4, 5).unwrap();
        for i in 0..ds.len() {
            let same = ds.labels.iter().position(|&y| y == ds.labels[i]).unwrap();
            assert_eq!(ds.samples.row(i), ds.samples.row(same));
        }
        let noisy = gen_toyimage_dataset(&ToyImageSpec { noise: 80.0, ..Default::default() }, 20, 5).unwrap();
        assert!(noisy.samples.iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
        assert!(gen_toyimage_dataset(&ToyImageSpec { num_classes: 9, ..Default::default() }, 1, 0).is_err());
    }

    /// Spectral energy of the mean class image at frequency (fy, fx).
    fn dft_energy(img: &[f64], h: usize, w: usize, fy: usize, fx: usize) -> f64 {
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let a = -2.0 * std::f64::consts::PI * ((fy * i) as f64 / h as f64 + (fx * j) as f64 / w as f64);
                re += (img[i * w + j] - mean) * a.cos();
                im += (img[i * w + j] - mean) * a.sin();
            }
        }
        re * re + im * im
    }

    #[test]
    fn class_orientations_differ_in_spectrum() {
        let ds = gen_toyimage_dataset(&ToyImageSpec::default(), 30, 6).unwrap();
        let mean_image = |y: usize| -> Vec<f64> {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == y).collect();
            (0..64)
                .map(|p| rows.iter().map(|&i| ds.samples[[i, p]]).sum::<f64>() / rows.len() as f64)
                .collect()
        };
        let (m0, m1) = (mean_image(0), mean_image(1));
        // class 0 varies along rows (vertical frequency), class 1 along columns
        assert!(dft_energy(&m0, 8, 8, 2, 0) > 100.0 * dft_energy(&m0, 8, 8, 0, 2));
        assert!(dft_energy(&m1, 8, 8, 0, 2) > 100.0 * dft_energy(&m1, 8, 8, 2, 0));
    }

    #[test]
    fn dequantized_inputs_lie_in_unit_interval() {
        let ds = gen_toyimage_dataset(&ToyImageSpec::default(), 2, 7).unwrap();
        let x = ds.model_input(1, 3).unwrap();
        assert!(x.iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(x, ds.model_input(1, 3).unwrap());
        assert_eq!(ds.model_domain(), (0.0, 1.0));
    }

    #[test]
    fn bayes_posterior_is_normalized_and_symmetric() {
        let spec = two_class();
        let p = spec.posterior(&[0.0, 1.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert_eq!(spec.bayes_predict(&[0.0, 1.0]).unwrap(), 0);
        assert_eq!(spec.bayes_predict(&[-0.1, 0.0]).unwrap(), 1);
    }
}
