//! MNIST IDX ingestion, run configuration and atomic result export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eqprop::TrainConfig;
use crate::error::{Error, Result};
use crate::fhn::{FhnParams, Formulation, RelaxOptions};
use crate::ham_ebm::Activation;
use crate::ham_fhn::InhibitorMode;
use crate::numerics::DenseMatrix;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Flat row-major inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Vec<u8>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        input_dim: usize,
        labels: Vec<u8>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "dataset dimensions must be positive".into(),
            ));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::dims(
                "dataset inputs",
                labels.len() * input_dim,
                inputs.len(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "dataset inputs".into(),
            });
        }
        Ok(Self {
            inputs,
            input_dim,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.num_classes];
        y[self.label(i)] = 1.0;
        y
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n * self.input_dim].to_vec(),
            input_dim: self.input_dim,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

fn idx_error(path: &Path, message: String) -> Error {
    Error::Format {
        kind: "IDX",
        path: path.to_path_buf(),
        message,
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            idx_error(
                path,
                format!(
                    "truncated header: expected at least {} bytes, found {}",
                    offset + 4,
                    bytes.len()
                ),
            )
        })
}

fn idx_payload<'a>(
    bytes: &'a [u8],
    header: usize,
    expected: usize,
    path: &Path,
) -> Result<&'a [u8]> {
    let actual = bytes.len().saturating_sub(header);
    if actual < expected {
        return Err(idx_error(
            path,
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(idx_error(
            path,
            format!("trailing data: expected {expected} payload bytes, found {actual}"),
        ));
    }
    Ok(&bytes[header..])
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file and its label file; pixels are scaled by 1/255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read_bytes(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_error(
            images_path,
            format!("bad magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        ));
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let dim = rows * cols;
    let pixels = idx_payload(&img, 16, count * dim, images_path)?;

    let lab = read_bytes(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_error(
            labels_path,
            format!("bad magic {magic}, expected {IDX_LABELS_MAGIC}"),
        ));
    }
    let label_count = be_u32(&lab, 4, labels_path)? as usize;
    if label_count != count {
        return Err(idx_error(
            labels_path,
            format!("count mismatch: {count} images but {label_count} labels"),
        ));
    }
    let labels = idx_payload(&lab, 8, count, labels_path)?.to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(idx_error(labels_path, format!("label {bad} outside 0..10")));
    }
    let inputs = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(inputs, dim, labels, 10, split)
}

/// Loads `train-*` or `t10k-*` IDX files from an MNIST directory.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Test => "t10k",
        _ => "train",
    };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Encodes images (`rows × cols` bytes each) and labels as IDX byte buffers.
pub fn encode_idx(
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    for x in [
        IDX_IMAGES_MAGIC,
        images.len() as u32,
        rows as u32,
        cols as u32,
    ] {
        img.extend_from_slice(&x.to_be_bytes());
    }
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    for x in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&x.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Writes `contents` to `path` via a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Manifest entry for a raw matrix blob: little-endian f64, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn write_blob(dir: &Path, file: &str, m: &DenseMatrix) -> Result<BlobRef> {
    let mut bytes = Vec::with_capacity(m.data().len() * 8);
    for x in m.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(&dir.join(file), &bytes)?;
    Ok(BlobRef {
        file: file.to_string(),
        rows: m.rows(),
        cols: m.cols(),
    })
}

pub fn read_blob(dir: &Path, blob: &BlobRef) -> Result<DenseMatrix> {
    let path = dir.join(&blob.file);
    let bytes = read_bytes(&path)?;
    let expected = blob.rows * blob.cols * 8;
    if bytes.len() != expected {
        return Err(Error::Format {
            kind: "weight blob",
            path,
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    DenseMatrix::from_row_major(blob.rows, blob.cols, data).map_err(|e| Error::Format {
        kind: "weight blob",
        path,
        message: e.to_string(),
    })
}

/// Random graph settings for `simulate` and `relax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Graph description file (`{nodes, edges: [{a, b, g}]}`); a random
    /// connected graph is generated when absent.
    pub graph: Option<PathBuf>,
    /// Separate inhibitor graph; defaults to no inhibitor coupling.
    pub inhibitor_graph: Option<PathBuf>,
    pub nodes: usize,
    pub conductance_range: [f64; 2],
    pub input_scale: f64,
    pub init_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            graph: None,
            inhibitor_graph: None,
            nodes: 16,
            conductance_range: [0.1, 1.0],
            input_scale: 0.1,
            init_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub steps: usize,
    pub record_every: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfAdjointConfig {
    pub networks: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Parameter regimes cycled over the networks; the first is `fhn`.
    pub extra_regimes: Vec<FhnParams>,
    pub probe_eps: f64,
    pub relax_tol: f64,
    pub analytic_tol: f64,
    pub probe_tol: f64,
}

impl Default for SelfAdjointConfig {
    fn default() -> Self {
        Self {
            networks: 20,
            min_nodes: 4,
            max_nodes: 32,
            extra_regimes: vec![
                FhnParams {
                    delta: 1.0,
                    epsilon: 0.5,
                    alpha: 2.0,
                    beta: 0.3,
                    d1: 0.5,
                    d2: 1.0,
                    tau1: 1.0,
                    tau2: 1.0,
                    formulation: Formulation::Classic,
                },
                FhnParams {
                    delta: 0.5,
                    epsilon: 1.5,
                    alpha: 0.9,
                    beta: 0.05,
                    d1: 1.0,
                    d2: 2.0,
                    tau1: 1.0,
                    tau2: 2.0,
                    formulation: Formulation::SpatialDelta,
                },
            ],
            probe_eps: 1e-4,
            relax_tol: 1e-12,
            analytic_tol: 1e-10,
            probe_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Checkpoint directory read by `eval`; defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub layer_sizes: Vec<usize>,
    pub nets: usize,
    pub init_scale: f64,
    pub beta: f64,
    pub fd_eps: f64,
    pub relax_tol: f64,
    pub max_steps: usize,
    pub min_cosine: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            layer_sizes: vec![8, 16, 16, 4],
            nets: 3,
            init_scale: 0.5,
            beta: 0.01,
            fd_eps: 1e-4,
            relax_tol: 1e-11,
            max_steps: 400_000,
            min_cosine: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    /// Parameters of the residual net and the single-path check.
    pub fhn: FhnParams,
    pub depth: usize,
    pub width: usize,
    pub backbone: f64,
    /// Couplings are drawn uniformly from `[0, coupling_scale / width)`.
    pub coupling_scale: f64,
    pub init_scale: f64,
    pub inhibitor_mode: InhibitorMode,
    pub ghost_half: bool,
    pub threshold: f64,
    pub relax: RelaxOptions,
    /// Path length for the single-path conservation check.
    pub path_nodes: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            fhn: FhnParams::turing(),
            depth: 30,
            width: 64,
            backbone: 1.0,
            coupling_scale: 0.5,
            init_scale: 0.5,
            inhibitor_mode: InhibitorMode::Conservative,
            ghost_half: false,
            threshold: 1e-3,
            relax: RelaxOptions {
                dt: 0.1,
                tol: 1e-11,
                max_steps: 400_000,
            },
            path_nodes: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EbmConfig {
    pub nets: usize,
    pub depth: usize,
    pub width: usize,
    pub weight_scale: f64,
    pub bias_scale: f64,
    pub input_scale: f64,
    pub activation: Activation,
    pub dt: f64,
    pub tol: f64,
    pub max_steps: usize,
    pub reconstruction_tol: f64,
}

impl Default for EbmConfig {
    fn default() -> Self {
        Self {
            nets: 10,
            depth: 5,
            width: 8,
            weight_scale: 0.1,
            bias_scale: 0.1,
            input_scale: 1.0,
            activation: Activation::Sigmoid,
            dt: 0.5,
            tol: 1e-12,
            max_steps: 100_000,
            reconstruction_tol: 1e-6,
        }
    }
}

/// A complete experiment description. Every field has a default, so `{}`
/// is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    pub fhn: FhnParams,
    pub relax: RelaxOptions,
    pub network: NetworkConfig,
    pub simulate: SimulateConfig,
    pub selfadjoint: SelfAdjointConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub gradcheck: GradCheckConfig,
    pub residual: ResidualConfig,
    pub ebm: EbmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: "default".into(),
            seed: 0,
            fhn: FhnParams::default(),
            relax: RelaxOptions::default(),
            network: NetworkConfig::default(),
            simulate: SimulateConfig::default(),
            selfadjoint: SelfAdjointConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            gradcheck: GradCheckConfig::default(),
            residual: ResidualConfig::default(),
            ebm: EbmConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.fhn.validate()?;
        self.residual.fhn.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::Config {
                path: format!("residual.{path}"),
                message,
            },
            other => other,
        })?;
        for (i, p) in self.selfadjoint.extra_regimes.iter().enumerate() {
            p.validate().map_err(|e| match e {
                Error::Config { path, message } => Error::Config {
                    path: format!(
                        "selfadjoint.extra_regimes[{i}].{}",
                        path.trim_start_matches("fhn.")
                    ),
                    message,
                },
                other => other,
            })?;
        }
        let positive = [
            ("relax.dt", self.relax.dt),
            ("relax.tol", self.relax.tol),
            ("residual.backbone", self.residual.backbone),
            ("residual.relax.dt", self.residual.relax.dt),
            ("ebm.dt", self.ebm.dt),
            ("ebm.tol", self.ebm.tol),
            ("gradcheck.beta", self.gradcheck.beta),
            ("gradcheck.fd_eps", self.gradcheck.fd_eps),
            ("selfadjoint.probe_eps", self.selfadjoint.probe_eps),
        ];
        for (path, x) in positive {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::Config {
                    path: path.into(),
                    message: format!("must be positive and finite, got {x}"),
                });
            }
        }
        if self.network.nodes == 0 {
            return Err(cfg_err("network.nodes", "must be at least 1"));
        }
        if self.selfadjoint.min_nodes == 0
            || self.selfadjoint.min_nodes > self.selfadjoint.max_nodes
        {
            return Err(cfg_err(
                "selfadjoint.min_nodes",
                "must satisfy 1 <= min_nodes <= max_nodes",
            ));
        }
        if self.gradcheck.layer_sizes.len() < 2 || self.gradcheck.layer_sizes.contains(&0) {
            return Err(cfg_err(
                "gradcheck.layer_sizes",
                "need at least two non-empty layers",
            ));
        }
        if self.residual.depth < 2 || self.residual.width == 0 {
            return Err(cfg_err("residual", "need depth >= 2 and width >= 1"));
        }
        if self.residual.path_nodes < 3 {
            return Err(cfg_err("residual.path_nodes", "must be at least 3"));
        }
        if self.ebm.depth < 2 || self.ebm.width == 0 {
            return Err(cfg_err("ebm", "need depth >= 2 and width >= 1"));
        }
        self.train.validate()
    }
}

fn cfg_err(path: &str, message: &str) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json_str(&text)
}

/// Renders rows under a fixed header as CSV.
pub fn csv_string<R: AsRef<[String]>>(header: &str, rows: &[R]) -> String {
    let mut out = String::with_capacity(header.len() + 1 + rows.len() * 32);
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.as_ref().join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_pair(dir: &Path, img: &[u8], lab: &[u8]) -> (PathBuf, PathBuf) {
        let (ip, lp) = (dir.join("img"), dir.join("lab"));
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip_single_image() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..6).map(|i| (i * 51) as u8).collect();
        let (img, lab) = encode_idx(std::slice::from_ref(&pixels), 2, 3, &[7]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        let ds = load_mnist_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.input_dim(), 6);
        assert_eq!(ds.label(0), 7);
        let expected: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
        assert_eq!(ds.input(0), expected.as_slice());
        assert_eq!(ds.input(0)[5], 1.0);
    }

    #[test]
    fn idx_magic_constants() {
        let (img, lab) = encode_idx(&[vec![0; 4]], 2, 2, &[0]);
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        assert_eq!(&lab[..4], &[0, 0, 8, 1]);
        assert_eq!(IDX_IMAGES_MAGIC, 0x0803);
        assert_eq!(IDX_LABELS_MAGIC, 0x0801);
    }

    #[test]
    fn idx_truncated_payload_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lab) = encode_idx(&[vec![1; 4], vec![2; 4]], 2, 2, &[0, 1]);
        img.truncate(img.len() - 3);
        let (ip, lp) = write_pair(dir.path(), &img, &lab);
        let err = load_mnist_idx(&ip, &lp, Split::Train)
            .unwrap_err()
            .to_string();
        assert!(err.contains("expected 8 bytes, found 5"), "{err}");
    }

    #[test]
    fn idx_rejects_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = encode_idx(&[vec![1; 4]], 2, 2, &[0]);
        let (ip, lp) = write_pair(dir.path(), &lab, &img);
        let err = load_mnist_idx(&ip, &lp, Split::Train).unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("bad magic 2049"));

        let (_, lab2) = encode_idx(&[vec![1; 4], vec![1; 4]], 2, 2, &[0, 1]);
        let (ip, lp) = write_pair(dir.path(), &img, &lab2);
        let err = load_mnist_idx(&ip, &lp, Split::Train)
            .unwrap_err()
            .to_string();
        assert!(err.contains("count mismatch"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_mnist_idx(
            Path::new("/nonexistent/a"),
            Path::new("/nonexistent/b"),
            Split::Train,
        )
        .unwrap_err();
        assert!(err.is_io());
    }

    #[test]
    fn empty_config_gives_table_defaults() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg.fhn.delta, 0.75);
        assert_eq!(cfg.fhn.epsilon, 0.85);
        assert_eq!(cfg.fhn.alpha, 1.08);
        assert_eq!(cfg.fhn.beta, 0.0);
        assert_eq!(cfg.train.beta_nudge, 0.9);
        assert_eq!(cfg.train.free_iters, 55);
        assert_eq!(cfg.train.nudge_iters, 14);
        assert_eq!(cfg.train.dt, 0.1);
        assert_eq!(cfg.train.init_scale, 0.014);
        assert_eq!(cfg.train.layer_lrs, vec![1e-2, 1e-3, 2e-4, 1e-4, 5e-5]);
        assert_eq!(
            cfg.train.layer_sizes,
            vec![784, 512, 512, 512, 512, 512, 10]
        );
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn partial_config_keeps_other_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"fhn": {"alpha": 2.0}, "seed": 9}"#).unwrap();
        assert_eq!(cfg.fhn.alpha, 2.0);
        assert_eq!(cfg.fhn.delta, 0.75);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_json_str(r#"{"fhn": {"gamma": 1.0}}"#).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("gamma"));
        assert!(RunConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_name_field() {
        let err = RunConfig::from_json_str(r#"{"fhn": {"tau1": 0.0}}"#).unwrap_err();
        assert!(err.to_string().contains("fhn.tau1"), "{err}");
    }

    #[test]
    fn config_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn atomic_write_and_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/metrics.csv");
        let rows: Vec<Vec<String>> = Vec::new();
        write_atomic(
            &path,
            csv_string("epoch,split,loss,error", &rows).as_bytes(),
        )
        .unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "epoch,split,loss,error\n"
        );
        write_atomic(&path, b"x").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "x");
    }

    proptest! {
        #[test]
        fn idx_round_trip_random(
            rows in 1usize..5, cols in 1usize..5,
            seed in proptest::collection::vec(any::<u8>(), 1..40),
        ) {
            let dim = rows * cols;
            let n = seed.len().div_ceil(dim).max(1);
            let images: Vec<Vec<u8>> = (0..n)
                .map(|i| (0..dim).map(|j| seed[(i * dim + j) % seed.len()]).collect())
                .collect();
            let labels: Vec<u8> = (0..n).map(|i| seed[i % seed.len()] % 10).collect();
            let (img, lab) = encode_idx(&images, rows, cols, &labels);
            let dir = tempfile::tempdir().unwrap();
            let (ip, lp) = write_pair(dir.path(), &img, &lab);
            let ds = load_mnist_idx(&ip, &lp, Split::Train).unwrap();
            prop_assert_eq!(ds.len(), n);
            for i in 0..n {
                prop_assert_eq!(ds.label(i), labels[i] as usize);
                for j in 0..dim {
                    prop_assert_eq!((ds.input(i)[j] * 255.0).round() as u8, images[i][j]);
                }
            }
        }
    }
}
