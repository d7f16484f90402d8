//! MNIST ingestion (IDX files), cropping, roto-translation augmentation and
//! the two image classifiers: four directional SSM views with a small affine
//! head, and the pixel-sequence baseline.

use std::fs;
use std::path::Path;

use crate::error::{CoffeeError, Result};
use crate::numerics::{gelu, init_uniform, Matrix, RngState};
use crate::ssm::{LayerTrace, ModelKind, SsmLayer};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const CROP_SIDE: usize = 25;
pub const CROP_OFFSET: usize = 1;
pub const NUM_CLASSES: usize = 10;
pub const VALIDATION_SIZE: usize = 10_000;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Raw images as stored in an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CoffeeError::Idx(format!("{what}: header truncated")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CoffeeError::Idx(format!("images: bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(CoffeeError::Idx(format!(
            "images: expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok(IdxImages { count, rows, cols, pixels: body[..need].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CoffeeError::Idx(format!("labels: bad magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(CoffeeError::Idx(format!(
            "labels: expected {count} bytes, found {}",
            body.len()
        )));
    }
    let labels = body[..count].to_vec();
    if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(CoffeeError::Idx(format!("labels: value {l} outside 0..=9")));
    }
    Ok(labels)
}

/// A full-resolution image scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Matrix,
    pub label: u8,
}

pub fn images_with_labels(images: &IdxImages, labels: &[u8]) -> Result<Vec<LabeledImage>> {
    if images.count != labels.len() {
        return Err(CoffeeError::Idx(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let side = images.rows * images.cols;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(k, &label)| {
            let px = &images.pixels[k * side..(k + 1) * side];
            LabeledImage {
                pixels: Matrix::from_fn(images.rows, images.cols, |r, c| {
                    f64::from(px[r * images.cols + c]) / 255.0
                }),
                label,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistSplits {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Move `val_size` randomly chosen training images into a validation set.
pub fn split_train_val(
    all: Vec<LabeledImage>,
    val_size: usize,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if val_size > all.len() {
        return Err(CoffeeError::InvalidArgument(format!(
            "validation size {val_size} exceeds {} training images",
            all.len()
        )));
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    RngState::new(seed).shuffle(&mut order);
    let mut is_val = vec![false; all.len()];
    for &i in &order[..val_size] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (img, v) in all.into_iter().zip(is_val) {
        if v {
            val.push(img);
        } else {
            train.push(img);
        }
    }
    Ok((train, val))
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| {
        CoffeeError::Idx(format!(
            "cannot read {} ({e}); expected the uncompressed IDX files in this directory",
            path.display()
        ))
    })
}

/// Load the four standard IDX files from `dir` and split off a seeded
/// validation set of `val_size` training images.
pub fn mnist_load_with(dir: &Path, val_size: usize, seed: u64) -> Result<MnistSplits> {
    let train_all = images_with_labels(
        &parse_idx_images(&read(dir, TRAIN_IMAGES)?)?,
        &parse_idx_labels(&read(dir, TRAIN_LABELS)?)?,
    )?;
    let test = images_with_labels(
        &parse_idx_images(&read(dir, TEST_IMAGES)?)?,
        &parse_idx_labels(&read(dir, TEST_LABELS)?)?,
    )?;
    let (train, val) = split_train_val(train_all, val_size, seed)?;
    Ok(MnistSplits { train, val, test })
}

pub fn mnist_load(dir: &Path, seed: u64) -> Result<MnistSplits> {
    mnist_load_with(dir, VALIDATION_SIZE, seed)
}

/// Encode images and labels in IDX form (used for fixtures and exports).
pub fn write_idx(images: &[LabeledImage]) -> (Vec<u8>, Vec<u8>) {
    let (rows, cols) = images.first().map_or((MNIST_SIDE, MNIST_SIDE), |i| i.pixels.shape());
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for im in images {
        img.extend(im.pixels.as_slice().iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lab = Vec::with_capacity(8 + images.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(images.len() as u32).to_be_bytes());
    lab.extend(images.iter().map(|i| i.label));
    (img, lab)
}

/// Keep rows and columns `1..=25` of a 28 × 28 image.
pub fn crop_25(image: &Matrix) -> Result<Matrix> {
    if image.shape() != (MNIST_SIDE, MNIST_SIDE) {
        return Err(CoffeeError::Shape(format!(
            "crop expects a 28 x 28 image, got {:?}",
            image.shape()
        )));
    }
    Ok(Matrix::from_fn(CROP_SIDE, CROP_SIDE, |r, c| image[(r + CROP_OFFSET, c + CROP_OFFSET)]))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    /// Shift bound as a fraction of the image width (x) and height (y).
    pub max_translate_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, max_rotation_deg: 5.0, max_translate_frac: 0.01 }
    }
}

/// Rotate by `angle_deg` about the image center, then shift by `(dx, dy)`
/// pixels. Bilinear sampling, zero outside the image, clamped to `[0, 1]`.
pub fn roto_translate(image: &Matrix, angle_deg: f64, dx: f64, dy: f64) -> Matrix {
    let (h, w) = image.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
            0.0
        } else {
            image[(r as usize, c as usize)]
        }
    };
    Matrix::from_fn(h, w, |r, c| {
        // Inverse map: undo the shift, then rotate back.
        let (x, y) = (c as f64 - cx - dx, r as f64 - cy - dy);
        let sx = cos * x + sin * y + cx;
        let sy = -sin * x + cos * y + cy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (c0, r0) = (x0 as isize, y0 as isize);
        let v = (1.0 - fy) * ((1.0 - fx) * at(r0, c0) + fx * at(r0, c0 + 1))
            + fy * ((1.0 - fx) * at(r0 + 1, c0) + fx * at(r0 + 1, c0 + 1));
        v.clamp(0.0, 1.0)
    })
}

pub fn augment(image: &Matrix, cfg: &AugmentConfig, rng: &mut RngState) -> Matrix {
    if !cfg.enabled {
        return image.clone();
    }
    let angle = rng.uniform_range(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    let max_dx = cfg.max_translate_frac * image.cols() as f64;
    let max_dy = cfg.max_translate_frac * image.rows() as f64;
    let dx = rng.uniform_range(-max_dx, max_dx);
    let dy = rng.uniform_range(-max_dy, max_dy);
    roto_translate(image, angle, dx, dy)
}

/// Rows forward, columns forward, rows reversed, columns reversed. Token `k`
/// of each view is one row or column of the image.
pub fn views(image: &Matrix) -> [Matrix; 4] {
    let (h, w) = image.shape();
    [
        image.clone(),
        image.transpose(),
        Matrix::from_fn(h, w, |k, i| image[(h - 1 - k, i)]),
        Matrix::from_fn(w, h, |k, i| image[(i, w - 1 - k)]),
    ]
}

/// Affine map `W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    /// `out × 1`.
    pub bias: Matrix,
}

impl Affine {
    /// Uniform in `±1/√fan_in` for weights and biases.
    pub fn init(rng: &mut RngState, inputs: usize, outputs: usize) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = init_uniform(rng, outputs, inputs, -bound, bound);
        let bias = init_uniform(rng, outputs, 1, -bound, bound);
        Self { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Matrix::zeros(outputs, inputs), bias: Matrix::zeros(outputs, 1) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.as_slice().to_vec();
        for (r, o) in out.iter_mut().enumerate() {
            *o += crate::numerics::dot(self.weight.row(r), x);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Four directional SSM layers of width 25 and the `100 → 25 → 10` head.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistModel {
    pub layers: Vec<SsmLayer>,
    pub hidden: Affine,
    pub output: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistTrace {
    pub inputs: [Matrix; 4],
    pub layers: Vec<LayerTrace>,
    /// Last output of each view, concatenated.
    pub features: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub activation: Vec<f64>,
    pub logits: Vec<f64>,
}

impl MnistModel {
    pub fn init(kind: ModelKind, n: usize, output_filter: bool, rng: &mut RngState) -> Result<Self> {
        let layers = (0..4)
            .map(|_| SsmLayer::init(kind, rng, CROP_SIDE, n, output_filter))
            .collect::<Result<_>>()?;
        let hidden = Affine::init(rng, 4 * CROP_SIDE, CROP_SIDE);
        let output = Affine::init(rng, CROP_SIDE, NUM_CLASSES);
        Ok(Self { layers, hidden, output })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(SsmLayer::param_count).sum::<usize>()
            + self.hidden.param_count()
            + self.output.param_count()
    }
}

pub fn mnist_forward(model: &MnistModel, image: &Matrix) -> Result<MnistTrace> {
    if image.shape() != (CROP_SIDE, CROP_SIDE) {
        return Err(CoffeeError::Shape(format!(
            "the four-view model takes a 25 x 25 image, got {:?}",
            image.shape()
        )));
    }
    if model.layers.len() != 4 || model.layers.iter().any(|l| l.d() != CROP_SIDE) {
        return Err(CoffeeError::Shape("expected four SSM layers with D = 25".into()));
    }
    let inputs = views(image);
    let layers: Vec<LayerTrace> =
        model.layers.iter().zip(&inputs).map(|(l, x)| l.forward(x)).collect::<Result<_>>()?;
    let features: Vec<f64> =
        layers.iter().flat_map(|t| t.outputs.row(CROP_SIDE - 1).to_vec()).collect();
    let (pre_activation, activation, logits) = mnist_head(model, &features);
    Ok(MnistTrace { inputs, layers, features, pre_activation, activation, logits })
}

/// `features → (pre-activation, GELU activation, logits)`.
pub(crate) fn mnist_head(model: &MnistModel, features: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pre_activation = model.hidden.apply(features);
    let activation: Vec<f64> = pre_activation.iter().map(|&v| gelu(v)).collect();
    let logits = model.output.apply(&activation);
    (pre_activation, activation, logits)
}

/// Column-major vectorization: pixel `(r, c)` lands at `c · rows + r`.
pub fn column_major(image: &Matrix) -> Matrix {
    let (h, w) = image.shape();
    Matrix::from_fn(h * w, 1, |p, _| image[(p % h, p / h)])
}

/// Width-1 SSM over the pixel sequence, GELU, then one affine map to logits.
/// Without a layer the pixels go straight to the GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct SmnistModel {
    pub layer: Option<SsmLayer>,
    pub output: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmnistTrace {
    pub input: Matrix,
    pub layer: Option<LayerTrace>,
    pub pre_activation: Vec<f64>,
    pub activation: Vec<f64>,
    pub logits: Vec<f64>,
}

impl SmnistModel {
    pub fn init(kind: Option<ModelKind>, n: usize, rng: &mut RngState) -> Result<Self> {
        let layer = kind.map(|k| SsmLayer::init(k, rng, 1, n, false)).transpose()?;
        let len = MNIST_SIDE * MNIST_SIDE;
        Ok(Self { layer, output: Affine::init(rng, len, NUM_CLASSES) })
    }

    pub fn param_count(&self) -> usize {
        self.layer.as_ref().map_or(0, SsmLayer::param_count) + self.output.param_count()
    }
}

pub fn smnist_forward(model: &SmnistModel, image: &Matrix) -> Result<SmnistTrace> {
    let input = column_major(image);
    if input.rows() != model.output.inputs() {
        return Err(CoffeeError::Shape(format!(
            "pixel sequence has length {}, head expects {}",
            input.rows(),
            model.output.inputs()
        )));
    }
    let layer = model.layer.as_ref().map(|l| l.forward(&input)).transpose()?;
    let pre_activation = match &layer {
        Some(t) => t.outputs.as_slice().to_vec(),
        None => input.as_slice().to_vec(),
    };
    let activation: Vec<f64> = pre_activation.iter().map(|&v| gelu(v)).collect();
    let logits = model.output.apply(&activation);
    Ok(SmnistTrace { input, layer, pre_activation, activation, logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Matrix {
        Matrix::from_fn(h, w, |r, c| ((r * w + c) % 255) as f64 / 255.0)
    }

    #[test]
    fn crop_offset_and_shape() {
        let img = ramp(28, 28);
        let c = crop_25(&img).unwrap();
        assert_eq!(c.shape(), (25, 25));
        assert_eq!(c[(0, 0)], img[(1, 1)]);
        assert_eq!(c[(24, 24)], img[(25, 25)]);
        let flat = crop_25(&Matrix::filled(28, 28, 0.3)).unwrap();
        assert!(flat.as_slice().iter().all(|&v| v == 0.3));
        assert!(crop_25(&Matrix::zeros(25, 25)).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let img = ramp(25, 25);
        assert!(roto_translate(&img, 0.0, 0.0, 0.0).max_abs_diff(&img) < 1e-12);
        let zero = Matrix::zeros(25, 25);
        let mut rng = RngState::new(4);
        assert_eq!(augment(&zero, &AugmentConfig::default(), &mut rng), zero);
    }

    #[test]
    fn whole_pixel_shift() {
        let img = ramp(6, 6);
        let s = roto_translate(&img, 0.0, 1.0, 0.0);
        assert_eq!(s[(2, 0)], 0.0);
        assert!((s[(2, 3)] - img[(2, 2)]).abs() < 1e-12);
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let imgs: Vec<LabeledImage> = (0..3)
            .map(|k| LabeledImage {
                pixels: Matrix::from_fn(28, 28, |r, c| ((r + c + k) % 256) as f64 / 255.0),
                label: k as u8,
            })
            .collect();
        let (ib, lb) = write_idx(&imgs);
        let parsed = parse_idx_images(&ib).unwrap();
        assert_eq!((parsed.count, parsed.rows, parsed.cols), (3, 28, 28));
        let back = images_with_labels(&parsed, &parse_idx_labels(&lb).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&imgs) {
            assert!(a.pixels.max_abs_diff(&b.pixels) < 1e-12);
        }
        let mut bad = ib.clone();
        bad[3] = 0x01;
        assert!(parse_idx_images(&bad).is_err());
        assert!(parse_idx_images(&ib[..ib.len() - 1]).is_err());
        assert!(images_with_labels(&parsed, &[0, 1]).is_err());
    }

    #[test]
    fn view_reversal_under_half_turn() {
        let img = ramp(25, 25);
        let rot = Matrix::from_fn(25, 25, |r, c| img[(24 - r, 24 - c)]);
        let (a, b) = (views(&img), views(&rot));
        for (p, q) in [(0, 2), (1, 3), (2, 0), (3, 1)] {
            for k in 0..25 {
                for i in 0..25 {
                    assert_eq!(b[p][(k, i)], a[q][(k, 24 - i)]);
                }
            }
        }
    }

    #[test]
    fn column_major_position() {
        let img = ramp(28, 28);
        let v = column_major(&img);
        assert_eq!(v[(5 * 28 + 3, 0)], img[(3, 5)]);
    }

    #[test]
    fn parameter_counts() {
        let mut rng = RngState::new(0);
        let m = MnistModel::init(ModelKind::Coffee, 2, false, &mut rng).unwrap();
        assert_eq!(m.param_count(), 3385);
        let f = MnistModel::init(ModelKind::Coffee, 2, true, &mut rng).unwrap();
        assert_eq!(f.param_count(), 3585);
        let s = MnistModel::init(ModelKind::S6, 16, false, &mut rng).unwrap();
        assert_eq!(s.param_count(), 10085);
    }

    #[test]
    fn zero_image_gives_bias_logits() {
        let mut rng = RngState::new(2);
        let m = MnistModel::init(ModelKind::Coffee, 2, false, &mut rng).unwrap();
        let t = mnist_forward(&m, &Matrix::zeros(25, 25)).unwrap();
        assert!(t.features.iter().all(|&v| v == 0.0));
        let hidden: Vec<f64> = m.hidden.bias.as_slice().iter().map(|&b| gelu(b)).collect();
        assert_eq!(t.logits, m.output.apply(&hidden));
        let s = SmnistModel::init(None, 8, &mut rng).unwrap();
        assert_eq!(smnist_forward(&s, &Matrix::zeros(28, 28)).unwrap().logits.len(), 10);
    }
}
