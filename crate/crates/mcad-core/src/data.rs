//! Synthetic datasets: 2D Gaussian-mixture toys for decision-boundary
//! studies, and multi-class feature-map datasets with injected, mask-labeled
//! anomalies standing in for a frozen backbone at desk scale.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad dataset file: {0}")]
    Format(String),
    #[error("anomaly region {0} is empty or outside the {1}x{2} grid")]
    InvalidRegion(String, usize, usize),
}

// ---------------------------------------------------------------------------
// 2D toy mixtures
// ---------------------------------------------------------------------------

/// Gaussian mixture description for the 2D toy task.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub means: Vec<(f64, f64)>,
    /// Per-class isotropic standard deviation.
    pub stds: Vec<f64>,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl MixtureSpec {
    /// Two well-separated clusters on the x axis; the regime of the
    /// decision-boundary figures.
    pub fn two_blobs(seed: u64) -> Self {
        MixtureSpec {
            means: vec![(-2.0, 0.0), (2.0, 0.0)],
            stds: vec![0.4, 0.4],
            samples_per_class: 500,
            seed,
        }
    }

    /// Single cluster at the origin (identity-shortcut study).
    pub fn single_blob(seed: u64) -> Self {
        MixtureSpec {
            means: vec![(0.0, 0.0)],
            stds: vec![0.4],
            samples_per_class: 500,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }
}

/// Labeled 2D point cloud drawn from a [`MixtureSpec`].
#[derive(Debug, Clone)]
pub struct ToyDataset2D {
    pub points: Vec<(f64, f64)>,
    pub labels: Vec<usize>,
    pub spec: MixtureSpec,
}

/// Sample the mixture; exact per-class counts, deterministic per seed.
pub fn make_toy_2d(spec: &MixtureSpec) -> ToyDataset2D {
    assert!(spec.num_classes() >= 1, "mixture needs at least one class");
    assert_eq!(spec.means.len(), spec.stds.len());
    assert!(spec.stds.iter().all(|&s| s > 0.0), "stds must be positive");
    let root = RngStream::from_seed(spec.seed);
    let mut points = Vec::with_capacity(spec.num_classes() * spec.samples_per_class);
    let mut labels = Vec::with_capacity(points.capacity());
    for (c, (&(mx, my), &std)) in spec.means.iter().zip(&spec.stds).enumerate() {
        let mut s = root.split_at("toy2d-class", c as u64);
        for _ in 0..spec.samples_per_class {
            points.push((mx + std * s.normal(), my + std * s.normal()));
            labels.push(c);
        }
    }
    ToyDataset2D {
        points,
        labels,
        spec: spec.clone(),
    }
}

// ---------------------------------------------------------------------------
// Feature-map datasets
// ---------------------------------------------------------------------------

/// How injected anomalies displace the feature values in a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Constant bump of `shift_mult * noise_std` on every channel.
    Shift,
    /// Displace toward another class's mean field (channel-wise region
    /// average of the difference) — the inter-class confusion case.
    Confusion,
    /// Alternate between the two.
    Mixed,
}

/// Generator description for a synthetic multi-class feature dataset.
#[derive(Debug, Clone)]
pub struct FeatureSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Normal samples per class.
    pub n_normal: usize,
    /// Anomalous samples per class.
    pub n_anomalous: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Scalar anomaly magnitude in units of `noise_std`.
    pub shift_mult: f64,
    pub anomaly_kind: AnomalyKind,
    /// Inclusive range of anomaly rectangle side lengths.
    pub region_side: (usize, usize),
}

impl FeatureSpec {
    pub fn new(
        num_classes: usize,
        channels: usize,
        height: usize,
        width: usize,
        n_normal: usize,
        n_anomalous: usize,
        seed: u64,
    ) -> Self {
        FeatureSpec {
            num_classes,
            channels,
            height,
            width,
            n_normal,
            n_anomalous,
            seed,
            noise_std: 0.2,
            shift_mult: 5.0,
            anomaly_kind: AnomalyKind::Shift,
            region_side: (2, 5),
        }
    }

    pub fn with_anomaly_kind(mut self, kind: AnomalyKind) -> Self {
        self.anomaly_kind = kind;
        self
    }
}

/// One generated sample: features are `[C, H, W]`, the mask is `H*W`
/// row-major with 1 on injected cells.
#[derive(Debug, Clone)]
pub struct FeatureSample {
    pub features: Tensor<f32>,
    pub label: usize,
    pub mask: Vec<u8>,
    pub anomalous: bool,
}

/// Multi-class feature dataset plus the generator state that produced it.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    pub samples: Vec<FeatureSample>,
    /// Per-class smooth mean fields, `[C, H, W]` each.
    pub mean_fields: Vec<Tensor<f32>>,
    pub spec: FeatureSpec,
}

/// Rectangle in grid coordinates (column `x`, row `y`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}@({},{})", self.w, self.h, self.x0, self.y0)
    }
}

/// Region displacement applied by [`inject_anomaly`].
#[derive(Debug, Clone)]
pub enum Shift {
    Scalar(f64),
    PerChannel(Vec<f64>),
}

/// Add `shift` to every in-region value of a `[C, H, W]` feature map.
/// Cells outside the region are bit-identical to the input; the returned
/// mask is 1 exactly on the region.
pub fn inject_anomaly(
    features: &Tensor<f32>,
    region: Rect,
    shift: &Shift,
) -> Result<(Tensor<f32>, Vec<u8>), DataError> {
    let sh = features.shape();
    assert_eq!(sh.len(), 3, "inject_anomaly expects [C, H, W]");
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if region.w == 0
        || region.h == 0
        || region.x0 + region.w > w
        || region.y0 + region.h > h
    {
        return Err(DataError::InvalidRegion(region.to_string(), h, w));
    }
    if let Shift::PerChannel(v) = shift {
        assert_eq!(v.len(), c, "per-channel shift length must equal C");
    }
    let mut data = features.data().to_vec();
    let mut mask = vec![0u8; h * w];
    for ci in 0..c {
        for y in region.y0..region.y0 + region.h {
            for x in region.x0..region.x0 + region.w {
                let delta = match shift {
                    Shift::Scalar(s) => *s,
                    Shift::PerChannel(v) => v[ci],
                };
                data[ci * h * w + y * w + x] += delta as f32;
                if ci == 0 {
                    mask[y * w + x] = 1;
                }
            }
        }
    }
    let out = Tensor::from_vec(sh, data)
        .map_err(|e| DataError::Format(format!("injected values non-finite: {e}")))?;
    Ok((out, mask))
}

fn mean_field(c: usize, h: usize, w: usize, stream: &mut RngStream) -> Tensor<f32> {
    // Low-frequency sum of 4 random sinusoids per channel: smooth, spatially
    // structured per-class statistics.
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let mut waves = Vec::with_capacity(4);
        for _ in 0..4 {
            let amp = stream.normal() * (0.5f64).sqrt();
            let fx = stream.uniform_in(0.5, 2.0);
            let fy = stream.uniform_in(0.5, 2.0);
            let phase = stream.uniform_in(0.0, std::f64::consts::TAU);
            waves.push((amp, fx, fy, phase));
        }
        for y in 0..h {
            for x in 0..w {
                let (xn, yn) = (x as f64 / w as f64, y as f64 / h as f64);
                let v: f64 = waves
                    .iter()
                    .map(|&(a, fx, fy, p)| {
                        a * (std::f64::consts::TAU * (fx * xn + fy * yn) + p).sin()
                    })
                    .sum();
                data.push(v as f32);
            }
        }
    }
    Tensor::from_vec_unchecked(vec![c, h, w], data)
}

fn region_mean_delta(
    from: &Tensor<f32>,
    to: &Tensor<f32>,
    region: Rect,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut delta = vec![0.0f64; c];
    let n = (region.w * region.h) as f64;
    for ci in 0..c {
        let mut acc = 0.0f64;
        for y in region.y0..region.y0 + region.h {
            for x in region.x0..region.x0 + region.w {
                let idx = ci * h * w + y * w + x;
                acc += to.data()[idx] as f64 - from.data()[idx] as f64;
            }
        }
        delta[ci] = acc / n;
    }
    delta
}

/// Generate the dataset described by `spec`: per-class mean fields plus
/// i.i.d. Gaussian noise for normals, then [`inject_anomaly`] for the
/// anomalous share. Deterministic per seed; class-major sample order with
/// normals first.
pub fn make_feature_dataset(spec: &FeatureSpec) -> Result<FeatureDataset, DataError> {
    assert!(
        spec.num_classes >= 1
            && spec.channels >= 1
            && spec.height >= 1
            && spec.width >= 1,
        "all extents must be >= 1"
    );
    let root = RngStream::from_seed(spec.seed);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mean_fields: Vec<Tensor<f32>> = (0..spec.num_classes)
        .map(|k| {
            let mut s = root.split_at("mean-field", k as u64);
            mean_field(c, h, w, &mut s)
        })
        .collect();

    let mut samples = Vec::new();
    for k in 0..spec.num_classes {
        let field = &mean_fields[k];
        let draw_normal = |s: &mut RngStream| -> Tensor<f32> {
            let data = field
                .data()
                .iter()
                .map(|&m| m + (spec.noise_std * s.normal()) as f32)
                .collect();
            Tensor::from_vec_unchecked(vec![c, h, w], data)
        };
        let mut ns = root.split_at("normal", k as u64);
        for _ in 0..spec.n_normal {
            samples.push(FeatureSample {
                features: draw_normal(&mut ns),
                label: k,
                mask: vec![0u8; h * w],
                anomalous: false,
            });
        }
        let mut an = root.split_at("anomaly", k as u64);
        for i in 0..spec.n_anomalous {
            let base = draw_normal(&mut an);
            let (lo, hi) = spec.region_side;
            let rw = (an.below(hi - lo + 1) + lo).min(w);
            let rh = (an.below(hi - lo + 1) + lo).min(h);
            let region = Rect {
                x0: an.below(w - rw + 1),
                y0: an.below(h - rh + 1),
                w: rw,
                h: rh,
            };
            let confusion = match spec.anomaly_kind {
                AnomalyKind::Shift => false,
                AnomalyKind::Confusion => true,
                AnomalyKind::Mixed => i % 2 == 1,
            };
            let shift = if confusion && spec.num_classes > 1 {
                let mut other = an.below(spec.num_classes - 1);
                if other >= k {
                    other += 1;
                }
                Shift::PerChannel(region_mean_delta(
                    field,
                    &mean_fields[other],
                    region,
                    c,
                    h,
                    w,
                ))
            } else {
                Shift::Scalar(spec.shift_mult * spec.noise_std)
            };
            let (features, mask) = inject_anomaly(&base, region, &shift)?;
            samples.push(FeatureSample {
                features,
                label: k,
                mask,
                anomalous: true,
            });
        }
    }
    Ok(FeatureDataset {
        samples,
        mean_fields,
        spec: spec.clone(),
    })
}

// ---------------------------------------------------------------------------
// Boundary grids
// ---------------------------------------------------------------------------

/// Row-major score grid over a rectangle; row `r` spans y, column `c` spans
/// x, both at cell centers with y increasing by row.
#[derive(Debug, Clone)]
pub struct Grid {
    pub values: Vec<f64>,
    pub resolution: usize,
    pub bounds: (f64, f64, f64, f64),
}

/// Evaluate `score_fn` at the cell centers of a `resolution x resolution`
/// grid over `bounds = (xmin, xmax, ymin, ymax)`.
pub fn boundary_grid(
    mut score_fn: impl FnMut(f64, f64) -> f64,
    bounds: (f64, f64, f64, f64),
    resolution: usize,
) -> Grid {
    assert!(resolution >= 2, "resolution must be >= 2");
    let (xmin, xmax, ymin, ymax) = bounds;
    let dx = (xmax - xmin) / resolution as f64;
    let dy = (ymax - ymin) / resolution as f64;
    let mut values = Vec::with_capacity(resolution * resolution);
    for r in 0..resolution {
        let y = ymin + (r as f64 + 0.5) * dy;
        for c in 0..resolution {
            let x = xmin + (c as f64 + 0.5) * dx;
            values.push(score_fn(x, y));
        }
    }
    Grid {
        values,
        resolution,
        bounds,
    }
}

// ---------------------------------------------------------------------------
// Serialization: flat binary container + CSV for 2D toys
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"MCADDATA";
const VERSION: u32 = 1;

/// Named f32 arrays in a flat little-endian container:
/// `magic, u32 version, u32 count, then per array a name, a shape, and the
/// row-major f32 payload`.
pub struct ArrayFile {
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl ArrayFile {
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.arrays {
            let nb = name.as_bytes();
            f.write_all(&(nb.len() as u16).to_le_bytes())?;
            f.write_all(nb)?;
            f.write_all(&(shape.len() as u8).to_le_bytes())?;
            for &d in shape {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let mut f = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| DataError::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        let version = read_u32(&mut f)?;
        if version != VERSION {
            return Err(DataError::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = read_u32(&mut f)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u16(&mut f)? as usize;
            let mut nb = vec![0u8; name_len];
            f.read_exact(&mut nb)
                .map_err(|_| DataError::Format("truncated name".into()))?;
            let name = String::from_utf8(nb)
                .map_err(|_| DataError::Format("non-utf8 array name".into()))?;
            let ndim = read_u8(&mut f)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut f)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                f.read_exact(&mut buf)
                    .map_err(|_| DataError::Format(format!("truncated payload of {name}")))?;
                data.push(f32::from_le_bytes(buf));
            }
            arrays.push((name, shape, data));
        }
        Ok(ArrayFile { arrays })
    }

    fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>), DataError> {
        let idx = self
            .arrays
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| DataError::Format(format!("missing array {name}")))?;
        let (_, shape, data) = self.arrays.remove(idx);
        Ok((shape, data))
    }
}

fn read_u32(f: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)
        .map_err(|_| DataError::Format("truncated field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(f: &mut impl Read) -> Result<u16, DataError> {
    let mut b = [0u8; 2];
    f.read_exact(&mut b)
        .map_err(|_| DataError::Format("truncated field".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u8(f: &mut impl Read) -> Result<u8, DataError> {
    let mut b = [0u8; 1];
    f.read_exact(&mut b)
        .map_err(|_| DataError::Format("truncated field".into()))?;
    Ok(b[0])
}

impl ToyDataset2D {
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "x,y,label")?;
        for ((x, y), l) in self.points.iter().zip(&self.labels) {
            writeln!(f, "{x},{y},{l}")?;
        }
        Ok(())
    }

    pub fn write_binary(&self, path: &Path) -> Result<(), DataError> {
        let n = self.points.len();
        let points: Vec<f32> = self
            .points
            .iter()
            .flat_map(|&(x, y)| [x as f32, y as f32])
            .collect();
        let labels: Vec<f32> = self.labels.iter().map(|&l| l as f32).collect();
        ArrayFile {
            arrays: vec![
                ("points".into(), vec![n, 2], points),
                ("labels".into(), vec![n], labels),
            ],
        }
        .write(path)
    }
}

impl FeatureDataset {
    pub fn write_binary(&self, path: &Path) -> Result<(), DataError> {
        let s = &self.spec;
        let n = self.samples.len();
        let (c, h, w) = (s.channels, s.height, s.width);
        let mut features = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n * h * w);
        let mut image_labels = Vec::with_capacity(n);
        for smp in &self.samples {
            features.extend_from_slice(smp.features.data());
            labels.push(smp.label as f32);
            masks.extend(smp.mask.iter().map(|&m| m as f32));
            image_labels.push(if smp.anomalous { 1.0 } else { 0.0 });
        }
        let mut fields = Vec::with_capacity(s.num_classes * c * h * w);
        for fm in &self.mean_fields {
            fields.extend_from_slice(fm.data());
        }
        ArrayFile {
            arrays: vec![
                ("features".into(), vec![n, c, h, w], features),
                ("labels".into(), vec![n], labels),
                ("masks".into(), vec![n, h, w], masks),
                ("image_labels".into(), vec![n], image_labels),
                ("mean_fields".into(), vec![s.num_classes, c, h, w], fields),
            ],
        }
        .write(path)
    }

    /// Inverse of [`FeatureDataset::write_binary`]; `spec` must describe the
    /// file (it is not stored).
    pub fn read_binary(path: &Path, spec: &FeatureSpec) -> Result<Self, DataError> {
        let mut af = ArrayFile::read(path)?;
        let (fsh, fdata) = af.take("features")?;
        let (_, labels) = af.take("labels")?;
        let (_, masks) = af.take("masks")?;
        let (_, image_labels) = af.take("image_labels")?;
        let (msh, mdata) = af.take("mean_fields")?;
        let (c, h, w) = (spec.channels, spec.height, spec.width);
        if fsh.len() != 4 || fsh[1] != c || fsh[2] != h || fsh[3] != w {
            return Err(DataError::Format(format!(
                "features shape {fsh:?} does not match spec {c}x{h}x{w}"
            )));
        }
        let n = fsh[0];
        let per = c * h * w;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            samples.push(FeatureSample {
                features: Tensor::from_vec_unchecked(
                    vec![c, h, w],
                    fdata[i * per..(i + 1) * per].to_vec(),
                ),
                label: labels[i] as usize,
                mask: masks[i * h * w..(i + 1) * h * w]
                    .iter()
                    .map(|&m| m as u8)
                    .collect(),
                anomalous: image_labels[i] != 0.0,
            });
        }
        let mean_fields = (0..msh[0])
            .map(|k| {
                Tensor::from_vec_unchecked(vec![c, h, w], mdata[k * per..(k + 1) * per].to_vec())
            })
            .collect();
        Ok(FeatureDataset {
            samples,
            mean_fields,
            spec: spec.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_counts_and_determinism() {
        let spec = MixtureSpec::two_blobs(42);
        let a = make_toy_2d(&spec);
        let b = make_toy_2d(&spec);
        assert_eq!(a.points.len(), 1000);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 500);
        let bits = |d: &ToyDataset2D| -> Vec<u64> {
            d.points
                .iter()
                .flat_map(|&(x, y)| [x.to_bits(), y.to_bits()])
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn toy_empirical_means_near_spec() {
        let spec = MixtureSpec::two_blobs(7);
        let d = make_toy_2d(&spec);
        for (c, &(mx, my)) in spec.means.iter().enumerate() {
            let pts: Vec<&(f64, f64)> = d
                .points
                .iter()
                .zip(&d.labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            let n = pts.len() as f64;
            let ex = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let ey = pts.iter().map(|p| p.1).sum::<f64>() / n;
            // 0.1 tolerance is > 5 standard errors at std 0.4, n = 500.
            assert!((ex - mx).abs() < 0.1, "class {c} mean x {ex}");
            assert!((ey - my).abs() < 0.1, "class {c} mean y {ey}");
        }
    }

    #[test]
    fn single_class_labels_are_zero() {
        let d = make_toy_2d(&MixtureSpec::single_blob(3));
        assert!(d.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn feature_dataset_counts_and_masks() {
        let spec = FeatureSpec::new(3, 8, 14, 14, 64, 16, 5);
        let d = make_feature_dataset(&spec).unwrap();
        assert_eq!(d.samples.len(), 240);
        let anomalous = d.samples.iter().filter(|s| s.anomalous).count();
        assert_eq!(anomalous, 48);
        for s in &d.samples {
            let nonzero = s.mask.iter().any(|&m| m != 0);
            assert_eq!(nonzero, s.anomalous, "mask/label consistency");
        }
    }

    #[test]
    fn no_anomalies_means_all_masks_zero() {
        let spec = FeatureSpec::new(2, 4, 8, 8, 5, 0, 1);
        let d = make_feature_dataset(&spec).unwrap();
        assert!(d.samples.iter().all(|s| s.mask.iter().all(|&m| m == 0)));
    }

    #[test]
    fn feature_dataset_is_deterministic() {
        let spec = FeatureSpec::new(2, 4, 8, 8, 6, 3, 11).with_anomaly_kind(AnomalyKind::Mixed);
        let a = make_feature_dataset(&spec).unwrap();
        let b = make_feature_dataset(&spec).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!(x.features.bit_eq(&y.features));
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn inject_preserves_outside_bits_exactly() {
        let mut s = RngStream::from_seed(2).split("f");
        let f = Tensor::<f32>::randn(&[3, 6, 6], 1.0, &mut s);
        let region = Rect {
            x0: 1,
            y0: 2,
            w: 3,
            h: 2,
        };
        let (out, mask) = inject_anomaly(&f, region, &Shift::Scalar(5.0)).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 6);
        for y in 0..6 {
            for x in 0..6 {
                let inside = (1..4).contains(&x) && (2..4).contains(&y);
                for c in 0..3 {
                    let i = c * 36 + y * 6 + x;
                    if inside {
                        assert_eq!(out.data()[i], f.data()[i] + 5.0);
                    } else {
                        assert_eq!(out.data()[i].to_bits(), f.data()[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn inject_zero_shift_keeps_values_marks_mask() {
        let f = Tensor::<f32>::zeros(&[1, 4, 4]);
        let region = Rect {
            x0: 0,
            y0: 0,
            w: 4,
            h: 4,
        };
        let (out, mask) = inject_anomaly(&f, region, &Shift::Scalar(0.0)).unwrap();
        assert!(out.bit_eq(&f));
        assert!(mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn inject_rejects_bad_regions() {
        let f = Tensor::<f32>::zeros(&[1, 4, 4]);
        let empty = Rect {
            x0: 0,
            y0: 0,
            w: 0,
            h: 2,
        };
        assert!(inject_anomaly(&f, empty, &Shift::Scalar(1.0)).is_err());
        let outside = Rect {
            x0: 3,
            y0: 0,
            w: 2,
            h: 1,
        };
        assert!(inject_anomaly(&f, outside, &Shift::Scalar(1.0)).is_err());
    }

    #[test]
    fn boundary_grid_constant_and_symmetry() {
        let g = boundary_grid(|_, _| 2.5, (-1.0, 1.0, -1.0, 1.0), 8);
        assert!(g.values.iter().all(|&v| v == 2.5));

        let g = boundary_grid(|x, y| (x * x + y * y).sqrt(), (-2.0, 2.0, -2.0, 2.0), 20);
        let n = g.values.len();
        for i in 0..n {
            // 180-degree rotation maps cell i to cell n-1-i on a symmetric grid.
            assert!((g.values[i] - g.values[n - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn array_file_round_trips() {
        let dir = std::env::temp_dir().join("mcad-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.bin");
        let d = make_toy_2d(&MixtureSpec::two_blobs(9));
        d.write_binary(&path).unwrap();
        let mut af = ArrayFile::read(&path).unwrap();
        let (shape, pts) = af.take("points").unwrap();
        assert_eq!(shape, vec![1000, 2]);
        assert_eq!(pts[0], d.points[0].0 as f32);
    }

    #[test]
    fn feature_dataset_binary_round_trips() {
        let dir = std::env::temp_dir().join("mcad-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("features.bin");
        let spec = FeatureSpec::new(2, 3, 5, 5, 4, 2, 8);
        let d = make_feature_dataset(&spec).unwrap();
        d.write_binary(&path).unwrap();
        let r = FeatureDataset::read_binary(&path, &spec).unwrap();
        assert_eq!(r.samples.len(), d.samples.len());
        for (a, b) in d.samples.iter().zip(&r.samples) {
            assert!(a.features.bit_eq(&b.features));
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.label, b.label);
            assert_eq!(a.anomalous, b.anomalous);
        }
        assert!(d.mean_fields[0].bit_eq(&r.mean_fields[0]));
    }
}
