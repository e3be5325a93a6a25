//! Phantom generation, CT-slice preprocessing, and dataset splitting.
//!
//! Synthetic phantoms (Shepp-Logan and random ellipse clouds) are the
//! default training corpus. The preprocessing path ingests raw 16-bit CT
//! slices: shift to Hounsfield units, threshold to a body mask, find the
//! minimal enclosing circle of the mask, crop its bounding square, rescale,
//! and window intensities to `[0, 1]`.

use crate::geom::{ImageGrid, ScanGeometry};
use crate::rng::{self, Stream};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("image is not single-channel 16-bit grayscale")]
    NotGray16,
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("phantom spec invalid: {0}")]
    BadSpec(String),
}

/// Raw-value offset: stored 16-bit values are `HU + 32768`.
pub const HU_OFFSET: f64 = 32768.0;
/// Body-mask threshold in HU. The default keeps the source description's
/// printed value even though it lies far below air (-1000 HU); the
/// physically-motivated alternative -950 is accepted via configuration.
pub const DEFAULT_MASK_THRESHOLD_HU: f64 = -9050.0;
/// Display window mapped linearly onto `[0, 1]`, clamped.
pub const WINDOW_HU: (f64, f64) = (-1000.0, 2000.0);

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

/// Ellipse table of the modified Shepp-Logan head phantom (Toft's variant
/// with bumped contrast): additive value, semi-axes, center, rotation.
const SHEPP_LOGAN_ELLIPSES: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

fn ellipse_sum(table: &[(f64, f64, f64, f64, f64, f64)], x: f64, y: f64) -> f64 {
    let mut v = 0.0;
    for &(val, a, b, x0, y0, phi_deg) in table {
        let phi = phi_deg.to_radians();
        let (s, c) = phi.sin_cos();
        let dx = x - x0;
        let dy = y - y0;
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        if (xr / a) * (xr / a) + (yr / b) * (yr / b) <= 1.0 {
            v += val;
        }
    }
    v
}

/// The modified Shepp-Logan head phantom at resolution `n`, sampled at
/// pixel centers, values in `[0, 1]`, zero outside the inscribed circle.
pub fn shepp_logan(n: usize) -> ImageGrid<f64> {
    let geom = ScanGeometry::new(n, 1).expect("n >= 2");
    let c = geom.center();
    let half = n as f64 / 2.0;
    let data = Array2::from_shape_fn((n, n), |(i, j)| {
        let x = (j as f64 - c) / half;
        let y = (c - i as f64) / half;
        ellipse_sum(&SHEPP_LOGAN_ELLIPSES, x, y).clamp(0.0, 1.0)
    });
    ImageGrid::new(geom, data).expect("shape by construction")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

/// Recipe for a phantom corpus.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub image_size: usize,
    /// Inclusive range for the number of ellipses per phantom.
    pub n_ellipses: (usize, usize),
    /// Per-ellipse additive intensity range; sums are clamped to [0, 1].
    pub intensity: (f64, f64),
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.image_size < 2 {
            return Err(DataError::BadSpec(format!("image_size {} too small", self.image_size)));
        }
        if self.n_ellipses.0 == 0 || self.n_ellipses.0 > self.n_ellipses.1 {
            return Err(DataError::BadSpec(format!(
                "n_ellipses range {:?} invalid",
                self.n_ellipses
            )));
        }
        if !(0.0 <= self.intensity.0 && self.intensity.0 <= self.intensity.1 && self.intensity.1 <= 1.0)
        {
            return Err(DataError::BadSpec(format!(
                "intensity range {:?} outside [0, 1]",
                self.intensity
            )));
        }
        Ok(())
    }

    /// Phantom number `index` of this corpus; deterministic in (seed, index).
    pub fn sample(&self, index: u64) -> ImageGrid<f64> {
        match self.kind {
            PhantomKind::SheppLogan => shepp_logan(self.image_size),
            PhantomKind::RandomEllipses => {
                let mut stream = rng::substream(self.seed, index);
                random_ellipse_phantom(self, &mut stream)
            }
        }
    }
}

/// A cloud of random ellipses with additive intensities, clamped to `[0, 1]`
/// and masked to the inscribed circle.
pub fn random_ellipse_phantom(spec: &PhantomSpec, stream: &mut Stream) -> ImageGrid<f64> {
    let n = spec.image_size;
    let geom = ScanGeometry::new(n, 1).expect("n >= 2");
    let count = stream.random_range(spec.n_ellipses.0..=spec.n_ellipses.1);
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let value = spec.intensity.0 + (spec.intensity.1 - spec.intensity.0) * stream.random::<f64>();
        // Centers stay inside radius 0.6 so most of each ellipse survives
        // the circle mask.
        let cr = 0.6 * stream.random::<f64>().sqrt();
        let ca = stream.random::<f64>() * std::f64::consts::TAU;
        let a = 0.08 + 0.3 * stream.random::<f64>();
        let b = 0.08 + 0.3 * stream.random::<f64>();
        let phi = stream.random::<f64>() * 180.0;
        table.push((value, a, b, cr * ca.cos(), cr * ca.sin(), phi));
    }
    let c = geom.center();
    let half = n as f64 / 2.0;
    let data = Array2::from_shape_fn((n, n), |(i, j)| {
        let x = (j as f64 - c) / half;
        let y = (c - i as f64) / half;
        ellipse_sum(&table, x, y).clamp(0.0, 1.0)
    });
    ImageGrid::new(geom, data).expect("shape by construction")
}

// ---------------------------------------------------------------------------
// CT-slice preprocessing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct PreprocessOptions {
    /// Pixels with HU strictly above this belong to the body mask.
    pub mask_threshold_hu: f64,
    /// Output resolution; crops smaller than this are rejected.
    pub image_size: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { mask_threshold_hu: DEFAULT_MASK_THRESHOLD_HU, image_size: 256 }
    }
}

/// Why a slice was dropped. Rejections are expected outcomes, tallied by the
/// caller rather than raised as errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceRejection {
    EmptyMask,
    TooSmall { side: usize, required: usize },
}

#[derive(Debug)]
pub enum SliceOutcome {
    Accepted(ImageGrid<f64>),
    Rejected(SliceRejection),
}

/// Full ingestion path for one raw 16-bit slice. Values are shifted by
/// `-32768` into HU; the body mask is thresholded; its minimal enclosing
/// circle (over boundary pixels, plus half a pixel of footprint) defines a
/// bounding square that is cropped, bilinearly rescaled to the target
/// resolution, windowed to `[0, 1]`, and circle-masked.
pub fn preprocess_ct_slice(raw: &Array2<u16>, opts: &PreprocessOptions) -> SliceOutcome {
    let n = opts.image_size;
    let hu = raw.mapv(|v| v as f64 - HU_OFFSET);
    let mask = hu.mapv(|h| h > opts.mask_threshold_hu);
    if !mask.iter().any(|&m| m) {
        return SliceOutcome::Rejected(SliceRejection::EmptyMask);
    }

    let boundary = mask_boundary_points(&mask);
    let circle = minimal_enclosing_circle(&boundary);
    let side = (2.0 * circle.radius()).ceil().max(1.0) as usize;
    if side < n {
        return SliceOutcome::Rejected(SliceRejection::TooSmall { side, required: n });
    }

    // Crop the bounding square of the circle and rescale to n x n. Output
    // pixel j covers [j, j+1) * side / n of the square, so its center maps
    // to x0 + (j + 0.5) * scale in input pixel-center coordinates; when
    // side == n and the circle is already centered this is the identity.
    // Samples beyond the recorded slice read as air.
    let scale = side as f64 / n as f64;
    let x0 = circle.cx - side as f64 / 2.0;
    let y0 = circle.cy - side as f64 / 2.0;
    let geom = ScanGeometry::new(n, 1).expect("n >= 2");
    let (lo, hi) = WINDOW_HU;
    let data = Array2::from_shape_fn((n, n), |(i, j)| {
        let u = x0 + (j as f64 + 0.5) * scale;
        let v = y0 + (i as f64 + 0.5) * scale;
        let h = bilinear_hu(&hu, v, u);
        ((h - lo) / (hi - lo)).clamp(0.0, 1.0)
    });
    SliceOutcome::Accepted(ImageGrid::new(geom, data).expect("shape by construction"))
}

/// Bilinear sample of the HU field at (row, col); out-of-bounds reads air.
fn bilinear_hu(hu: &Array2<f64>, row: f64, col: f64) -> f64 {
    const AIR: f64 = -1000.0;
    let (nr, nc) = hu.dim();
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= nr as isize || j >= nc as isize {
            AIR
        } else {
            hu[[i as usize, j as usize]]
        }
    };
    let i0 = row.floor();
    let j0 = col.floor();
    let fi = row - i0;
    let fj = col - j0;
    let (i0, j0) = (i0 as isize, j0 as isize);
    at(i0, j0) * (1.0 - fi) * (1.0 - fj)
        + at(i0, j0 + 1) * (1.0 - fi) * fj
        + at(i0 + 1, j0) * fi * (1.0 - fj)
        + at(i0 + 1, j0 + 1) * fi * fj
}

/// Mask pixels with at least one unmasked 4-neighbor (or on the image
/// border), as (x, y) = (col, row) pairs. The minimal enclosing circle of a
/// set equals that of its boundary.
fn mask_boundary_points(mask: &Array2<bool>) -> Vec<(f64, f64)> {
    let (nr, nc) = mask.dim();
    let mut pts = Vec::new();
    for i in 0..nr {
        for j in 0..nc {
            if !mask[[i, j]] {
                continue;
            }
            let edge = i == 0
                || j == 0
                || i == nr - 1
                || j == nc - 1
                || !mask[[i - 1, j]]
                || !mask[[i + 1, j]]
                || !mask[[i, j - 1]]
                || !mask[[i, j + 1]];
            if edge {
                pts.push((j as f64, i as f64));
            }
        }
    }
    pts
}

#[derive(Clone, Copy, Debug)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    r2: f64,
}

impl Circle {
    pub fn radius(&self) -> f64 {
        self.r2.max(0.0).sqrt()
    }

    fn contains(&self, p: (f64, f64)) -> bool {
        let dx = p.0 - self.cx;
        let dy = p.1 - self.cy;
        dx * dx + dy * dy <= self.r2 + 1e-7 * (1.0 + self.r2)
    }

    fn from_two(a: (f64, f64), b: (f64, f64)) -> Circle {
        let cx = 0.5 * (a.0 + b.0);
        let cy = 0.5 * (a.1 + b.1);
        let dx = a.0 - cx;
        let dy = a.1 - cy;
        Circle { cx, cy, r2: dx * dx + dy * dy }
    }

    fn from_three(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<Circle> {
        let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
        if d.abs() < 1e-12 {
            return None;
        }
        let a2 = a.0 * a.0 + a.1 * a.1;
        let b2 = b.0 * b.0 + b.1 * b.1;
        let c2 = c.0 * c.0 + c.1 * c.1;
        let cx = (a2 * (b.1 - c.1) + b2 * (c.1 - a.1) + c2 * (a.1 - b.1)) / d;
        let cy = (a2 * (c.0 - b.0) + b2 * (a.0 - c.0) + c2 * (b.0 - a.0)) / d;
        let dx = a.0 - cx;
        let dy = a.1 - cy;
        Some(Circle { cx, cy, r2: dx * dx + dy * dy })
    }
}

/// Welzl's move-to-front algorithm, expected linear time after a seeded
/// shuffle.
pub fn minimal_enclosing_circle(points: &[(f64, f64)]) -> Circle {
    assert!(!points.is_empty(), "minimal enclosing circle of an empty set");
    let mut pts = points.to_vec();
    pts.shuffle(&mut rng::root(0x6d65_63)); // fixed seed: determinism over speed
    let mut c = Circle { cx: pts[0].0, cy: pts[0].1, r2: 0.0 };
    for i in 1..pts.len() {
        if c.contains(pts[i]) {
            continue;
        }
        c = Circle { cx: pts[i].0, cy: pts[i].1, r2: 0.0 };
        for j in 0..i {
            if c.contains(pts[j]) {
                continue;
            }
            c = Circle::from_two(pts[i], pts[j]);
            for k in 0..j {
                if c.contains(pts[k]) {
                    continue;
                }
                if let Some(c3) = Circle::from_three(pts[i], pts[j], pts[k]) {
                    c = c3;
                }
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Dataset splitting
// ---------------------------------------------------------------------------

/// Disjoint train/validation/test identifier lists.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Splits unique source identifiers (e.g. patient ids) into three groups by
/// the given fractions. Items sharing an id always land in the same group.
pub fn split_by_id(
    ids: &[String],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let (ft, fv, fe) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && fe >= 0.0 && (ft + fv + fe - 1.0).abs() < 1e-6) {
        return Err(DataError::BadFractions(fractions));
    }
    let mut unique: Vec<String> = ids.to_vec();
    unique.sort();
    unique.dedup();
    unique.shuffle(&mut rng::substream(seed, 0));
    let n = unique.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let mut it = unique.into_iter();
    Ok(DatasetSplit {
        train: it.by_ref().take(n_train).collect(),
        validation: it.by_ref().take(n_val).collect(),
        test: it.collect(),
    })
}

// ---------------------------------------------------------------------------
// 16-bit grayscale PNG I/O
// ---------------------------------------------------------------------------

/// Reads a 16-bit single-channel PNG as raw values.
pub fn read_gray16_png(path: impl AsRef<Path>) -> Result<Array2<u16>, DataError> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => other.to_luma16(),
    };
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        gray.get_pixel(j as u32, i as u32).0[0]
    }))
}

/// Writes values clamped from `[0, 1]` as a 16-bit grayscale PNG.
pub fn write_gray16_png(path: impl AsRef<Path>, img: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = img.dim();
    let buf = image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = img[[y as usize, x as usize]].clamp(0.0, 1.0);
        image::Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shepp_logan_values_and_mask() {
        let ph = shepp_logan(128);
        assert!(ph.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let geom = *ph.geometry();
        for i in 0..128 {
            for j in 0..128 {
                if !geom.inside_circle(i, j) {
                    assert_eq!(ph.data()[[i, j]], 0.0);
                }
            }
        }
        // Values present at several levels (skull bright, interior dim).
        assert!(ph.data().iter().any(|&v| v > 0.9));
        assert!(ph.data().iter().any(|&v| (0.1..0.3).contains(&v)));
    }

    /// Direct ellipse-membership evaluation at a known pixel.
    #[test]
    fn shepp_logan_center_pixel_matches_analytic_sum() {
        let n = 128;
        let ph = shepp_logan(n);
        // Pixel (64, 64) maps to (x, y) = (0.5/64, -0.5/64): inside the two
        // big ellipses only, so the value is 1.0 - 0.8.
        let x: f64 = 0.5 / 64.0;
        let y: f64 = -0.5 / 64.0;
        assert!((x / 0.69f64).powi(2) + (y / 0.92f64).powi(2) <= 1.0);
        assert!((x / 0.6624f64).powi(2) + ((y + 0.0184) / 0.874f64).powi(2) <= 1.0);
        assert!((ph.data()[[64, 64]] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ellipse_phantoms_are_reproducible_and_masked() {
        let spec = PhantomSpec {
            kind: PhantomKind::RandomEllipses,
            image_size: 64,
            n_ellipses: (3, 8),
            intensity: (0.2, 0.8),
            seed: 11,
        };
        spec.validate().unwrap();
        let a = spec.sample(0);
        let b = spec.sample(0);
        let c = spec.sample(1);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.data()[[0, 0]], 0.0);
    }

    #[test]
    fn ellipse_phantom_mean_intensity_is_sane() {
        let spec = PhantomSpec {
            kind: PhantomKind::RandomEllipses,
            image_size: 48,
            n_ellipses: (4, 8),
            intensity: (0.3, 0.7),
            seed: 5,
        };
        let mut means = Vec::new();
        for idx in 0..100 {
            let ph = spec.sample(idx);
            let geom = *ph.geometry();
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..48 {
                for j in geom.circle_span(i) {
                    total += ph.data()[[i, j]];
                    count += 1;
                }
            }
            means.push(total / count as f64);
        }
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        // Ellipses cover part of the disk with values in [0.3, 1.0]; the
        // in-circle mean must land strictly inside (0, max intensity sum).
        assert!(grand > 0.05 && grand < 1.0, "mean {grand}");
        assert!(means.iter().all(|&m| m >= 0.0 && m <= 1.0));
    }

    // -- minimal enclosing circle ------------------------------------------

    /// Brute-force oracle: try a dense grid of candidate centers.
    fn mec_oracle(points: &[(f64, f64)]) -> (f64, f64, f64) {
        let mut best = (0.0, 0.0, f64::INFINITY);
        for cx10 in 0..400 {
            for cy10 in 0..400 {
                let (cx, cy) = (cx10 as f64 * 0.1, cy10 as f64 * 0.1);
                let r = points
                    .iter()
                    .map(|&(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
                    .fold(0.0f64, f64::max);
                if r < best.2 {
                    best = (cx, cy, r);
                }
            }
        }
        best
    }

    #[test]
    fn welzl_matches_direct_search() {
        let mut stream = rng::root(3);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|_| (5.0 + 25.0 * stream.random::<f64>(), 8.0 + 20.0 * stream.random::<f64>()))
            .collect();
        let c = minimal_enclosing_circle(&pts);
        let (ox, oy, or_) = mec_oracle(&pts);
        assert!((c.cx - ox).abs() < 0.15 && (c.cy - oy).abs() < 0.15, "center");
        assert!((c.radius() - or_).abs() < 0.1, "radius {} vs {}", c.radius(), or_);
        assert!(pts.iter().all(|&p| {
            ((p.0 - c.cx).powi(2) + (p.1 - c.cy).powi(2)).sqrt() <= c.radius() + 1e-6
        }));
    }

    fn disk_slice(n: usize, cx: f64, cy: f64, r: f64, inside_hu: f64) -> Array2<u16> {
        Array2::from_shape_fn((n, n), |(i, j)| {
            let d2 = (j as f64 - cx).powi(2) + (i as f64 - cy).powi(2);
            let hu = if d2 <= r * r { inside_hu } else { -1000.0 };
            (hu + HU_OFFSET) as u16
        })
    }

    #[test]
    fn all_air_slice_is_rejected_under_air_threshold() {
        let raw = Array2::from_elem((64, 64), (HU_OFFSET - 1000.0) as u16);
        let opts = PreprocessOptions { mask_threshold_hu: -950.0, image_size: 32 };
        assert!(matches!(
            preprocess_ct_slice(&raw, &opts),
            SliceOutcome::Rejected(SliceRejection::EmptyMask)
        ));
    }

    #[test]
    fn water_disk_size_rule() {
        let raw = disk_slice(512, 255.5, 255.5, 200.0, 0.0);
        let accept = PreprocessOptions { mask_threshold_hu: -950.0, image_size: 256 };
        assert!(matches!(preprocess_ct_slice(&raw, &accept), SliceOutcome::Accepted(_)));
        let reject = PreprocessOptions { mask_threshold_hu: -950.0, image_size: 512 };
        assert!(matches!(
            preprocess_ct_slice(&raw, &reject),
            SliceOutcome::Rejected(SliceRejection::TooSmall { .. })
        ));
    }

    #[test]
    fn off_center_disk_is_recentered() {
        let raw = disk_slice(160, 100.0, 60.0, 40.0, 300.0);
        let opts = PreprocessOptions { mask_threshold_hu: -950.0, image_size: 64 };
        let out = match preprocess_ct_slice(&raw, &opts) {
            SliceOutcome::Accepted(img) => img,
            other => panic!("expected acceptance, got {other:?}"),
        };
        // The disk fills the image centrally after the crop: the brightest
        // region's centroid sits at the image center within a pixel.
        let n = 64;
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = out.data()[[i, j]];
                if v > 0.4 {
                    sx += j as f64;
                    sy += i as f64;
                    mass += 1.0;
                }
            }
        }
        let (cx, cy) = (sx / mass, sy / mass);
        assert!((cx - 31.5).abs() < 1.0, "cx {cx}");
        assert!((cy - 31.5).abs() < 1.0, "cy {cy}");
    }

    /// Feeding a processed slice back through the pipeline changes nothing:
    /// the mask equals the content disk, its enclosing circle is already the
    /// inscribed circle, and the resample is the identity.
    #[test]
    fn preprocessing_is_idempotent_under_air_threshold() {
        let raw = disk_slice(300, 150.0, 140.0, 90.0, 150.0);
        let opts = PreprocessOptions { mask_threshold_hu: -950.0, image_size: 64 };
        let first = match preprocess_ct_slice(&raw, &opts) {
            SliceOutcome::Accepted(img) => img,
            other => panic!("expected acceptance, got {other:?}"),
        };
        // Re-encode as a raw 16-bit slice.
        let (lo, hi) = WINDOW_HU;
        let raw2 = first.data().mapv(|v| (v * (hi - lo) + lo + HU_OFFSET).round() as u16);
        let second = match preprocess_ct_slice(&raw2, &opts) {
            SliceOutcome::Accepted(img) => img,
            other => panic!("expected acceptance, got {other:?}"),
        };
        let max_diff = first
            .data()
            .iter()
            .zip(second.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // Re-encoding rounds to whole HU, costing up to half an HU of the
        // 3000-HU window (1.67e-4); beyond that the pass must be exact.
        assert!(max_diff < 1.7e-4, "max diff {max_diff}");
    }

    #[test]
    fn split_by_id_is_disjoint_and_deterministic() {
        let ids: Vec<String> = (0..100).map(|i| format!("patient-{i:03}")).collect();
        let a = split_by_id(&ids, (0.7, 0.15, 0.15), 4).unwrap();
        let b = split_by_id(&ids, (0.7, 0.15, 0.15), 4).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len(), 70);
        assert_eq!(a.validation.len(), 15);
        assert_eq!(a.test.len(), 15);
        for id in &a.train {
            assert!(!a.validation.contains(id) && !a.test.contains(id));
        }
        for id in &a.validation {
            assert!(!a.test.contains(id));
        }
        let c = split_by_id(&ids, (0.7, 0.15, 0.15), 5).unwrap();
        assert_ne!(a.train, c.train);
        assert!(split_by_id(&ids, (0.5, 0.1, 0.1), 0).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = std::env::temp_dir().join("tomoforge-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.png");
        let img = Array2::from_shape_fn((9, 7), |(i, j)| (i * 7 + j) as f64 / 62.0);
        write_gray16_png(&path, &img).unwrap();
        let back = read_gray16_png(&path).unwrap();
        assert_eq!(back.dim(), (9, 7));
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - *b as f64 / 65535.0).abs() < 1.0 / 65535.0);
        }
        std::fs::remove_file(&path).ok();
    }
}
