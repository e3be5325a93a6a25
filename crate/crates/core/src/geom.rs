//! Scan geometry and the image / sinogram domain types.

use crate::real::Real;
use ndarray::Array2;
use std::ops::Range;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum GeometryError {
    #[error("image_size must be >= 2, got {0}")]
    ImageTooSmall(usize),
    #[error("n_angles must be >= 1, got {0}")]
    NoAngles(usize),
    #[error("n_detectors must be >= 1, got {0}")]
    NoDetectors(usize),
    #[error("pixel_spacing must be > 0 and finite, got {0}")]
    BadSpacing(f64),
    #[error("shape {got:?} does not match geometry {want:?}")]
    ShapeMismatch { got: (usize, usize), want: (usize, usize) },
    #[error("image_size {0} exceeds the dense system matrix guard ({1})")]
    SizeExceeded(usize, usize),
}

/// Parallel-beam scan description: `n_angles` projection angles uniformly
/// spaced in `[0, pi)` over a square `image_size x image_size` grid, each
/// angle sampled by `n_detectors` bins whose pitch equals `pixel_spacing`.
///
/// The default detector count equals `image_size`: reconstructions live
/// inside the inscribed circle, so their projections span exactly
/// `image_size` bins. Callers projecting unmasked squares should use
/// [`ScanGeometry::with_full_coverage`], which widens the detector row to
/// `ceil(image_size * sqrt(2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanGeometry {
    image_size: usize,
    n_angles: usize,
    n_detectors: usize,
    pixel_spacing: f64,
}

impl ScanGeometry {
    pub fn new(image_size: usize, n_angles: usize) -> Result<Self, GeometryError> {
        Self::with_detectors(image_size, n_angles, image_size)
    }

    pub fn with_detectors(
        image_size: usize,
        n_angles: usize,
        n_detectors: usize,
    ) -> Result<Self, GeometryError> {
        if image_size < 2 {
            return Err(GeometryError::ImageTooSmall(image_size));
        }
        if n_angles < 1 {
            return Err(GeometryError::NoAngles(n_angles));
        }
        if n_detectors < 1 {
            return Err(GeometryError::NoDetectors(n_detectors));
        }
        Ok(ScanGeometry { image_size, n_angles, n_detectors, pixel_spacing: 1.0 })
    }

    /// Same geometry with `n_detectors = ceil(image_size * sqrt(2))`, enough
    /// to cover the full square rather than just the inscribed circle.
    pub fn with_full_coverage(image_size: usize, n_angles: usize) -> Result<Self, GeometryError> {
        let n_det = ((image_size as f64) * std::f64::consts::SQRT_2).ceil() as usize;
        Self::with_detectors(image_size, n_angles, n_det)
    }

    pub fn pixel_spacing(mut self, spacing: f64) -> Result<Self, GeometryError> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(GeometryError::BadSpacing(spacing));
        }
        self.pixel_spacing = spacing;
        Ok(self)
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.image_size, self.image_size)
    }

    pub fn sino_shape(&self) -> (usize, usize) {
        (self.n_angles, self.n_detectors)
    }

    /// Projection angle of row `a`, in radians. Strictly increasing in `[0, pi)`.
    pub fn angle(&self, a: usize) -> f64 {
        a as f64 * std::f64::consts::PI / self.n_angles as f64
    }

    /// Center of the pixel grid in index units: pixel (i, j) sits at
    /// `((i - c), (j - c)) * pixel_spacing` in physical coordinates.
    pub fn center(&self) -> f64 {
        (self.image_size as f64 - 1.0) / 2.0
    }

    /// The inscribed-circle radius in index units.
    pub fn circle_radius(&self) -> f64 {
        self.image_size as f64 / 2.0
    }

    /// Column range of row `i` that lies inside the inscribed circle.
    pub fn circle_span(&self, i: usize) -> Range<usize> {
        let c = self.center();
        let r = self.circle_radius();
        let dy = i as f64 - c;
        let d2 = r * r - dy * dy;
        if d2 < 0.0 {
            return 0..0;
        }
        let dx = d2.sqrt();
        let lo = (c - dx).ceil().max(0.0) as usize;
        let hi = ((c + dx).floor() as usize + 1).min(self.image_size);
        if lo >= hi {
            0..0
        } else {
            lo..hi
        }
    }

    /// 1 inside the inscribed circle, 0 outside.
    pub fn circle_mask<T: Real>(&self) -> Array2<T> {
        let n = self.image_size;
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            for j in self.circle_span(i) {
                m[[i, j]] = T::one();
            }
        }
        m
    }

    pub fn inside_circle(&self, i: usize, j: usize) -> bool {
        let c = self.center();
        let r = self.circle_radius();
        let dy = i as f64 - c;
        let dx = j as f64 - c;
        dy * dy + dx * dx <= r * r
    }
}

/// Square image with every pixel strictly outside the inscribed circle
/// pinned to zero. Constructors mask their input, so the invariant holds by
/// construction.
#[derive(Clone, Debug)]
pub struct ImageGrid<T: Real> {
    data: Array2<T>,
    geom: ScanGeometry,
}

impl<T: Real> ImageGrid<T> {
    /// Wraps `data`, zeroing everything outside the inscribed circle.
    pub fn new(geom: ScanGeometry, mut data: Array2<T>) -> Result<Self, GeometryError> {
        if data.dim() != geom.image_shape() {
            return Err(GeometryError::ShapeMismatch { got: data.dim(), want: geom.image_shape() });
        }
        apply_circle_mask(&geom, &mut data);
        Ok(ImageGrid { data, geom })
    }

    pub fn zeros(geom: ScanGeometry) -> Self {
        ImageGrid { data: Array2::zeros(geom.image_shape()), geom }
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geom
    }

    pub fn into_data(self) -> Array2<T> {
        self.data
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        // Re-mask: f may move zeros off zero.
        let mut data = self.data.mapv(&f);
        apply_circle_mask(&self.geom, &mut data);
        ImageGrid { data, geom: self.geom }
    }
}

/// Zeroes all pixels outside the inscribed circle, in place.
pub fn apply_circle_mask<T: Real>(geom: &ScanGeometry, data: &mut Array2<T>) {
    for i in 0..geom.image_size() {
        let span = geom.circle_span(i);
        let mut row = data.row_mut(i);
        for j in 0..span.start {
            row[j] = T::zero();
        }
        for j in span.end..geom.image_size() {
            row[j] = T::zero();
        }
        if span.is_empty() {
            for j in 0..geom.image_size() {
                row[j] = T::zero();
            }
        }
    }
}

/// `n_angles x n_detectors` matrix of line integrals (or any sinogram-shaped
/// field such as posterior means and deviations).
#[derive(Clone, Debug)]
pub struct Sinogram<T: Real> {
    data: Array2<T>,
    geom: ScanGeometry,
}

impl<T: Real> Sinogram<T> {
    pub fn new(geom: ScanGeometry, data: Array2<T>) -> Result<Self, GeometryError> {
        if data.dim() != geom.sino_shape() {
            return Err(GeometryError::ShapeMismatch { got: data.dim(), want: geom.sino_shape() });
        }
        Ok(Sinogram { data, geom })
    }

    pub fn zeros(geom: ScanGeometry) -> Self {
        Sinogram { data: Array2::zeros(geom.sino_shape()), geom }
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<T> {
        &mut self.data
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geom
    }

    pub fn into_data(self) -> Array2<T> {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_degenerate_sizes() {
        assert!(ScanGeometry::new(1, 8).is_err());
        assert!(ScanGeometry::with_detectors(8, 0, 8).is_err());
        assert!(ScanGeometry::with_detectors(8, 4, 0).is_err());
        assert!(ScanGeometry::new(8, 4).unwrap().pixel_spacing(0.0).is_err());
    }

    #[test]
    fn angles_increase_within_half_turn() {
        let g = ScanGeometry::new(8, 12).unwrap();
        let mut prev = -1.0;
        for a in 0..12 {
            let th = g.angle(a);
            assert!(th > prev && th < std::f64::consts::PI);
            prev = th;
        }
    }

    #[test]
    fn full_coverage_detector_count() {
        let g = ScanGeometry::with_full_coverage(64, 8).unwrap();
        assert_eq!(g.n_detectors(), 91); // ceil(64 * sqrt(2))
    }

    #[test]
    fn circle_mask_matches_pointwise_rule() {
        let g = ScanGeometry::new(17, 4).unwrap();
        let m = g.circle_mask::<f64>();
        for i in 0..17 {
            for j in 0..17 {
                let want = if g.inside_circle(i, j) { 1.0 } else { 0.0 };
                assert_eq!(m[[i, j]], want, "pixel ({i},{j})");
            }
        }
    }

    #[test]
    fn image_grid_masks_on_construction() {
        let g = ScanGeometry::new(16, 4).unwrap();
        let img = ImageGrid::new(g, Array2::from_elem((16, 16), 1.0f64)).unwrap();
        assert_eq!(img.data()[[0, 0]], 0.0);
        assert_eq!(img.data()[[8, 8]], 1.0);
        let inside: usize = (0..16).map(|i| g.circle_span(i).len()).sum();
        let nonzero = img.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(inside, nonzero);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = ScanGeometry::new(16, 4).unwrap();
        assert!(ImageGrid::new(g, Array2::<f64>::zeros((8, 16))).is_err());
        assert!(Sinogram::new(g, Array2::<f64>::zeros((4, 15))).is_err());
    }
}
