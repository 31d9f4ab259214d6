//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! Boxes are stored in corner form `(x1, y1, x2, y2)`; areas are
//! `(x2 - x1) * (y2 - y1)` with no `+1` pixel convention.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Builds a box and checks `x2 >= x1`, `y2 >= y1` and finiteness.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// From the `[x, y, width, height]` wire form.
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self> {
        let [x, y, w, h] = xywh;
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 >= self.x1 && self.y2 >= self.y1
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 })
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clips to `[0, width] x [0, height]`. The result may be inverted if the
    /// box lies entirely outside the extent.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn lies_within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Snaps every coordinate to a multiple of `1 / 2^bits` pixel. On that grid
    /// the corner/xywh conversion is exact in `f64`.
    pub fn snapped(&self, bits: u32) -> Self {
        let q = f64::from(1u32 << bits);
        let s = |v: f64| (v * q).round() / q;
        BoundingBox { x1: s(self.x1), y1: s(self.y1), x2: s(self.x2), y2: s(self.y2) }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }
}

/// Intersection over union. Two zero-area boxes give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// [`iou`] without validation, for hot loops over already validated boxes.
pub fn iou_unchecked(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Source of standard normal draws for box jitter.
pub trait NormalSource {
    fn standard_normal(&mut self) -> f64;
}

impl<R: Rng> NormalSource for R {
    fn standard_normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }
}

/// Draws `(dx1, dx2, dy1, dy2)` with `dx ~ N(0, (W/s)^2)` and `dy ~ N(0, (H/s)^2)`.
pub fn sample_box_deltas<N: NormalSource + ?Sized>(
    b: &BoundingBox,
    jitter_scale: f64,
    noise: &mut N,
) -> Result<[f64; 4]> {
    b.validate()?;
    if !(jitter_scale > 0.0 && jitter_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("jitter_scale must be positive, got {jitter_scale}")));
    }
    let sx = b.width() / jitter_scale;
    let sy = b.height() / jitter_scale;
    Ok([
        sx * noise.standard_normal(),
        sx * noise.standard_normal(),
        sy * noise.standard_normal(),
        sy * noise.standard_normal(),
    ])
}

/// Maximum number of draws before falling back to the input box.
pub const JITTER_MAX_ATTEMPTS: usize = 9;

/// Gaussian box jitter with clipping to the image extent.
///
/// Inverted coordinates after clipping are swapped. If the result is still
/// narrower (or shorter) than `min(1 px, original extent)` the perturbation
/// is redrawn, up to 8 resamples, after which the original box is returned.
pub fn jitter_box<N: NormalSource + ?Sized>(
    b: &BoundingBox,
    jitter_scale: f64,
    image_size: (f64, f64),
    noise: &mut N,
) -> Result<BoundingBox> {
    let (img_w, img_h) = image_size;
    let min_w = b.width().min(1.0);
    let min_h = b.height().min(1.0);
    for _ in 0..JITTER_MAX_ATTEMPTS {
        let [dx1, dx2, dy1, dy2] = sample_box_deltas(b, jitter_scale, noise)?;
        let moved = BoundingBox { x1: b.x1 + dx1, y1: b.y1 + dy1, x2: b.x2 + dx2, y2: b.y2 + dy2 };
        let mut c = moved.clip(img_w, img_h);
        if c.x2 < c.x1 {
            std::mem::swap(&mut c.x1, &mut c.x2);
        }
        if c.y2 < c.y1 {
            std::mem::swap(&mut c.y1, &mut c.y2);
        }
        if c.width() >= min_w && c.height() >= min_h {
            return Ok(c);
        }
    }
    Ok(*b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    struct ZeroNoise;

    impl NormalSource for ZeroNoise {
        fn standard_normal(&mut self) -> f64 {
            0.0
        }
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts cells of a fine raster covered by each box.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox, cells_per_px: usize) -> f64 {
        let lo = a.x1.min(b.x1).min(a.y1).min(b.y1);
        let hi = a.x2.max(b.x2).max(a.y2).max(b.y2);
        let n = ((hi - lo) * cells_per_px as f64).ceil() as usize;
        let step = (hi - lo) / n as f64;
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let x = lo + (i as f64 + 0.5) * step;
                let y = lo + (j as f64 + 0.5) * step;
                let ina = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
                let inb = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
                inter += usize::from(ina && inb);
                union += usize::from(ina || inb);
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let b = bx(3.0, 4.0, 10.5, 12.0);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        let (a, c) = (bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 3.0, 3.0));
        let oracle = raster_iou(&a, &c, 200);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9);
        assert!((iou(&a, &c).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_inverted_boxes() {
        let bad = BoundingBox { x1: 2.0, y1: 0.0, x2: 1.0, y2: 1.0 };
        assert!(iou(&bad, &bx(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(BoundingBox::new(0.0, 2.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_pair_has_zero_iou() {
        let p = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn zero_noise_is_identity() {
        let b = bx(10.0, 20.0, 60.0, 90.0);
        assert_eq!(jitter_box(&b, 10.0, (200.0, 200.0), &mut ZeroNoise).unwrap(), b);
    }

    #[test]
    fn non_positive_scale_rejected() {
        let b = bx(0.0, 0.0, 5.0, 5.0);
        let mut rng = substream(1, "j");
        assert!(jitter_box(&b, 0.0, (10.0, 10.0), &mut rng).is_err());
        assert!(jitter_box(&b, -2.0, (10.0, 10.0), &mut rng).is_err());
    }

    #[test]
    fn zero_width_box_keeps_x() {
        let b = bx(40.0, 10.0, 40.0, 50.0);
        let mut rng = substream(3, "degenerate");
        for _ in 0..100 {
            let j = jitter_box(&b, 5.0, (100.0, 100.0), &mut rng).unwrap();
            assert_eq!((j.x1, j.x2), (40.0, 40.0));
        }
    }

    #[test]
    fn delta_moments_match_scale() {
        // W = 100, scale 10 => sigma_x = 10; H = 50 => sigma_y = 5.
        let b = bx(0.0, 0.0, 100.0, 50.0);
        let mut rng = substream(11, "moments");
        let n = 100_000;
        let mut sums = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let d = sample_box_deltas(&b, 10.0, &mut rng).unwrap();
            for k in 0..4 {
                sums[k] += d[k];
                sq[k] += d[k] * d[k];
            }
        }
        let sigma = [10.0, 10.0, 5.0, 5.0];
        for k in 0..4 {
            let mean = sums[k] / n as f64;
            let sd = (sq[k] / n as f64 - mean * mean).sqrt();
            assert!((sd / sigma[k] - 1.0).abs() < 0.02, "sd {sd} vs {}", sigma[k]);
            assert!(mean.abs() < 3.0 * sigma[k] / (n as f64).sqrt(), "mean {mean}");
        }
    }

    #[test]
    fn jitter_is_reproducible() {
        let b = bx(5.0, 5.0, 45.0, 35.0);
        let a: Vec<_> = {
            let mut rng = substream(5, "r");
            (0..50).map(|_| jitter_box(&b, 4.0, (64.0, 64.0), &mut rng).unwrap()).collect()
        };
        let c: Vec<_> = {
            let mut rng = substream(5, "r");
            (0..50).map(|_| jitter_box(&b, 4.0, (64.0, 64.0), &mut rng).unwrap()).collect()
        };
        assert_eq!(a, c);
    }

    #[test]
    fn jittered_boxes_are_valid_and_clipped() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let mut rng = substream(9, "clip");
        for _ in 0..2000 {
            let j = jitter_box(&b, 1.0, (12.0, 12.0), &mut rng).unwrap();
            assert!(j.is_valid());
            assert!(j.lies_within(12.0, 12.0));
            assert!(j == b || (j.width() >= 1.0 && j.height() >= 1.0));
        }
    }

    #[test]
    fn wire_form_round_trips_on_grid() {
        let b = bx(1.125, 2.5, 30.75, 17.0078125);
        assert_eq!(BoundingBox::from_xywh(b.to_xywh()).unwrap(), b);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.0..30.0f64, 0.0..30.0f64).prop_map(|(x, y, w, h)| BoundingBox {
            x1: x,
            y1: y,
            x2: x + w,
            y2: y + h,
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 {
                prop_assert!((a.x1 - b.x1).abs() < 1e-9 && (a.y2 - b.y2).abs() < 1e-9);
            }
        }
    }
}
