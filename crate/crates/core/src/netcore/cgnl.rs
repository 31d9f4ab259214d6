//! Compact generalized non-local block.
//!
//! The input `X` (`C x H x W`) is mapped by three 1x1 convolutions to
//! `theta`, `phi`, `g`, each flattened to a single vector of length
//! `M = C * H * W`. With the dot-product pairwise function the response is
//! `Y = (theta phi^T) g`, an `M x M` matrix applied to `g`; by associativity
//! this equals `theta * (phi . g)`, which costs `O(M)`. The output is the
//! residual `Z = W_z Y + X`.

use serde::{Deserialize, Serialize};

use super::conv::gemm;
use crate::error::{Error, Result};

/// Dense `channels x height x width` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// The four `C x C` channel maps, row-major (`out x in`).
#[derive(Debug, Clone, PartialEq)]
pub struct CgnlWeights {
    pub channels: usize,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: Vec<f64>,
    pub z: Vec<f64>,
}

impl CgnlWeights {
    pub fn identity(channels: usize) -> Self {
        let mut eye = vec![0.0; channels * channels];
        for c in 0..channels {
            eye[c * channels + c] = 1.0;
        }
        CgnlWeights { channels, theta: eye.clone(), phi: eye.clone(), g: eye.clone(), z: eye }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels * self.channels;
        for (name, m) in [("theta", &self.theta), ("phi", &self.phi), ("g", &self.g), ("z", &self.z)] {
            if m.len() != n {
                return Err(Error::DimensionMismatch(format!("W_{name} has {} entries, expected {n}", m.len())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("W_{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// Optional constant multiplier on the pairwise similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgnlScale {
    /// `f(a, b) = a . b`, exactly as the dot-product form is written.
    #[default]
    None,
    /// `f(a, b) = a . b / M`.
    InversePositions,
}

impl CgnlScale {
    pub fn factor(self, m: usize) -> f64 {
        match self {
            CgnlScale::None => 1.0,
            CgnlScale::InversePositions => 1.0 / m as f64,
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct CgnlCache {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: Vec<f64>,
    pub y: Vec<f64>,
    /// `scale * (phi . g)`
    pub attn: f64,
}

fn channel_map(w: &[f64], x: &[f64], c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * p];
    gemm(c, c, p, w, false, x, false, 0.0, &mut out);
    out
}

fn check(x: &FeatureMap, w: &CgnlWeights) -> Result<()> {
    w.validate()?;
    if x.channels != w.channels {
        return Err(Error::DimensionMismatch(format!(
            "feature map has {} channels, block expects {}",
            x.channels, w.channels
        )));
    }
    if x.data.len() != x.channels * x.positions() {
        return Err(Error::DimensionMismatch("feature map buffer length".into()));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature map".into()));
    }
    Ok(())
}

pub(crate) fn forward_cached(
    x: &[f64],
    c: usize,
    p: usize,
    w: &CgnlWeights,
    scale: CgnlScale,
) -> (Vec<f64>, CgnlCache) {
    let theta = channel_map(&w.theta, x, c, p);
    let phi = channel_map(&w.phi, x, c, p);
    let g = channel_map(&w.g, x, c, p);
    let dot: f64 = phi.iter().zip(&g).map(|(a, b)| a * b).sum();
    let attn = scale.factor(c * p) * dot;
    let y: Vec<f64> = theta.iter().map(|t| t * attn).collect();
    let mut z = x.to_vec();
    gemm(c, c, p, &w.z, false, &y, false, 1.0, &mut z);
    (z, CgnlCache { x: x.to_vec(), theta, phi, g, y, attn })
}

/// Gradients of the four channel maps, in the [`CgnlWeights`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CgnlGrads {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub g: Vec<f64>,
    pub z: Vec<f64>,
}

impl CgnlGrads {
    pub fn zeros(c: usize) -> Self {
        CgnlGrads { theta: vec![0.0; c * c], phi: vec![0.0; c * c], g: vec![0.0; c * c], z: vec![0.0; c * c] }
    }
}

/// Accumulates weight gradients into `grads` and returns `dL/dX`.
pub(crate) fn backward(
    cache: &CgnlCache,
    w: &CgnlWeights,
    scale: CgnlScale,
    c: usize,
    p: usize,
    dz: &[f64],
    grads: &mut CgnlGrads,
) -> Vec<f64> {
    let s = scale.factor(c * p);
    // Z = Wz Y + X
    gemm(c, p, c, dz, false, &cache.y, true, 1.0, &mut grads.z);
    let mut dy = vec![0.0; c * p];
    gemm(c, c, p, &w.z, true, dz, false, 0.0, &mut dy);
    // Y = attn * theta, attn = s * (phi . g)
    let d_attn: f64 = dy.iter().zip(&cache.theta).map(|(a, b)| a * b).sum();
    let d_theta: Vec<f64> = dy.iter().map(|v| v * cache.attn).collect();
    let d_phi: Vec<f64> = cache.g.iter().map(|v| v * s * d_attn).collect();
    let d_g: Vec<f64> = cache.phi.iter().map(|v| v * s * d_attn).collect();

    let mut dx = dz.to_vec();
    for (d, wm, gm) in
        [(&d_theta, &w.theta, &mut grads.theta), (&d_phi, &w.phi, &mut grads.phi), (&d_g, &w.g, &mut grads.g)]
    {
        gemm(c, p, c, d, false, &cache.x, true, 1.0, gm);
        gemm(c, c, p, wm, true, d, false, 1.0, &mut dx);
    }
    dx
}

/// Non-local response through the associative `O(M)` path.
pub fn cgnl_forward(x: &FeatureMap, weights: &CgnlWeights) -> Result<FeatureMap> {
    cgnl_forward_scaled(x, weights, CgnlScale::None)
}

pub fn cgnl_forward_scaled(x: &FeatureMap, weights: &CgnlWeights, scale: CgnlScale) -> Result<FeatureMap> {
    check(x, weights)?;
    let (z, _) = forward_cached(&x.data, x.channels, x.positions(), weights, scale);
    FeatureMap::new(x.channels, x.height, x.width, z)
}

/// Reference evaluation that materializes the full `M x M` similarity
/// matrix `theta phi^T` and multiplies it into `g`. Quadratic in `M`.
pub fn cgnl_forward_reference(x: &FeatureMap, weights: &CgnlWeights, scale: CgnlScale) -> Result<FeatureMap> {
    check(x, weights)?;
    let (c, p) = (x.channels, x.positions());
    let m = c * p;
    let project = |w: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; m];
        for o in 0..c {
            for i in 0..c {
                for q in 0..p {
                    out[o * p + q] += w[o * c + i] * x.data[i * p + q];
                }
            }
        }
        out
    };
    let theta = project(&weights.theta);
    let phi = project(&weights.phi);
    let g = project(&weights.g);
    let s = scale.factor(m);
    let mut pairwise = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            pairwise[i * m + j] = s * theta[i] * phi[j];
        }
    }
    let mut y = vec![0.0; m];
    for i in 0..m {
        y[i] = (0..m).map(|j| pairwise[i * m + j] * g[j]).sum();
    }
    let mut z = x.data.clone();
    for o in 0..c {
        for i in 0..c {
            let wz = weights.z[o * c + i];
            for q in 0..p {
                z[o * p + q] += wz * y[i * p + q];
            }
        }
    }
    FeatureMap::new(c, x.height, x.width, z)
}

/// Gradient of `sum(upstream * Z)` with respect to the input and the four
/// maps, for gradient checking and external callers.
pub fn cgnl_backward(
    x: &FeatureMap,
    weights: &CgnlWeights,
    scale: CgnlScale,
    upstream: &[f64],
) -> Result<(Vec<f64>, CgnlGrads)> {
    check(x, weights)?;
    if upstream.len() != x.data.len() {
        return Err(Error::DimensionMismatch("upstream gradient length".into()));
    }
    let (c, p) = (x.channels, x.positions());
    let (_, cache) = forward_cached(&x.data, c, p, weights, scale);
    let mut grads = CgnlGrads::zeros(c);
    let dx = backward(&cache, weights, scale, c, p, upstream, &mut grads);
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_case(seed: u64, c: usize, h: usize, w: usize) -> (FeatureMap, CgnlWeights) {
        let mut rng = substream(seed, "cgnl");
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x = FeatureMap::new(c, h, w, v(c * h * w)).unwrap();
        let weights = CgnlWeights { channels: c, theta: v(c * c), phi: v(c * c), g: v(c * c), z: v(c * c) };
        (x, weights)
    }

    /// `max |a - b| / max |b|`
    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (x, mut w) = random_case(1, 3, 4, 4);
        w.z.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(cgnl_forward(&x, &w).unwrap(), x);
    }

    #[test]
    fn scalar_map_is_cubic() {
        let v = 1.7;
        let x = FeatureMap::new(1, 1, 1, vec![v]).unwrap();
        let z = cgnl_forward(&x, &CgnlWeights::identity(1)).unwrap();
        assert!((z.data[0] - (v * v * v + v)).abs() < 1e-12);
    }

    #[test]
    fn associative_matches_pairwise_on_2x3x3() {
        let (x, w) = random_case(7, 2, 3, 3);
        let fast = cgnl_forward(&x, &w).unwrap();
        let slow = cgnl_forward_reference(&x, &w, CgnlScale::None).unwrap();
        assert!(max_rel(&fast.data, &slow.data) < 1e-6);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let (x, _) = random_case(2, 3, 2, 2);
        assert!(cgnl_forward(&x, &CgnlWeights::identity(2)).is_err());
        let mut bad = CgnlWeights::identity(3);
        bad.phi.pop();
        assert!(cgnl_forward(&x, &bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn fast_path_equals_reference(seed in any::<u64>(), c in 1usize..5, h in 1usize..7, w in 1usize..7) {
            let (x, wt) = random_case(seed, c, h, w);
            for scale in [CgnlScale::None, CgnlScale::InversePositions] {
                let fast = cgnl_forward_scaled(&x, &wt, scale).unwrap();
                let slow = cgnl_forward_reference(&x, &wt, scale).unwrap();
                prop_assert!(max_rel(&fast.data, &slow.data) <= 1e-6);
            }
        }
    }
}
