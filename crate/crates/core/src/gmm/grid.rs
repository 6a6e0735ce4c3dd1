use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

use super::GmmParams;

/// How the grid kernel is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelNorm {
    /// Each source's weights sum to one, so total mass is preserved.
    #[default]
    Mass,
    /// Unscaled kernel with value one at the source: the source keeps its
    /// full responsibility and neighbours receive a share of it on top.
    Peak,
}

/// Spreads responsibility mass over the component grid.
///
/// Each source component `j` hands its mass to every component `i` in
/// proportion to `exp(-|g_i - g_j|^2 / (2 r^2))`. With [`KernelNorm::Mass`]
/// the weights are normalized over `i`, so the output keeps the total mass of
/// the input. The kernel factorizes over the two grid axes, which makes one
/// application `O(K * side)`.
#[derive(Debug, Clone)]
pub struct GridSmoother<T: Real> {
    side: usize,
    radius: f64,
    /// `axis[j * side + i]`: share of axis coordinate `j` moved to `i`.
    axis: Vec<T>,
    identity: bool,
}

impl<T: Real> GridSmoother<T> {
    pub fn new(side: usize, radius: f64) -> Self {
        Self::with_norm(side, radius, KernelNorm::Mass)
    }

    pub fn with_norm(side: usize, radius: f64, norm: KernelNorm) -> Self {
        let mut axis = vec![T::zero(); side * side];
        let mut identity = true;
        if radius > 0.0 {
            let denom = 2.0 * radius * radius;
            for j in 0..side {
                let row: Vec<f64> = (0..side)
                    .map(|i| {
                        let d = i as f64 - j as f64;
                        (-(d * d) / denom).exp()
                    })
                    .collect();
                let z: f64 = match norm {
                    KernelNorm::Mass => row.iter().sum(),
                    KernelNorm::Peak => 1.0,
                };
                for (i, w) in row.into_iter().enumerate() {
                    let w = T::of(w / z);
                    let w = if w < T::min_positive_value() {
                        T::zero()
                    } else {
                        w
                    };
                    if i != j && w > T::zero() {
                        identity = false;
                    }
                    axis[j * side + i] = w;
                }
            }
        }
        if identity {
            for j in 0..side {
                axis.iter_mut()
                    .skip(j * side)
                    .take(side)
                    .for_each(|w| *w = T::zero());
                axis[j * side + j] = T::one();
            }
        }
        Self {
            side,
            radius,
            axis,
            identity,
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// `out = smooth(gamma)`; `scratch` must hold `K` values.
    pub fn apply(&self, gamma: &[T], out: &mut [T], scratch: &mut [T]) {
        if self.identity {
            out.copy_from_slice(gamma);
            return;
        }
        let s = self.side;
        // spread along columns: tmp[r][c'] = sum_c gamma[r][c] * axis[c][c']
        scratch.iter_mut().for_each(|v| *v = T::zero());
        for r in 0..s {
            let src = &gamma[r * s..(r + 1) * s];
            let dst = &mut scratch[r * s..(r + 1) * s];
            for (c, &g) in src.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                for (d, &w) in dst.iter_mut().zip(&self.axis[c * s..(c + 1) * s]) {
                    *d = *d + g * w;
                }
            }
        }
        // spread along rows: out[r'][c] = sum_r tmp[r][c] * axis[r][r']
        out.iter_mut().for_each(|v| *v = T::zero());
        for r in 0..s {
            let src = &scratch[r * s..(r + 1) * s];
            for r2 in 0..s {
                let w = self.axis[r * s + r2];
                if w == T::zero() {
                    continue;
                }
                let dst = &mut out[r2 * s..(r2 + 1) * s];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + w * v;
                }
            }
        }
        let tiny = T::min_positive_value();
        for v in out.iter_mut() {
            if *v < tiny {
                *v = T::zero();
            }
        }
    }
}

/// Responsibilities of `x` smoothed over the grid with radius `r`.
pub fn smoothed_responsibilities<T: Real>(
    params: &GmmParams<T>,
    x: &[T],
    r: f64,
) -> Result<Vec<T>> {
    if r.is_nan() || r < 0.0 {
        return Err(Error::InvalidConfig(format!("radius {r} must be >= 0")));
    }
    params.check_smoothable(r)?;
    let gamma = params.responsibilities(x)?;
    let smoother = GridSmoother::new(params.grid_side(), r);
    let mut out = vec![T::zero(); gamma.len()];
    let mut scratch = vec![T::zero(); gamma.len()];
    smoother.apply(&gamma, &mut out, &mut scratch);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Direct O(K^2) evaluation of the mass-preserving grid kernel.
    fn brute_force(side: usize, r: f64, gamma: &[f64]) -> Vec<f64> {
        let k = side * side;
        let coord = |i: usize| ((i / side) as f64, (i % side) as f64);
        let mut out = vec![0.0; k];
        for j in 0..k {
            let (jr, jc) = coord(j);
            let w: Vec<f64> = (0..k)
                .map(|i| {
                    let (ir, ic) = coord(i);
                    (-((ir - jr).powi(2) + (ic - jc).powi(2)) / (2.0 * r * r)).exp()
                })
                .collect();
            let z: f64 = w.iter().sum();
            for i in 0..k {
                out[i] += gamma[j] * w[i] / z;
            }
        }
        out
    }

    fn apply(side: usize, r: f64, gamma: &[f64]) -> Vec<f64> {
        let s = GridSmoother::<f64>::new(side, r);
        let mut out = vec![0.0; gamma.len()];
        let mut scratch = vec![0.0; gamma.len()];
        s.apply(gamma, &mut out, &mut scratch);
        out
    }

    #[test]
    fn zero_radius_is_identity() {
        let g = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(apply(2, 0.0, &g), g.to_vec());
        assert!(GridSmoother::<f64>::new(2, 0.0).is_identity());
    }

    #[test]
    fn huge_radius_spreads_uniformly() {
        let out = apply(2, 1e6, &[1.0, 0.0, 0.0, 0.0]);
        for v in out {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn center_one_hot_neighbor_ratios() {
        let mut g = vec![0.0; 9];
        g[4] = 1.0;
        let out = apply(3, 1.0, &g);
        let edge = (-0.5f64).exp();
        let diag = (-1.0f64).exp();
        for i in [1, 3, 5, 7] {
            assert_abs_diff_eq!(out[i] / out[4], edge, epsilon = 1e-12);
        }
        for i in [0, 2, 6, 8] {
            assert_abs_diff_eq!(out[i] / out[4], diag, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(out.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn separable_matches_brute_force() {
        let side = 4;
        let g: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) % 11) as f64).collect();
        let z: f64 = g.iter().sum();
        let g: Vec<f64> = g.iter().map(|v| v / z).collect();
        for r in [0.3, 1.0, 2.5, 9.0] {
            let fast = apply(side, r, &g);
            let slow = brute_force(side, r, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn peak_kernel_keeps_source_value() {
        let s = GridSmoother::<f64>::with_norm(3, 1.0, KernelNorm::Peak);
        let mut g = vec![0.0; 9];
        g[4] = 0.5;
        let mut out = vec![0.0; 9];
        let mut scratch = vec![0.0; 9];
        s.apply(&g, &mut out, &mut scratch);
        assert_abs_diff_eq!(out[4], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.5 * (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(out[0], 0.5 * (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn tiny_radius_underflows_to_identity() {
        let s = GridSmoother::<f32>::new(20, 0.05);
        assert!(s.is_identity());
    }

    #[test]
    fn smoothed_rejects_negative_radius() {
        let p = GmmParams::<f64>::from_parts(1, 1, vec![0.0], vec![0.0], vec![0.0]).unwrap();
        assert!(smoothed_responsibilities(&p, &[0.0], -1.0).is_err());
        assert_eq!(
            smoothed_responsibilities(&p, &[0.0], 0.0).unwrap(),
            vec![1.0]
        );
    }
}
