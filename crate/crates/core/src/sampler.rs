//! Query-driven variant generation.
//!
//! A query sample is turned into responsibilities, the `S` largest are kept
//! (optionally sharpened by exponent `rho`), a component is drawn from that
//! restricted multinomial and a Gaussian sample is drawn from the component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageSet;
use crate::error::{Error, Result};
use crate::gmm::{convert_row, GmmParams};
use crate::real::Real;

const SIMPLEX_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of top responsibilities kept.
    pub s: usize,
    pub rho: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            s: 3,
            rho: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.s == 0 || self.s > k {
            return Err(Error::SOutOfRange { s: self.s, len: k });
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "rho {} must be > 0",
                self.rho
            )));
        }
        Ok(())
    }
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidSimplex("empty".into()));
    }
    if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidSimplex(format!("entry {bad}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidSimplex(format!("sums to {sum}")));
    }
    Ok(())
}

/// Keeps the `s` largest entries (ties go to the lower index), raises them to
/// `rho` and renormalizes; everything else becomes zero.
pub fn top_s_select(gamma: &[f64], s: usize, rho: f64) -> Result<Vec<f64>> {
    check_simplex(gamma)?;
    if s == 0 || s > gamma.len() {
        return Err(Error::SOutOfRange {
            s,
            len: gamma.len(),
        });
    }
    let mut order: Vec<usize> = (0..gamma.len()).collect();
    // stable: equal values keep ascending index order
    order.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]));
    let mut out = vec![0.0; gamma.len()];
    for &i in &order[..s] {
        out[i] = if rho == 1.0 {
            gamma[i]
        } else {
            gamma[i].powf(rho)
        };
    }
    let z: f64 = out.iter().sum();
    if z <= 0.0 {
        // all selected mass underflowed; fall back to the arg-max
        out[order[0]] = 1.0;
        return Ok(out);
    }
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// Draws an index with probability proportional to `dist`.
pub fn draw_component<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Result<usize> {
    check_simplex(dist)?;
    let total: f64 = dist.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// `mu_k + sigma_k * z`, clamped to the feature domain `[0, 1]`.
pub fn sample_component<T: Real, R: Rng + ?Sized>(
    params: &GmmParams<T>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    if k >= params.k() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: params.k(),
        });
    }
    Ok(params
        .centroid(k)
        .iter()
        .zip(params.log_stddev(k))
        .map(|(&mu, &s)| {
            let z: f64 = rng.sample(StandardNormal);
            (mu.f64() + s.f64().exp() * z).clamp(0.0, 1.0) as f32
        })
        .collect())
}

/// Indices of the `s` components with the highest responsibility for `x`,
/// best first. Ranked in log space so that responsibilities which underflow
/// to zero still order correctly.
pub fn top_components<T: Real>(params: &GmmParams<T>, x: &[T], s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > params.k() {
        return Err(Error::SOutOfRange { s, len: params.k() });
    }
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: x.len(),
        });
    }
    let mut terms = vec![T::zero(); params.k()];
    params.evaluator().log_terms(x, &mut terms);
    let mut idx: Vec<usize> = (0..params.k()).collect();
    idx.sort_by(|&a, &b| terms[b].f64().total_cmp(&terms[a].f64()).then(a.cmp(&b)));
    idx.truncate(s);
    Ok(idx)
}

/// Variants plus the component each one was drawn from.
#[derive(Debug, Clone)]
pub struct Variants {
    pub images: ImageSet,
    pub components: Vec<usize>,
}

/// `count_per_query` variants per query, grouped by query. Query `i` draws
/// from its own stream seeded with `cfg.seed ^ i`.
pub fn generate_variants_traced<T: Real>(
    params: &GmmParams<T>,
    queries: &ImageSet,
    cfg: &SamplerConfig,
    count_per_query: usize,
) -> Result<Variants> {
    if queries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if count_per_query == 0 {
        return Err(Error::InvalidConfig("count_per_query must be >= 1".into()));
    }
    if queries.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: queries.dim(),
        });
    }
    cfg.validate(params.k())?;
    let ev = params.evaluator();
    let mut gamma = vec![T::zero(); params.k()];
    let mut row = Vec::with_capacity(params.dim());
    let mut samples = Vec::with_capacity(queries.count() * count_per_query * params.dim());
    let mut components = Vec::with_capacity(queries.count() * count_per_query);
    for (i, q) in queries.rows().enumerate() {
        convert_row(q, &mut row);
        ev.responsibilities_into(&row, &mut gamma);
        let g64: Vec<f64> = gamma.iter().map(|g| g.f64()).collect();
        let dist = top_s_select(&g64, cfg.s, cfg.rho)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ i as u64);
        for _ in 0..count_per_query {
            let k = draw_component(&dist, &mut rng)?;
            samples.extend(sample_component(params, k, &mut rng)?);
            components.push(k);
        }
    }
    let mut images = ImageSet::new(samples, params.dim())?;
    if let Some((r, c)) = queries.shape() {
        images = images.with_shape(r, c)?;
    }
    Ok(Variants { images, components })
}

pub fn generate_variants<T: Real>(
    params: &GmmParams<T>,
    queries: &ImageSet,
    cfg: &SamplerConfig,
    count_per_query: usize,
) -> Result<ImageSet> {
    Ok(generate_variants_traced(params, queries, cfg, count_per_query)?.images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn top_three_renormalized() {
        let out = top_s_select(&[0.4, 0.3, 0.1, 0.1, 0.1], 3, 1.0).unwrap();
        let expect = [0.5, 0.375, 0.125, 0.0, 0.0];
        for (a, b) in out.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn full_s_is_identity() {
        let g = [0.2, 0.5, 0.3];
        let out = top_s_select(&g, 3, 1.0).unwrap();
        for (a, b) in out.iter().zip(g) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn top_one_is_one_hot() {
        assert_eq!(
            top_s_select(&[0.2, 0.5, 0.3], 1, 1.0).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        // tie goes to the lower index
        assert_eq!(top_s_select(&[0.5, 0.5], 1, 1.0).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn rho_sharpens() {
        let out = top_s_select(&[0.6, 0.4], 2, 2.0).unwrap();
        assert_abs_diff_eq!(out[0], 0.36 / 0.52, epsilon = 1e-12);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            top_s_select(&[0.5, 0.5], 3, 1.0),
            Err(Error::SOutOfRange { .. })
        ));
        assert!(matches!(
            top_s_select(&[0.5, 0.2], 1, 1.0),
            Err(Error::InvalidSimplex(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            draw_component(&[0.0, 0.0], &mut rng),
            Err(Error::InvalidSimplex(_))
        ));
    }

    #[test]
    fn one_hot_draw_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(draw_component(&[0.0, 0.0, 1.0], &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn fair_coin_frequencies_within_three_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| draw_component(&[0.5, 0.5], &mut rng).unwrap() == 1)
            .count();
        let freq = ones as f64 / n as f64;
        let band = 3.0 * (0.25f64 / n as f64).sqrt();
        assert!((freq - 0.5).abs() <= band, "freq {freq}");
    }

    fn point_mass(mu: Vec<f64>, sigma: f64) -> GmmParams<f64> {
        let d = mu.len();
        GmmParams::from_parts(1, d, vec![0.0], mu, vec![sigma.ln(); d]).unwrap()
    }

    #[test]
    fn floor_width_samples_hug_centroid() {
        let p = point_mass(vec![0.2, 0.7, 0.5], 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = sample_component(&p, 0, &mut rng).unwrap();
            assert_eq!(x.len(), 3);
            for (v, m) in x.iter().zip([0.2, 0.7, 0.5]) {
                assert!((*v as f64 - m).abs() < 0.1);
            }
        }
        assert!(matches!(
            sample_component(&p, 1, &mut rng),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn sample_mean_within_clt_band() {
        let sigma = 0.05;
        let mu = [0.3, 0.6];
        let p = point_mass(mu.to_vec(), sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let mut sum = [0.0f64; 2];
        for _ in 0..n {
            let x = sample_component(&p, 0, &mut rng).unwrap();
            sum[0] += x[0] as f64;
            sum[1] += x[1] as f64;
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            assert!((mean - mu[d]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn one_variant_per_query() {
        let p = point_mass(vec![0.5, 0.5], 0.3);
        let q = ImageSet::new(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 2).unwrap();
        let v = generate_variants(
            &p,
            &q,
            &SamplerConfig {
                s: 1,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(v.count(), 3);
        assert!(v.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
