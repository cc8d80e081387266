use super::latent::LayeredLatent;
use crate::error::{Error, Result};

/// Per-layer truncation factors for an 18-layer generator, coarse to fine.
/// Middle layers are truncated hardest; the finest layers barely at all.
pub const ADAPTIVE_TRUNCATION: [f64; 18] = [
    0.35, 0.25, 0.25, 0.70, 0.75, 0.65, 0.65, 0.40, 0.40, 0.35, 0.25, 0.15, 0.15, 0.05, 0.05, 0.05,
    0.05, 0.05,
];

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("t", format!("truncation {t} is outside [0, 1]")));
    }
    Ok(())
}

/// `w_avg + t·(w − w_avg)`, evaluated as `(1 − t)·w_avg + t·w` so that the
/// endpoints `t = 1` and `t = 0` are reproduced exactly.
pub fn truncate(w: &[f64], t: f64, w_avg: &[f64]) -> Result<Vec<f64>> {
    check_t(t)?;
    if w.len() != w_avg.len() {
        return Err(Error::shape(
            "truncate",
            format!("latent {} vs average {}", w.len(), w_avg.len()),
        ));
    }
    Ok(w.iter()
        .zip(w_avg)
        .map(|(x, a)| (1.0 - t) * a + t * x)
        .collect())
}

/// Truncate each layer's code `base + delta_i` with its own factor `t_i`.
///
/// The result keeps the base/offset split: the base is truncated with the
/// mean factor and the offsets absorb the per-layer remainder.
pub fn truncate_adaptive(
    latent: &LayeredLatent,
    t_vec: &[f64],
    w_avg: &[f64],
) -> Result<LayeredLatent> {
    let n = latent.n_layers();
    if t_vec.len() != n {
        return Err(Error::shape(
            "truncate_adaptive",
            format!("{} factors for {n} layers", t_vec.len()),
        ));
    }
    if w_avg.len() != latent.dim() {
        return Err(Error::shape(
            "truncate_adaptive",
            format!("latent {} vs average {}", latent.dim(), w_avg.len()),
        ));
    }
    for &t in t_vec {
        check_t(t)?;
    }
    let t_ref = t_vec.iter().sum::<f64>() / n as f64;
    let base = truncate(latent.base(), t_ref, w_avg)?;
    // code_i' − base' = (t_ref − t_i)(w_avg − base) + t_i·delta_i
    let deltas: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let t = t_vec[i];
            latent
                .base()
                .iter()
                .zip(latent.delta(i))
                .zip(w_avg)
                .map(|((b, d), a)| (t_ref - t) * (a - b) + t * d)
                .collect()
        })
        .collect();
    LayeredLatent::from_parts(&base, &deltas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn latent(seed: u64) -> (LayeredLatent, Vec<f64>) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = crate::diffcore::Tensor::randn(&[19, 6], 1.0, &mut rng);
        let avg = crate::diffcore::Tensor::randn(&[6], 0.5, &mut rng);
        (LayeredLatent::from_tensor(t).unwrap(), avg.into_data())
    }

    #[test]
    fn endpoints_are_exact() {
        let w = [0.3, -1.7, 2.2];
        let a = [0.1, 0.2, 0.3];
        assert_eq!(truncate(&w, 1.0, &a).unwrap(), w);
        assert_eq!(truncate(&w, 0.0, &a).unwrap(), a);
        assert!(truncate(&w, 1.2, &a).is_err());
        assert!(truncate(&w, -0.01, &a).is_err());
    }

    #[test]
    fn distances_scale_linearly() {
        let w = [0.3, -1.7, 2.2];
        let a = [0.1, 0.2, 0.3];
        let dist = |v: &[f64]| v.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let d4 = dist(&truncate(&w, 0.4, &a).unwrap());
        let d7 = dist(&truncate(&w, 0.7, &a).unwrap());
        assert!((d4 / d7 - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_all_ones_and_zeros() {
        let (l, avg) = latent(1);
        let same = truncate_adaptive(&l, &[1.0; 18], &avg).unwrap();
        assert_eq!(same, l);
        let collapsed = truncate_adaptive(&l, &[0.0; 18], &avg).unwrap();
        for i in 0..18 {
            assert_eq!(collapsed.code(i), avg);
        }
        assert!(truncate_adaptive(&l, &[1.0; 17], &avg).is_err());
    }

    #[test]
    fn default_table_shape() {
        assert_eq!(ADAPTIVE_TRUNCATION.len(), 18);
        assert!(ADAPTIVE_TRUNCATION.iter().all(|t| (0.0..=1.0).contains(t)));
    }

    proptest! {
        #[test]
        fn uniform_factor_matches_per_layer(seed in 0u64..1000, t in 0.0f64..=1.0) {
            let (l, avg) = latent(seed);
            let out = truncate_adaptive(&l, &[t; 18], &avg).unwrap();
            for i in 0..18 {
                let expect = truncate(&l.code(i), t, &avg).unwrap();
                for (x, y) in out.code(i).iter().zip(&expect) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn nested_truncation_composes(seed in 0u64..1000, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (l, avg) = latent(seed);
            let w = l.base();
            let nested = truncate(&truncate(w, t1, &avg).unwrap(), t2, &avg).unwrap();
            let direct = truncate(w, t1 * t2, &avg).unwrap();
            for (x, y) in nested.iter().zip(&direct) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
