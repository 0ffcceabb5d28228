use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)` over all coordinates.
    pub max_relative_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(p+eps) − f(p−eps)) / (2·eps)` for every coordinate of every
/// parameter in `params`.
pub fn check_gradients<F>(f: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        g.value(l).item()
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(&name).expect("name from store").data()[i];
            work.get_mut(&name).expect("cloned store").data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("cloned store").data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("cloned store").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                if rel >= report.max_relative_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t);
        s
    }

    #[test]
    fn quadratic_is_exact() {
        let s = store("x", Tensor::vector(vec![0.3, -1.2, 2.5]));
        let r = check_gradients(
            |g, p| {
                let x = g.param(p, "x")?;
                let sq = g.mul(x, x)?;
                let y = g.scale(sq, 1.7)?;
                g.sum(y)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-7, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn dead_relu_region() {
        let s = store("x", Tensor::vector(vec![-1.0, -2.0, -0.5]));
        let r = check_gradients(
            |g, p| {
                let x = g.param(p, "x")?;
                let y = g.relu(x)?;
                g.sum(y)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-7);
    }

    #[test]
    fn composite_of_every_primitive() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        s.insert("a", Tensor::uniform(&[3, 4], 1.0, &mut rng));
        s.insert("b", Tensor::uniform(&[4, 3], 1.0, &mut rng));
        s.insert("bias", Tensor::uniform(&[3], 1.0, &mut rng));
        s.insert("w", Tensor::uniform(&[3, 3], 0.4, &mut rng));
        s.insert("k", Tensor::uniform(&[1], 1.0, &mut rng));
        s.insert("u", Tensor::uniform(&[3, 1], 1.0, &mut rng));
        s.insert("m", Tensor::uniform(&[5], 2.0, &mut rng));
        let r = check_gradients(
            |g, p| {
                let a = g.param(p, "a")?;
                let b = g.param(p, "b")?;
                let ab = g.matmul(a, b)?;
                let bias = g.param(p, "bias")?;
                let h = g.add_row(ab, bias)?;
                let h = g.elu(h)?;
                let k = g.param(p, "k")?;
                let hk = g.mul_scalar(h, k)?;
                let h = g.add(h, hk)?;
                let u = g.param(p, "u")?;
                let outer = g.outer_sum(u, u)?;
                let logits = g.leaky_relu(outer, 0.2)?;
                let logits = g.add(logits, h)?;
                // weights: 0.5 + masked pair weights, all positive
                let m = g.param(p, "m")?;
                let ms = g.sigmoid(m)?;
                let pm = g.group_max(ms, &[0, 1, 1, 2, 2], 3)?;
                let w = g.scatter_pairs(pm, &[(0, 1), (1, 2), (0, 2)], 3)?;
                let half = g.constant(Tensor::full(&[3, 3], 0.5))?;
                let w = g.add(w, half)?;
                let alpha = g.weighted_softmax_rows(logits, Some(w))?;
                let wt = g.param(p, "w")?;
                let t = g.matmul_t(alpha, wt)?;
                let tt = g.transpose(t)?;
                let c = g.concat_cols(&[t, tt])?;
                let c1 = g.slice_cols(c, 1, 5)?;
                let r = g.concat_rows(&[c1, c1])?;
                let r2 = g.slice_rows(r, 1, 4)?;
                let mx = g.max_rows(r2)?;
                let mn = g.mean_rows(r2, &[0, 2])?;
                let target = g.constant(Tensor::full(&[1, 4], 0.3))?;
                let l1 = g.smooth_l1(mx, target, 0.5)?;
                let sm = g.softmax_rows(mn)?;
                let lg = g.ln_clamped(sm, 1e-12)?;
                let s2 = g.mean(lg)?;
                let s2 = g.scale(s2, -1.0)?;
                let tot = g.add(l1, s2)?;
                let relu = g.relu(tot)?;
                g.sum(relu)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-6, "{r:?}");
    }
}
