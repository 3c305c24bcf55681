use rand::seq::index::sample;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences with step `eps`, on up to `per_tensor` randomly chosen entries
/// of every parameter.
pub fn grad_check<F>(
    params: &ParamStore,
    eps: f64,
    per_tensor: usize,
    rng: &mut Rng,
    loss_fn: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, p)?;
        Ok(g.value(l)[0])
    };

    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let grads = g.backward(loss)?;

    let mut probe = params.clone();
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, worst: None };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let analytic = grads.get(&name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        let picks = sample(rng, len, per_tensor.min(len));
        for i in picks.iter() {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            out.checked += 1;
            if err > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = out.max_rel_error.max(err);
                out.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng;

    fn store(entries: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
        let mut r = rng::stream(seed, "gc");
        let mut p = ParamStore::new();
        for (n, shape) in entries {
            p.insert(*n, Tensor::uniform(shape.clone(), 1.0, &mut r));
        }
        p
    }

    fn check(p: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> f64 {
        let mut r = rng::stream(0, "pick");
        let res = grad_check(p, 1e-3, 64, &mut r, f).unwrap();
        assert!(res.checked > 0);
        res.max_rel_error
    }

    fn bind(g: &mut Graph, p: &ParamStore, n: &str) -> Var {
        g.param(n, p.get(n).unwrap())
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let p = store(&[("w", vec![3, 4])], 1);
        let mut g = Graph::new();
        let w = bind(&mut g, &p, "w");
        let sq = g.mean_square(w);
        let loss = g.scale(sq, 12.0 / 2.0); // sum(w²)/2
        let grads = g.backward(loss).unwrap();
        for (a, b) in grads.get("w").unwrap().iter().zip(p.get("w").unwrap().data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_layer_matches_closed_form() {
        // loss = ½‖W x − y‖², dL/dW = (W x − y) xᵀ
        let w = [0.3, -1.2, 0.7, 2.0];
        let x = [1.5, -0.5];
        let y = [0.25, 1.0];
        let mut p = ParamStore::new();
        p.insert("W", Tensor::new(vec![2, 2], w.to_vec()).unwrap());
        let mut g = Graph::new();
        let wv = bind(&mut g, &p, "W");
        let xv = g.input(vec![2, 1], x.to_vec());
        let yv = g.input(vec![2, 1], y.to_vec());
        let pred = g.matmul(wv, xv).unwrap();
        let r = g.sub(pred, yv).unwrap();
        let ms = g.mean_square(r);
        let loss = g.scale(ms, 1.0); // ½ Σ r² = mean(r²) for two entries
        let grads = g.backward(loss).unwrap();
        let res = [w[0] * x[0] + w[1] * x[1] - y[0], w[2] * x[0] + w[3] * x[1] - y[1]];
        let expect = [res[0] * x[0], res[0] * x[1], res[1] * x[0], res[1] * x[1]];
        for (a, e) in grads.get("W").unwrap().iter().zip(expect) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }

    #[test]
    fn fd_matmul() {
        let p = store(&[("a", vec![3, 4]), ("b", vec![4, 2])], 2);
        let e = check(&p, |g, p| {
            let (a, b) = (bind(g, p, "a"), bind(g, p, "b"));
            let m = g.matmul(a, b)?;
            Ok(g.mean_square(m))
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn fd_conv3d_and_silu() {
        let p = store(
            &[("x", vec![2, 3, 4, 5]), ("w", vec![3, 2, 3, 3, 3]), ("b", vec![3])],
            3,
        );
        let e = check(&p, |g, p| {
            let (x, w, b) = (bind(g, p, "x"), bind(g, p, "w"), bind(g, p, "b"));
            let c = g.conv3d(x, w, b)?;
            let s = g.silu(c);
            Ok(g.mean_square(s))
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn fd_planar_conv() {
        let p = store(&[("x", vec![1, 1, 6, 6]), ("w", vec![2, 1, 1, 3, 3]), ("b", vec![2])], 4);
        let e = check(&p, |g, p| {
            let (x, w, b) = (bind(g, p, "x"), bind(g, p, "w"), bind(g, p, "b"));
            let c = g.conv3d(x, w, b)?;
            Ok(g.mean_square(c))
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn fd_add_sub_scale_channel() {
        let p = store(&[("x", vec![3, 2, 2]), ("y", vec![3, 2, 2]), ("v", vec![3])], 5);
        let e = check(&p, |g, p| {
            let (x, y, v) = (bind(g, p, "x"), bind(g, p, "y"), bind(g, p, "v"));
            let a = g.try_add(x, y)?;
            let s = g.scale(a, -0.7);
            let d = g.sub(s, y)?;
            let c = g.add_channel(d, v)?;
            let sl = g.silu(c);
            let sq = g.mean_square(sl);
            let tot = g.sum(c);
            let tot = g.scale(tot, 0.1);
            Ok(g.add(sq, tot))
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn fd_softmax_family() {
        let p = store(&[("s", vec![4, 4]), ("t", vec![1])], 6);
        let e = check(&p, |g, p| {
            let (s, t) = (bind(g, p, "s"), bind(g, p, "t"));
            let st = g.mul_exp(s, t)?;
            let tr = g.transpose(st)?;
            let lr = g.log_softmax_rows(st)?;
            let lc = g.log_softmax_rows(tr)?;
            let a = g.diag_mean(lr)?;
            let b = g.pick_mean(lc, &[1, 0, 3, 2])?;
            let sm = g.softmax_rows(st)?;
            let q = g.mean_square(sm);
            let ab = g.add(a, b);
            Ok(g.add(ab, q))
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn fd_normalize_stack_reshape_pool() {
        let p = store(&[("u", vec![5]), ("v", vec![5]), ("f", vec![2, 3, 3])], 7);
        let e = check(&p, |g, p| {
            let (u, v, f) = (bind(g, p, "u"), bind(g, p, "v"), bind(g, p, "f"));
            let m = g.stack_rows(&[u, v])?;
            let n = g.normalize_rows(m)?;
            let r = g.reshape(n, vec![10])?;
            let pooled = g.mean_cols(f);
            let q = g.mean_square(pooled);
            let s = g.mean_square(r);
            let nt = g.transpose(n)?;
            let sim = g.matmul(n, nt)?;
            let off = g.sum(sim);
            let a = g.add(q, s);
            Ok(g.add(a, off))
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn unreached_parameter_is_reported() {
        let p = store(&[("used", vec![2]), ("idle", vec![2])], 8);
        let mut g = Graph::new();
        let u = bind(&mut g, &p, "used");
        let _ = bind(&mut g, &p, "idle");
        let l = g.sum(u);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.unreached, vec!["idle".to_string()]);
        assert!(grads.get("idle").is_none());
        let mut p2 = p.clone();
        p2.attach_grads(&grads);
        assert_eq!(p2.get("idle").unwrap().grad(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let p = store(&[("w", vec![2])], 9);
        let mut g = Graph::new();
        let w = bind(&mut g, &p, "w");
        assert!(matches!(g.backward(w), Err(Error::ShapeMismatch(_))));
    }
}
