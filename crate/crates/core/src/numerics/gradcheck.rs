use super::params::{Bindings, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// a central difference with step `eps`:
/// `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe.clone());
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

/// [`finite_diff_check`] applied to every tensor of a parameter store in turn,
/// returning the worst error over all of them.
pub fn finite_diff_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for id in store.ids() {
        let err = finite_diff_check(
            |tape, x| {
                let mut bound = store.bind(tape);
                bound.replace(id, x);
                f(tape, &bound)
            },
            store.value(id),
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Initializer;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Initializer::new(seed).uniform(shape, 1.0)
    }

    fn check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: Tensor) {
        let err = finite_diff_check(f, &x, EPS).unwrap();
        assert!(err < TOL, "max rel error {err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let err = finite_diff_check(|t, x| Ok(t.sum(x)), &rand(&[3, 4], 1), EPS).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn softmax_then_dot() {
        let w = Tensor::row(&[0.3, -1.2, 2.0, 0.7]);
        check(
            |t, x| {
                let s = t.softmax_rows(x)?;
                let c = t.constant(w.clone());
                let p = t.mul(s, c)?;
                Ok(t.sum(p))
            },
            rand(&[1, 4], 2),
        );
    }

    #[test]
    fn elementwise_ops() {
        let c = rand(&[3, 4], 99);
        check(
            |t, x| {
                let a = t.sigmoid(x);
                let b = t.gelu(x);
                let l = t.log_sigmoid(x);
                let k = t.constant(c.clone());
                let ab = t.mul(a, b)?;
                let s = t.sub(ab, l)?;
                let s = t.add(s, k)?;
                let s = t.abs(s);
                let s = t.scale(s, 1.7);
                let s = t.add_scalar(s, 0.2);
                let sq = t.mul(s, s)?;
                Ok(t.mean(sq))
            },
            rand(&[3, 4], 3),
        );
    }

    #[test]
    fn logit_interior() {
        check(
            |t, x| {
                let p = t.sigmoid(x);
                let l = t.logit(p, 1e-12);
                let sq = t.mul(l, l)?;
                Ok(t.sum(sq))
            },
            rand(&[2, 3], 4),
        );
    }

    #[test]
    fn matmul_broadcasts_and_transpose() {
        let w = rand(&[4, 3], 5);
        let b = rand(&[1, 3], 6);
        let c = rand(&[3, 1], 7);
        check(
            |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let cv = t.constant(c.clone());
                let y = t.matmul(x, wv)?;
                let y = t.add_row(y, bv)?;
                let y = t.mul_col(y, cv)?;
                let yt = t.transpose(y);
                let g = t.matmul(y, yt)?;
                Ok(t.sum(g))
            },
            rand(&[3, 4], 8),
        );
    }

    #[test]
    fn mul_col_wrt_column() {
        let a = rand(&[3, 4], 9);
        check(
            |t, c| {
                let av = t.constant(a.clone());
                let y = t.mul_col(av, c)?;
                let y = t.gelu(y);
                Ok(t.sum(y))
            },
            rand(&[3, 1], 10),
        );
    }

    #[test]
    fn softmax_and_log_softmax_rows() {
        let w = rand(&[3, 5], 11);
        check(
            |t, x| {
                let s = t.softmax_rows(x)?;
                let l = t.log_softmax_rows(x)?;
                let wv = t.constant(w.clone());
                let a = t.mul(s, wv)?;
                let b = t.mul(l, wv)?;
                let c = t.add(a, b)?;
                Ok(t.sum(c))
            },
            rand(&[3, 5], 12),
        );
    }

    #[test]
    fn layer_norm_all_inputs() {
        let x0 = rand(&[3, 5], 13);
        let g0 = rand(&[1, 5], 14);
        let b0 = rand(&[1, 5], 15);
        let w = rand(&[3, 5], 16);
        let loss = |t: &mut Tape, x: Var, g: Var, b: Var| -> Result<Var> {
            let y = t.layer_norm(x, g, b, 1e-5)?;
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        };
        check(
            |t, x| {
                let g = t.constant(g0.clone());
                let b = t.constant(b0.clone());
                loss(t, x, g, b)
            },
            x0.clone(),
        );
        check(
            |t, g| {
                let x = t.constant(x0.clone());
                let b = t.constant(b0.clone());
                loss(t, x, g, b)
            },
            g0.clone(),
        );
        check(
            |t, b| {
                let x = t.constant(x0.clone());
                let g = t.constant(g0.clone());
                loss(t, x, g, b)
            },
            b0.clone(),
        );
    }

    #[test]
    fn structural_ops() {
        let w = rand(&[2, 7], 17);
        check(
            |t, x| {
                let a = t.slice_cols(x, 1, 3)?;
                let b = t.select_rows(x, &[2, 0, 0])?;
                let bs = t.slice_cols(b, 0, 4)?;
                let c = t.concat_cols(&[a, bs])?;
                let c = t.concat_rows(&[c, c])?;
                let m = t.mean_rows(c);
                let mx = t.max_rows(x)?;
                let mx = t.slice_cols(mx, 0, 4)?;
                let r = t.concat_cols(&[m, mx])?;
                let r = t.concat_rows(&[r, r])?;
                let r = t.slice_cols(r, 0, 7)?;
                let wv = t.constant(w.clone());
                let p = t.mul(r, wv)?;
                let p = t.gelu(p);
                Ok(t.sum(p))
            },
            rand(&[3, 4], 18),
        );
    }

    #[test]
    fn gather_wrt_table() {
        let index = vec![0, 3, 3, 1, 2, 0];
        check(
            |t, table| {
                let a = t.gather(table, &index, 1, 2, 3)?;
                let b = t.gather(table, &index, 0, 2, 3)?;
                let c = t.mul(a, b)?;
                Ok(t.sum(c))
            },
            rand(&[4, 2], 19),
        );
    }

    #[test]
    fn overwrite_wrt_input() {
        check(
            |t, x| {
                let z = t.overwrite(x, &[None, Some(1.0), None])?;
                let s = t.sigmoid(z);
                let s = t.mul(s, z)?;
                Ok(t.sum(s))
            },
            rand(&[1, 3], 20),
        );
    }
}
