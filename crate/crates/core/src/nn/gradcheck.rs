//! Central finite-difference gradient checking.

use ndarray::Array2;

use super::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Numerical gradient of a scalar function of one tensor.
pub fn numeric_gradient(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let plus = f(&probe);
        probe[[r, c]] = orig - h;
        let minus = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Builds `build` on fresh tapes, compares analytic and central-difference
/// gradients for every input, and returns the worst relative error.
pub fn check_gradients(inputs: &[Array2<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Array2<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let grads = tape.backward(out);
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(inputs[i].raw_dim()));
        let numeric = numeric_gradient(&inputs[i], DEFAULT_STEP, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = probe.clone();
            let (t, _, o) = eval(&xs);
            t.scalar(o)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
