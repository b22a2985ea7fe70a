//! Central finite-difference verification of every backward pass.
//!
//! Checks run in f64 where the O(h^2) truncation error of the central
//! difference sits far below the comparison tolerances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cross_attention, AttentionConfig, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err {:>12.3e}  tol {:>8.1e}  {}",
            self.name,
            self.max_rel_err,
            self.tol,
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the tape gradient of `f` against central differences, perturbing
/// every element of every parameter tensor.
///
/// `f` rebuilds the graph from scratch each call: the tape it receives is
/// empty and the slice holds one trainable leaf per init tensor.
pub fn grad_check<F>(name: &str, inits: &[Tensor<f64>], tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor<f64>]| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let loss = tape.value(root).item()?;
        let mut grads = tape.backward(root)?;
        let out = vars.iter().map(|&v| grads.take(v)).collect();
        Ok((loss, out))
    };

    let (_, analytic) = eval(inits)?;
    let mut max_err = 0.0f64;
    let mut params: Vec<Tensor<f64>> = inits.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let x0 = params[pi].data()[ei];
            let h = 1e-5 * x0.abs().max(1.0);
            params[pi].data_mut()[ei] = x0 + h;
            let (fp, _) = eval_loss_only(&params, &f)?;
            params[pi].data_mut()[ei] = x0 - h;
            let (fm, _) = eval_loss_only(&params, &f)?;
            params[pi].data_mut()[ei] = x0;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[pi]
                .as_ref()
                .map(|g| g.data()[ei])
                .unwrap_or(0.0);
            max_err = max_err.max(rel_err(an, fd));
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        tol,
    })
}

fn eval_loss_only<F>(params: &[Tensor<f64>], f: &F) -> Result<(f64, ())>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok((tape.value(root).item()?, ()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values kept away from the relu/abs kinks so finite differences stay
/// clean: the offset keeps |x| respectably above the step size.
fn smooth_rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let t = Tensor::<f64>::uniform(shape, &mut r, 0.05, 1.0);
    let signs = Tensor::<f64>::uniform(shape, &mut r, -1.0, 1.0);
    let data = t
        .data()
        .iter()
        .zip(signs.data())
        .map(|(&m, &s)| if s >= 0.0 { m } else { -m })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Weighted-sum readout so every output element contributes a distinct
/// gradient signal.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut r = rng(seed);
    let w = tape.constant(Tensor::<f64>::uniform(&shape, &mut r, -1.0, 1.0));
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}

/// Finite-difference suite covering the whole registered op set.
pub fn op_suite() -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let tol = 1e-5;

    // x*x at x=3 — the canonical smoke case (analytic 6).
    reports.push(grad_check(
        "square_scalar",
        &[Tensor::from_vec(&[1], vec![3.0])?],
        1e-8,
        |t, p| {
            let y = t.mul(p[0], p[0])?;
            t.sum(y)
        },
    )?);

    reports.push(grad_check("add", &[smooth_rand(&[3, 4], 1), smooth_rand(&[3, 4], 2)], tol, |t, p| {
        let y = t.add(p[0], p[1])?;
        weighted_sum(t, y, 100)
    })?);
    reports.push(grad_check("sub", &[smooth_rand(&[3, 4], 3), smooth_rand(&[3, 4], 4)], tol, |t, p| {
        let y = t.sub(p[0], p[1])?;
        weighted_sum(t, y, 101)
    })?);
    reports.push(grad_check("mul", &[smooth_rand(&[3, 4], 5), smooth_rand(&[3, 4], 6)], tol, |t, p| {
        let y = t.mul(p[0], p[1])?;
        weighted_sum(t, y, 102)
    })?);
    reports.push(grad_check("scale", &[smooth_rand(&[2, 5], 7)], tol, |t, p| {
        let y = t.scale(p[0], -1.7)?;
        weighted_sum(t, y, 103)
    })?);
    reports.push(grad_check(
        "add_bias_row",
        &[smooth_rand(&[4, 3], 8), smooth_rand(&[3], 9)],
        tol,
        |t, p| {
            let y = t.add_bias_row(p[0], p[1])?;
            weighted_sum(t, y, 104)
        },
    )?);
    reports.push(grad_check(
        "add_bias_chan",
        &[smooth_rand(&[2, 3, 3], 10), smooth_rand(&[2], 11)],
        tol,
        |t, p| {
            let y = t.add_bias_chan(p[0], p[1])?;
            weighted_sum(t, y, 105)
        },
    )?);
    reports.push(grad_check(
        "matmul",
        &[smooth_rand(&[3, 4], 12), smooth_rand(&[4, 2], 13)],
        tol,
        |t, p| {
            let y = t.matmul(p[0], p[1])?;
            weighted_sum(t, y, 106)
        },
    )?);
    reports.push(grad_check(
        "matmul_nt",
        &[smooth_rand(&[3, 4], 14), smooth_rand(&[5, 4], 15)],
        tol,
        |t, p| {
            let y = t.matmul_nt(p[0], p[1])?;
            weighted_sum(t, y, 107)
        },
    )?);
    reports.push(grad_check("relu", &[smooth_rand(&[4, 4], 16)], tol, |t, p| {
        let y = t.relu(p[0])?;
        weighted_sum(t, y, 108)
    })?);
    reports.push(grad_check("sigmoid", &[smooth_rand(&[4, 4], 17)], tol, |t, p| {
        let y = t.sigmoid(p[0])?;
        weighted_sum(t, y, 109)
    })?);
    reports.push(grad_check("tanh", &[smooth_rand(&[4, 4], 18)], tol, |t, p| {
        let y = t.tanh(p[0])?;
        weighted_sum(t, y, 110)
    })?);
    reports.push(grad_check("abs", &[smooth_rand(&[4, 4], 19)], tol, |t, p| {
        let y = t.abs(p[0])?;
        weighted_sum(t, y, 111)
    })?);
    reports.push(grad_check("clamp_interior", &[smooth_rand(&[4, 4], 20)], tol, |t, p| {
        let y = t.clamp(p[0], -2.0, 2.0)?;
        weighted_sum(t, y, 112)
    })?);
    reports.push(grad_check("softmax", &[smooth_rand(&[3, 5], 21)], tol, |t, p| {
        let y = t.softmax(p[0])?;
        weighted_sum(t, y, 113)
    })?);
    reports.push(grad_check(
        "layer_norm",
        &[smooth_rand(&[3, 6], 22), smooth_rand(&[6], 23), smooth_rand(&[6], 24)],
        tol,
        |t, p| {
            let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
            weighted_sum(t, y, 114)
        },
    )?);
    reports.push(grad_check(
        "conv2d_s1",
        &[smooth_rand(&[2, 5, 5], 25), smooth_rand(&[3, 2, 3, 3], 26)],
        tol,
        |t, p| {
            let y = t.conv2d(p[0], p[1], 1, 1)?;
            weighted_sum(t, y, 115)
        },
    )?);
    reports.push(grad_check(
        "conv2d_s2",
        &[smooth_rand(&[2, 6, 6], 27), smooth_rand(&[3, 2, 3, 3], 28)],
        tol,
        |t, p| {
            let y = t.conv2d(p[0], p[1], 2, 1)?;
            weighted_sum(t, y, 116)
        },
    )?);
    reports.push(grad_check(
        "conv2d_patch",
        &[smooth_rand(&[3, 8, 8], 29), smooth_rand(&[4, 3, 4, 4], 30)],
        tol,
        |t, p| {
            let y = t.conv2d(p[0], p[1], 4, 0)?;
            weighted_sum(t, y, 117)
        },
    )?);
    reports.push(grad_check(
        "conv2d_transpose",
        &[smooth_rand(&[3, 4, 4], 31), smooth_rand(&[3, 2, 4, 4], 32)],
        tol,
        |t, p| {
            let y = t.conv2d_transpose(p[0], p[1], 2, 1)?;
            weighted_sum(t, y, 118)
        },
    )?);
    reports.push(grad_check(
        "concat_axis0",
        &[smooth_rand(&[2, 3, 3], 33), smooth_rand(&[4, 3, 3], 34)],
        tol,
        |t, p| {
            let y = t.concat(p[0], p[1], 0)?;
            weighted_sum(t, y, 119)
        },
    )?);
    reports.push(grad_check(
        "concat_axis1",
        &[smooth_rand(&[3, 2], 35), smooth_rand(&[3, 4], 36)],
        tol,
        |t, p| {
            let y = t.concat(p[0], p[1], 1)?;
            weighted_sum(t, y, 120)
        },
    )?);
    reports.push(grad_check("reshape", &[smooth_rand(&[3, 4], 37)], tol, |t, p| {
        let y = t.reshape(p[0], &[2, 6])?;
        weighted_sum(t, y, 121)
    })?);
    reports.push(grad_check("slice_cols", &[smooth_rand(&[3, 6], 38)], tol, |t, p| {
        let y = t.slice_cols(p[0], 1, 3)?;
        weighted_sum(t, y, 122)
    })?);
    reports.push(grad_check("sum", &[smooth_rand(&[3, 4], 39)], tol, |t, p| t.sum(p[0]))?);
    reports.push(grad_check("mean", &[smooth_rand(&[3, 4], 40)], tol, |t, p| t.mean(p[0]))?);
    reports.push(grad_check(
        "global_avg_pool",
        &[smooth_rand(&[3, 4, 4], 41)],
        tol,
        |t, p| {
            let y = t.global_avg_pool(p[0])?;
            weighted_sum(t, y, 123)
        },
    )?);
    reports.push(grad_check(
        "bce_with_logits",
        &[smooth_rand(&[1, 6], 42)],
        tol,
        |t, p| {
            let targets = t.constant(Tensor::from_vec(&[1, 6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0])?);
            t.bce_with_logits(p[0], targets)
        },
    )?);
    // Operands separated by at least 1 keep |a-b| away from the abs kink.
    reports.push(grad_check(
        "mean_abs_diff",
        &[
            Tensor::<f64>::uniform(&[3, 4], &mut rng(54), 2.0, 4.0),
            smooth_rand(&[3, 4], 55),
        ],
        tol,
        |t, p| t.mean_abs_diff(p[0], p[1]),
    )?);

    // Random two-layer net with a smooth activation, squared-error readout.
    reports.push(grad_check(
        "two_layer_net",
        &[
            smooth_rand(&[5, 4], 43),
            smooth_rand(&[4], 44),
            smooth_rand(&[4, 3], 45),
            smooth_rand(&[3], 46),
        ],
        1e-6,
        |t, p| {
            let x = t.constant(smooth_rand(&[7, 5], 47));
            let target = t.constant(smooth_rand(&[7, 3], 48));
            let h0 = t.matmul(x, p[0])?;
            let h1 = t.add_bias_row(h0, p[1])?;
            let h2 = t.sigmoid(h1)?;
            let o0 = t.matmul(h2, p[2])?;
            let o1 = t.add_bias_row(o0, p[3])?;
            let d = t.sub(o1, target)?;
            let sq = t.mul(d, d)?;
            t.mean(sq)
        },
    )?);

    // Softmax cross-attention composite, gradients through all projections
    // and both token streams.
    reports.push(grad_check(
        "cross_attention",
        &[
            smooth_rand(&[3, 4], 49),
            smooth_rand(&[5, 4], 50),
            smooth_rand(&[4, 4], 51),
            smooth_rand(&[4, 4], 52),
            smooth_rand(&[4, 4], 53),
        ],
        1e-5,
        |t, p| {
            let cfg = AttentionConfig { d_model: 4, heads: 2 };
            let out = cross_attention(t, p[0], p[1], p[2], p[3], p[4], &cfg)?;
            weighted_sum(t, out, 124)
        },
    )?);

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_all_pass() {
        let reports = op_suite().unwrap();
        for r in &reports {
            assert!(r.pass(), "{r}");
        }
        // Keep the suite honest about coverage: one report per registered op
        // plus the composites.
        assert!(reports.len() >= 29, "suite shrank to {}", reports.len());
    }

    #[test]
    fn relu_backward_at_reference_points() {
        // d/dx relu at x=-1 is 0, at x=2 is 1.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let mut g = tape.backward(s).unwrap();
        let gx = g.take(x).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0]);
    }
}
