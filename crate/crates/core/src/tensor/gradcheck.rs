//! Central finite-difference gradient checking.
//!
//! The harness rebuilds the forward graph from scratch for every probe, so it
//! stays independent of the backward pass it is checking. It only runs in
//! `f64`; central differences drown in roundoff at single precision.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Builds a scalar loss on a fresh tape from leaf variables bound to the
/// supplied parameters (one `Var` per parameter, same order).
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape<f64>, params: &[Var]) -> Result<Var>;
}

impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> LossBuilder for F {
    fn build(&self, tape: &mut Tape<f64>, params: &[Var]) -> Result<Var> {
        self(tape, params)
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    /// max over parameters of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_err: f64,
    /// parameter (name, flat index) where the max occurred
    pub worst: Option<(String, usize)>,
}

fn eval_loss(
    build: &impl LossBuilder,
    params: &[(String, Tensor<f64>)],
    context: &str,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let loss = build.build(&mut tape, &vars)?;
    if tape.numel(loss) != 1 {
        return Err(Error::InvalidArg(format!(
            "gradient check: loss must be scalar, got {:?}",
            tape.shape(loss)
        )));
    }
    let v = tape.value(loss)[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss while probing {context}")));
    }
    Ok(v)
}

/// Compare reverse-mode gradients against central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps` for every element of every parameter.
pub fn finite_difference_check(
    build: &impl LossBuilder,
    params: &[(String, Tensor<f64>)],
    eps: f64,
) -> Result<CheckReport> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidArg(format!(
            "gradient check: eps {eps} outside [1e-5, 1e-2]"
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let loss = build.build(&mut tape, &vars)?;
    if !tape.value(loss)[0].is_finite() {
        return Err(Error::NonFinite("loss at the evaluation point".into()));
    }
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    // Numeric probes.
    let mut report = CheckReport { max_rel_err: 0.0, worst: None };
    let mut probe = params.to_vec();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            probe[pi].1.data_mut()[i] = orig + eps;
            let f_plus = eval_loss(build, &probe, &format!("{name}[{i}]+eps"))?;
            probe[pi].1.data_mut()[i] = orig - eps;
            let f_minus = eval_loss(build, &probe, &format!("{name}[{i}]-eps"))?;
            probe[pi].1.data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Padding};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        // loss = sum(x * x) has no third derivative, so central differences
        // are exact up to floating-point noise.
        let params = vec![(
            "x".to_string(),
            Tensor::from_init(&[5], Init::Uniform { lo: -2.0, hi: 2.0 }, 5).unwrap(),
        )];
        let report = finite_difference_check(
            &|tape: &mut Tape<f64>, vars: &[Var]| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum_all(sq))
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "err = {}", report.max_rel_err);
    }

    #[test]
    fn eps_outside_range_rejected() {
        let params = vec![("x".to_string(), Tensor::<f64>::zeros(&[2]))];
        let r = finite_difference_check(
            &|tape: &mut Tape<f64>, vars: &[Var]| Ok(tape.sum_all(vars[0])),
            &params,
            1e-1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let params = vec![("w".to_string(), Tensor::<f64>::scalar(0.0))];
        // sqrt at 0 probes to sqrt(-eps) = NaN
        let r = finite_difference_check(
            &|tape: &mut Tape<f64>, vars: &[Var]| {
                let s = tape.sqrt(vars[0]);
                Ok(tape.sum_all(s))
            },
            &params,
            1e-3,
        );
        match r {
            Err(Error::NonFinite(msg)) => assert!(msg.contains('w'), "{msg}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    /// Randomized gradient checks for every primitive op on small shapes.
    #[test]
    fn primitive_ops_match_central_differences() {
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = |shape: &[usize], rng: &mut ChaCha8Rng| {
                Tensor::<f64>::from_init_rng(shape, Init::Uniform { lo: -1.5, hi: 1.5 }, rng)
                    .unwrap()
            };
            // shapes kept at or below 32 elements
            let cases: Vec<(&str, Vec<(String, Tensor<f64>)>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>>)> = vec![
                (
                    "matmul",
                    vec![
                        ("a".into(), u(&[3, 4], &mut rng)),
                        ("b".into(), u(&[4, 2], &mut rng)),
                    ],
                    Box::new(|t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        let y = t.tanh(y);
                        Ok(t.sum_all(y))
                    }),
                ),
                (
                    "conv2d_same",
                    vec![
                        ("x".into(), u(&[1, 2, 3, 4], &mut rng)),
                        ("w".into(), u(&[2, 2, 3, 2], &mut rng)),
                    ],
                    Box::new(|t, v| {
                        let y = t.conv2d(v[0], v[1], 1, 2, Padding::Same)?;
                        let y = t.sigmoid(y);
                        Ok(t.sum_all(y))
                    }),
                ),
                (
                    "conv2d_valid",
                    vec![
                        ("x".into(), u(&[2, 1, 4, 4], &mut rng)),
                        ("w".into(), u(&[1, 1, 2, 2], &mut rng)),
                    ],
                    Box::new(|t, v| {
                        let y = t.conv2d(v[0], v[1], 2, 1, Padding::Valid)?;
                        Ok(t.sum_all(y))
                    }),
                ),
                (
                    "mul_div_broadcast",
                    vec![
                        ("x".into(), u(&[4, 3], &mut rng)),
                        ("s".into(), u(&[3], &mut rng).map(|v| v + 2.5)),
                    ],
                    Box::new(|t, v| {
                        let y = t.mul(v[0], v[0])?;
                        let y = t.div(y, v[1])?;
                        Ok(t.sum_all(y))
                    }),
                ),
                (
                    "activations",
                    vec![("x".into(), u(&[2, 7], &mut rng))],
                    Box::new(|t, v| {
                        let a = t.sigmoid(v[0]);
                        let b = t.tanh(v[0]);
                        let c = t.relu(v[0]);
                        let ab = t.mul(a, b)?;
                        let abc = t.add(ab, c)?;
                        Ok(t.sum_all(abc))
                    }),
                ),
                (
                    "softmax_logsoftmax",
                    vec![("x".into(), u(&[3, 5], &mut rng))],
                    Box::new(|t, v| {
                        let s = t.softmax(v[0], 1)?;
                        let ls = t.log_softmax(v[0], 1)?;
                        let p = t.mul(s, ls)?;
                        Ok(t.sum_all(p))
                    }),
                ),
                (
                    "reductions",
                    vec![("x".into(), u(&[2, 3, 4], &mut rng))],
                    Box::new(|t, v| {
                        let m = t.mean_axes(v[0], &[0, 2])?;
                        let va = t.var_axes(v[0], &[0, 2])?;
                        let eps = t.affine(va, 1.0, 1e-3);
                        let sd = t.sqrt(eps);
                        let z = t.div(m, sd)?;
                        Ok(t.sum_all(z))
                    }),
                ),
                (
                    "concat_narrow_permute",
                    vec![
                        ("a".into(), u(&[2, 3], &mut rng)),
                        ("b".into(), u(&[2, 2], &mut rng)),
                    ],
                    Box::new(|t, v| {
                        let c = t.concat(&[v[0], v[1]], 1)?;
                        let p = t.permute(c, &[1, 0])?;
                        let n = t.narrow(p, 0, 1, 3)?;
                        let sq = t.mul(n, n)?;
                        Ok(t.sum_all(sq))
                    }),
                ),
                (
                    "embed_take_reverse",
                    vec![("table".into(), u(&[5, 3], &mut rng))],
                    Box::new(|t, v| {
                        let e = t.embed(v[0], &[4, 0, 2, 2])?;
                        let r = t.reshape(e, &[2, 2, 3])?;
                        let r = t.reverse_time(r, 1, &[2, 1])?;
                        let f = t.reshape(r, &[4, 3])?;
                        let ls = t.log_softmax(f, 1)?;
                        let picked = t.take_per_row(ls, &[0, 2, 1, 0])?;
                        let s = t.sum_all(picked);
                        Ok(t.neg(s))
                    }),
                ),
            ];
            for (name, params, build) in cases {
                let report = finite_difference_check(&build, &params, 1e-4).unwrap();
                assert!(
                    report.max_rel_err < 1e-4,
                    "{name} (seed {seed}): max rel err {}",
                    report.max_rel_err
                );
                worst = worst.max(report.max_rel_err);
            }
        }
        // keep visibility into how much headroom the suite has
        eprintln!("primitive op gradcheck worst rel err: {worst:.3e}");
    }
}
