//! Focal loss with label smoothing and the symmetric KL consistency term.
//!
//! Both are evaluated in f64 from log-softmax rows and return their partial
//! derivatives w.r.t. the logits alongside the value, so the training graph
//! can splice them in as a single fused node.

use diac_tensor::{kernels::log_softmax_row, Element, Tensor, TensorError};

use crate::error::{Error, Result};
use crate::textproc::NUM_CLASSES;

/// Floor for probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_targets(targets: &[usize]) -> Result<()> {
    match targets.iter().position(|&t| t >= NUM_CLASSES) {
        Some(position) => Err(Error::Label { position, class: targets[position] }),
        None => Ok(()),
    }
}

fn check_width<T: Element>(x: &Tensor<T>) -> Result<usize> {
    let (_, c) = x.dims2()?;
    if c != NUM_CLASSES {
        return Err(TensorError::Shape(format!("expected {NUM_CLASSES} logits per row, got {:?}", x.shape())).into());
    }
    Ok(c)
}

/// Sum over `rows` of the per-position focal loss, divided by `norm`, with its
/// gradient w.r.t. every entry of `logits` (zero outside `rows`).
pub(crate) fn focal_rows<T: Element>(
    logits: &Tensor<T>,
    rows: &[usize],
    targets: &[usize],
    gamma: f64,
    epsilon: f64,
    norm: f64,
) -> Result<(f64, Vec<f64>)> {
    let c = check_width(logits)?;
    check_targets(targets)?;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (&r, &t) in rows.iter().zip(targets) {
        let logp = log_softmax_row(logits.row(r));
        let g = &mut grad[r * c..(r + 1) * c];
        // a_k = p_k · ∂L/∂p_k, so that ∂L/∂z_j = a_j − p_j Σ_k a_k.
        let mut a_sum = 0.0;
        let mut p = [0.0; NUM_CLASSES];
        for k in 0..c {
            let q = (1.0 - epsilon) * f64::from(k == t) + epsilon / c as f64;
            p[k] = logp[k].exp();
            let one_minus = (-logp[k].exp_m1()).max(PROB_FLOOR);
            let modulation = one_minus.powf(gamma);
            total += q * modulation * -logp[k];
            let a = q * (gamma * p[k] * one_minus.powf(gamma - 1.0) * logp[k] - modulation);
            g[k] = a;
            a_sum += a;
        }
        for k in 0..c {
            g[k] = (g[k] - p[k] * a_sum) / norm;
        }
    }
    Ok((total / norm, grad))
}

/// Mean over all rows of `Σ_k q_k (1−p_k)^γ (−log p_k)` with smoothed targets
/// `q_k = (1−ε)·[k = t] + ε/15`.
pub fn focal_loss_ls<T: Element>(logits: &Tensor<T>, targets: &[usize], gamma: f64, epsilon: f64) -> Result<f64> {
    let (n, _) = logits.dims2()?;
    if targets.len() != n {
        return Err(TensorError::Shape(format!("{} targets for {n} rows", targets.len())).into());
    }
    let rows: Vec<usize> = (0..n).collect();
    Ok(focal_rows(logits, &rows, targets, gamma, epsilon, n.max(1) as f64)?.0)
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `½ Σ_k (p_k − q_k)(log p_k − log q_k)` summed over `rows` and divided by
/// `norm`, with gradients w.r.t. both logit tensors.
pub(crate) fn sym_kl_rows<T: Element>(
    logits_p: &Tensor<T>,
    logits_q: &Tensor<T>,
    rows: &[usize],
    norm: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let c = check_width(logits_p)?;
    if logits_p.shape() != logits_q.shape() {
        return Err(TensorError::Shape(format!("{:?} vs {:?}", logits_p.shape(), logits_q.shape())).into());
    }
    let mut gp = vec![0.0; logits_p.len()];
    let mut gq = vec![0.0; logits_q.len()];
    let mut total = 0.0;
    for &r in rows {
        let lp_raw = log_softmax_row(logits_p.row(r));
        let lq_raw = log_softmax_row(logits_q.row(r));
        let p: Vec<f64> = lp_raw.iter().map(|l| l.exp()).collect();
        let q: Vec<f64> = lq_raw.iter().map(|l| l.exp()).collect();
        let lp: Vec<f64> = p.iter().map(|&v| floored_ln(v)).collect();
        let lq: Vec<f64> = q.iter().map(|&v| floored_ln(v)).collect();
        for k in 0..c {
            total += 0.5 * (p[k] - q[k]) * (lp[k] - lq[k]);
        }
        // p_k ∂S/∂p_k; the log term drops out where the floor is active.
        let scaled = |x: &[f64], y: &[f64], lx: &[f64], ly: &[f64], k: usize| {
            let own = if x[k] > PROB_FLOOR { x[k] - y[k] } else { 0.0 };
            0.5 * (x[k] * (lx[k] - ly[k]) + own)
        };
        for (dst, x, y, lx, ly) in [(&mut gp, &p, &q, &lp, &lq), (&mut gq, &q, &p, &lq, &lp)] {
            let a: Vec<f64> = (0..c).map(|k| scaled(x, y, lx, ly, k)).collect();
            let a_sum: f64 = a.iter().sum();
            for k in 0..c {
                dst[r * c + k] = (a[k] - x[k] * a_sum) / norm;
            }
        }
    }
    Ok((total / norm, gp, gq))
}

/// Mean over rows of `½[KL(p‖q) + KL(q‖p)]` for row-wise distributions.
pub fn sym_kl<T: Element>(p: &Tensor<T>, q: &Tensor<T>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(TensorError::Shape(format!("sym_kl: {:?} vs {:?}", p.shape(), q.shape())).into());
    }
    let (n, c) = p.dims2()?;
    let mut total = 0.0;
    for r in 0..n {
        for k in 0..c {
            let (a, b) = (p.row(r)[k].as_f64(), q.row(r)[k].as_f64());
            total += 0.5 * (a - b) * (floored_ln(a) - floored_ln(b));
        }
    }
    Ok(total / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use diac_tensor::{grad_check, RngStream};

    use super::*;

    fn lift<V>(r: Result<V>) -> diac_tensor::Result<V> {
        r.map_err(|e| TensorError::NumericDomain(e.to_string()))
    }

    fn random_logits(n: usize, seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::from_fn(&[n, NUM_CLASSES], |_| scale * rng.normal())
    }

    /// Plain cross-entropy straight from the definition.
    fn cross_entropy(logits: &Tensor<f64>, targets: &[usize]) -> f64 {
        let n = targets.len();
        (0..n)
            .map(|r| {
                let row = logits.row(r);
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[targets[r]].exp() / z).ln()
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn reduces_to_cross_entropy() {
        let logits = random_logits(20, 1, 2.0);
        let targets: Vec<usize> = (0..20).map(|i| (i * 7) % 15).collect();
        let focal = focal_loss_ls(&logits, &targets, 0.0, 0.0).unwrap();
        assert!((focal - cross_entropy(&logits, &targets)).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_at_p07() {
        // p_t = 0.7 with the rest spread evenly over 14 classes.
        let rest = 0.3f64 / 14.0;
        let logits = Tensor::from_fn(&[1, 15], |k| if k == 0 { 0.7f64.ln() } else { rest.ln() });
        let v = focal_loss_ls(&logits, &[0], 0.0, 0.0).unwrap();
        assert!((v - 0.35667).abs() < 1e-5, "{v}");
    }

    #[test]
    fn modulation_factor() {
        // p_t = 0.9: the target term is (0.1)^2 · (−ln 0.9).
        let rest = 0.1f64 / 14.0;
        let logits = Tensor::from_fn(&[1, 15], |k| if k == 3 { 0.9f64.ln() } else { rest.ln() });
        let v = focal_loss_ls(&logits, &[3], 2.0, 0.0).unwrap();
        assert!((v - 0.01 * -(0.9f64.ln())).abs() < 1e-9, "{v}");
        assert!((v - 1.054e-3).abs() < 1e-6);
    }

    #[test]
    fn uniform_closed_form() {
        let logits = Tensor::<f64>::zeros(&[4, 15]);
        for gamma in [0.0, 0.34, 1.0, 2.0] {
            let v = focal_loss_ls(&logits, &[0, 5, 9, 14], gamma, 0.0).unwrap();
            let expect = -(1.0f64 / 15.0).ln() * (1.0 - 1.0 / 15.0f64).powf(gamma);
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_target_reports_position() {
        let logits = Tensor::<f64>::zeros(&[3, 15]);
        assert!(matches!(focal_loss_ls(&logits, &[0, 1, 15], 0.3, 0.0), Err(Error::Label { position: 2, class: 15 })));
    }

    #[test]
    fn focal_gradient_matches_differences() {
        let logits = random_logits(3, 2, 1.5);
        let rows = [0usize, 2];
        for (gamma, eps) in [(0.34, 0.018), (0.0, 0.0), (2.0, 0.108)] {
            let report = grad_check(
                |g, x| {
                    let (v, grad) = lift(focal_rows(g.value(x), &rows, &[4, 11], gamma, eps, 2.0))?;
                    g.custom_scalar(&[x], v, vec![grad])
                },
                &logits,
                1e-4,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "{gamma} {eps}: {report:?}");
        }
    }

    #[test]
    fn non_letter_rows_are_ignored() {
        let mut logits = random_logits(4, 3, 1.0);
        let (v, grad) = focal_rows(&logits, &[1, 3], &[2, 2], 0.34, 0.018, 2.0).unwrap();
        assert!(grad[..15].iter().all(|&g| g == 0.0));
        logits.data_mut()[..15].iter_mut().for_each(|v| *v += 7.0);
        assert_eq!(focal_rows(&logits, &[1, 3], &[2, 2], 0.34, 0.018, 2.0).unwrap().0, v);
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::from_f64(&[1, 2], &[0.75, 0.25]).unwrap();
        let q = Tensor::from_f64(&[1, 2], &[0.25, 0.75]).unwrap();
        let v: f64 = sym_kl::<f64>(&p, &q).unwrap();
        assert!((v - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(sym_kl::<f64>(&p, &p).unwrap(), 0.0);
        let hard = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let half = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        assert!(sym_kl::<f64>(&hard, &half).unwrap().is_finite());
        assert!(sym_kl::<f64>(&hard, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn kl_rows_agree_with_distribution_form() {
        let a = random_logits(5, 4, 2.0);
        let b = random_logits(5, 5, 2.0);
        let rows: Vec<usize> = (0..5).collect();
        let (v, _, _) = sym_kl_rows(&a, &b, &rows, 5.0).unwrap();
        let pa = diac_tensor::softmax(&a, 1).unwrap();
        let pb = diac_tensor::softmax(&b, 1).unwrap();
        assert!((v - sym_kl(&pa, &pb).unwrap()).abs() < 1e-12);
        let (same, g1, g2) = sym_kl_rows(&a, &a, &rows, 5.0).unwrap();
        assert_eq!(same, 0.0);
        assert!(g1.iter().chain(&g2).all(|&g| g == 0.0));
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let fixed = random_logits(3, 6, 1.5);
        let x = random_logits(3, 7, 1.5);
        let rows = [0usize, 1];
        let report = grad_check(
            |g, v| {
                let (val, gp, _) = lift(sym_kl_rows(g.value(v), &fixed, &rows, 3.0))?;
                g.custom_scalar(&[v], val, vec![gp])
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        let report = grad_check(
            |g, v| {
                let (val, _, gq) = lift(sym_kl_rows(&fixed, g.value(v), &rows, 3.0))?;
                g.custom_scalar(&[v], val, vec![gq])
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
