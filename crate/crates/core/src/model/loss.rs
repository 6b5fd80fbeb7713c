use super::ops::log_sum_exp;
use super::train::Logits;

/// Label-smoothed cross entropy summed over the rows of `logits`
/// (`targets.len() × vocab`). Rows whose target is `pad` are skipped. The
/// smoothing mass is spread over every vocabulary entry except `pad`.
///
/// When `grad` is given, `grad_scale · dL/dlogits` is written into it (rows
/// for skipped targets are zeroed). Returns `(loss_sum, counted_rows)`.
pub fn label_smoothed_rows(
    logits: &[f64],
    targets: &[u32],
    vocab: usize,
    eps: f64,
    pad: u32,
    mut grad: Option<&mut [f64]>,
    grad_scale: f64,
) -> (f64, usize) {
    debug_assert_eq!(logits.len(), targets.len() * vocab);
    let spread = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    let mut total = 0.0;
    let mut count = 0;
    for (r, &y) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        if y == pad {
            if let Some(g) = grad.as_deref_mut() {
                g[r * vocab..(r + 1) * vocab].fill(0.0);
            }
            continue;
        }
        let lse = log_sum_exp(row);
        let sum_nonpad: f64 = row.iter().sum::<f64>() - row[pad as usize];
        let nll = lse - row[y as usize];
        let smooth = lse - sum_nonpad / (vocab - 1) as f64;
        total += (1.0 - eps) * nll + eps * smooth;
        count += 1;
        if let Some(g) = grad.as_deref_mut() {
            let gr = &mut g[r * vocab..(r + 1) * vocab];
            for j in 0..vocab {
                let mut d = (row[j] - lse).exp();
                if j != pad as usize {
                    d -= spread;
                }
                if j == y as usize {
                    d -= 1.0 - eps;
                }
                gr[j] = d * grad_scale;
            }
        }
    }
    (total, count)
}

/// Mean label-smoothed loss over the non-pad positions of a batch.
/// `targets` is `batch × len`, row-major, aligned with `logits`.
pub fn label_smoothed_loss(logits: &Logits, targets: &[u32], eps: f64, pad: u32) -> f64 {
    let (sum, count) = label_smoothed_rows(&logits.data, targets, logits.vocab, eps, pad, None, 1.0);
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(batch: usize, len: usize, vocab: usize, data: Vec<f64>) -> Logits {
        Logits {
            batch,
            len,
            vocab,
            data,
        }
    }

    // Direct evaluation: p = softmax, loss = (1-e)(-log p_y) + e * mean_{i != pad}(-log p_i)
    fn oracle(data: &[f64], targets: &[u32], v: usize, eps: f64, pad: u32) -> f64 {
        let mut total = 0.0;
        let mut n = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            if y == pad {
                continue;
            }
            let row = &data[r * v..(r + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            let logp: Vec<f64> = row.iter().map(|x| (x.exp() / z).ln()).collect();
            let mut smooth = 0.0;
            for (i, lp) in logp.iter().enumerate() {
                if i != pad as usize {
                    smooth -= lp;
                }
            }
            smooth /= (v - 1) as f64;
            total += (1.0 - eps) * -logp[y as usize] + eps * smooth;
            n += 1.0;
        }
        total / n
    }

    #[test]
    fn zero_smoothing_is_mean_nll() {
        let data = vec![0.5, 1.0, -1.0, 2.0, 0.0, 0.3, 0.3, -0.2];
        let l = label_smoothed_loss(&logits(1, 2, 4, data.clone()), &[3, 1], 0.0, 0);
        let nll = |row: &[f64], y: usize| log_sum_exp(row) - row[y];
        let expect = (nll(&data[..4], 3) + nll(&data[4..], 1)) / 2.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        for eps in [0.0, 0.1, 0.2, 0.9] {
            let l = label_smoothed_loss(&logits(1, 3, 6, vec![0.7; 18]), &[1, 2, 5], eps, 0);
            assert!((l - 6f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn random_case_matches_oracle() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7919) % 97) as f64 / 17.0 - 2.5).collect();
        let targets = [1, 3, 0, 2, 2, 0];
        for eps in [0.0, 0.1, 0.2] {
            let got = label_smoothed_loss(&logits(2, 3, 4, data.clone()), &targets, eps, 0);
            assert!((got - oracle(&data, &targets, 4, eps, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn pad_positions_do_not_contribute() {
        let mut data: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let a = label_smoothed_loss(&logits(1, 3, 4, data.clone()), &[1, 0, 0], 0.1, 0);
        data[4..].iter_mut().for_each(|x| *x *= 10.0);
        let b = label_smoothed_loss(&logits(1, 3, 4, data), &[1, 0, 0], 0.1, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = 5;
        let mut data: Vec<f64> = (0..10).map(|i| (i as f64 * 1.3).cos()).collect();
        let targets = [2, 4];
        let mut g = vec![0.0; 10];
        label_smoothed_rows(&data, &targets, v, 0.1, 0, Some(&mut g), 1.0);
        let h = 1e-6;
        for i in 0..data.len() {
            let x = data[i];
            data[i] = x + h;
            let up = label_smoothed_rows(&data, &targets, v, 0.1, 0, None, 1.0).0;
            data[i] = x - h;
            let down = label_smoothed_rows(&data, &targets, v, 0.1, 0, None, 1.0).0;
            data[i] = x;
            assert!(((up - down) / (2.0 * h) - g[i]).abs() < 1e-7);
        }
    }
}
