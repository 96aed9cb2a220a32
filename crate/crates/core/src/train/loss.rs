//! Discriminative and generative losses over score vectors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_logit_term, log_softmax_rows, sigmoid_scalar, softmax_rows, Graph, Tensor, TensorError, Var};

/// Normalization used inside the generative KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KlKind {
    /// KL between softmax distributions over all candidates.
    #[default]
    Softmax,
    /// Mean per-candidate KL between independent Bernoulli(sigmoid) laws.
    Bernoulli,
}

/// Multi-hot target: 1 for every known training tail.
pub fn label_vector(n: usize, positives: &[usize], smoothing: f64) -> Tensor {
    let mut y = Tensor::zeros(&[1, n]);
    for &t in positives {
        y.data_mut()[t] = 1.0;
    }
    if smoothing > 0.0 {
        let floor = smoothing / n as f64;
        y.data_mut().iter_mut().for_each(|v| *v = *v * (1.0 - smoothing) + floor);
    }
    y
}

/// Mean binary cross-entropy of logits against `y`, stabilized in logit space.
pub fn bce_loss(g: &mut Graph, x: Var, y: &Tensor) -> Result<Var, TensorError> {
    g.bce_with_logits(x, y)
}

/// Plain evaluation of [`bce_loss`].
pub fn bce_value(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| bce_logit_term(a, b)).sum::<f64>() / x.len() as f64
}

/// `KL(p(target) || p(pred))` where `target` is a fixed score vector; no
/// gradient reaches the target. Batched inputs give the mean over rows.
pub fn kl_loss(g: &mut Graph, target: &Tensor, pred: Var, kind: KlKind) -> Result<Var, TensorError> {
    match kind {
        KlKind::Softmax => {
            let n = target.cols();
            let rows = target.rows() as f64;
            let p = softmax_rows(target.data(), n);
            let log_p = log_softmax_rows(target.data(), n);
            let entropy_term: f64 = p.iter().zip(&log_p).map(|(a, b)| a * b).sum();
            let p = g.constant(Tensor::new(target.shape().to_vec(), p)?)?;
            let log_q = g.log_softmax(pred)?;
            let cross = g.mul(log_q, p)?;
            let cross = g.sum(cross)?;
            let c = g.constant(Tensor::scalar(entropy_term))?;
            let total = g.sub(c, cross)?;
            if rows == 1.0 {
                Ok(total)
            } else {
                g.scale(total, 1.0 / rows)
            }
        }
        KlKind::Bernoulli => {
            let p: Vec<f64> = target.data().iter().map(|&x| sigmoid_scalar(x)).collect();
            // KL = CE(p, q) - H(p); both are means over candidates
            let entropy = bce_value(target.data(), &p);
            let p = Tensor::new(target.shape().to_vec(), p)?;
            let ce = g.bce_with_logits(pred, &p)?;
            let c = g.constant(Tensor::scalar(entropy))?;
            g.sub(ce, c)
        }
    }
}

/// Plain evaluation of the softmax KL.
pub fn kl_value(target: &[f64], pred: &[f64]) -> f64 {
    let n = target.len();
    let p = softmax_rows(target, n);
    let lp = log_softmax_rows(target, n);
    let lq = log_softmax_rows(pred, n);
    p.iter().zip(lp.iter().zip(&lq)).map(|(p, (a, b))| p * a - p * b).sum()
}
