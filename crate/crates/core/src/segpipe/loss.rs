//! Segmentation losses on per-class logits.
//!
//! Every loss takes a `P x C` logit map, applies the sigmoid internally and
//! treats each channel as a binary problem. Per-pixel terms are averaged
//! over valid pixels, then over channels. Gradients are analytic.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Weights of the three loss terms and the focal exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 1.0,
            lambda_focal: 20.0,
            lambda_dice: 1.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_focal", self.lambda_focal),
            ("lambda_dice", self.lambda_dice),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name}"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Binary targets per channel plus a validity mask over pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// `P x C` one-hot (or any values in `[0, 1]`).
    pub onehot: Mat,
    /// Pixels that contribute to the loss.
    pub valid: Vec<bool>,
}

impl Targets {
    /// Builds targets for `channels` (class ids, in column order) from
    /// per-pixel labels. `None` marks an ignored pixel; a label outside
    /// `channels` is a negative for every channel.
    pub fn from_labels(labels: &[Option<usize>], channels: &[usize]) -> Self {
        let onehot = Mat::from_fn(labels.len(), channels.len(), |p, c| {
            f64::from(u8::from(labels[p] == Some(channels[c])))
        });
        Targets {
            onehot,
            valid: labels.iter().map(Option::is_some).collect(),
        }
    }

    /// All pixels valid.
    pub fn dense(onehot: Mat) -> Self {
        let valid = vec![true; onehot.rows()];
        Targets { onehot, valid }
    }

    fn check(&self, op: &'static str, logits: &Mat) -> Result<usize> {
        if logits.shape() != self.onehot.shape() || self.valid.len() != logits.rows() {
            return Err(Error::shape(
                op,
                format!("{}x{} logits", self.onehot.rows(), self.onehot.cols()),
                format!("{}x{}", logits.rows(), logits.cols()),
            ));
        }
        if !logits.is_finite() {
            return Err(Error::Evaluation(format!("{op}: non-finite logits")));
        }
        let n = self.valid.iter().filter(|&&v| v).count();
        if n == 0 || logits.cols() == 0 {
            return Err(Error::Input(format!("{op}: no valid pixels or channels")));
        }
        Ok(n)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn pointwise(logits: &Mat, t: &Targets, n_valid: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> (f64, Mat) {
    let (p, c) = logits.shape();
    let norm = 1.0 / (n_valid as f64 * c as f64);
    let mut total = 0.0;
    let mut grad = Mat::zeros(p, c);
    for i in (0..p).filter(|&i| t.valid[i]) {
        for j in 0..c {
            let (v, g) = f(logits[(i, j)], t.onehot[(i, j)]);
            total += v;
            grad[(i, j)] = g * norm;
        }
    }
    (total * norm, grad)
}

/// Binary cross-entropy on `sigmoid(logits)`.
pub fn ce_loss(logits: &Mat, t: &Targets) -> Result<(f64, Mat)> {
    let n = t.check("ce_loss", logits)?;
    Ok(pointwise(logits, t, n, |z, y| {
        // -log p = softplus(-z), -log(1-p) = softplus(z)
        (y * softplus(-z) + (1.0 - y) * softplus(z), sigmoid(z) - y)
    }))
}

/// Focal loss with exponent `gamma` on `sigmoid(logits)`.
pub fn focal_loss(logits: &Mat, t: &Targets, gamma: f64) -> Result<(f64, Mat)> {
    let n = t.check("focal_loss", logits)?;
    Ok(pointwise(logits, t, n, |z, y| {
        let p = sigmoid(z);
        let q = sigmoid(-z);
        let (log_p, log_q) = (-softplus(-z), -softplus(z));
        let f1 = q.powf(gamma) * log_p;
        let f2 = p.powf(gamma) * log_q;
        let df1 = q.powf(gamma) * (q - gamma * p * log_p);
        let df2 = p.powf(gamma) * (gamma * q * log_q - p);
        (-(y * f1 + (1.0 - y) * f2), -(y * df1 + (1.0 - y) * df2))
    }))
}

/// `1 - 2 sum(y p) / (sum(y^2) + sum(p^2))` per channel over valid pixels,
/// `p = sigmoid(logits)`, averaged over channels.
pub fn dice_loss(logits: &Mat, t: &Targets) -> Result<(f64, Mat)> {
    t.check("dice_loss", logits)?;
    let (rows, c) = logits.shape();
    let mut total = 0.0;
    let mut grad = Mat::zeros(rows, c);
    for j in 0..c {
        let (mut inter, mut denom) = (0.0, 0.0);
        for i in (0..rows).filter(|&i| t.valid[i]) {
            let (p, y) = (sigmoid(logits[(i, j)]), t.onehot[(i, j)]);
            inter += y * p;
            denom += y * y + p * p;
        }
        if denom == 0.0 {
            continue;
        }
        total += 1.0 - 2.0 * inter / denom;
        for i in (0..rows).filter(|&i| t.valid[i]) {
            let z = logits[(i, j)];
            let (p, y) = (sigmoid(z), t.onehot[(i, j)]);
            let dp = -2.0 * (y * denom - 2.0 * inter * p) / (denom * denom);
            grad[(i, j)] = dp * p * sigmoid(-z) / c as f64;
        }
    }
    Ok((total / c as f64, grad))
}

/// Value of each term of one segmentation loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub ce: f64,
    pub focal: f64,
    pub dice: f64,
}

/// Weighted sum of the three terms with its gradient.
pub fn seg_loss(logits: &Mat, t: &Targets, w: &LossWeights) -> Result<(f64, LossParts, Mat)> {
    w.validate()?;
    let (ce, g_ce) = ce_loss(logits, t)?;
    let (focal, g_focal) = focal_loss(logits, t, w.gamma)?;
    let (dice, g_dice) = dice_loss(logits, t)?;
    let value = w.lambda_ce * ce + w.lambda_focal * focal + w.lambda_dice * dice;
    let grad = Mat::from_fn(logits.rows(), logits.cols(), |r, c| {
        w.lambda_ce * g_ce[(r, c)] + w.lambda_focal * g_focal[(r, c)] + w.lambda_dice * g_dice[(r, c)]
    });
    Ok((value, LossParts { ce, focal, dice }, grad))
}

/// Both prediction paths scored against the same targets.
#[derive(Debug, Clone)]
pub struct LossTotal {
    pub value: f64,
    pub decoder: LossParts,
    pub scoremap: LossParts,
    pub decoder_grad: Mat,
    pub scoremap_grad: Mat,
}

/// `seg(decoder) + seg(scoremap)`.
pub fn loss_total(decoder_logits: &Mat, scoremap_logits: &Mat, t: &Targets, w: &LossWeights) -> Result<LossTotal> {
    let (a, decoder, decoder_grad) = seg_loss(decoder_logits, t, w)?;
    let (b, scoremap, scoremap_grad) = seg_loss(scoremap_logits, t, w)?;
    Ok(LossTotal {
        value: a + b,
        decoder,
        scoremap,
        decoder_grad,
        scoremap_grad,
    })
}
