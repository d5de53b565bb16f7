//! Connectionist Temporal Classification: the collapse rule, the
//! forward–backward loss over the blank-interleaved label, and its exact
//! gradient with respect to pre-softmax logits.
//!
//! All recursions run in log space with log-sum-exp so that exact-zero
//! probabilities stay at `-inf` instead of producing NaN.

use crate::numerics::{softmax_rows, Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Per-frame symbol posteriors: a `T×(C+1)` matrix whose last class is the
/// CTC blank. Every row lies in `[0,1]` and sums to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    probs: Tensor,
}

impl ProbMatrix {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 2 || probs.cols() < 2 {
            return Err(Error::Contract(format!(
                "probability matrix must be T×(C+1) with C ≥ 1, got {:?}",
                probs.shape()
            )));
        }
        let (t, c) = (probs.rows(), probs.cols());
        for r in 0..t {
            let mut sum = 0.0;
            for j in 0..c {
                let v = probs.at2(r, j);
                if !(0.0..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::Contract(format!(
                        "probability {v} at ({r},{j}) outside [0,1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("row {r} sums to {sum}, not 1")));
            }
        }
        Ok(ProbMatrix { probs })
    }

    /// Softmax of a `T×(C+1)` logit matrix.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        ProbMatrix::new(softmax_rows(logits))
    }

    pub fn t_steps(&self) -> usize {
        self.probs.rows()
    }

    /// Number of classes including the blank.
    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    /// Index of the blank class (always the last one).
    pub fn blank(&self) -> usize {
        self.probs.cols() - 1
    }

    pub fn prob(&self, t: usize, class: usize) -> f64 {
        self.probs.at2(t, class)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.probs
    }
}

/// A decoded symbol sequence: charset indices, never containing the blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Label(Vec<usize>);

impl Label {
    pub fn new(symbols: Vec<usize>) -> Self {
        Label(symbols)
    }

    pub fn empty() -> Self {
        Label(Vec::new())
    }

    pub fn symbols(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal pairs; a label needs `len + repeats` frames.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Collapses a frame-level path to a label: merge adjacent repeats first,
/// then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Label {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    Label(out)
}

/// CTC loss value and its gradient.
#[derive(Debug, Clone)]
pub struct CtcLoss {
    /// `-ln` of the total probability over all paths collapsing to the label.
    pub loss: f64,
    /// Gradient of the loss w.r.t. the pre-softmax logits that produced the
    /// probability matrix (the fused softmax+CTC rule `y - γ`).
    pub logit_grad: Tensor,
}

/// Forward–backward CTC loss of `label` under `m`.
///
/// Infeasible labels (needing more frames than available) are an error
/// rather than an infinite loss, so dataset problems surface immediately.
pub fn ctc_loss(m: &ProbMatrix, label: &Label) -> Result<CtcLoss> {
    let t_steps = m.t_steps();
    let repeats = label.adjacent_repeats();
    if label.len() + repeats > t_steps {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats,
            t_steps,
        });
    }
    if let Some(&bad) = label.symbols().iter().find(|&&s| s >= m.blank()) {
        return Err(Error::Contract(format!(
            "label symbol {bad} out of range for {} classes",
            m.blank()
        )));
    }

    let blank = m.blank();
    // Extended label: blanks interleaved around every symbol.
    let ext: Vec<usize> = {
        let mut e = Vec::with_capacity(2 * label.len() + 1);
        e.push(blank);
        for &s in label.symbols() {
            e.push(s);
            e.push(blank);
        }
        e
    };
    let s_len = ext.len();
    let lp = |t: usize, class: usize| m.prob(t, class).ln();

    // alpha[t][s]: log prob of prefixes ending at ext position s after
    // emitting frame t (emission at t included).
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_steps];
    alpha[0][0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp(0, ext[1]);
    }
    for t in 1..t_steps {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + lp(t, ext[s]);
        }
    }
    let log_p = log_add(
        alpha[t_steps - 1][s_len - 1],
        if s_len > 1 {
            alpha[t_steps - 1][s_len - 2]
        } else {
            f64::NEG_INFINITY
        },
    );

    // beta[t][s]: log prob of completing the label from position s after
    // frame t (emission at t excluded).
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_steps];
    beta[t_steps - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_steps - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_steps - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[t + 1][s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t][s] = acc;
        }
    }

    // Fused softmax+CTC gradient: dL/du[t,k] = y[t,k] - γ[t,k] where γ is
    // the posterior mass of class k at frame t.
    let num_classes = m.num_classes();
    let mut grad = Tensor::zeros(vec![t_steps, num_classes]);
    for t in 0..t_steps {
        let mut gamma = vec![f64::NEG_INFINITY; num_classes];
        for s in 0..s_len {
            let ab = alpha[t][s] + beta[t][s];
            gamma[ext[s]] = log_add(gamma[ext[s]], ab);
        }
        for (k, &log_gamma) in gamma.iter().enumerate() {
            let posterior = if log_gamma == f64::NEG_INFINITY {
                0.0
            } else {
                (log_gamma - log_p).exp()
            };
            grad.set2(t, k, m.prob(t, k) - posterior);
        }
    }

    Ok(CtcLoss {
        loss: -log_p,
        logit_grad: grad,
    })
}

/// Adds a scalar CTC loss node to `graph`. `logits` must be a `T×(C+1)`
/// pre-softmax matrix; the node's backward rule is the exact fused gradient.
pub fn ctc_loss_node(graph: &mut Graph, logits: NodeId, label: &Label) -> Result<NodeId> {
    let m = ProbMatrix::from_logits(graph.value(logits))?;
    let result = ctc_loss(&m, label)?;
    let grad = result.logit_grad;
    Ok(graph.custom(vec![logits], Tensor::scalar(result.loss), move |g| {
        vec![grad.map(|v| v * g.item())]
    }))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> ProbMatrix {
        let t = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cloned()).collect();
        ProbMatrix::new(Tensor::from_vec(vec![t, c], data).unwrap()).unwrap()
    }

    /// Brute-force CTC: sum the probability of every (C+1)^T path whose
    /// collapse equals the label.
    pub(crate) fn brute_force_prob(m: &ProbMatrix, label: &Label) -> f64 {
        let t = m.t_steps();
        let c = m.num_classes();
        let blank = m.blank();
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            if collapse(&path, blank) == *label {
                let p: f64 = (0..t).map(|i| m.prob(i, path[i])).product();
                total += p;
            }
            // odometer increment
            let mut i = 0;
            loop {
                if i == t {
                    return total;
                }
                path[i] += 1;
                if path[i] < c {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn collapse_merges_repeats_then_removes_blanks() {
        // classes: a=0, b=1, blank=2
        assert_eq!(collapse(&[0, 0, 2, 1], 2), Label::new(vec![0, 1]));
        assert_eq!(collapse(&[0, 2, 0], 2), Label::new(vec![0, 0]));
        assert_eq!(collapse(&[2, 2], 2), Label::empty());
    }

    #[test]
    fn single_frame_single_path() {
        let m = matrix(&[&[0.7, 0.3]]);
        let out = ctc_loss(&m, &Label::new(vec![0])).unwrap();
        assert!((out.loss - (-(0.7f64).ln())).abs() <= 1e-12);
    }

    #[test]
    fn two_frame_example_sums_three_paths() {
        // paths {aa, a·, ·a} → 0.6·0.5 + 0.6·0.5 + 0.4·0.5 = 0.8
        let m = matrix(&[&[0.6, 0.4], &[0.5, 0.5]]);
        let out = ctc_loss(&m, &Label::new(vec![0])).unwrap();
        assert!((out.loss - (-(0.8f64).ln())).abs() <= 1e-12);
        assert!((out.loss - 0.22314).abs() <= 1e-5);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let t = rng.gen_range(1..=5);
            let c = rng.gen_range(1..=3);
            let logits = Tensor::from_vec(
                vec![t, c + 1],
                (0..t * (c + 1)).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let m = ProbMatrix::from_logits(&logits).unwrap();
            let max_len = t.min(3);
            let len = rng.gen_range(0..=max_len);
            let label = Label::new((0..len).map(|_| rng.gen_range(0..c)).collect());
            if label.len() + label.adjacent_repeats() > t {
                continue;
            }
            let expect = brute_force_prob(&m, &label);
            let got = ctc_loss(&m, &label).unwrap();
            assert!(
                ((-got.loss).exp() - expect).abs() <= 1e-9,
                "exp(-loss)={} brute={}",
                (-got.loss).exp(),
                expect
            );
        }
    }

    #[test]
    fn infeasible_label_is_an_error_not_infinity() {
        let m = matrix(&[&[0.5, 0.5]]);
        let err = ctc_loss(&m, &Label::new(vec![0, 0])).unwrap_err();
        assert!(matches!(err, Error::InfeasibleLabel { .. }));
    }

    #[test]
    fn zero_probabilities_never_produce_nan() {
        let m = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = ctc_loss(&m, &Label::new(vec![0])).unwrap();
        assert!(!out.loss.is_nan());
        assert!((out.loss - 0.0).abs() <= 1e-12); // only path: a then blank
        assert!(out.logit_grad.all_finite());

        // label with zero total mass: loss is +inf, still not NaN
        let m2 = matrix(&[&[0.0, 1.0]]);
        let out2 = ctc_loss(&m2, &Label::new(vec![0])).unwrap();
        assert!(out2.loss.is_infinite() && out2.loss > 0.0);
        assert!(!out2.loss.is_nan());
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_when_mass_concentrates() {
        let m = matrix(&[&[0.9, 0.1], &[0.8, 0.2]]);
        let out = ctc_loss(&m, &Label::new(vec![0])).unwrap();
        assert!(out.loss >= 0.0);
        assert!(out.loss > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::numerics::{finite_difference_grad, max_relative_error};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let t = rng.gen_range(2..=6);
            let c = rng.gen_range(1..=4);
            let logits = Tensor::from_vec(
                vec![t, c + 1],
                (0..t * (c + 1)).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let len = rng.gen_range(1..=t.min(3));
            let label = Label::new((0..len).map(|_| rng.gen_range(0..c)).collect());
            if label.len() + label.adjacent_repeats() > t {
                continue;
            }
            let label2 = label.clone();
            let fd = finite_difference_grad(
                move |inputs: &[Tensor]| {
                    let m = ProbMatrix::from_logits(&inputs[0])?;
                    Ok(ctc_loss(&m, &label2)?.loss)
                },
                std::slice::from_ref(&logits),
                1e-5,
            )
            .unwrap();
            let m = ProbMatrix::from_logits(&logits).unwrap();
            let got = ctc_loss(&m, &label).unwrap();
            assert!(
                max_relative_error(&got.logit_grad, &fd[0]) <= 1e-6,
                "ctc gradient deviates from finite differences"
            );
        }
    }

    #[test]
    fn graph_node_backpropagates_fused_gradient() {
        let mut g = Graph::new();
        let logits =
            g.leaf(Tensor::from_vec(vec![2, 2], vec![0.3, -0.2, 0.1, 0.4]).unwrap());
        let label = Label::new(vec![0]);
        let loss = ctc_loss_node(&mut g, logits, &label).unwrap();
        g.backward(loss).unwrap();
        let m = ProbMatrix::from_logits(g.value(logits)).unwrap();
        let direct = ctc_loss(&m, &label).unwrap();
        assert_eq!(g.grad(logits).unwrap().data(), direct.logit_grad.data());
    }
}
