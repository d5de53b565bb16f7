//! Neural building blocks: convolution (plain, gated, depthwise-separable),
//! LSTM and bidirectional LSTM, batch normalization, pooling, dense layers
//! and dropout. Each layer composes ops on a [`Graph`], so gradients come
//! from the shared reverse pass and can be checked against finite
//! differences layer by layer.

use crate::numerics::{Graph, NodeId, Padding, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Geometry of a 2-D convolution. Weights are stored
/// `[kernel_h, kernel_w, in_channels, out_channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2DSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

impl Conv2DSpec {
    /// Square stride-1 same-padded convolution, the most common block here.
    pub fn same(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Conv2DSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            stride_h: 1,
            stride_w: 1,
            padding: Padding::Same,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.kernel_h,
            self.kernel_w,
            self.in_channels,
            self.out_channels,
        ]
    }

    /// Output spatial dims for an input of `h`×`w`.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.padding {
            Padding::Same => (h.div_ceil(self.stride_h), w.div_ceil(self.stride_w)),
            Padding::Valid => (
                (h - self.kernel_h) / self.stride_h + 1,
                (w - self.kernel_w) / self.stride_w + 1,
            ),
        }
    }
}

/// Run direction of an LSTM layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LSTMSpec {
    pub input_size: usize,
    pub hidden_size: usize,
    pub direction: Direction,
}

impl LSTMSpec {
    /// Feature size of the output sequence; both directions of a
    /// bidirectional layer are concatenated depth-wise.
    pub fn output_size(&self) -> usize {
        match self.direction {
            Direction::Bidirectional => 2 * self.hidden_size,
            _ => self.hidden_size,
        }
    }
}

/// Weights of one LSTM direction. The gate axis is ordered
/// `[input, forget, cell, output]`, each block `hidden_size` wide.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirParams {
    /// `[input_size, 4*hidden]` input projection.
    pub wx: NodeId,
    /// `[hidden, 4*hidden]` recurrent projection.
    pub wh: NodeId,
    /// `[4*hidden]` bias.
    pub bias: NodeId,
}

/// Parameters for [`lstm_forward`]; `backward` is required for backward and
/// bidirectional runs.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub forward: LstmDirParams,
    pub backward: Option<LstmDirParams>,
}

/// Training/inference switch for layers that behave differently per mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn conv2d(
    g: &mut Graph,
    x: NodeId,
    spec: &Conv2DSpec,
    weights: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    check_conv_input(g, x, spec)?;
    g.conv2d(
        x,
        weights,
        bias,
        (spec.stride_h, spec.stride_w),
        spec.padding,
    )
}

/// Convolution modulated by a sigmoid gate computed from a parallel
/// convolution over the same input: `conv(x; f) ∘ σ(conv(x; g))`.
pub fn gated_conv2d(
    g: &mut Graph,
    x: NodeId,
    spec: &Conv2DSpec,
    weights_feature: NodeId,
    bias_feature: NodeId,
    weights_gate: NodeId,
    bias_gate: NodeId,
) -> Result<NodeId> {
    let feature = conv2d(g, x, spec, weights_feature, bias_feature)?;
    let gate_pre = conv2d(g, x, spec, weights_gate, bias_gate)?;
    let gate = g.sigmoid(gate_pre);
    g.mul(feature, gate)
}

/// Depthwise convolution followed by a 1×1 pointwise convolution, the
/// MobileNet block core; normalization and activation are the caller's.
/// `depth_weights` is `[kh, kw, c]`, `point_weights` is `[1, 1, c, out]`.
pub fn depthwise_separable_conv(
    g: &mut Graph,
    x: NodeId,
    spec: &Conv2DSpec,
    depth_weights: NodeId,
    depth_bias: NodeId,
    point_weights: NodeId,
    point_bias: NodeId,
) -> Result<NodeId> {
    check_conv_input(g, x, spec)?;
    let dw = g.depthwise_conv2d(
        x,
        depth_weights,
        depth_bias,
        (spec.stride_h, spec.stride_w),
        spec.padding,
    )?;
    g.conv2d(dw, point_weights, point_bias, (1, 1), Padding::Same)
}

fn check_conv_input(g: &Graph, x: NodeId, spec: &Conv2DSpec) -> Result<()> {
    let shape = g.value(x).shape();
    if shape.len() != 3 || shape[2] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv input channels",
            left: shape.to_vec(),
            right: spec.weight_shape(),
        });
    }
    Ok(())
}

/// Standard LSTM over a `[T, input_size]` sequence with zero initial state.
/// Bidirectional layers run the reversed sequence through the backward
/// parameters and concatenate both outputs depth-wise, time-aligned.
pub fn lstm_forward(
    g: &mut Graph,
    seq: NodeId,
    spec: &LSTMSpec,
    params: &LstmParams,
) -> Result<NodeId> {
    let shape = g.value(seq).shape().to_vec();
    if shape.len() != 2 || shape[1] != spec.input_size {
        return Err(Error::ShapeMismatch {
            op: "lstm input",
            left: shape,
            right: vec![spec.input_size],
        });
    }
    if g.value(seq).rows() == 0 {
        return Ok(g.leaf(Tensor::zeros(vec![0, spec.output_size()])));
    }
    match spec.direction {
        Direction::Forward => lstm_direction(g, seq, spec.hidden_size, &params.forward),
        Direction::Backward => {
            let dir = params.backward.unwrap_or(params.forward);
            let rev = g.reverse_rows(seq)?;
            let out = lstm_direction(g, rev, spec.hidden_size, &dir)?;
            g.reverse_rows(out)
        }
        Direction::Bidirectional => {
            let bwd = params.backward.ok_or_else(|| {
                Error::Config("bidirectional LSTM needs backward parameters".into())
            })?;
            let fwd_out = lstm_direction(g, seq, spec.hidden_size, &params.forward)?;
            let rev = g.reverse_rows(seq)?;
            let bwd_raw = lstm_direction(g, rev, spec.hidden_size, &bwd)?;
            let bwd_out = g.reverse_rows(bwd_raw)?;
            g.concat_cols(&[fwd_out, bwd_out])
        }
    }
}

fn lstm_direction(g: &mut Graph, seq: NodeId, hidden: usize, p: &LstmDirParams) -> Result<NodeId> {
    let t_steps = g.value(seq).rows();
    let xw = g.matmul(seq, p.wx)?;
    let xw = g.add_bias_rows(xw, p.bias)?;
    let mut h_prev = g.leaf(Tensor::zeros(vec![1, hidden]));
    let mut c_prev = g.leaf(Tensor::zeros(vec![1, hidden]));
    let mut outputs = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let hw = g.matmul(h_prev, p.wh)?;
        let xt = g.slice_rows(xw, t, 1)?;
        let z = g.add(xt, hw)?;
        let zi = g.slice_cols(z, 0, hidden)?;
        let zf = g.slice_cols(z, hidden, hidden)?;
        let zc = g.slice_cols(z, 2 * hidden, hidden)?;
        let zo = g.slice_cols(z, 3 * hidden, hidden)?;
        let gate_i = g.sigmoid(zi);
        let gate_f = g.sigmoid(zf);
        let cand = g.tanh(zc);
        let gate_o = g.sigmoid(zo);
        let keep = g.mul(gate_f, c_prev)?;
        let write = g.mul(gate_i, cand)?;
        let c = g.add(keep, write)?;
        let c_act = g.tanh(c);
        let h = g.mul(gate_o, c_act)?;
        outputs.push(h);
        h_prev = h;
        c_prev = c;
    }
    g.concat_rows(&outputs)
}

/// Batch normalization in inference mode: a per-channel affine map frozen
/// to the stored running statistics.
pub fn batchnorm_infer(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<NodeId> {
    let xv = g.value(x);
    if xv.shape().len() != 3 {
        return Err(Error::Contract("batchnorm expects an [H,W,C] input".into()));
    }
    let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    if running_mean.len() != c || running_var.len() != c || g.value(gamma).len() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm stats",
            left: vec![c],
            right: vec![running_mean.len()],
        });
    }
    let inv: Vec<f64> = running_var
        .iter()
        .map(|&v| 1.0 / (v + eps).sqrt())
        .collect();
    let gv = g.value(gamma).data().to_vec();
    let bv = g.value(beta).data().to_vec();
    let mut out = Tensor::zeros(vec![h, w, c]);
    let mut x_hat = Tensor::zeros(vec![h, w, c]);
    {
        let xv = g.value(x);
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let xh = (xv.at3(y, xx, ch) - running_mean[ch]) * inv[ch];
                    x_hat.set3(y, xx, ch, xh);
                    out.set3(y, xx, ch, gv[ch] * xh + bv[ch]);
                }
            }
        }
    }
    let scale: Vec<f64> = gv.iter().zip(&inv).map(|(&gm, &iv)| gm * iv).collect();
    Ok(g.custom(vec![x, gamma, beta], out, move |go| {
        let mut dx = Tensor::zeros(vec![h, w, c]);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let gval = go.at3(y, xx, ch);
                    dx.set3(y, xx, ch, gval * scale[ch]);
                    dgamma[ch] += gval * x_hat.at3(y, xx, ch);
                    dbeta[ch] += gval;
                }
            }
        }
        vec![
            dx,
            Tensor::from_vec(vec![c], dgamma).unwrap(),
            Tensor::from_vec(vec![c], dbeta).unwrap(),
        ]
    }))
}

/// 2×2 stride-2 max pooling; trailing odd rows/columns are truncated.
pub fn maxpool2x2(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    g.maxpool(x, 2, 2)
}

pub fn avgpool_global(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    g.avgpool_global(x)
}

/// Fully connected layer over a `[T, in]` matrix: `x·W + b` per row.
pub fn dense(g: &mut Graph, x: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, weights)?;
    g.add_bias_rows(y, bias)
}

pub fn relu(g: &mut Graph, x: NodeId) -> NodeId {
    g.relu(x)
}

/// Inverted dropout: active only in training mode, where kept units are
/// scaled by `1/(1-p)`. In eval mode this is exactly the identity.
pub fn dropout(
    g: &mut Graph,
    x: NodeId,
    p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability {p} not in [0,1)"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 - p;
    let n: usize = shape.iter().product();
    let mask = Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect(),
    )?;
    g.mul_const(x, mask)
}

/// Glorot-uniform initialization in `±sqrt(6/(fan_in+fan_out))`.
pub fn glorot_uniform(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-limit..limit)).collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, max_relative_error};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_1x1_identity_weight_passes_input_through() {
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(vec![4, 5, 1], &mut rng(1)));
        let w = g.leaf(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf(Tensor::zeros(vec![1]));
        let spec = Conv2DSpec::same(1, 1, 1);
        let y = conv2d(&mut g, x, &spec, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_ones_kernel_on_constant_image_sums_window() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![5, 5, 1], 1.0));
        let w = g.leaf(Tensor::filled(vec![3, 3, 1, 1], 1.0));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let spec = Conv2DSpec {
            padding: Padding::Valid,
            ..Conv2DSpec::same(3, 1, 1)
        };
        let y = conv2d(&mut g, x, &spec, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 3, 1]);
        assert!(g.value(y).data().iter().all(|&v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut r = rng(42);
        let x = random_tensor(vec![6, 6, 2], &mut r);
        let w = random_tensor(vec![3, 3, 2, 4], &mut r);
        let b = random_tensor(vec![4], &mut r);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let wn = g.leaf(w.clone());
        let bn = g.leaf(b.clone());
        let spec = Conv2DSpec {
            padding: Padding::Valid,
            ..Conv2DSpec::same(3, 2, 4)
        };
        let y = conv2d(&mut g, xn, &spec, wn, bn).unwrap();
        // direct six-loop cross-correlation
        for oy in 0..4 {
            for ox in 0..4 {
                for co in 0..4 {
                    let mut acc = b.data()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for ci in 0..2 {
                                acc += x.at3(oy + ky, ox + kx, ci) * w.at4(ky, kx, ci, co);
                            }
                        }
                    }
                    assert!((g.value(y).at3(oy, ox, co) - acc).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![4, 4, 3]));
        let w = g.leaf(Tensor::zeros(vec![3, 3, 2, 4]));
        let b = g.leaf(Tensor::zeros(vec![4]));
        let err = conv2d(&mut g, x, &Conv2DSpec::same(3, 2, 4), w, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn gated_conv_saturated_gate_reduces_to_plain_conv() {
        let mut r = rng(3);
        let x = random_tensor(vec![5, 5, 1], &mut r);
        let wf = random_tensor(vec![3, 3, 1, 2], &mut r);
        let bf = random_tensor(vec![2], &mut r);
        let spec = Conv2DSpec::same(3, 1, 2);

        let run_gated = |gate_bias: f64| {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let wfn = g.leaf(wf.clone());
            let bfn = g.leaf(bf.clone());
            let wgn = g.leaf(Tensor::zeros(vec![3, 3, 1, 2]));
            let bgn = g.leaf(Tensor::filled(vec![2], gate_bias));
            let y = gated_conv2d(&mut g, xn, &spec, wfn, bfn, wgn, bgn).unwrap();
            g.value(y).clone()
        };
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let wfn = g.leaf(wf.clone());
        let bfn = g.leaf(bf.clone());
        let plain = conv2d(&mut g, xn, &spec, wfn, bfn).unwrap();

        let saturated = run_gated(50.0);
        for (a, b) in saturated.data().iter().zip(g.value(plain).data()) {
            assert!((a - b).abs() <= 1e-9);
        }
        let closed = run_gated(-50.0);
        assert!(closed.data().iter().all(|&v| v.abs() <= 1e-9));
    }

    #[test]
    fn gated_conv_matches_composition_oracle() {
        let mut r = rng(9);
        let x = random_tensor(vec![4, 6, 2], &mut r);
        let wf = random_tensor(vec![3, 3, 2, 3], &mut r);
        let bf = random_tensor(vec![3], &mut r);
        let wg = random_tensor(vec![3, 3, 2, 3], &mut r);
        let bg = random_tensor(vec![3], &mut r);
        let spec = Conv2DSpec::same(3, 2, 3);

        let mut g = Graph::new();
        let (xn, wfn, bfn, wgn, bgn) = (
            g.leaf(x.clone()),
            g.leaf(wf.clone()),
            g.leaf(bf.clone()),
            g.leaf(wg.clone()),
            g.leaf(bg.clone()),
        );
        let y = gated_conv2d(&mut g, xn, &spec, wfn, bfn, wgn, bgn).unwrap();

        let mut g2 = Graph::new();
        let (xn2, wfn2, bfn2, wgn2, bgn2) = (
            g2.leaf(x),
            g2.leaf(wf),
            g2.leaf(bf),
            g2.leaf(wg),
            g2.leaf(bg),
        );
        let f = conv2d(&mut g2, xn2, &spec, wfn2, bfn2).unwrap();
        let gate = conv2d(&mut g2, xn2, &spec, wgn2, bgn2).unwrap();
        for ((&fv, &gv), &yv) in g2
            .value(f)
            .data()
            .iter()
            .zip(g2.value(gate).data())
            .zip(g.value(y).data())
        {
            let sig = 1.0 / (1.0 + (-gv).exp());
            assert!((fv * sig - yv).abs() <= 1e-12);
        }
    }

    #[test]
    fn depthwise_separable_pointwise_identity_is_depthwise_alone() {
        let mut r = rng(5);
        let x = random_tensor(vec![4, 4, 2], &mut r);
        let dw = random_tensor(vec![3, 3, 2], &mut r);
        let db = random_tensor(vec![2], &mut r);
        // pointwise = channel identity
        let mut pw = Tensor::zeros(vec![1, 1, 2, 2]);
        pw.data_mut()[0] = 1.0;
        pw.data_mut()[3] = 1.0;
        let spec = Conv2DSpec::same(3, 2, 2);

        let mut g = Graph::new();
        let (xn, dwn, dbn) = (g.leaf(x.clone()), g.leaf(dw.clone()), g.leaf(db.clone()));
        let pwn = g.leaf(pw);
        let pbn = g.leaf(Tensor::zeros(vec![2]));
        let y = depthwise_separable_conv(&mut g, xn, &spec, dwn, dbn, pwn, pbn).unwrap();

        let mut g2 = Graph::new();
        let (xn2, dwn2, dbn2) = (g2.leaf(x), g2.leaf(dw), g2.leaf(db));
        let d = g2
            .depthwise_conv2d(xn2, dwn2, dbn2, (1, 1), Padding::Same)
            .unwrap();
        assert_eq!(g.value(y).data(), g2.value(d).data());
    }

    #[test]
    fn depthwise_separable_single_channel_equals_composed_convs() {
        let mut r = rng(6);
        let x = random_tensor(vec![5, 5, 1], &mut r);
        let dw = random_tensor(vec![3, 3, 1], &mut r);
        let pw = random_tensor(vec![1, 1, 1, 1], &mut r);
        let spec = Conv2DSpec::same(3, 1, 1);

        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let dwn = g.leaf(dw.clone());
        let dbn = g.leaf(Tensor::zeros(vec![1]));
        let pwn = g.leaf(pw.clone());
        let pbn = g.leaf(Tensor::zeros(vec![1]));
        let y = depthwise_separable_conv(&mut g, xn, &spec, dwn, dbn, pwn, pbn).unwrap();

        // single in/out channel: same as one conv with the scaled kernel
        let mut g2 = Graph::new();
        let xn2 = g2.leaf(x);
        let wn2 = g2.leaf(
            Tensor::from_vec(
                vec![3, 3, 1, 1],
                dw.data().iter().map(|v| v * pw.data()[0]).collect(),
            )
            .unwrap(),
        );
        let bn2 = g2.leaf(Tensor::zeros(vec![1]));
        let plain = conv2d(&mut g2, xn2, &Conv2DSpec::same(3, 1, 1), wn2, bn2).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g2.value(plain).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn depthwise_separable_matches_naive_loop_oracle() {
        let mut r = rng(7);
        let x = random_tensor(vec![4, 5, 2], &mut r);
        let dw = random_tensor(vec![3, 3, 2], &mut r);
        let db = random_tensor(vec![2], &mut r);
        let pw = random_tensor(vec![1, 1, 2, 3], &mut r);
        let pb = random_tensor(vec![3], &mut r);
        let spec = Conv2DSpec::same(3, 2, 3);

        let mut g = Graph::new();
        let (xn, dwn, dbn, pwn, pbn) = (
            g.leaf(x.clone()),
            g.leaf(dw.clone()),
            g.leaf(db.clone()),
            g.leaf(pw.clone()),
            g.leaf(pb.clone()),
        );
        let y = depthwise_separable_conv(&mut g, xn, &spec, dwn, dbn, pwn, pbn).unwrap();

        for oy in 0..4usize {
            for ox in 0..5usize {
                let mut mid = [0.0f64; 2];
                for (ch, slot) in mid.iter_mut().enumerate() {
                    let mut acc = db.data()[ch];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                acc += x.at3(iy as usize, ix as usize, ch) * dw.at3(ky, kx, ch);
                            }
                        }
                    }
                    *slot = acc;
                }
                for co in 0..3 {
                    let direct =
                        pb.data()[co] + mid[0] * pw.at4(0, 0, 0, co) + mid[1] * pw.at4(0, 0, 1, co);
                    assert!((g.value(y).at3(oy, ox, co) - direct).abs() <= 1e-12);
                }
            }
        }
    }

    fn lstm_leaves(g: &mut Graph, input: usize, hidden: usize, seed: u64) -> LstmDirParams {
        let mut r = rng(seed);
        LstmDirParams {
            wx: {
                let t = random_tensor(vec![input, 4 * hidden], &mut r);
                g.leaf(t)
            },
            wh: {
                let t = random_tensor(vec![hidden, 4 * hidden], &mut r);
                g.leaf(t)
            },
            bias: {
                let t = random_tensor(vec![4 * hidden], &mut r);
                g.leaf(t)
            },
        }
    }

    #[test]
    fn lstm_zero_parameters_give_zero_output() {
        let mut g = Graph::new();
        let seq = g.leaf(random_tensor(vec![4, 3], &mut rng(8)));
        let zero = LstmDirParams {
            wx: g.leaf(Tensor::zeros(vec![3, 8])),
            wh: g.leaf(Tensor::zeros(vec![2, 8])),
            bias: g.leaf(Tensor::zeros(vec![8])),
        };
        let spec = LSTMSpec {
            input_size: 3,
            hidden_size: 2,
            direction: Direction::Forward,
        };
        let y = lstm_forward(
            &mut g,
            seq,
            &spec,
            &LstmParams {
                forward: zero,
                backward: None,
            },
        )
        .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_matches_closed_form_cell() {
        let input = 2;
        let hidden = 2;
        let mut g = Graph::new();
        let x = random_tensor(vec![1, input], &mut rng(10));
        let seq = g.leaf(x.clone());
        let p = lstm_leaves(&mut g, input, hidden, 11);
        let spec = LSTMSpec {
            input_size: input,
            hidden_size: hidden,
            direction: Direction::Forward,
        };
        let wx = g.value(p.wx).clone();
        let bias = g.value(p.bias).clone();
        let y = lstm_forward(
            &mut g,
            seq,
            &spec,
            &LstmParams {
                forward: p,
                backward: None,
            },
        )
        .unwrap();

        // closed form at T=1, zero state: h = σ(z_o)·tanh(σ(z_i)·tanh(z_c))
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..hidden {
            let z = |gate: usize| -> f64 {
                let col = gate * hidden + j;
                bias.data()[col] + (0..input).map(|k| x.at2(0, k) * wx.at2(k, col)).sum::<f64>()
            };
            let expected = sig(z(3)) * (sig(z(0)) * z(2).tanh()).tanh();
            assert!((g.value(y).at2(0, j) - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn bidirectional_on_palindrome_with_shared_params_mirrors() {
        let mut g = Graph::new();
        let palindrome =
            Tensor::from_vec(vec![4, 2], vec![0.3, -0.1, 0.7, 0.2, 0.7, 0.2, 0.3, -0.1]).unwrap();
        let seq = g.leaf(palindrome);
        let p = lstm_leaves(&mut g, 2, 3, 12);
        let spec = LSTMSpec {
            input_size: 2,
            hidden_size: 3,
            direction: Direction::Bidirectional,
        };
        let y = lstm_forward(
            &mut g,
            seq,
            &spec,
            &LstmParams {
                forward: p,
                backward: Some(p),
            },
        )
        .unwrap();
        let out = g.value(y);
        for t in 0..4 {
            for j in 0..3 {
                assert!((out.at2(t, j) - out.at2(3 - t, 3 + j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lstm_empty_sequence_yields_empty_output() {
        let mut g = Graph::new();
        let seq = g.leaf(Tensor::zeros(vec![0, 3]));
        let zero = LstmDirParams {
            wx: g.leaf(Tensor::zeros(vec![3, 8])),
            wh: g.leaf(Tensor::zeros(vec![2, 8])),
            bias: g.leaf(Tensor::zeros(vec![8])),
        };
        let spec = LSTMSpec {
            input_size: 3,
            hidden_size: 2,
            direction: Direction::Forward,
        };
        let y = lstm_forward(
            &mut g,
            seq,
            &spec,
            &LstmParams {
                forward: zero,
                backward: None,
            },
        )
        .unwrap();
        assert_eq!(g.value(y).shape(), &[0, 2]);
    }

    #[test]
    fn dropout_p0_and_eval_mode_are_identity() {
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(vec![3, 3], &mut rng(13)));
        let mut r = rng(14);
        let y = dropout(&mut g, x, 0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let z = dropout(&mut g, x, 0.5, Mode::Eval, &mut r).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn maxpool_2x2_takes_window_max() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = maxpool2x2(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn batchnorm_unit_stats_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(vec![3, 4, 2], &mut rng(15)));
        let gamma = g.leaf(Tensor::filled(vec![2], 1.0));
        let beta = g.leaf(Tensor::zeros(vec![2]));
        let y = batchnorm_infer(&mut g, x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], 1e-9).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn lstm_gradient_matches_finite_differences() {
        let input = 2;
        let hidden = 2;
        let t_steps = 3;
        let mut r = rng(20);
        let seq = random_tensor(vec![t_steps, input], &mut r);
        let wx = random_tensor(vec![input, 4 * hidden], &mut r);
        let wh = random_tensor(vec![hidden, 4 * hidden], &mut r);
        let bias = random_tensor(vec![4 * hidden], &mut r);

        let run = |inputs: &[Tensor]| -> crate::Result<f64> {
            let mut g = Graph::new();
            let seq = g.leaf(inputs[0].clone());
            let p = LstmDirParams {
                wx: g.leaf(inputs[1].clone()),
                wh: g.leaf(inputs[2].clone()),
                bias: g.leaf(inputs[3].clone()),
            };
            let spec = LSTMSpec {
                input_size: input,
                hidden_size: hidden,
                direction: Direction::Bidirectional,
            };
            let y = lstm_forward(
                &mut g,
                seq,
                &spec,
                &LstmParams {
                    forward: p,
                    backward: Some(p),
                },
            )?;
            let loss = g.sum(y);
            Ok(g.value(loss).item())
        };
        let inputs = [seq.clone(), wx.clone(), wh.clone(), bias.clone()];
        let fd = finite_difference_grad(run, &inputs, 1e-5).unwrap();

        let mut g = Graph::new();
        let seqn = g.leaf(seq);
        let p = LstmDirParams {
            wx: g.leaf(wx),
            wh: g.leaf(wh),
            bias: g.leaf(bias),
        };
        let spec = LSTMSpec {
            input_size: input,
            hidden_size: hidden,
            direction: Direction::Bidirectional,
        };
        let y = lstm_forward(
            &mut g,
            seqn,
            &spec,
            &LstmParams {
                forward: p,
                backward: Some(p),
            },
        )
        .unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        for (node, expect) in [(seqn, &fd[0]), (p.wx, &fd[1]), (p.wh, &fd[2]), (p.bias, &fd[3])] {
            assert!(
                max_relative_error(g.grad(node).unwrap(), expect) <= 1e-6,
                "lstm gradient deviates from finite differences"
            );
        }
    }
}
