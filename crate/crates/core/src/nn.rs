//! The tile encoder: three 3x3 stride-2 convolution blocks with a
//! smooth gated activation, global average pooling into the feature
//! vector, and a two-layer classification head. Forward, backward and
//! the SGD update are written out by hand; there is no autograd.
//!
//! Convolutions pad by clamping to the nearest edge pixel, so a
//! constant input produces a spatially constant map in every block.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::loss::{self, CenterState};
use crate::mat::{self, Mat};
use crate::rng;

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const HIDDEN_DIM: usize = 64;
/// Channel widths of the first two blocks; the third equals the
/// feature dimension.
pub const BLOCK_WIDTHS: [usize; 2] = [16, 24];

/// Head weights start near zero so initial logits are tiny and the
/// first epochs are dominated by representation learning.
pub const HEAD_INIT_STD: f64 = 1e-2;

/// Fan-in variance constant for conv weights (rectifier-preserving).
pub const CONV_INIT_GAIN: f64 = 2.0;

/// Planar channel-major float image, the encoder's input format.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<ImageTensor> {
        if data.len() != channels * h * w {
            return Err(Error::shape(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                h,
                w
            )));
        }
        Ok(ImageTensor { channels, h, w, data })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Layout: out_ch x (in_ch * 9), one row per output channel.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Layout: out_dim x in_dim.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub conv: Vec<ConvBlock>,
    pub head_hidden: Linear,
    pub head_out: Linear,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl EncoderModel {
    /// Parameter tensors in a fixed order (conv weight/bias pairs from
    /// the input block outward, then the head layers). The optimizer
    /// and the artifact writer both rely on this ordering.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::with_capacity(2 * self.conv.len() + 4);
        for b in self.conv.iter_mut() {
            let ConvBlock { weight, bias, .. } = b;
            v.push(weight);
            v.push(bias);
        }
        let Linear { weight, bias, .. } = &mut self.head_hidden;
        v.push(weight);
        v.push(bias);
        let Linear { weight, bias, .. } = &mut self.head_out;
        v.push(weight);
        v.push(bias);
        v
    }

    pub fn param_tensors(&self) -> Vec<&Vec<f64>> {
        let mut v = Vec::with_capacity(2 * self.conv.len() + 4);
        for b in &self.conv {
            v.push(&b.weight);
            v.push(&b.bias);
        }
        v.push(&self.head_hidden.weight);
        v.push(&self.head_hidden.bias);
        v.push(&self.head_out.weight);
        v.push(&self.head_out.bias);
        v
    }
}

/// Builds a freshly initialized encoder. Conv weights are zero-mean
/// normal with variance [`CONV_INIT_GAIN`]/fan_in, head weights have standard deviation
/// [`HEAD_INIT_STD`], all biases start at zero. The same seed yields a
/// bit-identical model.
pub fn init_model(seed: u64, feature_dim: usize, class_count: usize) -> Result<EncoderModel> {
    if feature_dim == 0 {
        return Err(Error::parameter("feature_dim must be positive"));
    }
    if class_count < 2 {
        return Err(Error::parameter("class_count must be at least 2"));
    }
    let mut rng = rng::derive_rng(seed, &[0x6d6f_64656c]);
    let widths = [BLOCK_WIDTHS[0], BLOCK_WIDTHS[1], feature_dim];

    let mut conv = Vec::with_capacity(3);
    let mut in_ch = 3;
    for &out_ch in &widths {
        let fan_in = (in_ch * KERNEL * KERNEL) as f64;
        let dist = Normal::new(0.0, (CONV_INIT_GAIN / fan_in).sqrt()).expect("finite std");
        let weight: Vec<f64> =
            (0..out_ch * in_ch * KERNEL * KERNEL).map(|_| dist.sample(&mut rng)).collect();
        conv.push(ConvBlock { in_ch, out_ch, weight, bias: vec![0.0; out_ch] });
        in_ch = out_ch;
    }

    let head = Normal::new(0.0, HEAD_INIT_STD).expect("finite std");
    let head_hidden = Linear {
        in_dim: feature_dim,
        out_dim: HIDDEN_DIM,
        weight: (0..HIDDEN_DIM * feature_dim).map(|_| head.sample(&mut rng)).collect(),
        bias: vec![0.0; HIDDEN_DIM],
    };
    let head_out = Linear {
        in_dim: HIDDEN_DIM,
        out_dim: class_count,
        weight: (0..class_count * HIDDEN_DIM).map(|_| head.sample(&mut rng)).collect(),
        bias: vec![0.0; class_count],
    };

    Ok(EncoderModel { conv, head_hidden, head_out, feature_dim, class_count })
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<ImageTensor>, labels: Vec<usize>) -> Result<Batch> {
        if inputs.is_empty() {
            return Err(Error::parameter("batch must not be empty"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let (h, w) = (inputs[0].h, inputs[0].w);
        for t in &inputs {
            check_input(t)?;
            if t.h != h || t.w != w {
                return Err(Error::shape("batch inputs differ in size"));
            }
        }
        Ok(Batch { inputs, labels })
    }
}

fn check_input(t: &ImageTensor) -> Result<()> {
    if t.channels != 3 {
        return Err(Error::shape(format!("encoder input must have 3 channels, got {}", t.channels)));
    }
    if t.h == 0 || t.w == 0 || t.h % 8 != 0 || t.w % 8 != 0 {
        return Err(Error::shape(format!(
            "encoder input sides must be positive multiples of 8, got {}x{}",
            t.h, t.w
        )));
    }
    Ok(())
}

fn out_side(n: usize) -> usize {
    (n + 1) / 2
}

/// Unfolds 3x3 stride-2 windows with edge-clamp padding into a
/// (c_in * 9) x (oh * ow) matrix.
fn im2col(input: &[f64], c_in: usize, h: usize, w: usize, col: &mut [f64]) {
    let oh = out_side(h);
    let ow = out_side(w);
    let p = oh * ow;
    debug_assert_eq!(col.len(), c_in * 9 * p);
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (STRIDE * oy + ky).saturating_sub(1).min(h - 1);
                    let src = &plane[iy * w..iy * w + w];
                    let dst = &mut row[oy * ow..oy * ow + ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (STRIDE * ox + kx).saturating_sub(1).min(w - 1);
                        *d = src[ix];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the
/// input grid, accumulating where clamped windows overlap.
fn col2im_acc(gcol: &[f64], c_in: usize, h: usize, w: usize, gin: &mut [f64]) {
    let oh = out_side(h);
    let ow = out_side(w);
    let p = oh * ow;
    for c in 0..c_in {
        let plane = &mut gin[c * h * w..(c + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &gcol[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (STRIDE * oy + ky).saturating_sub(1).min(h - 1);
                    for ox in 0..ow {
                        let ix = (STRIDE * ox + kx).saturating_sub(1).min(w - 1);
                        plane[iy * w + ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-block scratch kept across samples; `pre`/`sig`/`out` hold the
/// trace the backward pass consumes.
struct BlockTrace {
    col: Vec<f64>,
    pre: Vec<f64>,
    sig: Vec<f64>,
    out: Vec<f64>,
    oh: usize,
    ow: usize,
    in_h: usize,
    in_w: usize,
}

struct Workspace {
    blocks: Vec<BlockTrace>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    // backward scratch
    gout: Vec<f64>,
    gpre: Vec<f64>,
    gcol: Vec<f64>,
    gin: Vec<f64>,
    ghid: Vec<f64>,
    gfeat: Vec<f64>,
}

impl Workspace {
    fn new(model: &EncoderModel) -> Workspace {
        Workspace {
            blocks: model
                .conv
                .iter()
                .map(|_| BlockTrace {
                    col: Vec::new(),
                    pre: Vec::new(),
                    sig: Vec::new(),
                    out: Vec::new(),
                    oh: 0,
                    ow: 0,
                    in_h: 0,
                    in_w: 0,
                })
                .collect(),
            hidden_pre: vec![0.0; HIDDEN_DIM],
            hidden: vec![0.0; HIDDEN_DIM],
            logits: vec![0.0; model.class_count],
            gout: Vec::new(),
            gpre: Vec::new(),
            gcol: Vec::new(),
            gin: Vec::new(),
            ghid: vec![0.0; HIDDEN_DIM],
            gfeat: vec![0.0; model.feature_dim],
        }
    }

    /// Runs the conv stack on one input, leaving the full trace in
    /// `self.blocks`, and writes the pooled feature vector.
    fn conv_stack(&mut self, model: &EncoderModel, x: &ImageTensor, features: &mut [f64]) {
        let (mut h, mut w) = (x.h, x.w);
        for (bi, block) in model.conv.iter().enumerate() {
            let oh = out_side(h);
            let ow = out_side(w);
            let p = oh * ow;
            let f = block.in_ch * 9;
            let tr = &mut self.blocks[bi];
            tr.col.resize(f * p, 0.0);
            tr.pre.resize(block.out_ch * p, 0.0);
            tr.sig.resize(block.out_ch * p, 0.0);
            tr.out.resize(block.out_ch * p, 0.0);
            tr.oh = oh;
            tr.ow = ow;
            tr.in_h = h;
            tr.in_w = w;

            // Split borrow: the input is either the sample or the
            // previous block's output.
            let (done, rest) = self.blocks.split_at_mut(bi);
            let input: &[f64] = if bi == 0 { &x.data } else { &done[bi - 1].out };
            let tr = &mut rest[0];

            im2col(input, block.in_ch, h, w, &mut tr.col);
            for o in 0..block.out_ch {
                tr.pre[o * p..(o + 1) * p].fill(block.bias[o]);
            }
            mat::gemm_acc(block.out_ch, f, p, &block.weight, &tr.col, &mut tr.pre);
            for i in 0..block.out_ch * p {
                let s = sigmoid(tr.pre[i]);
                tr.sig[i] = s;
                tr.out[i] = tr.pre[i] * s;
            }
            h = oh;
            w = ow;
        }

        let last = &self.blocks[model.conv.len() - 1];
        let p = last.oh * last.ow;
        let inv = 1.0 / p as f64;
        for (c, feat) in features.iter_mut().enumerate() {
            *feat = last.out[c * p..(c + 1) * p].iter().sum::<f64>() * inv;
        }
    }

    fn head(&mut self, model: &EncoderModel, features: &[f64]) {
        let hh = &model.head_hidden;
        for o in 0..hh.out_dim {
            let z = hh.bias[o] + mat::dot(&hh.weight[o * hh.in_dim..(o + 1) * hh.in_dim], features);
            self.hidden_pre[o] = z;
            self.hidden[o] = z.max(0.0);
        }
        let ho = &model.head_out;
        for o in 0..ho.out_dim {
            self.logits[o] =
                ho.bias[o] + mat::dot(&ho.weight[o * ho.in_dim..(o + 1) * ho.in_dim], &self.hidden);
        }
    }
}

fn check_batch_inputs(model: &EncoderModel, inputs: &[ImageTensor]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::parameter("no inputs"));
    }
    for t in inputs {
        check_input(t)?;
        if t.h != inputs[0].h || t.w != inputs[0].w {
            return Err(Error::shape("inputs differ in size"));
        }
    }
    let _ = model;
    Ok(())
}

/// Runs the encoder on a set of inputs. Returns pooled features
/// (m x d) and head logits (m x n).
pub fn forward(model: &EncoderModel, inputs: &[ImageTensor]) -> Result<(Mat, Mat)> {
    check_batch_inputs(model, inputs)?;
    let m = inputs.len();
    let mut features = Mat::zeros(m, model.feature_dim);
    let mut logits = Mat::zeros(m, model.class_count);
    let mut ws = Workspace::new(model);
    for (i, x) in inputs.iter().enumerate() {
        ws.conv_stack(model, x, features.row_mut(i));
        ws.head(model, features.row(i));
        logits.row_mut(i).copy_from_slice(&ws.logits);
    }
    Ok((features, logits))
}

/// Pooled features only; the head is skipped.
pub fn features(model: &EncoderModel, inputs: &[ImageTensor]) -> Result<Mat> {
    check_batch_inputs(model, inputs)?;
    let mut out = Mat::zeros(inputs.len(), model.feature_dim);
    let mut ws = Workspace::new(model);
    for (i, x) in inputs.iter().enumerate() {
        ws.conv_stack(model, x, out.row_mut(i));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub conv: Vec<ParamGrads>,
    pub head_hidden: ParamGrads,
    pub head_out: ParamGrads,
    /// Gradient of the full objective at the pooled features, one row
    /// per sample.
    pub feature_grads: Mat,
}

impl Gradients {
    fn zeros(model: &EncoderModel, m: usize) -> Gradients {
        Gradients {
            conv: model
                .conv
                .iter()
                .map(|b| ParamGrads {
                    weight: vec![0.0; b.weight.len()],
                    bias: vec![0.0; b.bias.len()],
                })
                .collect(),
            head_hidden: ParamGrads {
                weight: vec![0.0; model.head_hidden.weight.len()],
                bias: vec![0.0; model.head_hidden.bias.len()],
            },
            head_out: ParamGrads {
                weight: vec![0.0; model.head_out.weight.len()],
                bias: vec![0.0; model.head_out.bias.len()],
            },
            feature_grads: Mat::zeros(m, model.feature_dim),
        }
    }

    /// Uniform rescale of every parameter gradient (feature gradients
    /// included). Used to optimize the batch-mean objective while the
    /// loss itself stays a batch sum.
    pub fn scale(&mut self, s: f64) {
        for g in &mut self.conv {
            g.weight.iter_mut().for_each(|v| *v *= s);
            g.bias.iter_mut().for_each(|v| *v *= s);
        }
        for g in [&mut self.head_hidden, &mut self.head_out] {
            g.weight.iter_mut().for_each(|v| *v *= s);
            g.bias.iter_mut().for_each(|v| *v *= s);
        }
        self.feature_grads.data_mut().iter_mut().for_each(|v| *v *= s);
    }

    /// Same ordering as [`EncoderModel::param_tensors`].
    pub fn param_tensors(&self) -> Vec<&Vec<f64>> {
        let mut v = Vec::with_capacity(2 * self.conv.len() + 4);
        for g in &self.conv {
            v.push(&g.weight);
            v.push(&g.bias);
        }
        v.push(&self.head_hidden.weight);
        v.push(&self.head_hidden.bias);
        v.push(&self.head_out.weight);
        v.push(&self.head_out.bias);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    /// Center term already scaled by lambda.
    pub center: f64,
    pub total: f64,
}

/// Computes the combined objective (summed cross-entropy plus
/// lambda-weighted center loss) and its gradients for one batch.
/// Centers are treated as constants; their update happens separately.
pub fn backward(
    model: &EncoderModel,
    batch: &Batch,
    centers: &CenterState,
    lambda: f64,
) -> Result<(LossBreakdown, Gradients)> {
    check_batch_inputs(model, &batch.inputs)?;
    if batch.labels.len() != batch.inputs.len() {
        return Err(Error::shape("label count does not match input count"));
    }
    for &y in &batch.labels {
        if y >= model.class_count {
            return Err(Error::parameter(format!(
                "label {} out of range for {} classes",
                y, model.class_count
            )));
        }
    }
    centers.check_model(model.class_count, model.feature_dim)?;
    if lambda < 0.0 {
        return Err(Error::parameter("lambda must be nonnegative"));
    }

    let m = batch.inputs.len();
    let d = model.feature_dim;
    let n = model.class_count;
    let mut grads = Gradients::zeros(model, m);
    let mut ws = Workspace::new(model);

    let mut class_counts = vec![0usize; n];
    for &y in &batch.labels {
        class_counts[y] += 1;
    }

    let mut feat = vec![0.0; d];
    let mut probs = vec![0.0; n];
    let mut ce_sum = 0.0;
    // Per-class running sums of 0.5 * |x - a_k|^2, normalized at the end.
    let mut center_sums = vec![0.0; n];

    for (i, x) in batch.inputs.iter().enumerate() {
        let y = batch.labels[i];
        ws.conv_stack(model, x, &mut feat);
        ws.head(model, &feat);

        probs.copy_from_slice(&ws.logits);
        loss::softmax_row(&mut probs);
        ce_sum += -probs[y].max(loss::PROB_FLOOR).ln();

        // d(sum CE)/dlogits = p - onehot, per sample.
        let glog = &mut probs;
        glog[y] -= 1.0;

        let ho = &model.head_out;
        for o in 0..n {
            mat::axpy(glog[o], &ws.hidden, &mut grads.head_out.weight[o * HIDDEN_DIM..(o + 1) * HIDDEN_DIM]);
            grads.head_out.bias[o] += glog[o];
        }
        ws.ghid.fill(0.0);
        for o in 0..n {
            mat::axpy(glog[o], &ho.weight[o * HIDDEN_DIM..(o + 1) * HIDDEN_DIM], &mut ws.ghid);
        }
        for (g, &z) in ws.ghid.iter_mut().zip(&ws.hidden_pre) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let hh = &model.head_hidden;
        for o in 0..HIDDEN_DIM {
            mat::axpy(ws.ghid[o], &feat, &mut grads.head_hidden.weight[o * d..(o + 1) * d]);
            grads.head_hidden.bias[o] += ws.ghid[o];
        }
        ws.gfeat.fill(0.0);
        for o in 0..HIDDEN_DIM {
            mat::axpy(ws.ghid[o], &hh.weight[o * d..(o + 1) * d], &mut ws.gfeat);
        }

        if lambda > 0.0 && centers.in_subset(y) {
            let a = centers.center(y);
            center_sums[y] += loss::half_sq_dist(&feat, a);
            let scale = lambda / class_counts[y] as f64;
            for j in 0..d {
                ws.gfeat[j] += scale * (feat[j] - a[j]);
            }
        }
        grads.feature_grads.row_mut(i).copy_from_slice(&ws.gfeat);

        let gfeat = ws.gfeat.clone();
        backprop_conv(model, &mut ws, &gfeat, &mut grads);
    }

    let mut center_loss = 0.0;
    for &k in centers.subset() {
        if class_counts[k] > 0 {
            center_loss += center_sums[k] / class_counts[k] as f64;
        }
    }
    let center_weighted = lambda * center_loss;
    let breakdown = LossBreakdown {
        cross_entropy: ce_sum,
        center: center_weighted,
        total: ce_sum + center_weighted,
    };
    Ok((breakdown, grads))
}

/// Backpropagates a feature-level gradient through pooling and the
/// conv stack recorded in `ws`, accumulating parameter gradients.
fn backprop_conv(model: &EncoderModel, ws: &mut Workspace, gfeat: &[f64], grads: &mut Gradients) {
    let nb = model.conv.len();
    let last = &ws.blocks[nb - 1];
    let p_last = last.oh * last.ow;
    let inv = 1.0 / p_last as f64;
    ws.gout.resize(model.feature_dim * p_last, 0.0);
    for c in 0..model.feature_dim {
        ws.gout[c * p_last..(c + 1) * p_last].fill(gfeat[c] * inv);
    }

    for bi in (0..nb).rev() {
        let block = &model.conv[bi];
        let tr = &ws.blocks[bi];
        let p = tr.oh * tr.ow;
        let f = block.in_ch * 9;

        ws.gpre.resize(block.out_ch * p, 0.0);
        for i in 0..block.out_ch * p {
            let s = tr.sig[i];
            ws.gpre[i] = ws.gout[i] * s * (1.0 + tr.pre[i] * (1.0 - s));
        }

        let g = &mut grads.conv[bi];
        mat::gemm_nt_acc(block.out_ch, p, f, &ws.gpre, &tr.col, &mut g.weight);
        for o in 0..block.out_ch {
            g.bias[o] += ws.gpre[o * p..(o + 1) * p].iter().sum::<f64>();
        }

        if bi > 0 {
            ws.gcol.clear();
            ws.gcol.resize(f * p, 0.0);
            mat::gemm_tn_acc(f, block.out_ch, p, &block.weight, &ws.gpre, &mut ws.gcol);
            ws.gin.clear();
            ws.gin.resize(block.in_ch * tr.in_h * tr.in_w, 0.0);
            col2im_acc(&ws.gcol, block.in_ch, tr.in_h, tr.in_w, &mut ws.gin);
            std::mem::swap(&mut ws.gout, &mut ws.gin);
        }
    }
}

/// Momentum SGD. Velocity update v <- momentum * v + g, then
/// w <- w - learning_rate * v.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(model: &EncoderModel, learning_rate: f64, momentum: f64) -> Result<SgdState> {
        if !(learning_rate > 0.0) {
            return Err(Error::parameter("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::parameter("momentum must be in [0, 1)"));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: model.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        })
    }
}

pub fn sgd_step(model: &mut EncoderModel, grads: &Gradients, state: &mut SgdState) -> Result<()> {
    let params = model.param_tensors_mut();
    let gs = grads.param_tensors();
    if params.len() != gs.len() || params.len() != state.velocity.len() {
        return Err(Error::shape("gradient tensors do not match model"));
    }
    for ((p, g), v) in params.into_iter().zip(gs).zip(state.velocity.iter_mut()) {
        if p.len() != g.len() {
            return Err(Error::shape("gradient tensor size mismatch"));
        }
        for i in 0..p.len() {
            v[i] = state.momentum * v[i] + g[i];
            p[i] -= state.learning_rate * v[i];
        }
    }
    Ok(())
}
