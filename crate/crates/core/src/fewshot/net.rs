//! Convolutional embedding network with hand-written forward and backward
//! passes.
//!
//! Each block is `conv 3x3 (same padding) -> batch norm -> ReLU -> max-pool
//! 2x2 (floor)`; a global average pool after the last block gives one value
//! per filter. Activations are stored sample-major: `[batch][channel][y][x]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::FewShotError;
use crate::linalg::Matrix;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture descriptor; also stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub blocks: usize,
    pub filters: usize,
    /// Side length `S` of the square input.
    pub input_size: usize,
    /// Standardize every input matrix to zero mean and unit variance before
    /// the first convolution.
    pub standardize: bool,
}

impl ArchSpec {
    /// Four blocks of 64 filters.
    pub fn standard(input_size: usize) -> Self {
        ArchSpec {
            blocks: 4,
            filters: 64,
            input_size,
            standardize: false,
        }
    }

    pub fn validate(&self) -> Result<(), FewShotError> {
        if self.blocks == 0 || self.filters == 0 {
            return Err(FewShotError::Config(format!(
                "architecture needs at least one block and one filter (got {} blocks, {} filters)",
                self.blocks, self.filters
            )));
        }
        if self.blocks >= usize::BITS as usize || self.input_size < (1usize << self.blocks) {
            return Err(FewShotError::Shape(format!(
                "input {0}x{0} is too small for {1} pooling stages (need at least {2})",
                self.input_size,
                self.blocks,
                1usize.checked_shl(self.blocks as u32).unwrap_or(usize::MAX)
            )));
        }
        Ok(())
    }

    /// Spatial side length entering each block, plus the final one.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_size];
        for _ in 0..self.blocks {
            let last = *sizes.last().unwrap();
            sizes.push(last / 2);
        }
        sizes
    }

    pub fn embedding_dim(&self) -> usize {
        self.filters
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvBlock {
    pub cin: usize,
    pub cout: usize,
    /// `cout x (cin * 9)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        ConvBlock {
            cin,
            cout,
            weight: (0..cout * cin * 9)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: vec![0.0; cout],
            gamma: vec![1.0; cout],
            beta: vec![0.0; cout],
            running_mean: vec![0.0; cout],
            running_var: vec![1.0; cout],
        }
    }
}

/// Fully connected layer, `weight` is `output x input` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub(crate) fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        Linear {
            input,
            output,
            weight: (0..input * output)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: vec![0.0; output],
        }
    }

    /// `x` is `batch x input`; returns `batch x output`.
    pub(crate) fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(batch * self.output);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            batch,
            self.input,
            self.output,
            x,
            false,
            &self.weight,
            true,
            &mut out,
            1.0,
        );
        out
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        batch: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; self.output * self.input];
        gemm(
            self.output,
            batch,
            self.input,
            dy,
            true,
            x,
            false,
            &mut dw,
            0.0,
        );
        let mut db = vec![0.0; self.output];
        for row in dy.chunks(self.output) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = vec![0.0; batch * self.input];
        gemm(
            batch,
            self.output,
            self.input,
            dy,
            false,
            &self.weight,
            false,
            &mut dx,
            0.0,
        );
        (dw, db, dx)
    }
}

/// `c = a * b + beta * c` with `a` logically `m x k` and `b` logically
/// `k x n`, both row-major unless flagged as stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every index touched by these
    // strides lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3x3 neighbourhoods (zero padded) into a `(cin * 9) x (h * w)`
/// matrix.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, o) in out.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates into `dx`.
fn col2im(dcol: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcol[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pool with floor semantics. Returns the pooled planes and, per
/// output cell, the index of the winning input cell within its plane (first
/// maximum in row-major order).
fn max_pool(a: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * ho * wo);
    let mut arg = Vec::with_capacity(channels * ho * wo);
    for c in 0..channels {
        let plane = &a[c * h * w..(c + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let mut best = 2 * y * w + 2 * x;
                for idx in [
                    2 * y * w + 2 * x + 1,
                    (2 * y + 1) * w + 2 * x,
                    (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                out.push(plane[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
    for v in x.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

pub(crate) struct BlockCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mask: Vec<bool>,
    argmax: Vec<u32>,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

/// Training-mode forward pass: everything needed for the backward pass and
/// for committing batch statistics afterwards.
pub(crate) struct TrainForward {
    caches: Vec<BlockCache>,
    batch: usize,
    /// `batch x embedding_dim`.
    pub embeddings: Vec<f64>,
}

/// The embedding network `f_theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    arch: ArchSpec,
    pub(crate) blocks: Vec<ConvBlock>,
}

impl EmbeddingNet {
    /// He-uniform convolution weights, zero biases, unit batch-norm scale.
    pub fn new(arch: ArchSpec, rng: &mut ChaCha8Rng) -> Result<Self, FewShotError> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.blocks);
        for b in 0..arch.blocks {
            let cin = if b == 0 { 1 } else { arch.filters };
            blocks.push(ConvBlock::new(cin, arch.filters, rng));
        }
        Ok(EmbeddingNet { arch, blocks })
    }

    pub(crate) fn from_parts(arch: ArchSpec, blocks: Vec<ConvBlock>) -> Self {
        EmbeddingNet { arch, blocks }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.filters
    }

    /// Flattens and (optionally) standardizes a batch of inputs.
    pub(crate) fn input_batch(&self, inputs: &[&Matrix]) -> Result<Vec<f64>, FewShotError> {
        let s = self.arch.input_size;
        let mut out = Vec::with_capacity(inputs.len() * s * s);
        for (i, m) in inputs.iter().enumerate() {
            if m.shape() != (s, s) {
                return Err(FewShotError::Shape(format!(
                    "input {i} is {}x{}, network expects {s}x{s}",
                    m.rows(),
                    m.cols()
                )));
            }
            let start = out.len();
            out.extend_from_slice(m.as_slice());
            if self.arch.standardize {
                standardize(&mut out[start..]);
            }
        }
        Ok(out)
    }

    fn conv(
        &self,
        block: &ConvBlock,
        x: &[f64],
        batch: usize,
        h: usize,
        col: &mut Vec<f64>,
    ) -> Vec<f64> {
        let hw = h * h;
        let k = block.cin * 9;
        col.resize(k * hw, 0.0);
        let mut z = vec![0.0; batch * block.cout * hw];
        for b in 0..batch {
            let xs = &x[b * block.cin * hw..(b + 1) * block.cin * hw];
            im2col(xs, block.cin, h, h, col);
            let zs = &mut z[b * block.cout * hw..(b + 1) * block.cout * hw];
            for (c, plane) in zs.chunks_mut(hw).enumerate() {
                plane.fill(block.bias[c]);
            }
            gemm(block.cout, k, hw, &block.weight, false, col, false, zs, 1.0);
        }
        z
    }

    fn global_pool(&self, x: &[f64], batch: usize, hw: usize) -> Vec<f64> {
        let c = self.arch.filters;
        let mut out = Vec::with_capacity(batch * c);
        for plane in x[..batch * c * hw].chunks(hw) {
            out.push(plane.iter().sum::<f64>() / hw as f64);
        }
        out
    }

    /// Inference-mode forward on a prepared batch (running statistics).
    pub(crate) fn forward_infer(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let sizes = self.arch.spatial_sizes();
        let mut x = input.to_vec();
        let mut col = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            let h = sizes[bi];
            let hw = h * h;
            let mut z = self.conv(block, &x, batch, h, &mut col);
            for b in 0..batch {
                for c in 0..block.cout {
                    let scale = block.gamma[c] / (block.running_var[c] + BN_EPS).sqrt();
                    let shift = block.beta[c] - block.running_mean[c] * scale;
                    for v in &mut z[(b * block.cout + c) * hw..][..hw] {
                        *v = (*v * scale + shift).max(0.0);
                    }
                }
            }
            x = Vec::with_capacity(batch * block.cout * (h / 2) * (h / 2));
            for b in 0..batch {
                let (p, _) = max_pool(
                    &z[b * block.cout * hw..(b + 1) * block.cout * hw],
                    block.cout,
                    h,
                    h,
                );
                x.extend(p);
            }
        }
        let last = sizes[self.arch.blocks];
        self.global_pool(&x, batch, last * last)
    }

    /// Training-mode forward: batch statistics, no state change.
    pub(crate) fn forward_train(&self, input: &[f64], batch: usize) -> TrainForward {
        let sizes = self.arch.spatial_sizes();
        let mut x = input.to_vec();
        let mut col = Vec::new();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let h = sizes[bi];
            let hw = h * h;
            let cout = block.cout;
            let z = self.conv(block, &x, batch, h, &mut col);
            let count = batch * hw;
            let mut mean = vec![0.0; cout];
            let mut var = vec![0.0; cout];
            for c in 0..cout {
                let mut s = 0.0;
                for b in 0..batch {
                    s += z[(b * cout + c) * hw..][..hw].iter().sum::<f64>();
                }
                mean[c] = s / count as f64;
                let mut ss = 0.0;
                for b in 0..batch {
                    ss += z[(b * cout + c) * hw..][..hw]
                        .iter()
                        .map(|v| (v - mean[c]) * (v - mean[c]))
                        .sum::<f64>();
                }
                var[c] = ss / count as f64;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = z;
            let mut act = vec![0.0; xhat.len()];
            let mut mask = vec![false; xhat.len()];
            for b in 0..batch {
                for c in 0..cout {
                    let off = (b * cout + c) * hw;
                    for i in off..off + hw {
                        let xh = (xhat[i] - mean[c]) * inv_std[c];
                        xhat[i] = xh;
                        let y = block.gamma[c] * xh + block.beta[c];
                        if y > 0.0 {
                            act[i] = y;
                            mask[i] = true;
                        }
                    }
                }
            }
            let mut pooled = Vec::with_capacity(batch * cout * (h / 2) * (h / 2));
            let mut argmax = Vec::with_capacity(batch * cout * (h / 2) * (h / 2));
            for b in 0..batch {
                let (p, a) = max_pool(&act[b * cout * hw..(b + 1) * cout * hw], cout, h, h);
                pooled.extend(p);
                argmax.extend(a);
            }
            caches.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                xhat,
                inv_std,
                mask,
                argmax,
                mean,
                var,
                count,
            });
        }
        let last = sizes[self.arch.blocks];
        let embeddings = self.global_pool(&x, batch, last * last);
        TrainForward {
            caches,
            batch,
            embeddings,
        }
    }

    /// Gradients of the trainable parameters given `d_embeddings`
    /// (`batch x embedding_dim`). Order per block: weight, bias, gamma, beta.
    pub(crate) fn backward(&self, fwd: &TrainForward, d_embeddings: &[f64]) -> Vec<Vec<f64>> {
        let sizes = self.arch.spatial_sizes();
        let batch = fwd.batch;
        let last = sizes[self.arch.blocks];
        let last_hw = last * last;
        // Gradient w.r.t. the last block's pooled output.
        let mut dp = Vec::with_capacity(batch * self.arch.filters * last_hw);
        for g in d_embeddings {
            let v = g / last_hw as f64;
            dp.extend(std::iter::repeat_n(v, last_hw));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); 4 * self.blocks.len()];
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for bi in (0..self.blocks.len()).rev() {
            let block = &self.blocks[bi];
            let cache = &fwd.caches[bi];
            let h = sizes[bi];
            let hw = h * h;
            let pooled_hw = (h / 2) * (h / 2);
            let cout = block.cout;

            // Unpool and ReLU.
            let mut dy = vec![0.0; batch * cout * hw];
            for (plane_idx, (dplane, aplane)) in dp
                .chunks(pooled_hw)
                .zip(cache.argmax.chunks(pooled_hw))
                .enumerate()
            {
                let base = plane_idx * hw;
                for (g, &a) in dplane.iter().zip(aplane) {
                    dy[base + a as usize] += g;
                }
            }
            for (d, &m) in dy.iter_mut().zip(&cache.mask) {
                if !m {
                    *d = 0.0;
                }
            }

            // Batch norm.
            let mut dgamma = vec![0.0; cout];
            let mut dbeta = vec![0.0; cout];
            for b in 0..batch {
                for c in 0..cout {
                    let off = (b * cout + c) * hw;
                    for i in off..off + hw {
                        dbeta[c] += dy[i];
                        dgamma[c] += dy[i] * cache.xhat[i];
                    }
                }
            }
            let m = cache.count as f64;
            let mut dz = dy;
            for b in 0..batch {
                for c in 0..cout {
                    let k = block.gamma[c] * cache.inv_std[c] / m;
                    let off = (b * cout + c) * hw;
                    for i in off..off + hw {
                        dz[i] = k * (m * dz[i] - dbeta[c] - cache.xhat[i] * dgamma[c]);
                    }
                }
            }

            // Convolution.
            let kdim = block.cin * 9;
            let mut dw = vec![0.0; cout * kdim];
            let mut dbias = vec![0.0; cout];
            let need_dx = bi > 0;
            let mut dx = if need_dx {
                vec![0.0; batch * block.cin * hw]
            } else {
                Vec::new()
            };
            col.resize(kdim * hw, 0.0);
            dcol.resize(kdim * hw, 0.0);
            for b in 0..batch {
                let xs = &cache.input[b * block.cin * hw..(b + 1) * block.cin * hw];
                im2col(xs, block.cin, h, h, &mut col);
                let dzs = &dz[b * cout * hw..(b + 1) * cout * hw];
                gemm(cout, hw, kdim, dzs, false, &col, true, &mut dw, 1.0);
                for (c, plane) in dzs.chunks(hw).enumerate() {
                    dbias[c] += plane.iter().sum::<f64>();
                }
                if need_dx {
                    gemm(
                        kdim,
                        cout,
                        hw,
                        &block.weight,
                        true,
                        dzs,
                        false,
                        &mut dcol,
                        0.0,
                    );
                    col2im(
                        &dcol,
                        block.cin,
                        h,
                        h,
                        &mut dx[b * block.cin * hw..(b + 1) * block.cin * hw],
                    );
                }
            }
            grads[4 * bi] = dw;
            grads[4 * bi + 1] = dbias;
            grads[4 * bi + 2] = dgamma;
            grads[4 * bi + 3] = dbeta;
            dp = dx;
        }
        grads
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates (unbiased variance).
    pub(crate) fn commit_batch_stats(&mut self, fwd: &TrainForward) {
        for (block, cache) in self.blocks.iter_mut().zip(&fwd.caches) {
            let correction = if cache.count > 1 {
                cache.count as f64 / (cache.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..block.cout {
                block.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * block.running_mean[c] + BN_MOMENTUM * cache.mean[c];
                block.running_var[c] = (1.0 - BN_MOMENTUM) * block.running_var[c]
                    + BN_MOMENTUM * cache.var[c] * correction;
            }
        }
    }

    /// Trainable tensors in gradient order.
    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(4 * self.blocks.len());
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out
    }

    /// Embedding of one input, inference mode.
    pub fn embed(&self, input: &Matrix) -> Result<Vec<f64>, FewShotError> {
        let x = self.input_batch(&[input])?;
        Ok(self.forward_infer(&x, 1))
    }

    /// Embeddings of many inputs, inference mode. Each input is processed
    /// independently, so results do not depend on batch composition.
    pub fn embed_all(&self, inputs: &[&Matrix]) -> Result<Vec<Vec<f64>>, FewShotError> {
        inputs.iter().map(|m| self.embed(m)).collect()
    }

    /// Number of scalar parameters including running statistics.
    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.len() + b.bias.len() + 4 * b.cout)
            .sum()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub(crate) fn update(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn spatial_sizes_follow_floor_pooling() {
        assert_eq!(
            ArchSpec::standard(52).spatial_sizes(),
            vec![52, 26, 13, 6, 3]
        );
        assert_eq!(
            ArchSpec::standard(242).spatial_sizes(),
            vec![242, 121, 60, 30, 15]
        );
        assert!(ArchSpec::standard(15).validate().is_err());
        assert!(ArchSpec::standard(16).validate().is_ok());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (cin, h) = (2, 5);
        let mut r = rng();
        let x: Vec<f64> = (0..cin * h * h).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..cin * 9 * h * h)
            .map(|_| r.gen_range(-1.0..1.0))
            .collect();
        let mut col = vec![0.0; cin * 9 * h * h];
        im2col(&x, cin, h, h, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, cin, h, h, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let arch = ArchSpec {
            blocks: 1,
            filters: 2,
            input_size: 4,
            standardize: false,
        };
        let net = EmbeddingNet::new(arch, &mut rng()).unwrap();
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.7).collect();
        let mut col = Vec::new();
        let z = net.conv(&net.blocks[0], &x, 1, 4, &mut col);
        let w = &net.blocks[0].weight;
        for c in 0..2 {
            for y in 0..4i32 {
                for xx in 0..4i32 {
                    let mut s = 0.0;
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                s += w[c * 9 + (ky * 3 + kx) as usize] * x[(sy * 4 + sx) as usize];
                            }
                        }
                    }
                    assert!((z[c * 16 + (y * 4 + xx) as usize] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_floor_and_first_max() {
        let a = vec![1.0, 3.0, 3.0, 0.0, 2.0, 0.0, 9.0, 9.0, 9.0];
        let (p, arg) = max_pool(&a, 1, 3, 3);
        assert_eq!(p, vec![3.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn embedding_shapes() {
        let net = EmbeddingNet::new(
            ArchSpec {
                filters: 8,
                ..ArchSpec::standard(52)
            },
            &mut rng(),
        )
        .unwrap();
        let z = net.embed(&Matrix::identity(52)).unwrap();
        assert_eq!(z.len(), 8);
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(net.embed(&Matrix::identity(40)).is_err());
    }

    #[test]
    fn inference_matches_training_with_matching_stats() {
        // With running stats equal to the batch stats, both modes agree.
        let arch = ArchSpec {
            blocks: 2,
            filters: 3,
            input_size: 8,
            standardize: false,
        };
        let mut net = EmbeddingNet::new(arch, &mut rng()).unwrap();
        let mut r = rng();
        let input: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let fwd = net.forward_train(&input, 1);
        for (block, cache) in net.blocks.iter_mut().zip(&fwd.caches) {
            block.running_mean = cache.mean.clone();
            block.running_var = cache.var.clone();
        }
        let inf = net.forward_infer(&input, 1);
        for (a, b) in inf.iter().zip(&fwd.embeddings) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_forward_backward() {
        let mut r = rng();
        let lin = Linear::new(3, 2, &mut r);
        let x = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        let y = lin.forward(&x, 2);
        for b in 0..2 {
            for o in 0..2 {
                let e: f64 = (0..3)
                    .map(|i| lin.weight[o * 3 + i] * x[b * 3 + i])
                    .sum::<f64>()
                    + lin.bias[o];
                assert!((y[b * 2 + o] - e).abs() < 1e-12);
            }
        }
        let (dw, db, dx) = lin.backward(&x, &[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(db, vec![1.0, 1.0]);
        assert_eq!(&dw[0..3], &x[0..3]);
        assert_eq!(&dx[0..3], &lin.weight[0..3]);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![1.0, -1.0];
        let mut adam = Adam::default();
        adam.update(vec![&mut p], &[vec![2.0, -3.0]], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }
}
