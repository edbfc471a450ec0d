//! Minimal neural-net building blocks over candle tensors.
//!
//! Every block runs in one of three modes: `Train` (batch-norm batch
//! statistics, parameters tracked), `Eval` (running statistics), or
//! `Frozen` (running statistics and detached parameter copies, so
//! gradients pass through activations to the inputs but never reach the
//! block's own parameters).

use candle_core::{DType, Device, Result, Tensor, Var, D};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
    Frozen,
}

impl Mode {
    pub fn batch_stats(self) -> bool {
        matches!(self, Mode::Train)
    }

    pub fn detach_params(self) -> bool {
        matches!(self, Mode::Frozen)
    }
}

/// A named parameter. `trainable` is false for batch-norm running
/// statistics, which are checkpointed but never see the optimizer.
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamList {
    pub entries: Vec<ParamEntry>,
}

impl ParamList {
    pub fn push(&mut self, prefix: &str, name: &str, var: &Var, trainable: bool) {
        self.entries.push(ParamEntry {
            name: format!("{prefix}.{name}"),
            var: var.clone(),
            trainable,
        });
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }
}

/// Deterministic parameter initialization stream.
pub struct InitRng {
    rng: ChaCha12Rng,
}

impl InitRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    fn normal_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let z: f32 = self.rng.sample(StandardNormal);
                z * std
            })
            .collect()
    }

    fn uniform_vec(&mut self, n: usize, bound: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
    }
}

/// Weight initialization family. `Kaiming` matches the usual fan-in
/// uniform scheme; `Gan` is the narrow normal commonly used for DCGAN
/// generators and discriminators.
#[derive(Clone, Copy, Debug)]
pub enum WeightInit {
    Kaiming,
    Gan,
}

fn init_weight(
    rng: &mut InitRng,
    init: WeightInit,
    shape: &[usize],
    fan_in: usize,
    dev: &Device,
) -> Result<Var> {
    let n: usize = shape.iter().product();
    let data = match init {
        WeightInit::Kaiming => rng.uniform_vec(n, 1.0 / (fan_in as f32).sqrt()),
        WeightInit::Gan => rng.normal_vec(n, 0.02),
    };
    Var::from_tensor(&Tensor::from_vec(data, shape, dev)?)
}

fn detach_if(var: &Var, detach: bool) -> Tensor {
    if detach {
        var.as_tensor().detach()
    } else {
        var.as_tensor().clone()
    }
}

pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

/// Window geometry shared by the im2col/col2im pair. `h`/`w` is the
/// image-side canvas, `oh`/`ow` the window grid.
#[derive(Clone, Copy, Debug)]
struct Patch {
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Patch {
    fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        Self {
            channels,
            h,
            w,
            kernel,
            stride,
            padding,
            oh,
            ow,
        }
    }

    fn batch_of_cols(&self, rows: usize) -> usize {
        rows / (self.oh * self.ow)
    }
}

/// Gathers (b, c, h, w) into im2col rows (b*oh*ow, c*k*k).
fn im2col_kernel(p: &Patch, x: &[f32], b: usize) -> Vec<f32> {
    let (k, s, pad) = (p.kernel, p.stride, p.padding);
    let (c, h, w) = (p.channels, p.h, p.w);
    let row_len = c * k * k;
    let mut cols = vec![0f32; b * p.oh * p.ow * row_len];
    for bi in 0..b {
        let xb = &x[bi * c * h * w..(bi + 1) * c * h * w];
        let out_base = bi * p.oh * p.ow * row_len;
        for oy in 0..p.oh {
            for ox in 0..p.ow {
                let row = &mut cols[out_base + (oy * p.ow + ox) * row_len
                    ..out_base + (oy * p.ow + ox + 1) * row_len];
                let y0 = (oy * s) as isize - pad as isize;
                let x0 = (ox * s) as isize - pad as isize;
                for ci in 0..c {
                    let xc = &xb[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let dst = &mut row[(ci * k + ky) * k..(ci * k + ky + 1) * k];
                        let src_row = &xc[y as usize * w..(y as usize + 1) * w];
                        if x0 >= 0 && (x0 as usize) + k <= w {
                            dst.copy_from_slice(&src_row[x0 as usize..x0 as usize + k]);
                        } else {
                            for kx in 0..k {
                                let xx = x0 + kx as isize;
                                if xx >= 0 && xx < w as isize {
                                    dst[kx] = src_row[xx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds im2col rows back onto the (b, c, h, w) canvas.
fn col2im_kernel(p: &Patch, cols: &[f32], b: usize) -> Vec<f32> {
    let (k, s, pad) = (p.kernel, p.stride, p.padding);
    let (c, h, w) = (p.channels, p.h, p.w);
    let row_len = c * k * k;
    let mut out = vec![0f32; b * c * h * w];
    for bi in 0..b {
        let ob = &mut out[bi * c * h * w..(bi + 1) * c * h * w];
        let in_base = bi * p.oh * p.ow * row_len;
        for oy in 0..p.oh {
            for ox in 0..p.ow {
                let row = &cols[in_base + (oy * p.ow + ox) * row_len
                    ..in_base + (oy * p.ow + ox + 1) * row_len];
                let y0 = (oy * s) as isize - pad as isize;
                let x0 = (ox * s) as isize - pad as isize;
                for ci in 0..c {
                    let oc = &mut ob[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let src = &row[(ci * k + ky) * k..(ci * k + ky + 1) * k];
                        let dst_row = &mut oc[y as usize * w..(y as usize + 1) * w];
                        if x0 >= 0 && (x0 as usize) + k <= w {
                            for (d, v) in dst_row[x0 as usize..x0 as usize + k].iter_mut().zip(src)
                            {
                                *d += *v;
                            }
                        } else {
                            for kx in 0..k {
                                let xx = x0 + kx as isize;
                                if xx >= 0 && xx < w as isize {
                                    dst_row[xx as usize] += src[kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_f32<'a>(
    storage: &'a candle_core::CpuStorage,
    layout: &candle_core::Layout,
    what: &str,
) -> candle_core::Result<&'a [f32]> {
    let slice = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&slice[start..end]),
        None => candle_core::bail!("{what} expects a contiguous input"),
    }
}

struct Im2ColOp(Patch);

impl candle_core::CustomOp1 for Im2ColOp {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let p = &self.0;
        let x = contiguous_f32(storage, layout, "im2col")?;
        let b = x.len() / (p.channels * p.h * p.w);
        let cols = im2col_kernel(p, x, b);
        let shape = (b * p.oh * p.ow, p.channels * p.kernel * p.kernel);
        Ok((candle_core::CpuStorage::F32(cols), shape.into()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let grad = grad_res.contiguous()?.apply_op1_no_bwd(&Col2ImOp(self.0))?;
        Ok(Some(grad))
    }
}

struct Col2ImOp(Patch);

impl candle_core::CustomOp1 for Col2ImOp {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let p = &self.0;
        let cols = contiguous_f32(storage, layout, "col2im")?;
        let b = p.batch_of_cols(cols.len() / (p.channels * p.kernel * p.kernel));
        let out = col2im_kernel(p, cols, b);
        let shape = (b, p.channels, p.h, p.w);
        Ok((candle_core::CpuStorage::F32(out), shape.into()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let grad = grad_res.contiguous()?.apply_op1_no_bwd(&Im2ColOp(self.0))?;
        Ok(Some(grad))
    }
}

/// Convolution as one batch-wide GEMM over im2col rows. Keeps every
/// matrix product (forward, input gradient, weight gradient) sized by
/// `batch * out_h * out_w`, which the per-image batched kernel does not.
fn conv2d_gemm(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, _cin, k, _k) = w.dims4()?;
    let p = Patch::new(cin, h, wd, k, stride, padding);
    let cols = x.contiguous()?.apply_op1(Im2ColOp(p))?;
    let wmat = w.reshape((cout, cin * k * k))?.t()?;
    let out = cols.matmul(&wmat)?;
    Ok(out
        .reshape((b, p.oh, p.ow, cout))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

/// Transposed convolution as the adjoint: project every input position
/// to a k*k window with one GEMM, then scatter-add onto the canvas.
fn conv_transpose2d_gemm(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4()?;
    let (_cin, cout, k, _k) = w.dims4()?;
    let out_h = (h - 1) * stride + k - 2 * padding;
    let out_w = (wd - 1) * stride + k - 2 * padding;
    let p = Patch {
        channels: cout,
        h: out_h,
        w: out_w,
        kernel: k,
        stride,
        padding,
        oh: h,
        ow: wd,
    };
    let xmat = x
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((b * h * wd, cin))?;
    let wmat = w.reshape((cin, cout * k * k))?;
    let cols = xmat.matmul(&wmat)?;
    cols.apply_op1(Col2ImOp(p))
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut InitRng,
        init: WeightInit,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        dev: &Device,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = init_weight(rng, init, &[cout, cin, kernel, kernel], fan_in, dev)?;
        let bias = if bias {
            let b = rng.uniform_vec(cout, 1.0 / (fan_in as f32).sqrt());
            Some(Var::from_tensor(&Tensor::from_vec(b, &[cout], dev)?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = detach_if(&self.weight, mode.detach_params());
        let y = conv2d_gemm(x, &w, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => {
                let b = detach_if(b, mode.detach_params());
                y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)
            }
            None => Ok(y),
        }
    }

    pub fn register(&self, prefix: &str, out: &mut ParamList) {
        out.push(prefix, "weight", &self.weight, true);
        if let Some(b) = &self.bias {
            out.push(prefix, "bias", b, true);
        }
    }
}

pub struct ConvTranspose2d {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        rng: &mut InitRng,
        init: WeightInit,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dev: &Device,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = init_weight(rng, init, &[cin, cout, kernel, kernel], fan_in, dev)?;
        Ok(Self {
            weight,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = detach_if(&self.weight, mode.detach_params());
        conv_transpose2d_gemm(x, &w, self.stride, self.padding)
    }

    pub fn register(&self, prefix: &str, out: &mut ParamList) {
        out.push(prefix, "weight", &self.weight, true);
    }
}

pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(
        rng: &mut InitRng,
        init: WeightInit,
        cin: usize,
        cout: usize,
        bias: bool,
        dev: &Device,
    ) -> Result<Self> {
        let weight = init_weight(rng, init, &[cout, cin], cin, dev)?;
        let bias = if bias {
            let b = rng.uniform_vec(cout, 1.0 / (cin as f32).sqrt());
            Some(Var::from_tensor(&Tensor::from_vec(b, &[cout], dev)?)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = detach_if(&self.weight, mode.detach_params());
        let y = x.matmul(&w.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&detach_if(b, mode.detach_params())),
            None => Ok(y),
        }
    }

    pub fn register(&self, prefix: &str, out: &mut ParamList) {
        out.push(prefix, "weight", &self.weight, true);
        if let Some(b) = &self.bias {
            out.push(prefix, "bias", b, true);
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Fused train-mode batch norm over (n, c, sp)-contiguous data.
///
/// Output is a flat buffer `[y (n*c*sp) | mean (c) | inv_std (c)]`; the
/// stats tail exists so the caller can update running buffers without
/// recomputing them. Contract: the caller must only use the stats tail
/// detached, since the backward pass here propagates the y slots alone
/// (which is the full gradient, the stats being internal to the op).
struct BatchNormTrainOp {
    channels: usize,
    spatial: usize,
    eps: f64,
}

impl BatchNormTrainOp {
    fn stats(&self, x: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let c = self.channels;
        let sp = self.spatial;
        let n = x.len() / (c * sp);
        let count = (n * sp) as f64;
        let mut mean = vec![0f32; c];
        let mut inv_std = vec![0f32; c];
        for ci in 0..c {
            let mut sum = 0f64;
            let mut sumsq = 0f64;
            for ni in 0..n {
                let run = &x[(ni * c + ci) * sp..(ni * c + ci + 1) * sp];
                for v in run {
                    let v = *v as f64;
                    sum += v;
                    sumsq += v * v;
                }
            }
            let m = sum / count;
            let var = (sumsq / count - m * m).max(0.0);
            mean[ci] = m as f32;
            inv_std[ci] = (1.0 / (var + self.eps).sqrt()) as f32;
        }
        (mean, inv_std)
    }
}

impl candle_core::CustomOp3 for BatchNormTrainOp {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
        s3: &candle_core::CpuStorage,
        l3: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let x = contiguous_f32(s1, l1, "batch norm input")?;
        let gamma = contiguous_f32(s2, l2, "batch norm gamma")?;
        let beta = contiguous_f32(s3, l3, "batch norm beta")?;
        let c = self.channels;
        let sp = self.spatial;
        let n = x.len() / (c * sp);
        let (mean, inv_std) = self.stats(x);

        let mut out = vec![0f32; x.len() + 2 * c];
        for ci in 0..c {
            let a = gamma[ci] * inv_std[ci];
            let b = beta[ci] - mean[ci] * a;
            for ni in 0..n {
                let base = (ni * c + ci) * sp;
                let src = &x[base..base + sp];
                let dst = &mut out[base..base + sp];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = a * v + b;
                }
            }
        }
        out[x.len()..x.len() + c].copy_from_slice(&mean);
        out[x.len() + c..].copy_from_slice(&inv_std);
        let len = out.len();
        Ok((candle_core::CpuStorage::F32(out), (len,).into()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = self.channels;
        let sp = self.spatial;
        let total = x.elem_count();
        let n = total / (c * sp);
        let count = (n * sp) as f64;

        let xv = x.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        let g_all = grad_res.contiguous()?.to_vec1::<f32>()?;
        let g = &g_all[..total];
        let stats = res.narrow(0, total, 2 * c)?.to_vec1::<f32>()?;
        let (mean, inv_std) = stats.split_at(c);
        let gamma_v = gamma.flatten_all()?.to_vec1::<f32>()?;

        let mut dgamma = vec![0f32; c];
        let mut dbeta = vec![0f32; c];
        let mut dx = vec![0f32; total];
        for ci in 0..c {
            let (m, is) = (mean[ci], inv_std[ci]);
            let mut sum_g = 0f64;
            let mut sum_gx = 0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * sp;
                for i in base..base + sp {
                    let xh = (xv[i] - m) * is;
                    sum_g += g[i] as f64;
                    sum_gx += (g[i] * xh) as f64;
                }
            }
            dbeta[ci] = sum_g as f32;
            dgamma[ci] = sum_gx as f32;
            let a = gamma_v[ci] * is;
            let mg = (sum_g / count) as f32;
            let mgx = (sum_gx / count) as f32;
            for ni in 0..n {
                let base = (ni * c + ci) * sp;
                for i in base..base + sp {
                    let xh = (xv[i] - m) * is;
                    dx[i] = a * (g[i] - mg - xh * mgx);
                }
            }
        }

        let dev = x.device();
        let dx = Tensor::from_vec(dx, x.dims().to_vec(), dev)?;
        let dgamma = Tensor::from_vec(dgamma, c, dev)?;
        let dbeta = Tensor::from_vec(dbeta, c, dev)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Batch normalization over (N, C, H, W) or (N, C) activations.
///
/// Train mode normalizes with batch statistics and updates the running
/// buffers with detached values; Eval and Frozen modes normalize with the
/// running buffers so outputs do not depend on batch composition.
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(channels: usize, dev: &Device) -> Result<Self> {
        Ok(Self {
            gamma: Var::from_tensor(&Tensor::ones(channels, DType::F32, dev)?)?,
            beta: Var::from_tensor(&Tensor::zeros(channels, DType::F32, dev)?)?,
            running_mean: Var::from_tensor(&Tensor::zeros(channels, DType::F32, dev)?)?,
            running_var: Var::from_tensor(&Tensor::ones(channels, DType::F32, dev)?)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let rank = x.rank();
        let c = self.gamma.elem_count();
        let stat_shape: Vec<usize> = match rank {
            2 => vec![1, c],
            4 => vec![1, c, 1, 1],
            r => candle_core::bail!("batch norm expects rank 2 or 4 input, got {r}"),
        };

        if mode.batch_stats() {
            let dims = x.dims().to_vec();
            let spatial: usize = dims[2..].iter().product();
            let total = x.elem_count();
            let flat = x.contiguous()?.apply_op3(
                self.gamma.as_tensor(),
                self.beta.as_tensor(),
                BatchNormTrainOp {
                    channels: c,
                    spatial,
                    eps: BN_EPS,
                },
            )?;
            let y = flat.narrow(0, 0, total)?.reshape(dims)?;
            let mean = flat.narrow(0, total, c)?.detach();
            let inv_std = flat.narrow(0, total + c, c)?.detach();
            self.update_running(&mean, &inv_std, (total / c) as f64)?;
            return Ok(y);
        }

        // Eval and frozen modes: running statistics folded into one
        // per-channel scale and shift.
        let rm = self.running_mean.as_tensor().detach();
        let rv = self.running_var.as_tensor().detach();
        let gamma = detach_if(&self.gamma, mode.detach_params());
        let beta = detach_if(&self.beta, mode.detach_params());
        let scale = (gamma * (rv + BN_EPS)?.sqrt()?.recip()?)?;
        let shift = (beta - (rm * &scale)?)?;
        x.broadcast_mul(&scale.reshape(stat_shape.clone())?)?
            .broadcast_add(&shift.reshape(stat_shape)?)
    }

    fn update_running(&self, mean: &Tensor, inv_std: &Tensor, count: f64) -> Result<()> {
        // var = 1 / inv_std^2 - eps, with the unbiased correction for the
        // running buffer, per the usual convention.
        let var = (inv_std.sqr()?.recip()? - BN_EPS)?;
        let bessel = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let var = (var * bessel)?;
        let new_mean =
            ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean * BN_MOMENTUM)?)?;
        let new_var =
            ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (var * BN_MOMENTUM)?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        Ok(())
    }

    pub fn register(&self, prefix: &str, out: &mut ParamList) {
        out.push(prefix, "gamma", &self.gamma, true);
        out.push(prefix, "beta", &self.beta, true);
        out.push(prefix, "running_mean", &self.running_mean, false);
        out.push(prefix, "running_var", &self.running_var, false);
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.maximum(&x.affine(slope, 0.0)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Spatial average pooling to a single value per channel: (N,C,H,W) -> (N,C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}

/// Identity-shortcut residual block: two 3x3 (or 1x1) convolutions with
/// batch norm, added to the input, final ReLU.
pub struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl ResBlock {
    pub fn new(
        rng: &mut InitRng,
        channels: usize,
        kernel: usize,
        padding: usize,
        dev: &Device,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(rng, WeightInit::Kaiming, channels, channels, kernel, 1, padding, false, dev)?,
            bn1: BatchNorm::new(channels, dev)?,
            conv2: Conv2d::new(rng, WeightInit::Kaiming, channels, channels, kernel, 1, padding, false, dev)?,
            bn2: BatchNorm::new(channels, dev)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x, mode)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h, mode)?, mode)?;
        (x + h)?.relu()
    }

    pub fn register(&self, prefix: &str, out: &mut ParamList) {
        self.conv1.register(&format!("{prefix}.conv1"), out);
        self.bn1.register(&format!("{prefix}.bn1"), out);
        self.conv2.register(&format!("{prefix}.conv2"), out);
        self.bn2.register(&format!("{prefix}.bn2"), out);
    }
}

/// Downsampling residual block with a strided 1x1 projection shortcut.
pub struct DResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    proj: Conv2d,
    proj_bn: BatchNorm,
}

impl DResBlock {
    pub fn new(
        rng: &mut InitRng,
        cin: usize,
        cout: usize,
        stride: usize,
        dev: &Device,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(rng, WeightInit::Kaiming, cin, cout, 3, stride, 1, false, dev)?,
            bn1: BatchNorm::new(cout, dev)?,
            conv2: Conv2d::new(rng, WeightInit::Kaiming, cout, cout, 3, 1, 1, false, dev)?,
            bn2: BatchNorm::new(cout, dev)?,
            proj: Conv2d::new(rng, WeightInit::Kaiming, cin, cout, 1, stride, 0, false, dev)?,
            proj_bn: BatchNorm::new(cout, dev)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x, mode)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h, mode)?, mode)?;
        let s = self.proj_bn.forward(&self.proj.forward(x, mode)?, mode)?;
        (s + h)?.relu()
    }

    pub fn register(&self, prefix: &str, out: &mut ParamList) {
        self.conv1.register(&format!("{prefix}.conv1"), out);
        self.bn1.register(&format!("{prefix}.bn1"), out);
        self.conv2.register(&format!("{prefix}.conv2"), out);
        self.bn2.register(&format!("{prefix}.bn2"), out);
        self.proj.register(&format!("{prefix}.proj"), out);
        self.proj_bn.register(&format!("{prefix}.proj_bn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn conv_shape_and_determinism() {
        let mut rng = InitRng::new(1);
        let conv = Conv2d::new(&mut rng, WeightInit::Kaiming, 1, 8, 7, 2, 3, false, &dev()).unwrap();
        let x = Tensor::zeros((2, 1, 80, 80), DType::F32, &dev()).unwrap();
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dims(), &[2, 8, 40, 40]);

        let mut rng2 = InitRng::new(1);
        let conv2 = Conv2d::new(&mut rng2, WeightInit::Kaiming, 1, 8, 7, 2, 3, false, &dev()).unwrap();
        let x = Tensor::randn(0f32, 1f32, (1, 1, 16, 16), &dev()).unwrap();
        let a = conv.forward(&x, Mode::Eval).unwrap().to_vec1_flat().unwrap();
        let b = conv2.forward(&x, Mode::Eval).unwrap().to_vec1_flat().unwrap();
        assert_eq!(a, b);
    }

    trait FlatVec {
        fn to_vec1_flat(&self) -> candle_core::Result<Vec<f32>>;
    }

    impl FlatVec for Tensor {
        fn to_vec1_flat(&self) -> candle_core::Result<Vec<f32>> {
            self.flatten_all()?.to_vec1::<f32>()
        }
    }

    #[test]
    fn fast_conv_matches_reference_kernel() {
        // Every kernel/stride/padding geometry the model uses.
        let cases = [
            (1usize, 3usize, 7usize, 4usize, 2usize, 3usize, 80usize),
            (4, 8, 3, 4, 2, 1, 40),
            (24, 8, 3, 4, 1, 1, 20),
            (8, 16, 4, 4, 2, 1, 40),
            (16, 8, 1, 4, 1, 0, 5),
            (8, 16, 1, 4, 2, 0, 20),
            (4, 4, 3, 4, 2, 0, 39),
            (32, 1, 4, 4, 1, 0, 5),
            (1, 1, 2, 4, 1, 0, 2),
        ];
        for (cin, cout, k, b, s, p, hw) in cases {
            let x = Tensor::randn(0f32, 1f32, (b, cin, hw, hw), &dev()).unwrap();
            let w = Tensor::randn(0f32, 0.1f32, (cout, cin, k, k), &dev()).unwrap();
            let fast = conv2d_gemm(&x, &w, s, p).unwrap();
            let reference = x.conv2d(&w, p, s, 1, 1).unwrap();
            assert_eq!(fast.dims(), reference.dims(), "k{k} s{s} p{p}");
            let diff = (fast - reference)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(diff < 1e-4, "k{k} s{s} p{p} cin{cin}: max diff {diff}");
        }
    }

    #[test]
    fn gemm_conv_transpose_matches_reference_kernel() {
        // (cin, cout, k, stride, pad, b, hw) covering the generator chain.
        let cases = [
            (64usize, 32usize, 5usize, 1usize, 0usize, 4usize, 1usize),
            (32, 16, 4, 2, 1, 4, 5),
            (16, 1, 4, 2, 1, 4, 40),
        ];
        for (cin, cout, k, s, p, b, hw) in cases {
            let x = Tensor::randn(0f32, 1f32, (b, cin, hw, hw), &dev()).unwrap();
            let w = Tensor::randn(0f32, 0.1f32, (cin, cout, k, k), &dev()).unwrap();
            let fast = conv_transpose2d_gemm(&x, &w, s, p).unwrap();
            let reference = x.conv_transpose2d(&w, p, 0, s, 1).unwrap();
            assert_eq!(fast.dims(), reference.dims(), "convT k{k} s{s} p{p}");
            let diff = (fast - reference)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(diff < 1e-3, "convT k{k} s{s} p{p}: max diff {diff}");
        }
    }

    #[test]
    fn gemm_conv_transpose_gradients_match_finite_differences() {
        let x0: Vec<f32> = (0..2 * 4 * 3 * 3).map(|i| ((i as f32) * 0.9).sin()).collect();
        let w0: Vec<f32> = (0..4 * 2 * 16).map(|i| ((i as f32) * 0.4).cos() * 0.3).collect();
        let eval = |x: &[f32], w: &[f32]| -> f32 {
            let x = Tensor::from_vec(x.to_vec(), (2, 4, 3, 3), &dev()).unwrap();
            let w = Tensor::from_vec(w.to_vec(), (4, 2, 4, 4), &dev()).unwrap();
            conv_transpose2d_gemm(&x, &w, 2, 1)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap()
        };
        let xv = Var::from_tensor(&Tensor::from_vec(x0.clone(), (2, 4, 3, 3), &dev()).unwrap()).unwrap();
        let wv = Var::from_tensor(&Tensor::from_vec(w0.clone(), (4, 2, 4, 4), &dev()).unwrap()).unwrap();
        let loss = conv_transpose2d_gemm(xv.as_tensor(), wv.as_tensor(), 2, 1)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let gx = grads.get(&xv).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let gw = grads.get(&wv).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let h = 1e-2f32;
        for i in [0usize, 9, 31, 71] {
            let mut up = x0.clone();
            up[i] += h;
            let mut dn = x0.clone();
            dn[i] -= h;
            let num = (eval(&up, &w0) - eval(&dn, &w0)) / (2.0 * h);
            assert!(
                (num - gx[i]).abs() / gx[i].abs().max(1.0) < 2e-2,
                "convT x grad {i}: {num} vs {}",
                gx[i]
            );
        }
        for i in [0usize, 21, 77, 127] {
            let mut up = w0.clone();
            up[i] += h;
            let mut dn = w0.clone();
            dn[i] -= h;
            let num = (eval(&x0, &up) - eval(&x0, &dn)) / (2.0 * h);
            assert!(
                (num - gw[i]).abs() / gw[i].abs().max(1.0) < 2e-2,
                "convT w grad {i}: {num} vs {}",
                gw[i]
            );
        }
    }

    #[test]
    fn fast_conv_gradients_match_finite_differences() {
        let x0: Vec<f32> = (0..2 * 3 * 6 * 6).map(|i| ((i as f32) * 0.7).sin()).collect();
        let w0: Vec<f32> = (0..4 * 3 * 9).map(|i| ((i as f32) * 0.3).cos() * 0.2).collect();
        let eval = |x: &[f32], w: &[f32]| -> f32 {
            let x = Tensor::from_vec(x.to_vec(), (2, 3, 6, 6), &dev()).unwrap();
            let w = Tensor::from_vec(w.to_vec(), (4, 3, 3, 3), &dev()).unwrap();
            conv2d_gemm(&x, &w, 2, 1)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap()
        };
        let xv = Var::from_tensor(&Tensor::from_vec(x0.clone(), (2, 3, 6, 6), &dev()).unwrap()).unwrap();
        let wv = Var::from_tensor(&Tensor::from_vec(w0.clone(), (4, 3, 3, 3), &dev()).unwrap()).unwrap();
        let loss = conv2d_gemm(xv.as_tensor(), wv.as_tensor(), 2, 1)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let gx = grads.get(&xv).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let gw = grads.get(&wv).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();

        let h = 1e-2f32;
        for i in [0usize, 17, 40, 71] {
            let mut up = x0.clone();
            up[i] += h;
            let mut dn = x0.clone();
            dn[i] -= h;
            let num = (eval(&up, &w0) - eval(&dn, &w0)) / (2.0 * h);
            assert!(
                (num - gx[i]).abs() / gx[i].abs().max(1.0) < 2e-2,
                "x grad {i}: {num} vs {}",
                gx[i]
            );
        }
        for i in [0usize, 13, 35, 100] {
            let mut up = w0.clone();
            up[i] += h;
            let mut dn = w0.clone();
            dn[i] -= h;
            let num = (eval(&x0, &up) - eval(&x0, &dn)) / (2.0 * h);
            assert!(
                (num - gw[i]).abs() / gw[i].abs().max(1.0) < 2e-2,
                "w grad {i}: {num} vs {}",
                gw[i]
            );
        }
    }

    #[test]
    fn fused_batch_norm_matches_composed_reference_and_gradients() {
        let (n, c, hw) = (5usize, 3usize, 4usize);
        let x0: Vec<f32> = (0..n * c * hw * hw).map(|i| ((i as f32) * 0.61).sin() * 2.0).collect();
        let g0: Vec<f32> = vec![1.3, 0.7, -0.4];
        let b0: Vec<f32> = vec![0.1, -0.2, 0.5];

        // f64 reference of train-mode normalization.
        let reference = |x: &[f32], g: &[f32], b: &[f32]| -> Vec<f32> {
            let sp = hw * hw;
            let count = (n * sp) as f64;
            let mut out = vec![0f32; x.len()];
            for ci in 0..c {
                let mut sum = 0f64;
                let mut sumsq = 0f64;
                for ni in 0..n {
                    for i in 0..sp {
                        let v = x[(ni * c + ci) * sp + i] as f64;
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let m = sum / count;
                let var = sumsq / count - m * m;
                let inv = 1.0 / (var + BN_EPS).sqrt();
                for ni in 0..n {
                    for i in 0..sp {
                        let idx = (ni * c + ci) * sp + i;
                        out[idx] = ((x[idx] as f64 - m) * inv * g[ci] as f64 + b[ci] as f64) as f32;
                    }
                }
            }
            out
        };

        let bn = BatchNorm::new(c, &dev()).unwrap();
        bn.gamma.set(&Tensor::from_vec(g0.clone(), c, &dev()).unwrap()).unwrap();
        bn.beta.set(&Tensor::from_vec(b0.clone(), c, &dev()).unwrap()).unwrap();
        let xt = Var::from_tensor(&Tensor::from_vec(x0.clone(), (n, c, hw, hw), &dev()).unwrap()).unwrap();
        let y = bn.forward(xt.as_tensor(), Mode::Train).unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let want = reference(&x0, &g0, &b0);
        for (a, b) in yv.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }

        // Gradcheck through the fused backward.
        let loss = y.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let gx = grads.get(&xt).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let gg = grads.get(&bn.gamma).unwrap().to_vec1::<f32>().unwrap();
        let gb = grads.get(&bn.beta).unwrap().to_vec1::<f32>().unwrap();
        let eval = |x: &[f32], g: &[f32], b: &[f32]| -> f64 {
            reference(x, g, b).iter().map(|v| (*v as f64) * (*v as f64)).sum()
        };
        let h = 1e-2f32;
        for i in [0usize, 33, 100, 170] {
            let mut up = x0.clone();
            up[i] += h;
            let mut dn = x0.clone();
            dn[i] -= h;
            let num = ((eval(&up, &g0, &b0) - eval(&dn, &g0, &b0)) / (2.0 * h as f64)) as f32;
            assert!(
                (num - gx[i]).abs() < 2e-2 * gx[i].abs().max(1.0),
                "bn x grad {i}: {num} vs {}",
                gx[i]
            );
        }
        for i in 0..c {
            let mut up = g0.clone();
            up[i] += h;
            let mut dn = g0.clone();
            dn[i] -= h;
            let num = ((eval(&x0, &up, &b0) - eval(&x0, &dn, &b0)) / (2.0 * h as f64)) as f32;
            assert!((num - gg[i]).abs() < 2e-2 * gg[i].abs().max(1.0), "gamma {i}");
            let mut up = b0.clone();
            up[i] += h;
            let mut dn = b0.clone();
            dn[i] -= h;
            let num = ((eval(&x0, &g0, &up) - eval(&x0, &g0, &dn)) / (2.0 * h as f64)) as f32;
            assert!((num - gb[i]).abs() < 2e-2 * gb[i].abs().max(1.0), "beta {i}");
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_eval_uses_running() {
        let bn = BatchNorm::new(3, &dev()).unwrap();
        let x = Tensor::randn(0f32, 2f32, (8, 3, 4, 4), &dev()).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(m.abs() < 1e-5);

        // Running buffers moved away from their init after one train pass.
        let rm = bn.running_mean.as_tensor().to_vec1::<f32>().unwrap();
        assert!(rm.iter().any(|v| v.abs() > 1e-8));

        // Eval output is independent of batch statistics.
        let x1 = Tensor::randn(0f32, 1f32, (1, 3, 4, 4), &dev()).unwrap();
        let alone = bn.forward(&x1, Mode::Eval).unwrap().to_vec1_flat().unwrap();
        let joined = Tensor::cat(&[&x1, &x], 0).unwrap();
        let within = bn.forward(&joined, Mode::Eval).unwrap();
        let within = within.narrow(0, 0, 1).unwrap().to_vec1_flat().unwrap();
        assert_eq!(alone, within);
    }

    #[test]
    fn frozen_mode_blocks_parameter_gradients() {
        let mut rng = InitRng::new(3);
        let conv = Conv2d::new(&mut rng, WeightInit::Kaiming, 2, 2, 3, 1, 1, false, &dev()).unwrap();
        let x = Var::randn(0f32, 1f32, (1, 2, 6, 6), &dev()).unwrap();
        let y = conv.forward(x.as_tensor(), Mode::Frozen).unwrap();
        let grads = y.sqr().unwrap().mean_all().unwrap().backward().unwrap();
        assert!(grads.get(&conv.weight).is_none());
        assert!(grads.get(&x).is_some());
    }

    #[test]
    fn leaky_relu_and_sigmoid_ranges() {
        let x = Tensor::new(&[-2f32, 0.0, 3.0], &dev()).unwrap();
        let l = leaky_relu(&x, 0.2).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(l, vec![-0.4, 0.0, 3.0]);
        let s = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!((s[1] - 0.5).abs() < 1e-6);
    }
}
