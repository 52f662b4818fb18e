//! Two tiny differentiable denoiser architectures with exact reverse-mode
//! gradients, written directly against flat f64 parameter blocks.
//!
//! `ConvNet`: three 3x3x3 convolutions (channels 1 -> 8 -> 8 -> 1) with
//! ReLU between layers and an additive input skip. `LinFilter`: a single
//! 5x5x5 linear convolution. Both use zero padding ("same" output shape).
//! All math is double precision; convolutions are specialized over channel
//! counts so the per-output-channel inner loop vectorizes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Supported denoiser architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    ConvNet,
    LinFilter,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::ConvNet => "convnet",
            Architecture::LinFilter => "linfilter",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "convnet" => Ok(Architecture::ConvNet),
            "linfilter" => Ok(Architecture::LinFilter),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }

    /// (name, length) of every parameter block, in checkpoint order.
    pub fn block_shapes(&self) -> &'static [(&'static str, usize)] {
        match self {
            Architecture::ConvNet => &[
                ("conv1.w", 27 * 1 * 8),
                ("conv1.b", 8),
                ("conv2.w", 27 * 8 * 8),
                ("conv2.b", 8),
                ("conv3.w", 27 * 8 * 1),
                ("conv3.b", 1),
            ],
            Architecture::LinFilter => &[("filter.w", 125), ("filter.b", 1)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.block_shapes().iter().map(|(_, n)| n).sum()
    }

    fn fan_in(&self, block: usize) -> usize {
        match self {
            Architecture::ConvNet => match block {
                0 | 1 => 27,
                _ => 27 * 8,
            },
            Architecture::LinFilter => 125,
        }
    }
}

/// One named flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: &'static str,
    pub values: Vec<f64>,
}

/// All parameters of one model. Weight layout within a convolution block is
/// `w[(tap * c_in + cin) * c_out + cout]`, taps ordered z-major over the
/// kernel cube.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub blocks: Vec<ParamBlock>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let blocks = arch
            .block_shapes()
            .iter()
            .map(|&(name, len)| ParamBlock { name, values: vec![0.0; len] })
            .collect();
        Self { arch, blocks }
    }

    /// Seeded centered-uniform init with 1/sqrt(fan_in) scaling on weights;
    /// biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut params = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        for (i, block) in params.blocks.iter_mut().enumerate() {
            if block.name.ends_with(".w") {
                let bound = 1.0 / (arch.fan_in(i) as f64).sqrt();
                for v in block.values.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        params
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.arch.block_shapes();
        if self.blocks.len() != shapes.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter blocks for {}, found {}",
                shapes.len(),
                self.arch.tag(),
                self.blocks.len()
            )));
        }
        for (block, &(name, len)) in self.blocks.iter().zip(shapes) {
            if block.name != name || block.values.len() != len {
                return Err(Error::Dimension(format!(
                    "parameter block {} has {} values, expected {name} with {len}",
                    block.name,
                    block.values.len()
                )));
            }
        }
        Ok(())
    }

    fn block(&self, index: usize) -> &[f64] {
        &self.blocks[index].values
    }
}

#[derive(Clone, Copy)]
struct Tap {
    dx: isize,
    dy: isize,
    dz: isize,
    delta: isize,
}

fn make_taps(edge: usize, dims: [usize; 3]) -> Vec<Tap> {
    let r = (edge / 2) as isize;
    let mut taps = Vec::with_capacity(edge * edge * edge);
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                taps.push(Tap { dx, dy, dz, delta: dx + dims[0] as isize * (dy + dims[1] as isize * dz) });
            }
        }
    }
    taps
}

/// Reshapes a flat weight block into per-(tap, cin) rows of COUT values.
fn shape_weights<const COUT: usize>(flat: &[f64]) -> Vec<[f64; COUT]> {
    debug_assert_eq!(flat.len() % COUT, 0);
    flat.chunks_exact(COUT)
        .map(|c| {
            let mut row = [0.0; COUT];
            row.copy_from_slice(c);
            row
        })
        .collect()
}

/// Weights of the transposed convolution: mirrored taps with cin/cout
/// swapped, so input gradients reuse the forward kernel.
fn transpose_weights<const CIN: usize, const COUT: usize>(flat: &[f64], n_taps: usize) -> Vec<[f64; CIN]> {
    let mut out = vec![[0.0f64; CIN]; n_taps * COUT];
    for k in 0..n_taps {
        let mk = n_taps - 1 - k;
        for cin in 0..CIN {
            for cout in 0..COUT {
                out[k * COUT + cout][cin] = flat[(mk * CIN + cin) * COUT + cout];
            }
        }
    }
    out
}

/// Zero-padded convolution. Interior voxels run a branch-free loop with
/// four interleaved accumulators (the per-lane dependency chain otherwise
/// dominates); boundary voxels take the guarded path.
fn conv<const CIN: usize, const COUT: usize>(
    input: &[[f64; CIN]],
    dims: [usize; 3],
    taps: &[Tap],
    radius: usize,
    w: &[[f64; COUT]],
    bias: &[f64; COUT],
    out: &mut Vec<[f64; COUT]>,
) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    debug_assert_eq!(input.len(), n);
    debug_assert_eq!(w.len(), taps.len() * CIN);
    out.clear();
    out.resize(n, [0.0; COUT]);
    let r = radius;

    let guarded = |x: usize, y: usize, z: usize, idx: usize, out: &mut Vec<[f64; COUT]>| {
        let mut acc = *bias;
        for (k, tap) in taps.iter().enumerate() {
            let xx = x as isize + tap.dx;
            let yy = y as isize + tap.dy;
            let zz = z as isize + tap.dz;
            if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                continue;
            }
            let px = &input[(idx as isize + tap.delta) as usize];
            let wrow = &w[k * CIN..k * CIN + CIN];
            for cin in 0..CIN {
                let s = px[cin];
                let wk = &wrow[cin];
                for cout in 0..COUT {
                    acc[cout] += s * wk[cout];
                }
            }
        }
        out[idx] = acc;
    };

    for z in 0..nz {
        for y in 0..ny {
            let row = nx * (y + ny * z);
            let interior_yz = z >= r && z + r < nz && y >= r && y + r < ny;
            let (lo, hi) = if interior_yz && nx > 2 * r { (r, nx - r) } else { (0, 0) };
            for x in 0..lo {
                guarded(x, y, z, row + x, out);
            }
            // voxel pairs share the weight-row loads; two accumulator
            // sets per voxel keep the add chains short without spilling
            let mut x = lo;
            while x + 1 < hi {
                let idx = row + x;
                let mut acc_a = [[0.0f64; COUT]; 2];
                let mut acc_b = [[0.0f64; COUT]; 2];
                for (k, tap) in taps.iter().enumerate() {
                    let pa = &input[(idx as isize + tap.delta) as usize];
                    let pb = &input[(idx as isize + 1 + tap.delta) as usize];
                    let wrow = &w[k * CIN..k * CIN + CIN];
                    let slot = k & 1;
                    for cin in 0..CIN {
                        let wk = &wrow[cin];
                        let sa = pa[cin];
                        let sb = pb[cin];
                        for cout in 0..COUT {
                            acc_a[slot][cout] += sa * wk[cout];
                            acc_b[slot][cout] += sb * wk[cout];
                        }
                    }
                }
                let mut ta = *bias;
                let mut tb = *bias;
                for cout in 0..COUT {
                    ta[cout] += acc_a[0][cout] + acc_a[1][cout];
                    tb[cout] += acc_b[0][cout] + acc_b[1][cout];
                }
                out[idx] = ta;
                out[idx + 1] = tb;
                x += 2;
            }
            while x < hi {
                let idx = row + x;
                let mut accs = [[0.0f64; COUT]; 2];
                for (k, tap) in taps.iter().enumerate() {
                    let px = &input[(idx as isize + tap.delta) as usize];
                    let wrow = &w[k * CIN..k * CIN + CIN];
                    let acc = &mut accs[k & 1];
                    for cin in 0..CIN {
                        let s = px[cin];
                        let wk = &wrow[cin];
                        for cout in 0..COUT {
                            acc[cout] += s * wk[cout];
                        }
                    }
                }
                let mut total = *bias;
                for cout in 0..COUT {
                    total[cout] += accs[0][cout] + accs[1][cout];
                }
                out[idx] = total;
                x += 1;
            }
            for x in hi.max(lo)..nx {
                guarded(x, y, z, row + x, out);
            }
        }
    }
}

/// Accumulates weight and bias gradients of one convolution layer.
fn conv_weight_grads<const CIN: usize, const COUT: usize>(
    input: &[[f64; CIN]],
    dims: [usize; 3],
    taps: &[Tap],
    g_out: &[[f64; COUT]],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let [nx, ny, nz] = dims;
    for (k, tap) in taps.iter().enumerate() {
        let x_lo = (-tap.dx).max(0) as usize;
        let x_hi = (nx as isize - tap.dx.max(0)) as usize;
        let y_lo = (-tap.dy).max(0) as usize;
        let y_hi = (ny as isize - tap.dy.max(0)) as usize;
        let z_lo = (-tap.dz).max(0) as usize;
        let z_hi = (nz as isize - tap.dz.max(0)) as usize;
        if x_lo >= x_hi || y_lo >= y_hi || z_lo >= z_hi {
            continue;
        }
        let mut acc = [[0.0f64; COUT]; CIN];
        for z in z_lo..z_hi {
            for y in y_lo..y_hi {
                let row = nx * (y + ny * z);
                for x in x_lo..x_hi {
                    let vout = row + x;
                    let vin = (vout as isize + tap.delta) as usize;
                    let g = &g_out[vout];
                    let px = &input[vin];
                    for cin in 0..CIN {
                        let s = px[cin];
                        let a = &mut acc[cin];
                        for cout in 0..COUT {
                            a[cout] += s * g[cout];
                        }
                    }
                }
            }
        }
        for cin in 0..CIN {
            let dst = (k * CIN + cin) * COUT;
            for cout in 0..COUT {
                gw[dst + cout] += acc[cin][cout];
            }
        }
    }
    let mut acc = [0.0f64; COUT];
    for g in g_out {
        for cout in 0..COUT {
            acc[cout] += g[cout];
        }
    }
    for cout in 0..COUT {
        gb[cout] += acc[cout];
    }
}

fn relu<const C: usize>(a: &[[f64; C]]) -> Vec<[f64; C]> {
    a.iter()
        .map(|v| {
            let mut out = [0.0; C];
            for c in 0..C {
                out[c] = v[c].max(0.0);
            }
            out
        })
        .collect()
}

fn relu_mask<const C: usize>(pre: &[[f64; C]], g: &mut [[f64; C]]) {
    for (gv, pv) in g.iter_mut().zip(pre) {
        for c in 0..C {
            if pv[c] <= 0.0 {
                gv[c] = 0.0;
            }
        }
    }
}

fn wrap_channels(input: &[f64]) -> Vec<[f64; 1]> {
    input.iter().map(|&v| [v]).collect()
}

/// Saved activations from a traced forward pass.
pub enum ForwardTrace {
    ConvNet {
        a1: Vec<[f64; 8]>,
        r1: Vec<[f64; 8]>,
        a2: Vec<[f64; 8]>,
        r2: Vec<[f64; 8]>,
    },
    LinFilter,
}

fn check_input(params: &ModelParams, input: &[f64], dims: [usize; 3]) -> Result<()> {
    params.validate()?;
    let n = dims[0] * dims[1] * dims[2];
    if input.len() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "input length {} does not match dims {dims:?}",
            input.len()
        )));
    }
    Ok(())
}

/// Runs the model and keeps the activations needed for `backward_traced`.
pub fn forward_traced(
    params: &ModelParams,
    input: &[f64],
    dims: [usize; 3],
) -> Result<(Vec<f64>, ForwardTrace)> {
    check_input(params, input, dims)?;
    match params.arch {
        Architecture::ConvNet => {
            let taps = make_taps(3, dims);
            let x = wrap_channels(input);
            let w1 = shape_weights::<8>(params.block(0));
            let b1: [f64; 8] = params.block(1).try_into().unwrap();
            let mut a1 = Vec::new();
            conv::<1, 8>(&x, dims, &taps, 1, &w1, &b1, &mut a1);
            let r1 = relu(&a1);
            let w2 = shape_weights::<8>(params.block(2));
            let b2: [f64; 8] = params.block(3).try_into().unwrap();
            let mut a2 = Vec::new();
            conv::<8, 8>(&r1, dims, &taps, 1, &w2, &b2, &mut a2);
            let r2 = relu(&a2);
            let w3 = shape_weights::<1>(params.block(4));
            let b3: [f64; 1] = params.block(5).try_into().unwrap();
            let mut a3 = Vec::new();
            conv::<8, 1>(&r2, dims, &taps, 1, &w3, &b3, &mut a3);
            let out: Vec<f64> = a3.iter().zip(input).map(|(a, &x)| a[0] + x).collect();
            Ok((out, ForwardTrace::ConvNet { a1, r1, a2, r2 }))
        }
        Architecture::LinFilter => {
            let taps = make_taps(5, dims);
            let x = wrap_channels(input);
            let w = shape_weights::<1>(params.block(0));
            let b: [f64; 1] = params.block(1).try_into().unwrap();
            let mut a = Vec::new();
            conv::<1, 1>(&x, dims, &taps, 2, &w, &b, &mut a);
            Ok((a.iter().map(|v| v[0]).collect(), ForwardTrace::LinFilter))
        }
    }
}

/// Runs the model on a (cubic) patch with zero padding.
pub fn forward(params: &ModelParams, input: &[f64], dims: [usize; 3]) -> Result<Vec<f64>> {
    forward_traced(params, input, dims).map(|(out, _)| out)
}

/// Exact reverse-mode gradients given the trace of the matching forward
/// pass. Returns parameter gradients (same block structure as the params)
/// and the gradient with respect to the input.
pub fn backward_traced(
    params: &ModelParams,
    input: &[f64],
    dims: [usize; 3],
    trace: &ForwardTrace,
    upstream: &[f64],
) -> Result<(ModelParams, Vec<f64>)> {
    check_input(params, input, dims)?;
    if upstream.len() != input.len() {
        return Err(Error::Dimension(format!(
            "upstream gradient length {} does not match input length {}",
            upstream.len(),
            input.len()
        )));
    }
    let mut grads = ModelParams::zeros(params.arch);
    match (params.arch, trace) {
        (Architecture::ConvNet, ForwardTrace::ConvNet { a1, r1, a2, r2 }) => {
            let taps = make_taps(3, dims);
            let g_out = wrap_channels(upstream);
            // conv3
            {
                let (gw, gb) = split_two(&mut grads.blocks, 4, 5);
                conv_weight_grads::<8, 1>(r2, dims, &taps, &g_out, gw, gb);
            }
            let w3t = transpose_weights::<8, 1>(params.block(4), taps.len());
            let mut g_r2 = Vec::new();
            conv::<1, 8>(&g_out, dims, &taps, 1, &w3t, &[0.0; 8], &mut g_r2);
            relu_mask(a2, &mut g_r2);
            // conv2
            {
                let (gw, gb) = split_two(&mut grads.blocks, 2, 3);
                conv_weight_grads::<8, 8>(r1, dims, &taps, &g_r2, gw, gb);
            }
            let w2t = transpose_weights::<8, 8>(params.block(2), taps.len());
            let mut g_r1 = Vec::new();
            conv::<8, 8>(&g_r2, dims, &taps, 1, &w2t, &[0.0; 8], &mut g_r1);
            relu_mask(a1, &mut g_r1);
            // conv1
            {
                let x = wrap_channels(input);
                let (gw, gb) = split_two(&mut grads.blocks, 0, 1);
                conv_weight_grads::<1, 8>(&x, dims, &taps, &g_r1, gw, gb);
            }
            let w1t = transpose_weights::<1, 8>(params.block(0), taps.len());
            let mut g_x = Vec::new();
            conv::<8, 1>(&g_r1, dims, &taps, 1, &w1t, &[0.0; 1], &mut g_x);
            let input_grad: Vec<f64> =
                g_x.iter().zip(upstream).map(|(g, &u)| g[0] + u).collect();
            Ok((grads, input_grad))
        }
        (Architecture::LinFilter, ForwardTrace::LinFilter) => {
            let taps = make_taps(5, dims);
            let g_out = wrap_channels(upstream);
            {
                let x = wrap_channels(input);
                let (gw, gb) = split_two(&mut grads.blocks, 0, 1);
                conv_weight_grads::<1, 1>(&x, dims, &taps, &g_out, gw, gb);
            }
            let wt = transpose_weights::<1, 1>(params.block(0), taps.len());
            let mut g_x = Vec::new();
            conv::<1, 1>(&g_out, dims, &taps, 2, &wt, &[0.0; 1], &mut g_x);
            Ok((grads, g_x.iter().map(|v| v[0]).collect()))
        }
        _ => Err(Error::Dimension("trace does not match the model architecture".into())),
    }
}

fn split_two(blocks: &mut [ParamBlock], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (lo, hi) = blocks.split_at_mut(j);
    (&mut lo[i].values, &mut hi[0].values)
}

/// Self-contained reverse mode: reruns the forward pass internally, then
/// differentiates. Training uses `forward_traced` + `backward_traced` to
/// avoid the duplicate forward.
pub fn backward(
    params: &ModelParams,
    input: &[f64],
    dims: [usize; 3],
    upstream: &[f64],
) -> Result<(ModelParams, Vec<f64>)> {
    let (_, trace) = forward_traced(params, input, dims)?;
    backward_traced(params, input, dims, &trace, upstream)
}
