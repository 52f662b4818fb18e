//! Multiscale parcellation and the sub-volume quantification loss.
//!
//! A patch is covered at up to four scales by sliding cubic sub-volumes
//! (edge = patch/2^l, stride = half the edge, boundary-flush windows
//! appended). The loss sums, over every sub-volume, the absolute mean gap
//! plus the absolute max gap between the denoised and reference patches,
//! weighted per scale. The fast path uses a summed-area table for means
//! and a monotone-queue sliding maximum per axis, so the cost is
//! O(voxels x scales); `quant_loss_bruteforce` is the literal nested-loop
//! form kept as a test oracle.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volume::axis_origins;

/// Default per-scale weights, finest scale heaviest.
pub const DEFAULT_SCALE_WEIGHTS: [f64; 4] = [0.03, 0.07, 0.15, 0.75];

/// One parcellation scale: cubic sub-volume edge, stride, per-axis window
/// origins (identical on all three axes), and its loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Scale {
    pub index: u8,
    pub sub_size: usize,
    pub stride: usize,
    pub origins: Vec<usize>,
    pub weight: f64,
}

impl Scale {
    /// Number of sub-volumes at this scale.
    pub fn window_count(&self) -> usize {
        self.origins.len().pow(3)
    }
}

/// The full multiscale plan for one patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct ParcellationPlan {
    pub patch_size: usize,
    pub scales: Vec<Scale>,
}

impl ParcellationPlan {
    /// Builds the plan with the default scale weights.
    pub fn build(patch_size: usize) -> Result<Self> {
        Self::build_with_weights(patch_size, DEFAULT_SCALE_WEIGHTS)
    }

    /// Builds the plan. Scales whose sub-volume edge would fall below 2
    /// voxels are dropped and the remaining weights renormalized.
    pub fn build_with_weights(patch_size: usize, weights: [f64; 4]) -> Result<Self> {
        if patch_size < 4 {
            return Err(Error::Config(format!(
                "patch size {patch_size} too small for parcellation (minimum 4)"
            )));
        }
        if weights.iter().any(|&w| w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("scale weights must be non-negative with a positive sum".into()));
        }
        let mut scales = Vec::new();
        for l in 1..=4usize {
            let sub = (patch_size >> l).max(1);
            if sub < 2 {
                continue;
            }
            let stride = (sub / 2).max(1);
            scales.push(Scale {
                index: l as u8,
                sub_size: sub,
                stride,
                origins: axis_origins(patch_size, sub, stride),
                weight: weights[l - 1],
            });
        }
        if scales.len() < 4 {
            let total: f64 = scales.iter().map(|s| s.weight).sum();
            if total <= 0.0 {
                return Err(Error::Config("all retained scale weights are zero".into()));
            }
            for s in scales.iter_mut() {
                s.weight /= total;
            }
        }
        Ok(Self { patch_size, scales })
    }

    /// Human-readable per-scale summary (edge, stride, window count, weight).
    pub fn describe(&self) -> String {
        let mut out = format!("patch size {}\n", self.patch_size);
        for s in &self.scales {
            out.push_str(&format!(
                "scale {}: sub_size={} stride={} windows_per_axis={} windows={} weight={}\n",
                s.index,
                s.sub_size,
                s.stride,
                s.origins.len(),
                s.window_count(),
                s.weight
            ));
        }
        out
    }
}

/// Value, per-voxel gradient, and per-scale breakdown of the loss.
#[derive(Debug, Clone)]
pub struct QuantLossResult {
    pub value: f64,
    pub grad: Vec<f64>,
    pub per_scale: Vec<f64>,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Summed-area table with one layer of zeros on the low side;
/// `sat[x+1, y+1, z+1]` holds the sum over `[0..=x, 0..=y, 0..=z]`.
fn build_sat(data: &[f64], p: usize) -> Vec<f64> {
    let ap = p + 1;
    let mut sat = vec![0.0f64; ap * ap * ap];
    let at = |x: usize, y: usize, z: usize| x + ap * (y + ap * z);
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                sat[at(x + 1, y + 1, z + 1)] = data[x + p * (y + p * z)]
                    + sat[at(x, y + 1, z + 1)]
                    + sat[at(x + 1, y, z + 1)]
                    + sat[at(x + 1, y + 1, z)]
                    - sat[at(x, y, z + 1)]
                    - sat[at(x, y + 1, z)]
                    - sat[at(x + 1, y, z)]
                    + sat[at(x, y, z)];
            }
        }
    }
    sat
}

#[inline]
fn box_sum(sat: &[f64], ap: usize, o: [usize; 3], s: usize) -> f64 {
    let (x0, y0, z0) = (o[0], o[1], o[2]);
    let (x1, y1, z1) = (x0 + s, y0 + s, z0 + s);
    let at = |x: usize, y: usize, z: usize| x + ap * (y + ap * z);
    sat[at(x1, y1, z1)] - sat[at(x0, y1, z1)] - sat[at(x1, y0, z1)] - sat[at(x1, y1, z0)]
        + sat[at(x0, y0, z1)]
        + sat[at(x0, y1, z0)]
        + sat[at(x1, y0, z0)]
        - sat[at(x0, y0, z0)]
}

/// Sliding-window maximum along one axis, carrying a payload index so the
/// argmax voxel survives the three passes. Ties keep the earlier position.
fn sliding_window_max(
    vals: &[f64],
    args: &[u32],
    dims: [usize; 3],
    axis: usize,
    window: usize,
) -> (Vec<f64>, Vec<u32>, [usize; 3]) {
    let n = dims[axis];
    debug_assert!(window >= 1 && window <= n);
    let mut out_dims = dims;
    out_dims[axis] = n - window + 1;
    let out_len = out_dims[0] * out_dims[1] * out_dims[2];
    let mut out_vals = vec![0.0f64; out_len];
    let mut out_args = vec![0u32; out_len];

    let stride_in = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let stride_out = match axis {
        0 => 1,
        1 => out_dims[0],
        _ => out_dims[0] * out_dims[1],
    };
    let (n_a, n_b, sa_in, sb_in, sa_out, sb_out) = match axis {
        0 => (dims[1], dims[2], dims[0], dims[0] * dims[1], out_dims[0], out_dims[0] * out_dims[1]),
        1 => (dims[0], dims[2], 1, dims[0] * dims[1], 1, out_dims[0] * out_dims[1]),
        _ => (dims[0], dims[1], 1, dims[0], 1, out_dims[0]),
    };

    let mut deque: VecDeque<usize> = VecDeque::with_capacity(window + 1);
    for b in 0..n_b {
        for a in 0..n_a {
            let base_in = a * sa_in + b * sb_in;
            let base_out = a * sa_out + b * sb_out;
            deque.clear();
            for i in 0..n {
                let v = vals[base_in + i * stride_in];
                while let Some(&back) = deque.back() {
                    if vals[base_in + back * stride_in] < v {
                        deque.pop_back();
                    } else {
                        break;
                    }
                }
                deque.push_back(i);
                if *deque.front().unwrap() + window <= i {
                    deque.pop_front();
                }
                if i + 1 >= window {
                    let src = base_in + deque.front().unwrap() * stride_in;
                    let dst = base_out + (i + 1 - window) * stride_out;
                    out_vals[dst] = vals[src];
                    out_args[dst] = args[src];
                }
            }
        }
    }
    (out_vals, out_args, out_dims)
}

fn check_patch_shapes(v_den: &[f64], v_hc: &[f64], plan: &ParcellationPlan) -> Result<usize> {
    let p = plan.patch_size;
    let n = p * p * p;
    if v_den.len() != n || v_hc.len() != n {
        return Err(Error::Dimension(format!(
            "patch length mismatch: den {}, hc {}, plan expects {n}",
            v_den.len(),
            v_hc.len()
        )));
    }
    Ok(n)
}

/// Fast evaluation of the multiscale quantification loss with its
/// subgradient. The mean term spreads `weight/(N*J) * sign` over each
/// sub-volume (via a 3D difference array); the max term routes
/// `weight/N * sign` to the first-in-scan-order argmax voxel of the
/// denoised sub-volume.
pub fn quant_loss(v_den: &[f64], v_hc: &[f64], plan: &ParcellationPlan) -> Result<QuantLossResult> {
    let n = check_patch_shapes(v_den, v_hc, plan)?;
    let p = plan.patch_size;
    let ap = p + 1;
    let sat_den = build_sat(v_den, p);
    let sat_hc = build_sat(v_hc, p);
    let identity: Vec<u32> = (0..n as u32).collect();
    let mut grad = vec![0.0f64; n];
    let mut per_scale = Vec::with_capacity(plan.scales.len());

    for scale in &plan.scales {
        let s = scale.sub_size;
        let n_axis = p - s + 1;
        let (v1, a1, d1) = sliding_window_max(v_den, &identity, [p, p, p], 0, s);
        let (v2, a2, d2) = sliding_window_max(&v1, &a1, d1, 1, s);
        let (den_max, den_arg, _) = sliding_window_max(&v2, &a2, d2, 2, s);
        let (h1, b1, e1) = sliding_window_max(v_hc, &identity, [p, p, p], 0, s);
        let (h2, b2, e2) = sliding_window_max(&h1, &b1, e1, 1, s);
        let (hc_max, _, _) = sliding_window_max(&h2, &b2, e2, 2, s);

        let coeff = scale.weight / scale.window_count() as f64;
        let j = (s * s * s) as f64;
        let mut diff = vec![0.0f64; ap * ap * ap];
        let mut scale_sum = 0.0f64;
        let mut any_mean_grad = false;
        for &ox in &scale.origins {
            for &oy in &scale.origins {
                for &oz in &scale.origins {
                    let dmean = (box_sum(&sat_den, ap, [ox, oy, oz], s)
                        - box_sum(&sat_hc, ap, [ox, oy, oz], s))
                        / j;
                    let pos = ox + n_axis * (oy + n_axis * oz);
                    let dmax = den_max[pos] - hc_max[pos];
                    scale_sum += dmean.abs() + dmax.abs();

                    let gm = coeff * sign(dmean) / j;
                    if gm != 0.0 {
                        any_mean_grad = true;
                        let at = |x: usize, y: usize, z: usize| x + ap * (y + ap * z);
                        let (x1, y1, z1) = (ox + s, oy + s, oz + s);
                        diff[at(ox, oy, oz)] += gm;
                        diff[at(x1, oy, oz)] -= gm;
                        diff[at(ox, y1, oz)] -= gm;
                        diff[at(ox, oy, z1)] -= gm;
                        diff[at(x1, y1, oz)] += gm;
                        diff[at(x1, oy, z1)] += gm;
                        diff[at(ox, y1, z1)] += gm;
                        diff[at(x1, y1, z1)] -= gm;
                    }
                    let gx = coeff * sign(dmax);
                    if gx != 0.0 {
                        grad[den_arg[pos] as usize] += gx;
                    }
                }
            }
        }
        if any_mean_grad {
            // prefix sums turn the corner scatter back into box coverage
            for z in 0..ap {
                for y in 0..ap {
                    let base = ap * (y + ap * z);
                    for x in 1..ap {
                        diff[base + x] += diff[base + x - 1];
                    }
                }
            }
            for z in 0..ap {
                for y in 1..ap {
                    let base = ap * (y + ap * z);
                    let prev = ap * ((y - 1) + ap * z);
                    for x in 0..ap {
                        diff[base + x] += diff[prev + x];
                    }
                }
            }
            for z in 1..ap {
                for y in 0..ap {
                    let base = ap * (y + ap * z);
                    let prev = ap * (y + ap * (z - 1));
                    for x in 0..ap {
                        diff[base + x] += diff[prev + x];
                    }
                }
            }
            for z in 0..p {
                for y in 0..p {
                    let src = ap * (y + ap * z);
                    let dst = p * (y + p * z);
                    for x in 0..p {
                        grad[dst + x] += diff[src + x];
                    }
                }
            }
        }
        per_scale.push(coeff * scale_sum);
    }
    Ok(QuantLossResult { value: per_scale.iter().sum(), grad, per_scale })
}

/// Literal nested-loop evaluation of the same loss; the test oracle for
/// `quant_loss`.
pub fn quant_loss_bruteforce(v_den: &[f64], v_hc: &[f64], plan: &ParcellationPlan) -> Result<f64> {
    check_patch_shapes(v_den, v_hc, plan)?;
    let p = plan.patch_size;
    let mut total = 0.0f64;
    for scale in &plan.scales {
        let s = scale.sub_size;
        let coeff = scale.weight / scale.window_count() as f64;
        let j = (s * s * s) as f64;
        let mut scale_sum = 0.0f64;
        for &ox in &scale.origins {
            for &oy in &scale.origins {
                for &oz in &scale.origins {
                    let mut sum_den = 0.0;
                    let mut sum_hc = 0.0;
                    let mut max_den = f64::NEG_INFINITY;
                    let mut max_hc = f64::NEG_INFINITY;
                    for dz in 0..s {
                        for dy in 0..s {
                            for dx in 0..s {
                                let idx = (ox + dx) + p * ((oy + dy) + p * (oz + dz));
                                let d = v_den[idx];
                                let h = v_hc[idx];
                                sum_den += d;
                                sum_hc += h;
                                if d > max_den {
                                    max_den = d;
                                }
                                if h > max_hc {
                                    max_hc = h;
                                }
                            }
                        }
                    }
                    scale_sum += (sum_den / j - sum_hc / j).abs() + (max_den - max_hc).abs();
                }
            }
        }
        total += coeff * scale_sum;
    }
    Ok(total)
}
