//! Separable Gaussian smoothing on x-fastest 3D arrays.

/// Per-axis 1D kernel for a Gaussian with the given FWHM (mm), sampled at
/// the voxel pitch and truncated at 3 sigma. Returns `None` when the kernel
/// degenerates to the identity.
fn kernel(fwhm_mm: f64, voxel_mm: f64) -> Option<Vec<f64>> {
    if fwhm_mm <= 0.0 {
        return None;
    }
    let sigma_vox = fwhm_mm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt()) / voxel_mm;
    let radius = (3.0 * sigma_vox).ceil() as usize;
    if radius == 0 {
        return None;
    }
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=(radius as isize) {
        let t = i as f64 / sigma_vox;
        k.push((-0.5 * t * t).exp());
    }
    let total: f64 = k.iter().sum();
    for w in k.iter_mut() {
        *w /= total;
    }
    Some(k)
}

/// Blurs along one axis. Near the boundary the truncated kernel is
/// renormalized over its in-bounds taps, so constants are preserved and
/// values stay inside the input range.
fn blur_axis(data: &[f64], dims: [usize; 3], axis: usize, k: &[f64]) -> Vec<f64> {
    let radius = (k.len() - 1) / 2;
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = vec![0.0f64; data.len()];
    // Iterate over all lines parallel to `axis`.
    let (n_a, n_b, stride_a, stride_b) = match axis {
        0 => (dims[1], dims[2], dims[0], dims[0] * dims[1]),
        1 => (dims[0], dims[2], 1, dims[0] * dims[1]),
        _ => (dims[0], dims[1], 1, dims[0]),
    };
    for b in 0..n_b {
        for a in 0..n_a {
            let base = a * stride_a + b * stride_b;
            for i in 0..n {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(n - 1);
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for j in lo..=hi {
                    let w = k[j + radius - i];
                    acc += w * data[base + j * stride];
                    wsum += w;
                }
                out[base + i * stride] = acc / wsum;
            }
        }
    }
    out
}

/// Separable Gaussian blur with per-axis voxel spacing; `fwhm_mm <= 0`
/// returns the input unchanged.
pub fn gaussian_blur(data: &[f64], dims: [usize; 3], voxel_size: [f64; 3], fwhm_mm: f64) -> Vec<f64> {
    let mut current = data.to_vec();
    for axis in 0..3 {
        if let Some(k) = kernel(fwhm_mm, voxel_size[axis]) {
            current = blur_axis(&current, dims, axis, &k);
        }
    }
    current
}
