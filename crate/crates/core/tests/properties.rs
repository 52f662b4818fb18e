//! Property tests for the geometric and sampling invariants.

use proptest::prelude::*;

use lqmod_core::lesion::{lesion_loss, sampling_weight, LossNorm, SamplingConfig};
use lqmod_core::seg::{heuristic_probmap, HeuristicConfig};
use lqmod_core::volume::{build_patch_grid, extract_patch, reassemble, Patch, Volume};

fn coverage_map(dims: [usize; 3], patch: usize, origins: &[[usize; 3]]) -> Vec<u32> {
    let mut covered = vec![0u32; dims[0] * dims[1] * dims[2]];
    for &o in origins {
        for dz in 0..patch {
            for dy in 0..patch {
                for dx in 0..patch {
                    covered[(o[0] + dx) + dims[0] * ((o[1] + dy) + dims[1] * (o[2] + dz))] += 1;
                }
            }
        }
    }
    covered
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every voxel is covered by at least one grid patch, against a
    /// brute-force coverage map.
    #[test]
    fn grid_covers_every_voxel(
        nx in 4usize..24,
        ny in 4usize..24,
        nz in 4usize..24,
        patch in 2usize..8,
        tx in 1usize..6,
        ty in 1usize..6,
        tz in 1usize..6,
    ) {
        prop_assume!(patch <= nx.min(ny).min(nz));
        prop_assume!(tx <= patch && ty <= patch && tz <= patch);
        let dims = [nx, ny, nz];
        let grid = build_patch_grid(dims, patch, [tx, ty, tz]).unwrap();
        let covered = coverage_map(dims, patch, &grid.origins);
        prop_assert!(covered.iter().all(|&c| c >= 1));
        // origins are unique and sorted
        let mut sorted = grid.origins.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(&sorted, &grid.origins);
    }

    /// reassemble(alpha * patches) == alpha * reassemble(patches).
    #[test]
    fn reassembly_is_linear(seed in 0u64..1000, alpha in 0.1f64..10.0) {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [9, 8, 7];
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let v = Volume::new(dims, [1.0; 3], data).unwrap();
        let grid = build_patch_grid(dims, 4, [3, 3, 3]).unwrap();
        let patches: Vec<Patch> =
            grid.origins.iter().map(|&o| extract_patch(&v, o, 4).unwrap()).collect();
        let scaled: Vec<Patch> = patches
            .iter()
            .map(|p| Patch {
                origin: p.origin,
                size: p.size,
                data: p.data.iter().map(|x| alpha * x).collect(),
            })
            .collect();
        let base = reassemble(&patches, dims, [1.0; 3]).unwrap();
        let scaled_out = reassemble(&scaled, dims, [1.0; 3]).unwrap();
        for (a, b) in scaled_out.data().iter().zip(base.data()) {
            let expect = alpha * b;
            let rel = (a - expect).abs() / expect.abs().max(1e-9);
            prop_assert!(rel < 1e-12);
        }
    }

    /// extract -> reassemble with unchanged patches reproduces the volume.
    #[test]
    fn identity_pipeline(seed in 0u64..1000) {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nx = rng.random_range(6..16usize);
        let ny = rng.random_range(6..16usize);
        let nz = rng.random_range(6..16usize);
        let patch = rng.random_range(3..=nx.min(ny).min(nz).min(6));
        let stride = rng.random_range(1..=patch);
        let dims = [nx, ny, nz];
        let n = nx * ny * nz;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..4.0)).collect();
        let v = Volume::new(dims, [1.0; 3], data).unwrap();
        let grid = build_patch_grid(dims, patch, [stride; 3]).unwrap();
        let patches: Vec<Patch> =
            grid.origins.iter().map(|&o| extract_patch(&v, o, patch).unwrap()).collect();
        let out = reassemble(&patches, dims, [1.0; 3]).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() / b.abs().max(1.0) < 1e-6);
        }
    }

    /// Weight is non-decreasing in probability and non-increasing in count
    /// level under the default eta table.
    #[test]
    fn weight_monotonicity(
        p1 in 0.0f64..1.0,
        p2 in 0.0f64..1.0,
        l1 in 1.0f64..50.0,
        l2 in 1.0f64..50.0,
    ) {
        let cfg = SamplingConfig::default();
        let (plo, phi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let w_lo = sampling_weight(plo, l1, &cfg).unwrap();
        let w_hi = sampling_weight(phi, l1, &cfg).unwrap();
        prop_assert!(w_hi >= w_lo - 1e-15);
        let (llo, lhi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let w_noisy = sampling_weight(p1, llo, &cfg).unwrap();
        let w_clean = sampling_weight(p1, lhi, &cfg).unwrap();
        prop_assert!(w_noisy >= w_clean - 1e-15);
    }

    /// Perturbing the denoised patch only where p == 0 leaves the lesion
    /// loss value and gradient unchanged exactly.
    #[test]
    fn off_lesion_indifference(seed in 0u64..1000) {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 128;
        let hc: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..2.0)).collect();
        let den: Vec<f64> = hc.iter().map(|h| h + rng.random_range(-0.5..0.5)).collect();
        let prob: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let base = lesion_loss(&den, &hc, &prob, LossNorm::SoftCount).unwrap();
        let mut perturbed = den.clone();
        for i in 0..n {
            if prob[i] == 0.0 {
                perturbed[i] += rng.random_range(-10.0..10.0);
            }
        }
        let after = lesion_loss(&perturbed, &hc, &prob, LossNorm::SoftCount).unwrap();
        prop_assert_eq!(base.value, after.value);
        for (g1, g2) in base.grad.iter().zip(&after.grad) {
            prop_assert!(g1 == g2);
        }
    }

    /// Heuristic probabilities always stay inside [0, 1].
    #[test]
    fn heuristic_probability_range(seed in 0u64..200) {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [10, 10, 10];
        let data: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..20.0)).collect();
        let v = Volume::new(dims, [2.0; 3], data).unwrap();
        let p = heuristic_probmap(&v, &HeuristicConfig::default());
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
