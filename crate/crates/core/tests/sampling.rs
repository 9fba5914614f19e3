mod common;

use volseg::phantom::generate_phantom;
use volseg::sampling::{
    build_training_batch, realized_training_distribution, sample_patch_centers, stream_rng, CenterSampler,
    SamplerConfig, Strategy,
};
use volseg::volume::{class_histogram, linear_index, LabelVolume, PatchSpec};

fn phantom_labels(fraction: f64) -> LabelVolume {
    generate_phantom(5, [48; 3], fraction, 0.1).unwrap().1
}

#[test]
fn balanced_fraction_within_binomial_bound() {
    let labels = phantom_labels(0.02);
    let n = 10_000;
    for seed in 0..5 {
        let cfg = SamplerConfig { seed, ..Default::default() };
        let centers = sample_patch_centers(&labels, n, &cfg).unwrap();
        let fg = centers.iter().filter(|c| labels.get(c[0], c[1], c[2]) > 0).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((fg - 0.5 * n as f64).abs() <= 4.0 * sd, "seed {seed}: {fg}");
    }
}

#[test]
fn foreground_probability_is_honoured() {
    let labels = phantom_labels(0.05);
    for p in [0.0, 0.2, 0.8, 1.0] {
        let cfg = SamplerConfig {
            foreground_probability: p,
            seed: 11,
            ..Default::default()
        };
        let centers = sample_patch_centers(&labels, 5000, &cfg).unwrap();
        let fg = centers.iter().filter(|c| labels.get(c[0], c[1], c[2]) > 0).count() as f64 / 5000.0;
        let sd = (p * (1.0 - p) / 5000.0).sqrt();
        assert!((fg - p).abs() <= 4.0 * sd + 1e-12, "p {p}: {fg}");
    }
}

#[test]
fn conditional_uniformity_chi_square() {
    let labels = phantom_labels(0.02);
    let cfg = SamplerConfig { seed: 21, ..Default::default() };
    let centers = sample_patch_centers(&labels, 100_000, &cfg).unwrap();
    let dims = labels.dims();
    let fg_index: Vec<usize> = (0..labels.voxels()).filter(|&i| labels.labels()[i] > 0).collect();
    let mut slot = vec![usize::MAX; labels.voxels()];
    for (k, &i) in fg_index.iter().enumerate() {
        slot[i] = k;
    }
    let mut fg_counts = vec![0u64; fg_index.len()];
    // Background is too large for one bin per voxel; bin by index residue.
    let bins = 500;
    let mut bg_counts = vec![0u64; bins];
    let mut bg_sizes = vec![0f64; bins];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l == 0 {
            bg_sizes[i % bins] += 1.0;
        }
    }
    for c in &centers {
        let i = linear_index(dims, c[0], c[1], c[2]);
        if labels.labels()[i] > 0 {
            fg_counts[slot[i]] += 1;
        } else {
            bg_counts[i % bins] += 1;
        }
    }
    let n_fg: u64 = fg_counts.iter().sum();
    let n_bg: u64 = bg_counts.iter().sum();
    let expected_fg = vec![n_fg as f64 / fg_index.len() as f64; fg_index.len()];
    let bg_total: f64 = bg_sizes.iter().sum();
    let expected_bg: Vec<f64> = bg_sizes.iter().map(|s| n_bg as f64 * s / bg_total).collect();
    assert!(expected_fg[0] >= 5.0);
    let p_fg = common::chi_square_p(&fg_counts, &expected_fg);
    let p_bg = common::chi_square_p(&bg_counts, &expected_bg);
    assert!(p_fg > 0.001, "foreground p {p_fg}");
    assert!(p_bg > 0.001, "background p {p_bg}");
}

#[test]
fn chi_square_detects_skew() {
    let observed = [150u64, 50, 100, 100];
    assert!(common::chi_square_p(&observed, &[100.0; 4]) < 1e-6);
}

#[test]
fn balanced_sampling_raises_foreground_share() {
    let labels = phantom_labels(0.02);
    let natural = class_histogram(&labels).foreground_fraction();
    let base = SamplerConfig {
        patch_size: [9; 3],
        seed: 4,
        ..Default::default()
    };
    let balanced = realized_training_distribution(&[&labels], &base, 2000).unwrap();
    let uniform_cfg = SamplerConfig {
        strategy: Strategy::Uniform,
        ..base.clone()
    };
    let uniform = realized_training_distribution(&[&labels], &uniform_cfg, 2000).unwrap();
    assert!(balanced.foreground_fraction() > 5.0 * natural);
    let u = uniform.foreground_fraction();
    assert!((u - natural).abs() <= 0.2 * natural, "{u} vs {natural}");
}

#[test]
fn realized_distribution_matches_recount() {
    let labels = phantom_labels(0.05);
    let other = generate_phantom(6, [32, 40, 36], 0.05, 0.1).unwrap().1;
    let cfg = SamplerConfig {
        patch_size: [16, 12, 20],
        seed: 8,
        strategy: Strategy::EquiprobableClasses,
        ..Default::default()
    };
    let n = 40;
    let hist = realized_training_distribution(&[&labels, &other], &cfg, n).unwrap();
    // Same draw order as the library: one shared stream, round-robin.
    let vols = [&labels, &other];
    let samplers = [CenterSampler::new(&labels), CenterSampler::new(&other)];
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let mut counts = vec![0u64; 5];
    for i in 0..n {
        let k = i % 2;
        let c = samplers[k].sample(1, &cfg, &mut rng).unwrap()[0];
        let spec = PatchSpec::centered(c, cfg.patch_size);
        let d = vols[k].dims();
        for z in 0..spec.size[2] as i64 {
            for y in 0..spec.size[1] as i64 {
                for x in 0..spec.size[0] as i64 {
                    let p = [spec.origin[0] + x, spec.origin[1] + y, spec.origin[2] + z];
                    if (0..3).all(|a| p[a] >= 0 && p[a] < d[a] as i64) {
                        counts[vols[k].get(p[0] as usize, p[1] as usize, p[2] as usize) as usize] += 1;
                    }
                }
            }
        }
    }
    assert_eq!(hist.counts, counts);
}

#[test]
fn covering_uniform_patches_reproduce_histogram() {
    let labels = phantom_labels(0.05);
    let cfg = SamplerConfig {
        patch_size: [97; 3],
        strategy: Strategy::Uniform,
        seed: 2,
        ..Default::default()
    };
    let hist = realized_training_distribution(&[&labels], &cfg, 3).unwrap();
    let truth = class_histogram(&labels);
    let scaled: Vec<u64> = truth.counts.iter().map(|c| 3 * c).collect();
    assert_eq!(hist.counts, scaled);
}

#[test]
fn equiprobable_classes_spread_evenly() {
    let labels = phantom_labels(0.1);
    let cfg = SamplerConfig {
        strategy: Strategy::EquiprobableClasses,
        seed: 13,
        ..Default::default()
    };
    let centers = sample_patch_centers(&labels, 20_000, &cfg).unwrap();
    let mut per_class = vec![0u64; 5];
    for c in &centers {
        per_class[labels.get(c[0], c[1], c[2]) as usize] += 1;
    }
    assert!(common::chi_square_p(&per_class, &[4000.0; 5]) > 0.001, "{per_class:?}");
}

#[test]
fn streams_are_independent_and_reproducible() {
    use rand::RngCore;
    let draw = |stream| {
        let mut r = stream_rng(3, stream);
        [0; 4].map(|_| r.next_u64())
    };
    let (a, b, c) = (draw(1), draw(1), draw(2));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn batch_matches_patch_extraction() {
    let (img, labels) = generate_phantom(9, [32; 3], 0.05, 0.1).unwrap();
    let centers = [[0, 0, 0], [31, 5, 17], [16, 16, 16]];
    let batch = build_training_batch(&img, &labels, &centers, [8, 6, 4]).unwrap();
    assert_eq!(batch.shape(), [3, 4, 8, 6, 4]);
    let per = 8 * 6 * 4;
    for (k, c) in centers.iter().enumerate() {
        let spec = PatchSpec::centered(*c, [8, 6, 4]);
        for z in 0..4 {
            for y in 0..6 {
                for x in 0..8 {
                    let p = [spec.origin[0] + x, spec.origin[1] + y, spec.origin[2] + z];
                    let inside = (0..3).all(|a| p[a] >= 0 && p[a] < 32);
                    let want = if inside { labels.get(p[0] as usize, p[1] as usize, p[2] as usize) } else { 0 };
                    let got = batch.labels[k * per + (z as usize * 6 + y as usize) * 8 + x as usize];
                    assert_eq!(got, want);
                    for m in 0..4 {
                        let v = batch.images.channel(k, m)[(z as usize * 6 + y as usize) * 8 + x as usize];
                        let w = if inside { img.get(m, p[0] as usize, p[1] as usize, p[2] as usize) } else { 0.0 };
                        assert_eq!(v, w);
                    }
                }
            }
        }
    }
}

#[test]
fn out_of_volume_center_is_rejected() {
    let (img, labels) = generate_phantom(9, [32; 3], 0.05, 0.1).unwrap();
    assert!(build_training_batch(&img, &labels, &[[32, 0, 0]], [4; 3]).is_err());
    assert!(build_training_batch(&img, &labels, &[], [4; 3]).is_err());
}
