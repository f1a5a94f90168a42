use candle_core::{Device, Tensor};
use olc_hdr::codebook::{
    nearest_code, segment_range, usage_histogram, used_code_count, CodebookMode, InputClass, OverlappedCodebook,
};
use olc_hdr::datasets::{load_scene, patch_coords, synth_scene, write_scene, SynthConfig};
use olc_hdr::image::{Dihedral, Image};
use olc_hdr::radiometry::{
    expose, fuse_exposures, gamma_normalize, inverse_mu_law, mu_law, triangle_weight_triple, LdrFrame,
};
use proptest::prelude::*;

const DEV: Device = Device::Cpu;

fn class() -> impl Strategy<Value = InputClass> {
    (1u8..=4).prop_map(|e| InputClass::new(e).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantized_codes_lie_in_the_class_window(
        k4 in 1usize..16,
        n_z in 1usize..6,
        eta in class(),
        codes in prop::collection::vec(-1.0f64..1.0, 64 * 6),
        query in prop::collection::vec(-1.0f64..1.0, 6 * 9),
    ) {
        let k = 4 * k4;
        let codes = &codes[..k * n_z];
        let cb = OverlappedCodebook::new(Tensor::from_slice(codes, (k, n_z), &DEV).unwrap(), CodebookMode::Overlapped).unwrap();
        let feats = Tensor::from_slice(&query[..9 * n_z], (1, 3, 3, n_z), &DEV).unwrap().permute((0, 3, 1, 2)).unwrap();
        let r = cb.quantize(&feats, &[eta]).unwrap();
        let window = segment_range(eta, k).unwrap();
        prop_assert!(r.indices.iter().all(|&i| window.contains(&(i as usize))));
        // Every position is the nearest code of its window; the full codebook
        // never does worse.
        let q = feats.permute((0, 2, 3, 1)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (p, v) in q.chunks_exact(n_z).enumerate() {
            let (best, d) = nearest_code(v, codes, n_z, window.clone());
            prop_assert_eq!(best, r.indices[p] as usize);
            prop_assert!(nearest_code(v, codes, n_z, 0..k).1 <= d);
        }
        let hist = usage_histogram([r.indices.as_slice()], k).unwrap();
        prop_assert_eq!(hist.iter().sum::<u64>(), 9);
        prop_assert!(used_code_count(&hist) <= 9);
    }

    #[test]
    fn vanilla_mode_searches_everything(k4 in 1usize..8, eta in class(), seed in 0u64..1000) {
        let k = 4 * k4;
        let codes = Tensor::rand(-1f64, 1.0, (k, 3), &DEV).unwrap();
        let feats = Tensor::rand(-1f64, 1.0, (2, 3, 2, 2), &DEV).unwrap();
        let full = OverlappedCodebook::new(codes.clone(), CodebookMode::Overlapped).unwrap().quantize(&feats, &[InputClass::Hdr]).unwrap();
        let vanilla = OverlappedCodebook::new(codes, CodebookMode::Vanilla).unwrap().quantize(&feats, &[eta]).unwrap();
        prop_assert_eq!(full.indices, vanilla.indices, "seed {}", seed);
    }

    #[test]
    fn triangle_weights_cover_every_intensity(x in 0.0f64..=1.0) {
        let (a, b, c) = triangle_weight_triple(x);
        prop_assert!(a >= 0.0 && b >= 0.0 && c >= 0.0);
        prop_assert!((a + c - 1.0 - b).abs() < 1e-12);
        prop_assert!(a + b + c > 0.0);
    }

    #[test]
    fn tone_map_is_monotone_and_invertible(a in 0.0f64..=1.0, b in 0.0f64..=1.0, mu in 1.0f64..1e4) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(mu_law(lo, mu) <= mu_law(hi, mu));
        prop_assert!((inverse_mu_law(mu_law(a, mu), mu) - a).abs() < 1e-9);
    }

    #[test]
    fn unclipped_brackets_fuse_to_their_radiance(
        values in prop::collection::vec(1e-3f32..0.24, 3 * 4 * 5),
        gamma in 1.8f64..2.6,
    ) {
        let radiance = Image::new(4, 5, values).unwrap();
        let frames = [0.25, 1.0, 4.0].map(|t| LdrFrame::new(expose(&radiance, t, gamma).unwrap(), t).unwrap());
        let fused = fuse_exposures(&frames, gamma).unwrap();
        for (f, r) in fused.image().data().iter().zip(radiance.data()) {
            prop_assert!(((f - r) / r).abs() < 1e-6);
        }
        let mid = gamma_normalize(&frames[1], gamma).unwrap();
        for (m, r) in mid.image().data().iter().zip(radiance.data()) {
            prop_assert!(((m - r) / r).abs() < 1e-6);
        }
    }

    #[test]
    fn patches_tile_inside_the_scene(h in 8usize..80, w in 8usize..80, size in 1usize..8, stride in 1usize..9) {
        let coords = patch_coords(h, w, size, stride).unwrap();
        prop_assert!(coords.iter().all(|&(y, x)| y + size <= h && x + size <= w));
        prop_assert_eq!(coords.len(), ((h - size) / stride + 1) * ((w - size) / stride + 1));
    }

    #[test]
    fn dihedral_transforms_keep_stacks_congruent(t in 0u8..8, seed in 0u64..50) {
        let cfg = SynthConfig { height: 8, width: 16, ..Default::default() };
        let scene = synth_scene(&cfg, seed).unwrap();
        let moved = scene.transformed(Dihedral::new(t).unwrap());
        let gt = moved.ground_truth().unwrap().image().clone();
        for f in moved.stack.frames() {
            prop_assert_eq!(f.image().dims(), gt.dims());
        }
        let sum = |im: &Image| im.data().iter().map(|&v| v as f64).sum::<f64>();
        prop_assert!((sum(&gt) - sum(scene.ground_truth().unwrap().image())).abs() < 1e-3);
    }
}

#[test]
fn synthetic_scenes_survive_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { height: 16, width: 24, motion: 2.0, ..Default::default() };
    let scene = synth_scene(&cfg, 9).unwrap();
    write_scene(&scene, dir.path()).unwrap();
    let back = load_scene(dir.path()).unwrap();
    assert_eq!(back.stack.exposure_times(), scene.stack.exposure_times());
    for (a, b) in back.stack.frames().iter().zip(scene.stack.frames()) {
        let err = a.image().data().iter().zip(b.image().data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(err <= 1.0 / 65535.0, "{err}");
    }
    // Radiance HDR shares one exponent per pixel: channels are exact to
    // 1/128 of the brightest channel.
    let a = back.ground_truth().unwrap().image().data().to_vec();
    let b = scene.ground_truth().unwrap().image().data();
    let gt_err = a
        .chunks_exact(3)
        .zip(b.chunks_exact(3))
        .map(|(x, y)| {
            let peak = y.iter().copied().fold(1e-6f32, f32::max);
            x.iter().zip(y).map(|(p, q)| (p - q).abs() / peak).fold(0f32, f32::max)
        })
        .fold(0f32, f32::max);
    assert!(gt_err < 0.01, "{gt_err}");
}
