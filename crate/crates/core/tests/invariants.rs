mod common;

use common::{tiny_model, uniform};
use dimlight::archive::Archive;
use dimlight::checkpoint::Checkpoint;
use dimlight::enhancer::tone_map;
use dimlight::image_io::{crop, pad_reflect, quantize};
use dimlight::metrics::{psnr, ssim};
use dimlight::optim::AdamW;
use dimlight::reconstruction::reconstruct;
use dimlight::{Network, Shape};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconstruct_is_pointwise(seed in 0u64..1000, h in 1usize..9, w in 1usize..9) {
        let i = uniform(Shape::new(1, 1, h, w), 0.0, 1.0, seed);
        let r = uniform(Shape::new(1, 3, h, w), 0.0, 1.0, seed + 1);
        let s = uniform(Shape::new(1, 3, h, w), 0.0, 1.0, seed + 2);
        let y = reconstruct(&i, &r, &s).unwrap();
        for c in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    let want = i.at(0, 0, yy, xx) * r.at(0, c, yy, xx) + s.at(0, c, yy, xx);
                    prop_assert!((y.at(0, c, yy, xx) - want).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn pad_then_crop_is_identity(seed in 0u64..1000, h in 1usize..30, w in 1usize..30) {
        let t = uniform(Shape::new(1, 3, h, w), 0.0, 1.0, seed);
        let p = pad_reflect(&t, 4, 8);
        let ps = p.shape();
        prop_assert!(ps.h % 4 == 0 && ps.w % 4 == 0 && ps.h >= 8 && ps.w >= 8);
        prop_assert!(ps.h < h.max(8) + 4 && ps.w < w.max(8) + 4);
        prop_assert_eq!(crop(&p, h, w).unwrap(), t);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in 0u64..1000, h in 11usize..24, w in 11usize..24, amp in 0.01f64..0.5) {
        let a = uniform(Shape::new(1, 3, h, w), 0.0, 1.0, seed);
        let n = uniform(Shape::new(1, 3, h, w), -amp, amp, seed + 7);
        let b = a.zip_map(&n, |x, e| (x + e).clamp(0.0, 1.0)).unwrap();
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() <= 1e-12);
        prop_assert!(s1 <= 1.0 && s1 >= -1.0);
        prop_assert!(psnr(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn tone_map_is_increasing_and_open_bounded(a in -30.0f64..30.0, d in 1e-3f64..5.0) {
        let (lo, hi) = (tone_map(a), tone_map(a + d));
        prop_assert!(lo > 0.0 && hi < 1.0);
        prop_assert!(hi > lo);
    }

    #[test]
    fn quantize_inverts_byte_scaling(k in 0u8..=255) {
        prop_assert_eq!(quantize(k as f32 / 255.0), k);
        prop_assert_eq!(quantize(k as f64 / 255.0), k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pipeline_output_is_an_image_of_the_input_size(seed in 0u64..1000, hq in 2usize..6, wq in 2usize..6) {
        let (net, params) = Network::init::<f32>(tiny_model(), seed).unwrap();
        let x = uniform(Shape::new(1, 3, 4 * hq, 4 * wq), 0.0, 1.0, seed).cast::<f32>();
        let st = net.enhance_stages(&params, &x).unwrap();
        prop_assert_eq!(st.output.shape(), x.shape());
        prop_assert!(st.output.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(st.illumination.shape(), x.shape().with_c(1));
        prop_assert!(st.refined.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..1000, epoch in 0u64..1000) {
        let (_, params) = Network::init::<f32>(tiny_model(), seed).unwrap();
        let optimizer = AdamW::new(Default::default(), &params);
        let ck = Checkpoint { model: tiny_model(), params, optimizer, epoch, seed };
        let bytes = ck.to_archive().to_bytes();
        let back = Checkpoint::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back.epoch, epoch);
        prop_assert_eq!(back.to_archive().to_bytes(), bytes);
    }
}
