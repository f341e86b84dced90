use mmattack_core::evaluation::similarity;
use mmattack_core::numerics::{
    apply_scale_mask, haar_dwt2, haar_idwt2, l2_norm, project_l2, project_linf, ImageTensor, ScaleMask,
};
use mmattack_core::perturbation::{apply_texture_constraint, render_uap, TextureUAP, PATCH_SIZE};
use proptest::prelude::*;

fn tensor(h: usize, w: usize, c: usize, lo: f32, hi: f32) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(lo..hi, h * w * c).prop_map(move |d| ImageTensor::new(h, w, c, d).unwrap())
}

fn pow2_tensor() -> impl Strategy<Value = ImageTensor> {
    (3u32..7, 3u32..7, 1usize..4).prop_flat_map(|(a, b, c)| tensor(1 << a, 1 << b, c, -2.0, 2.0))
}

fn mask() -> impl Strategy<Value = ScaleMask> {
    (any::<bool>(), prop::collection::vec(any::<bool>(), 3))
        .prop_filter("at least one band kept", |(a, d)| *a || d.iter().any(|&x| x))
        .prop_map(|(a, d)| ScaleMask::new(a, d, vec![1.0; 3]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn haar_round_trip_and_energy(x in pow2_tensor()) {
        let levels = x.height().min(x.width()).trailing_zeros().min(3) as usize;
        let pyr = haar_dwt2(&x, levels).unwrap();
        let back = haar_idwt2(&pyr).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err <= 1e-5);
        let e = x.l2_norm().powi(2);
        prop_assert!((pyr.energy() - e).abs() <= 1e-4 * e.max(1e-12));
        prop_assert_eq!(pyr.coefficient_count(), x.len());
    }

    #[test]
    fn binary_masks_are_idempotent(x in tensor(32, 32, 2, -1.0, 1.0), m in mask()) {
        let pyr = haar_dwt2(&x, 3).unwrap();
        let once = apply_scale_mask(&pyr, &m).unwrap();
        prop_assert_eq!(apply_scale_mask(&once, &m).unwrap(), once);
    }

    #[test]
    fn linf_projection(x in tensor(8, 8, 3, -1.0, 1.0), eps in 0.001f64..0.5) {
        let p = project_linf(&x, eps).unwrap();
        prop_assert!(p.linf_norm() as f64 <= eps + 1e-7);
        prop_assert_eq!(project_linf(&p, eps).unwrap(), p.clone());
        for (a, b) in x.data().iter().zip(p.data()) {
            if (a.abs() as f64) <= eps {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn l2_projection(v in prop::collection::vec(-3.0f32..3.0, 1..128), eps in 0.01f64..4.0) {
        let p = project_l2(&v, eps).unwrap();
        let (n, pn) = (l2_norm(&v), l2_norm(&p));
        prop_assert!(pn <= eps);
        prop_assert_eq!(project_l2(&p, eps).unwrap(), p.clone());
        if n <= eps {
            prop_assert_eq!(&p, &v);
        } else {
            let cos: f64 = v.iter().zip(&p).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (n * pn);
            prop_assert!(cos > 1.0 - 1e-6);
        }
    }

    #[test]
    fn constraint_closure(patch in tensor(PATCH_SIZE, PATCH_SIZE, 3, -0.3, 0.3), m in mask(), eps in 0.005f64..0.1) {
        let uap = TextureUAP { base_patch: patch, tile_scale: 4, eps_v: eps, mask: m.clone() };
        let c = apply_texture_constraint(&uap).unwrap();
        prop_assert!(c.linf_norm() as f64 <= eps + 1e-7);
        prop_assert!(c.mask_residual().unwrap() < 1e-5);
        let twice = apply_texture_constraint(&c).unwrap();
        let drift = twice.base_patch.data().iter().zip(c.base_patch.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(drift <= 1e-6);
    }

    #[test]
    fn tiling_is_periodic(patch in tensor(PATCH_SIZE, PATCH_SIZE, 1, -0.1, 0.1), s in prop::sample::select(vec![1usize, 2, 4, 8]), mult in 1usize..3) {
        let (h, w) = (64 * mult, 32 * mult * 2);
        let uap = TextureUAP { base_patch: patch, tile_scale: s, eps_v: 0.1, mask: ScaleMask::keep_all(3) };
        let r = render_uap(&uap, h, w).unwrap();
        let (th, tw) = (h / s, w / s);
        for row in 0..h {
            for col in 0..w {
                prop_assert_eq!(r.get(row, col, 0), r.get(row % th, col % tw, 0));
            }
        }
    }

    #[test]
    fn similarity_symmetric_and_bounded(a in "[a-z ]{1,20}[a-z]", b in "[a-z ]{1,20}[a-z]") {
        let ab = similarity(&a, &b).unwrap();
        prop_assert_eq!(ab, similarity(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}
