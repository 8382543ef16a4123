//! Temporal projection causality: the projection of step `j` reads only the
//! keyframes of steps before `j`.

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::Rng;

use procdiff::controlnet::{shift_frames, TemporalProjection, TpVariant};
use procdiff::nn::{to_f64_vec, ParamStore};
use procdiff::seed::rng_for;

fn frames(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = rng_for(seed, "tests/frames");
    (0..n * 3 * 8 * 8).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.dim(0).unwrap();
    (0..n)
        .map(|j| to_f64_vec(&t.narrow(0, j, 1).unwrap()).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn projection_ignores_current_and_later_frames(
        n in 2usize..6, k_frac in 0.0f64..1.0, seed in 0u64..100, b in any::<bool>()
    ) {
        let variant = if b { TpVariant::B } else { TpVariant::A };
        let store = ParamStore::new(seed, DType::F32);
        let tp = TemporalProjection::new(&store.root().pp("tp"), variant, 4).unwrap();
        let k = ((n as f64 * k_frac) as usize).min(n - 1);
        let base = frames(seed, n);
        let mut moved = base.clone();
        let per = 3 * 8 * 8;
        for v in &mut moved[k * per..(k + 1) * per] {
            *v = -*v + 0.5;
        }
        let to_t = |d: Vec<f32>| Tensor::from_vec(d, (n, 3, 8, 8), &Device::Cpu).unwrap();
        // The output conv is zero-initialised, so compare the features it reads.
        let fa = rows(&tp.features(&shift_frames(&to_t(base)).unwrap()).unwrap());
        let fb = rows(&tp.features(&shift_frames(&to_t(moved)).unwrap()).unwrap());
        for j in 0..=k {
            prop_assert_eq!(&fa[j], &fb[j], "row {} saw frame {}", j, k);
        }
        if k + 1 < n {
            prop_assert_ne!(&fa[k + 1], &fb[k + 1]);
        }
    }
}

#[test]
fn first_row_is_zero() {
    let store = ParamStore::new(3, DType::F32);
    for variant in [TpVariant::A, TpVariant::B] {
        let tp = TemporalProjection::new(&store.root().pp(&format!("tp{variant}")), variant, 4).unwrap();
        let x = Tensor::from_vec(frames(1, 3), (3, 3, 8, 8), &Device::Cpu).unwrap();
        let out = rows(&tp.forward(&x).unwrap());
        assert!(out[0].iter().all(|v| *v == 0.0));
    }
}
