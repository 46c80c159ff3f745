use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unet_vos::gradcheck::{grad_check, SUITE_EPS};
use unet_vos::losses::weighted_cross_entropy_raw;
use unet_vos::network::{build, ModelConfig};
use unet_vos::Tensor;

// A two-level net has parameters whose gradients are near 1e-8, where the
// relative error of a central difference is dominated by rounding of the
// loss. Its absolute errors must still sit at that rounding floor.
#[test]
fn two_level_unet_gradients_match_to_rounding() {
    for seed in 0..5 {
        let model = build(&ModelConfig::unet(&[2, 4]).with_seed(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[1, 4, 8, 8], 0.0, 1.0, &mut rng);
        let t: Vec<f64> = (0..64).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let mut inputs = vec![x];
        inputs.extend(model.params().iter().map(|p| p.tensor.clone()));
        let check = grad_check(
            |g, v| {
                let out = model.forward_graph_with(g, v[0], v[1..].to_vec())?;
                let lv = weighted_cross_entropy_raw(g.value(out.probs).data(), &t, &[1.0; 64])?;
                g.loss(out.probs, lv.value, lv.grad)
            },
            &inputs,
            SUITE_EPS,
        )
        .unwrap();
        assert!(check.max_abs_error < 1e-9, "seed {seed}: {check:?}");
        assert!(check.coordinates > 2000, "seed {seed}: {check:?}");
    }
}
