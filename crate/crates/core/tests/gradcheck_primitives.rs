use ppea::autodiff::Fault;
use ppea::gradcheck::primitive_suite;

#[test]
fn primitives_match_finite_differences_over_seeds() {
    for seed in 0..20 {
        for r in primitive_suite(seed, None).unwrap() {
            assert!(r.passed(), "seed {seed}: {} error {:.3e}", r.name, r.max_rel_error);
        }
    }
}

#[test]
fn sign_flipped_conv_backward_is_caught() {
    let results = primitive_suite(3, Some(Fault::ConvInputGradSign)).unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    assert!(failed.iter().any(|n| n.starts_with("conv2d")), "{failed:?}");
}
