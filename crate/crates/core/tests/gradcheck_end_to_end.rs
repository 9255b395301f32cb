use ppea::autodiff::Fault;
use ppea::gradcheck::{teacher_loss_check, teacher_network_check, END_TO_END_TOLERANCE};

#[test]
fn teacher_objective_matches_finite_differences() {
    for seed in 0..5 {
        let r = teacher_loss_check(seed, None).unwrap();
        println!("seed {seed}: {} {:.3e} over {}", r.name, r.max_rel_error, r.checked);
        assert!(r.passed(), "seed {seed}: {:.3e}", r.max_rel_error);
    }
}

#[test]
fn teacher_network_matches_finite_differences() {
    for seed in 0..2 {
        let r = teacher_network_check(seed, None).unwrap();
        println!("seed {seed}: {} {:.3e} over {}", r.name, r.max_rel_error, r.checked);
        assert!(r.passed(), "seed {seed}: {:.3e} (tolerance {END_TO_END_TOLERANCE})", r.max_rel_error);
    }
}

#[test]
fn conv_sign_fault_breaks_the_network_check() {
    let r = teacher_network_check(0, Some(Fault::ConvInputGradSign)).unwrap();
    assert!(!r.passed(), "{:.3e}", r.max_rel_error);
}
