//! Finite-difference checks of each network module at desk-scale shapes.

use u3m::gradsuite::{check_encoder, check_fusion, check_head, TOLERANCE};

#[test]
fn encoder_gradients() {
    let r = check_encoder().unwrap();
    assert!(r.max_rel_err() < TOLERANCE, "{}", r.max_rel_err());
}

#[test]
fn fusion_gradients_at_every_stage() {
    for stage in 0..4 {
        let r = check_fusion(stage).unwrap();
        assert!(r.max_rel_err() < TOLERANCE, "stage {stage}: {}", r.max_rel_err());
    }
}

#[test]
fn head_gradients() {
    let r = check_head().unwrap();
    assert!(r.max_rel_err() < TOLERANCE, "{}", r.max_rel_err());
}
