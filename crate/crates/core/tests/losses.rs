use proptest::prelude::*;
use segmote_core::losses::{dice_loss, dice_metric, total_loss, LossConfig};
use segmote_core::tensor::grad_check;
use segmote_core::{Tape, Tensor};

fn dice(pred: &[f64], target: &[f64], shape: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::new(shape.to_vec(), pred.to_vec()).unwrap());
    let t = tape.constant(Tensor::new(shape.to_vec(), target.to_vec()).unwrap());
    let l = dice_loss(&mut tape, p, t, 1e-6).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn dice_identities() {
    let m = [1.0, 0.0, 1.0, 1.0];
    assert!(dice(&m, &m, &[1, 2, 2]) <= 1e-6);
    assert!(dice(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0], &[1, 2, 2]) >= 1.0 - 1e-6);
    assert!((dice(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], &[1, 2, 2]) - 0.5).abs() < 1e-6);
    // both empty: the smoothing term makes it a perfect match
    assert!(dice(&[0.0; 4], &[0.0; 4], &[1, 2, 2]).abs() < 1e-12);
    // batch mean of a perfect and a disjoint sample
    let l = dice(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    assert!((l - 0.5).abs() < 1e-6);
}

#[test]
fn dice_rejects_mismatched_shapes() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::zeros([1, 4]));
    let t = tape.constant(Tensor::zeros([1, 2, 2]));
    assert!(dice_loss(&mut tape, p, t, 1e-6).is_err());
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let target = Tensor::from_f64([2, 3, 3], &[1., 0., 1., 1., 1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0., 1., 0.]).unwrap();
    let pred = Tensor::from_f64(
        [2, 3, 3],
        &[0.2, 0.7, 0.9, 0.4, 0.6, 0.1, 0.3, 0.8, 0.5, 0.35, 0.15, 0.65, 0.55, 0.45, 0.25, 0.75, 0.85, 0.05],
    )
    .unwrap();
    let err = grad_check(
        |tape, p| {
            let t = tape.constant(target.clone());
            dice_loss(tape, p, t, 1e-6)
        },
        &pred,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn total_loss_weights_the_balance_term() {
    let mut tape = Tape::<f64>::new();
    let seg = tape.constant(Tensor::from_f64([1], &[0.4]).unwrap());
    let bal = tape.constant(Tensor::from_f64([1], &[2.0]).unwrap());
    let t = total_loss(&mut tape, seg, bal, &LossConfig::default()).unwrap();
    assert!((tape.value(t).data()[0] - 0.42).abs() < 1e-15);
    let zero = LossConfig { lambda_balance: 0.0, ..LossConfig::default() };
    let t = total_loss(&mut tape, seg, bal, &zero).unwrap();
    assert_eq!(tape.value(t).data()[0], 0.4);
    let nan = tape.constant(Tensor::from_f64([1], &[f64::NAN]).unwrap());
    assert!(total_loss(&mut tape, seg, nan, &LossConfig::default()).is_err());
    assert!(total_loss(&mut tape, nan, bal, &LossConfig::default()).is_err());
}

#[test]
fn dice_metric_examples() {
    assert_eq!(dice_metric(&[5.0f64, 5.0, -5.0, -5.0], &[1, 1, 0, 0], 0.5), 1.0);
    assert_eq!(dice_metric(&[5.0f64, -5.0, 5.0, -5.0], &[1, 1, 0, 0], 0.5), 0.5);
    assert_eq!(dice_metric(&[-1.0f64; 4], &[0; 4], 0.5), 1.0);
    assert_eq!(dice_metric(&[-1.0f64; 4], &[1, 0, 0, 0], 0.5), 0.0);
}

proptest! {
    #[test]
    fn dice_loss_lies_in_the_unit_interval(
        pred in prop::collection::vec(0.0f64..1.0, 16),
        target in prop::collection::vec(0u8..2, 16),
    ) {
        let t: Vec<f64> = target.iter().map(|&v| v as f64).collect();
        let l = dice(&pred, &t, &[1, 4, 4]);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
        let swapped = dice(&t, &pred, &[1, 4, 4]);
        prop_assert!((l - swapped).abs() < 1e-12);
    }
}
