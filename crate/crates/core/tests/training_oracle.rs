use pmbnn::experiment::{generate_synthetic_subject, random_synthetic_spec, split_by_activity};
use pmbnn::training::{train_pmbnn, StopReason, TrainConfig};

/// Default training on a noiseless subject from the model itself should fit
/// the data to within a few bpm.
#[test]
fn noiseless_synthetic_subject_is_fitted() {
    let rec = generate_synthetic_subject(&random_synthetic_spec(0, 0.0, 0.0)).unwrap();
    let split = split_by_activity(&rec, 0.8).unwrap();
    let model = train_pmbnn(&split.train, &TrainConfig::default()).unwrap();
    let last = model.final_loss().unwrap();
    assert!(model.loss_history.len() <= 5000);
    assert!(last.l_data <= 25.0, "L_data {} after {} epochs ({:?})", last.l_data, model.loss_history.len(), model.stopped_reason);
}

#[test]
fn single_epoch_cap() {
    let rec = generate_synthetic_subject(&random_synthetic_spec(1, 0.0, 0.0)).unwrap();
    let model = train_pmbnn(&rec, &TrainConfig { max_epochs: 1, ..TrainConfig::default() }).unwrap();
    assert_eq!(model.loss_history.len(), 1);
    assert_eq!(model.stopped_reason, StopReason::EpochCap);
}
