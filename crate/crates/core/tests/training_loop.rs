mod oracles;

use oracles::blob_run_data;
use sparsesoup::data::batch_indices;
use sparsesoup::nn::{init_model, loss_and_grad, train, ArchSpec, Mode, ModelState, OptimizerState, ParamKind};
use sparsesoup::pruning::{apply_mask, magnitude_mask, Mask};
use sparsesoup::schedules::{LrSchedule, OriginalSchedule};
use sparsesoup::seeding::epoch_seed;

/// Straight-line momentum SGD written out coordinate by coordinate.
fn reference_train(model: &mut ModelState, mask: &Mask, data: &sparsesoup::data::Dataset, schedule: &OriginalSchedule, epochs: u32, bs: usize, seed: u64) {
    let (momentum, wd) = (0.9f32, 5e-4f32);
    let mut velocity: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    let steps = data.len().div_ceil(bs) as u64;
    for epoch in 0..epochs {
        for (b, idx) in batch_indices(data.len(), bs, epoch_seed(seed, u64::from(epoch)), false).unwrap().iter().enumerate() {
            let lr = schedule.lr_at(u64::from(epoch) * steps + b as u64, steps).unwrap();
            let (x, y) = data.gather(idx);
            let g = loss_and_grad(model, mask, &x, &y, Mode::Train).unwrap().grads;
            for (pi, p) in model.params.iter_mut().enumerate() {
                if !p.kind.is_trainable() {
                    continue;
                }
                let decay = if p.kind == ParamKind::Weight { wd } else { 0.0 };
                let keep = mask.tensor_for(pi).map(|t| t.keep.clone());
                for j in 0..p.data.len() {
                    let v = momentum * velocity[pi][j] + g.tensors[pi][j] + decay * p.data[j];
                    velocity[pi][j] = v;
                    p.data[j] -= lr * v;
                    if keep.as_ref().is_some_and(|k| !k[j]) {
                        p.data[j] = 0.0;
                        velocity[pi][j] = 0.0;
                    }
                }
            }
        }
    }
}

#[test]
fn training_loop_matches_straight_line_reference() {
    let data = blob_run_data(3, 10, 1.0, 4);
    let train_set = data.train.subset(&(0..16).collect::<Vec<_>>(), "sixteen");
    let schedule = OriginalSchedule::linear(0.2, 0.01, 2).unwrap();
    let arch = ArchSpec::new(vec![2, 6, 3], true).unwrap();
    for prune in [false, true] {
        let mut model = init_model(&arch, 12).unwrap();
        let mask = if prune { magnitude_mask(&model, 0.5, &Mask::full(&model)).unwrap() } else { Mask::full(&model) };
        apply_mask(&mut model, &mask).unwrap();
        let mut reference = model.clone();
        let mut opt = OptimizerState::new(&model, 0.9, 5e-4);
        train(&mut model, &mask, &mut opt, &train_set, &schedule, 2, 5, 77).unwrap();
        reference_train(&mut reference, &mask, &train_set, &schedule, 2, 5, 77);
        assert_eq!(model, reference);
    }
}
