use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::pruning::Mask;
use crate::schedules::LrSchedule;
use crate::seeding::epoch_seed;

use super::{loss_and_grad, Gradients, Mode, ModelState, ParamKind};

/// Momentum-SGD state. Buffers are aligned with `ModelState::params` and are
/// empty for batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f32,
    pub weight_decay: f32,
    pub buffers: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(model: &ModelState, momentum: f32, weight_decay: f32) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            buffers: Gradients::zeros_like(model).tensors,
        }
    }
}

/// One momentum-SGD update.
///
/// `v <- momentum * v + g + wd * w` (weight decay on dense weights only), then
/// `w <- w - lr * v`. Masked coordinates of both `w` and `v` are reset to zero.
pub fn sgd_step(
    model: &mut ModelState,
    opt: &mut OptimizerState,
    grads: &Gradients,
    lr: f32,
    mask: &Mask,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    if opt.buffers.len() != model.params.len() || grads.tensors.len() != model.params.len() {
        return Err(Error::Shape("optimizer or gradient layout does not match the model".into()));
    }
    mask.check_congruent(model)?;
    for ((param, v), g) in model.params.iter_mut().zip(&mut opt.buffers).zip(&grads.tensors) {
        if !param.kind.is_trainable() {
            continue;
        }
        let wd = if param.kind == ParamKind::Weight { opt.weight_decay } else { 0.0 };
        for ((w, v), &g) in param.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = opt.momentum * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    mask.zero_masked_params(model);
    mask.zero_masked(&mut opt.buffers);
    Ok(())
}

/// Trains for `epochs` epochs starting at epoch 0 of `schedule`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut ModelState,
    mask: &Mask,
    opt: &mut OptimizerState,
    data: &Dataset,
    schedule: &dyn LrSchedule,
    epochs: u32,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    train_span(model, mask, opt, data, schedule, 0, epochs, batch_size, seed)
}

/// Trains epochs `first_epoch .. first_epoch + epochs` of a longer run.
///
/// The learning rate of each step is read from `schedule` at the global step
/// index and the batch order of epoch `e` is drawn from `epoch_seed(seed, e)`,
/// so splitting a run into spans gives the same result as running it whole.
#[allow(clippy::too_many_arguments)]
pub fn train_span(
    model: &mut ModelState,
    mask: &Mask,
    opt: &mut OptimizerState,
    data: &Dataset,
    schedule: &dyn LrSchedule,
    first_epoch: u32,
    epochs: u32,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    let steps_per_epoch = data.len().div_ceil(batch_size.max(1)) as u64;
    for epoch in first_epoch..first_epoch + epochs {
        let order = batch_indices(data.len(), batch_size, epoch_seed(seed, u64::from(epoch)), false)?;
        for (b, idx) in order.iter().enumerate() {
            let step = u64::from(epoch) * steps_per_epoch + b as u64;
            let lr = schedule.lr_at(step, steps_per_epoch)?;
            let (x, y) = data.gather(idx);
            let out = loss_and_grad(model, mask, &x, &y, Mode::Train)?;
            sgd_step(model, opt, &out.grads, lr, mask)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::nn::{init_model, ArchSpec};
    use crate::schedules::ConstantLr;

    #[test]
    fn zero_lr_leaves_weights() {
        let mut m = init_model(&ArchSpec::new(vec![2, 3, 2], true).unwrap(), 1).unwrap();
        let mask = Mask::full(&m);
        let before = m.clone();
        let mut opt = OptimizerState::new(&m, 0.9, 1e-4);
        let out = loss_and_grad(&mut m.clone(), &mask, &[1.0, -1.0], &[1], Mode::Train).unwrap();
        sgd_step(&mut m, &mut opt, &out.grads, 0.0, &mask).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn scalar_hand_arithmetic() {
        let mut m = init_model(&ArchSpec::new(vec![1, 1], false).unwrap(), 1).unwrap();
        m.params[0].data[0] = 1.0;
        let mask = Mask::full(&m);
        let mut opt = OptimizerState::new(&m, 0.0, 0.0);
        let mut grads = Gradients::zeros_like(&m);
        grads.tensors[0][0] = 1.0;
        sgd_step(&mut m, &mut opt, &grads, 0.1, &mask).unwrap();
        assert_eq!(m.params[0].data[0], 0.9);
    }

    #[test]
    fn masked_coordinate_stays_zero_with_nonzero_gradient() {
        let mut m = init_model(&ArchSpec::new(vec![2, 2], false).unwrap(), 1).unwrap();
        let mut mask = Mask::full(&m);
        mask.tensors[0].keep[1] = false;
        mask.recount();
        crate::pruning::apply_mask(&mut m, &mask).unwrap();
        let mut opt = OptimizerState::new(&m, 0.9, 0.1);
        let mut grads = Gradients::zeros_like(&m);
        grads.tensors[0].iter_mut().for_each(|g| *g = 1.0);
        for _ in 0..3 {
            sgd_step(&mut m, &mut opt, &grads, 0.1, &mask).unwrap();
        }
        assert_eq!(m.params[0].data[1], 0.0);
        assert_eq!(opt.buffers[0][1], 0.0);
        assert_ne!(m.params[0].data[0], 0.0);
    }

    #[test]
    fn negative_lr_is_rejected() {
        let mut m = init_model(&ArchSpec::new(vec![1, 1], false).unwrap(), 1).unwrap();
        let mask = Mask::full(&m);
        let mut opt = OptimizerState::new(&m, 0.0, 0.0);
        let grads = Gradients::zeros_like(&m);
        assert!(sgd_step(&mut m, &mut opt, &grads, -0.1, &mask).is_err());
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let data = gen_blobs(3, 2, 20, 0.5, 4, None).unwrap();
        let base = init_model(&ArchSpec::new(vec![2, 8, 3], true).unwrap(), 2).unwrap();
        let mask = Mask::full(&base);
        let sched = ConstantLr(0.05);
        let run = |epochs| {
            let mut m = base.clone();
            let mut opt = OptimizerState::new(&m, 0.9, 1e-4);
            train(&mut m, &mask, &mut opt, &data, &sched, epochs, 8, 99).unwrap();
            m
        };
        assert_eq!(run(0), base);
        assert_eq!(run(2), run(2));
        assert_ne!(run(2), base);
    }

    #[test]
    fn spans_compose() {
        let data = gen_blobs(3, 2, 20, 0.5, 4, None).unwrap();
        let base = init_model(&ArchSpec::new(vec![2, 8, 3], true).unwrap(), 2).unwrap();
        let mask = Mask::full(&base);
        let sched = crate::schedules::OriginalSchedule::linear(0.1, 0.0, 4).unwrap();
        let mut whole = base.clone();
        let mut opt = OptimizerState::new(&whole, 0.9, 1e-4);
        train(&mut whole, &mask, &mut opt, &data, &sched, 4, 8, 5).unwrap();
        let mut split = base.clone();
        let mut opt = OptimizerState::new(&split, 0.9, 1e-4);
        train_span(&mut split, &mask, &mut opt, &data, &sched, 0, 1, 8, 5).unwrap();
        train_span(&mut split, &mask, &mut opt, &data, &sched, 1, 3, 8, 5).unwrap();
        assert_eq!(whole, split);
    }
}
