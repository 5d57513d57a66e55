//! Model averaging: linear combinations, uniform and greedy soups,
//! batch-norm recomputation, re-pruning and pairwise distances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::nn::{evaluate, Layer, Mode, ModelState};
use crate::pruning::{apply_mask, magnitude_mask, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Uniform,
    Greedy,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupRecipe {
    pub method: MergeMethod,
    /// One coefficient per candidate; unselected candidates get 0.
    pub lambdas: Vec<f64>,
    /// Candidate indices that entered the soup, in inclusion order.
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub pre_merge_sparsities: Vec<f64>,
    pub post_merge_sparsity: f64,
    /// All candidates share one zero set over the prunable weights.
    pub masks_identical: bool,
    /// Candidate validation accuracies, each after batch-norm recomputation.
    pub val_accuracies: Vec<f32>,
    pub soup_val_accuracy: f32,
}

/// Data a merge needs: batch-norm statistics come from `bn_data` in fixed
/// order, candidate and soup scores from `val_data`.
#[derive(Clone, Copy, Debug)]
pub struct MergeData<'a> {
    pub bn_data: &'a Dataset,
    pub val_data: &'a Dataset,
    pub batch_size: usize,
}

/// `sum_i lambdas[i] * models[i]` over every tensor, running statistics
/// included. The result's batch-norm statistics are marked stale.
///
/// Each coordinate's products are summed in f64 in ascending order, so the
/// result does not depend on candidate order, and a coordinate that is zero
/// in every input stays exactly zero.
pub fn linear_combine(models: &[ModelState], lambdas: &[f64]) -> Result<ModelState> {
    let first = models.first().ok_or_else(|| Error::Config("cannot combine zero models".into()))?;
    if lambdas.len() != models.len() {
        return Err(Error::Config(format!("{} coefficients for {} models", lambdas.len(), models.len())));
    }
    if let Some(i) = models.iter().position(|m| !m.same_layout(first)) {
        return Err(Error::Shape(format!("model {i} has a different architecture")));
    }
    let mut out = first.clone();
    let mut terms = vec![0.0f64; models.len()];
    for (pi, param) in out.params.iter_mut().enumerate() {
        for (j, w) in param.data.iter_mut().enumerate() {
            for ((t, m), &l) in terms.iter_mut().zip(models).zip(lambdas) {
                *t = l * f64::from(m.params[pi].data[j]);
            }
            terms.sort_unstable_by(f64::total_cmp);
            *w = terms[1..].iter().fold(terms[0], |acc, t| acc + t) as f32;
        }
    }
    out.bn_stale = out.has_batch_norm();
    Ok(out)
}

/// Resets every batch-norm layer and re-estimates its statistics with one
/// pass over `data` in canonical order.
///
/// Each batch is normalized with its own statistics, as in training; the
/// per-batch moments are pooled exactly (count-weighted mean, unbiased
/// variance of the whole pass). Weights are not touched.
pub fn recompute_bn(model: &mut ModelState, data: &Dataset, batch_size: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("batch-norm recomputation needs data".into()));
    }
    if !model.has_batch_norm() {
        model.bn_stale = false;
        return Ok(());
    }
    struct Pool {
        count: f64,
        mean: Vec<f64>,
        m2: Vec<f64>,
    }
    let mut pools: Vec<Option<Pool>> = model.layers.iter().map(|_| None).collect();
    for idx in batch_indices(data.len(), batch_size, 0, true)? {
        let (x, _) = data.gather(&idx);
        let fwd = model.forward(&x, idx.len(), Mode::Train, false)?;
        for st in fwd.bn_stats {
            let n_b = st.count as f64;
            let pool = pools[st.layer].get_or_insert_with(|| Pool {
                count: 0.0,
                mean: vec![0.0; st.mean.len()],
                m2: vec![0.0; st.mean.len()],
            });
            let total = pool.count + n_b;
            for j in 0..st.mean.len() {
                let delta = st.mean[j] - pool.mean[j];
                pool.mean[j] += delta * n_b / total;
                pool.m2[j] += st.var[j] * n_b + delta * delta * pool.count * n_b / total;
            }
            pool.count = total;
        }
    }
    for (layer, pool) in model.layers.clone().iter().zip(pools) {
        if let (Layer::BatchNorm { running_mean, running_var, .. }, Some(pool)) = (layer, pool) {
            let denom = if pool.count > 1.0 { pool.count - 1.0 } else { 1.0 };
            model.params[*running_mean].data = pool.mean.iter().map(|&m| m as f32).collect();
            model.params[*running_var].data = pool.m2.iter().map(|&m2| (m2 / denom) as f32).collect();
        }
    }
    model.bn_stale = false;
    Ok(())
}

fn zero_sets_identical(models: &[ModelState]) -> bool {
    let first = &models[0];
    models[1..].iter().all(|m| {
        first
            .params
            .iter()
            .zip(&m.params)
            .filter(|(p, _)| p.prunable)
            .all(|(a, b)| a.data.iter().zip(&b.data).all(|(&x, &y)| (x == 0.0) == (y == 0.0)))
    })
}

fn scored(mut model: ModelState, ctx: &MergeData<'_>) -> Result<(ModelState, f32)> {
    recompute_bn(&mut model, ctx.bn_data, ctx.batch_size)?;
    let acc = evaluate(&model, ctx.val_data)?.accuracy;
    Ok((model, acc))
}

fn candidate_accuracies(models: &[ModelState], ctx: &MergeData<'_>) -> Result<Vec<f32>> {
    models
        .par_iter()
        .map(|m| scored(m.clone(), ctx).map(|(_, acc)| acc))
        .collect()
}

fn uniform_lambdas(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// Equal-weight average of all candidates, with batch-norm recomputed.
pub fn uniform_soup(models: &[ModelState], ctx: &MergeData<'_>) -> Result<(ModelState, MergeReport)> {
    let avg = linear_combine(models, &uniform_lambdas(models.len()))?;
    let (soup, soup_acc) = scored(avg, ctx)?;
    let report = MergeReport {
        pre_merge_sparsities: models.iter().map(ModelState::sparsity).collect(),
        post_merge_sparsity: soup.sparsity(),
        masks_identical: zero_sets_identical(models),
        val_accuracies: candidate_accuracies(models, ctx)?,
        soup_val_accuracy: soup_acc,
    };
    Ok((soup, report))
}

/// Greedy soup: candidates are visited by descending validation accuracy
/// (ties by index) and kept whenever the uniform average of the kept set plus
/// the candidate scores at least as well as the kept set alone.
pub fn greedy_soup(models: &[ModelState], ctx: &MergeData<'_>) -> Result<(ModelState, SoupRecipe, MergeReport)> {
    if models.is_empty() {
        return Err(Error::Config("cannot build a soup from zero models".into()));
    }
    let accs = candidate_accuracies(models, ctx)?;
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| accs[b].total_cmp(&accs[a]).then(a.cmp(&b)));

    let mut selected: Vec<usize> = Vec::new();
    let mut best: Option<(ModelState, f32)> = None;
    for &cand in &order {
        let trial: Vec<ModelState> = selected.iter().chain([&cand]).map(|&i| models[i].clone()).collect();
        let (soup, acc) = scored(linear_combine(&trial, &uniform_lambdas(trial.len()))?, ctx)?;
        if best.as_ref().map_or(true, |(_, b)| acc >= *b) {
            selected.push(cand);
            best = Some((soup, acc));
        }
    }
    let (soup, soup_acc) = best.expect("the first candidate is always accepted");
    let mut lambdas = vec![0.0; models.len()];
    for &i in &selected {
        lambdas[i] = 1.0 / selected.len() as f64;
    }
    let report = MergeReport {
        pre_merge_sparsities: models.iter().map(ModelState::sparsity).collect(),
        post_merge_sparsity: soup.sparsity(),
        masks_identical: zero_sets_identical(models),
        val_accuracies: accs,
        soup_val_accuracy: soup_acc,
    };
    Ok((soup, SoupRecipe { method: MergeMethod::Greedy, lambdas, selected }, report))
}

/// Dispatches on the merge method. `Custom` is not a soup construction and is
/// rejected here; use [`linear_combine`] directly.
pub fn merge(
    models: &[ModelState],
    method: MergeMethod,
    ctx: &MergeData<'_>,
) -> Result<(ModelState, SoupRecipe, MergeReport)> {
    match method {
        MergeMethod::Uniform => {
            let (soup, report) = uniform_soup(models, ctx)?;
            let recipe = SoupRecipe {
                method,
                lambdas: uniform_lambdas(models.len()),
                selected: (0..models.len()).collect(),
            };
            Ok((soup, recipe, report))
        }
        MergeMethod::Greedy => greedy_soup(models, ctx),
        MergeMethod::Custom => Err(Error::Config("custom coefficients are not a soup method".into())),
    }
}

/// Magnitude-prunes an averaged model back to `target`, keeping its current
/// zeros pruned. The returned model has batch-norm statistics untouched.
pub fn reprune_to(model: &ModelState, target: f64) -> Result<(ModelState, Mask)> {
    let current = Mask::from_zeros(model);
    let mask = magnitude_mask(model, target, &current)?;
    let mut out = model.clone();
    apply_mask(&mut out, &mask)?;
    Ok((out, mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseL2 {
    pub mean: f64,
    pub max: f64,
}

/// Euclidean distances between all unordered pairs, over the concatenated
/// trainable parameters (running statistics excluded).
pub fn pairwise_l2(models: &[ModelState]) -> Result<PairwiseL2> {
    if models.len() < 2 {
        return Err(Error::Config("pairwise distances need at least two models".into()));
    }
    if models.iter().any(|m| !m.same_layout(&models[0])) {
        return Err(Error::Shape("models differ in architecture".into()));
    }
    let mut dists = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let sq: f64 = models[i]
                .params
                .iter()
                .zip(&models[j].params)
                .filter(|(p, _)| p.kind.is_trainable())
                .flat_map(|(a, b)| a.data.iter().zip(&b.data))
                .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                .sum();
            dists.push(sq.sqrt());
        }
    }
    Ok(PairwiseL2 {
        mean: dists.iter().sum::<f64>() / dists.len() as f64,
        max: dists.iter().copied().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::nn::{init_model, ArchSpec, ParamKind};

    fn net(seed: u64) -> ModelState {
        init_model(&ArchSpec::new(vec![3, 6, 4], true).unwrap(), seed).unwrap()
    }

    #[test]
    fn identical_models_average_to_themselves() {
        let m = net(1);
        for k in 1..=5 {
            let out = linear_combine(&vec![m.clone(); k], &uniform_lambdas(k)).unwrap();
            assert_eq!(out.params, m.params, "m = {k}");
            assert!(out.bn_stale);
        }
    }

    #[test]
    fn one_hot_lambda_selects_model() {
        let models = [net(1), net(2), net(3)];
        let out = linear_combine(&models, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.params, models[0].params);
    }

    #[test]
    fn combine_errors() {
        assert!(matches!(linear_combine(&[], &[]), Err(Error::Config(_))));
        let other = init_model(&ArchSpec::new(vec![3, 5, 4], true).unwrap(), 0).unwrap();
        assert!(matches!(linear_combine(&[net(1), other], &[0.5, 0.5]), Err(Error::Shape(_))));
        assert!(linear_combine(&[net(1)], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn uniform_soup_ignores_order() {
        let data = gen_blobs(4, 3, 10, 1.0, 0, None).unwrap();
        let ctx = MergeData { bn_data: &data, val_data: &data, batch_size: 8 };
        let models = vec![net(1), net(2), net(3)];
        let rev: Vec<ModelState> = models.iter().rev().cloned().collect();
        assert_eq!(uniform_soup(&models, &ctx).unwrap().0.params, uniform_soup(&rev, &ctx).unwrap().0.params);
    }

    #[test]
    fn disjoint_supports_are_reported_as_densified() {
        let data = gen_blobs(4, 3, 10, 1.0, 0, None).unwrap();
        let ctx = MergeData { bn_data: &data, val_data: &data, batch_size: 8 };
        let mut a = net(1);
        let mut b = net(2);
        for (m, keep_even) in [(&mut a, true), (&mut b, false)] {
            for p in m.params.iter_mut().filter(|p| p.prunable) {
                p.data.iter_mut().enumerate().for_each(|(j, w)| {
                    if (j % 2 == 0) != keep_even {
                        *w = 0.0;
                    }
                });
            }
        }
        let (_, report) = uniform_soup(&[a, b], &ctx).unwrap();
        assert_eq!(report.post_merge_sparsity, 0.0);
        assert!(!report.masks_identical);
        assert!(report.pre_merge_sparsities.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn recompute_with_constant_input() {
        let mut m = init_model(&ArchSpec::new(vec![2, 3, 2], true).unwrap(), 5).unwrap();
        let x: Vec<f32> = std::iter::repeat([0.7f32, -1.3]).take(20).flatten().collect();
        let data = Dataset::new("const", 2, 2, x, vec![0; 20], None, 0).unwrap();
        recompute_bn(&mut m, &data, 6).unwrap();
        let fc0 = m.param("fc0.weight").unwrap().data.clone();
        let b0 = m.param("fc0.bias").unwrap().data.clone();
        let rm = &m.param("bn0.running_mean").unwrap().data;
        let rv = &m.param("bn0.running_var").unwrap().data;
        for o in 0..3 {
            let c = fc0[o * 2] * 0.7 + fc0[o * 2 + 1] * -1.3 + b0[o];
            assert!((rm[o] - c).abs() < 1e-6);
            assert_eq!(rv[o], 0.0);
        }
    }

    #[test]
    fn recompute_is_idempotent_and_leaves_weights() {
        let data = gen_blobs(3, 3, 17, 1.0, 2, None).unwrap();
        let mut m = net(7);
        let before = m.clone();
        recompute_bn(&mut m, &data, 8).unwrap();
        let once = m.clone();
        recompute_bn(&mut m, &data, 8).unwrap();
        assert_eq!(m, once);
        for (a, b) in m.params.iter().zip(&before.params) {
            if a.kind.is_trainable() {
                assert_eq!(a.data, b.data);
            }
        }
        assert_ne!(
            m.params.iter().find(|p| p.kind == ParamKind::BnRunningVar).unwrap().data,
            before.params.iter().find(|p| p.kind == ParamKind::BnRunningVar).unwrap().data
        );
    }

    #[test]
    fn reprune_restores_sparsity_by_magnitude() {
        let mut m = init_model(&ArchSpec::new(vec![4, 1], false).unwrap(), 0).unwrap();
        m.params[0].data.copy_from_slice(&[0.5, 0.1, 1.5, 0.2]);
        let (out, mask) = reprune_to(&m, 0.5).unwrap();
        assert_eq!(out.params[0].data, [0.5, 0.0, 1.5, 0.0]);
        assert_eq!(mask.pruned(), 2);
        let (again, _) = reprune_to(&out, 0.5).unwrap();
        assert_eq!(again, out);
        assert!(reprune_to(&out, 0.25).is_err());
    }

    #[test]
    fn distances() {
        let a = net(1);
        assert_eq!(pairwise_l2(&[a.clone(), a.clone()]).unwrap(), PairwiseL2 { mean: 0.0, max: 0.0 });
        let mut b = a.clone();
        b.params[0].data[3] += 3.0;
        let d = pairwise_l2(&[a.clone(), b.clone()]).unwrap();
        assert!((d.max - 3.0).abs() < 1e-6);
        let d3 = pairwise_l2(&[a.clone(), b, net(9)]).unwrap();
        assert!(d3.mean <= d3.max);
        assert!(pairwise_l2(&[a]).is_err());
    }

    #[test]
    fn greedy_with_one_candidate_is_that_candidate() {
        let data = gen_blobs(4, 3, 10, 1.0, 0, None).unwrap();
        let ctx = MergeData { bn_data: &data, val_data: &data, batch_size: 8 };
        let mut m = net(4);
        let (soup, recipe, report) = greedy_soup(std::slice::from_ref(&m), &ctx).unwrap();
        recompute_bn(&mut m, &data, 8).unwrap();
        assert_eq!(soup, m);
        assert_eq!(recipe.selected, [0]);
        assert_eq!(report.soup_val_accuracy, report.val_accuracies[0]);
    }
}
