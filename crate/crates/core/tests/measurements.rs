mod oracles;

use std::collections::BTreeMap;

use num_rational::Ratio;
use oracles::{hand_flops, uniform};
use sparsesoup::data::{gen_blobs, Dataset};
use sparsesoup::metrics::subgroup_recall;
use sparsesoup::nn::{count_flops, init_model, predict, ArchSpec};
use sparsesoup::pruning::{magnitude_mask, Mask};

#[test]
fn flops_of_a_hand_counted_net() {
    let arch = ArchSpec::new(vec![10, 20, 5], true).unwrap();
    let model = init_model(&arch, 0).unwrap();
    let r = count_flops(&model, &Mask::full(&model)).unwrap();
    // 2 * (10 * 20) + 2 * (20 * 5)
    assert_eq!(r.dense_flops, 600);
    assert_eq!(r.dense_flops, hand_flops(&arch));
    assert_eq!(r.sparse_flops, 600);
    assert_eq!(r.speedup, Ratio::from_integer(1));
}

#[test]
fn speedup_depends_on_the_mask_alone() {
    let arch = ArchSpec::new(vec![10, 20, 5], true).unwrap();
    let mut model = init_model(&arch, 0).unwrap();
    let mask = magnitude_mask(&model, 0.75, &Mask::full(&model)).unwrap();
    let before = count_flops(&model, &mask).unwrap();
    // 225 of 300 weights pruned leaves 75 * 2 = 150 FLOPs.
    assert_eq!(before.sparse_flops, 150);
    assert_eq!(before.speedup, Ratio::from_integer(4));
    for p in model.params.iter_mut() {
        for (j, w) in p.data.iter_mut().enumerate() {
            *w = *w * 3.0 + uniform(1, j as u64, -1.0, 1.0) as f32;
        }
    }
    assert_eq!(count_flops(&model, &mask).unwrap(), before);
}

#[test]
fn recall_matches_a_confusion_matrix() {
    let data = gen_blobs(4, 3, 25, 3.0, 9, Some(0.3)).unwrap();
    assert_eq!(data.len(), 100);
    let model = init_model(&ArchSpec::new(vec![3, 8, 4], true).unwrap(), 2).unwrap();
    let preds = predict(&model, &data).unwrap();

    let mut confusion = [[0usize; 4]; 4];
    for (&y, &p) in data.labels.iter().zip(&preds) {
        confusion[y as usize][p as usize] += 1;
    }
    let report = subgroup_recall(&model, &data).unwrap();
    let mut class_sum = 0.0;
    for c in 0..4 {
        let row: usize = confusion[c].iter().sum();
        let recall = confusion[c][c] as f32 / row as f32;
        assert_eq!(report.class_recall[&(c as u32)], recall);
        class_sum += recall;
    }
    assert!((report.balanced_accuracy - class_sum / 4.0).abs() < 1e-6);

    let groups = data.subgroup.as_ref().unwrap();
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for i in 0..data.len() {
        let e = tally.entry(groups[i]).or_default();
        e.0 += usize::from(preds[i] == data.labels[i]);
        e.1 += 1;
    }
    assert_eq!(tally.len(), 2);
    for (g, (hit, n)) in tally {
        assert_eq!(report.group_recall[&g], hit as f32 / n as f32);
    }
}

#[test]
fn perfect_classifier_has_unit_recall() {
    // One-hot inputs and an identity layer classify every sample correctly.
    let n = 12;
    let inputs: Vec<f32> = (0..n).flat_map(|i| (0..3).map(move |c| f32::from(u8::from(c == i % 3)))).collect();
    let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
    let groups: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
    let data = Dataset::new("onehot", 3, 3, inputs, labels, Some(groups), 0).unwrap();
    let mut model = init_model(&ArchSpec::new(vec![3, 3], false).unwrap(), 0).unwrap();
    for (j, w) in model.params[0].data.iter_mut().enumerate() {
        *w = f32::from(u8::from(j / 3 == j % 3));
    }
    model.params[1].data.iter_mut().for_each(|b| *b = 0.0);
    let r = subgroup_recall(&model, &data).unwrap();
    assert!(r.group_recall.values().chain(r.class_recall.values()).all(|&v| v == 1.0));
    assert_eq!(r.balanced_accuracy, 1.0);
}
