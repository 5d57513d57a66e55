mod oracles;

use oracles::blob_run_data;
use sparsesoup::checkpoint::{encode, CheckpointMeta};
use sparsesoup::merging::{recompute_bn, MergeMethod};
use sparsesoup::nn::{init_model, train, ArchSpec, ModelState, OptimizerState};
use sparsesoup::orchestrator::{
    dst_run, imp_reprune_run, imp_run, pretrain, sms_run, DstConfig, DstMethod, ImpVariant, PhasePlan, PretrainConfig,
    PruningKind, RetrainSettings, RunData, RunRecord,
};
use sparsesoup::pruning::{apply_mask, magnitude_mask, pruned_count, Mask, SparsityPlan};
use sparsesoup::schedules::{LrCurve, OriginalSchedule, RetrainVariant};

const BS: usize = 32;

fn pre_cfg(epochs: u32) -> PretrainConfig {
    PretrainConfig {
        arch: ArchSpec::new(vec![2, 16, 16, 4], true).unwrap(),
        epochs,
        lr: LrCurve::Linear { from: 0.1, to: 0.001 },
        batch_size: BS,
        momentum: 0.9,
        weight_decay: 1e-4,
        seed: 3,
    }
}

fn setup() -> (ModelState, RunData, RetrainSettings) {
    let data = blob_run_data(4, 60, 0.8, 11);
    let cfg = pre_cfg(6);
    let dense = pretrain(&cfg, &data.train).unwrap();
    let s = RetrainSettings {
        original: cfg.schedule().unwrap(),
        variant: RetrainVariant::Allr,
        retrain_epochs: 2,
        batch_size: BS,
        momentum: 0.9,
        weight_decay: 1e-4,
        parallel: 1,
        ood: Vec::new(),
    };
    (dense, data, s)
}

fn bytes(model: &ModelState) -> Vec<u8> {
    let meta = CheckpointMeta { config_hash: 0, phase: 0, replica: 0, seed: 0 };
    encode(model, &Mask::from_zeros(model), &meta).unwrap()
}

fn floor_exact(model: &ModelState, s: f64) -> bool {
    let total = model.prunable_count();
    model.sparsity() == pruned_count(s, total) as f64 / total as f64
}

fn check_ledger(record: &RunRecord) {
    for p in &record.phases {
        assert!(floor_exact(&p.model, p.target_sparsity), "phase {} sparsity {}", p.phase, p.model.sparsity());
        assert_eq!(p.mask.pruned(), pruned_count(p.target_sparsity, p.mask.total()));
        assert_eq!(Mask::from_zeros(&p.model), p.mask, "phase {}: output zero set differs from mask", p.phase);
    }
    for w in record.phases.windows(2) {
        let grew = w[0].mask.tensors.iter().zip(&w[1].mask.tensors).all(|(a, b)| {
            a.keep.iter().zip(&b.keep).all(|(&ka, &kb)| ka || !kb)
        });
        assert!(grew, "mask is not monotone");
    }
}

#[test]
fn pretraining_reaches_high_accuracy_and_is_reproducible() {
    let data = blob_run_data(4, 100, 0.8, 5);
    let a = pretrain(&pre_cfg(30), &data.train).unwrap();
    let b = pretrain(&pre_cfg(30), &data.train).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let acc = sparsesoup::nn::evaluate(&a, &data.test).unwrap().accuracy;
    assert!(acc > 0.9, "test accuracy {acc}");
}

#[test]
fn soup_of_one_is_imp() {
    let (dense, data, s) = setup();
    let plan = SparsityPlan::new(0.9, 3).unwrap();
    for base in [1u64, 2, 3] {
        let phase_plan = PhasePlan::seed_varied(plan.clone(), 1, base, &s, MergeMethod::Uniform);
        let (a, ra) = sms_run(&dense, &phase_plan, &s, &data).unwrap();
        let (b, rb) = imp_run(&dense, &plan, ImpVariant::Standard, 1, PruningKind::UnstructuredGlobal, &s, &data, base)
            .unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        for (pa, pb) in ra.phases.iter().zip(&rb.phases) {
            assert_eq!(bytes(&pa.model), bytes(&pb.model));
            assert_eq!(pa.output, pb.output);
            assert_eq!(pa.candidates, pb.candidates);
        }
    }
}

#[test]
fn soup_masks_and_sparsity_ledger() {
    let (dense, data, s) = setup();
    let plan = SparsityPlan::new(0.95, 3).unwrap();
    for merge in [MergeMethod::Uniform, MergeMethod::Greedy] {
        let phase_plan = PhasePlan::seed_varied(plan.clone(), 3, 9, &s, merge);
        let (model, record) = sms_run(&dense, &phase_plan, &s, &data).unwrap();
        assert_eq!(record.phases.len(), 3);
        check_ledger(&record);
        for p in &record.phases {
            assert_eq!(p.replica_zero_sets.len(), 3);
            assert!(p.replica_zero_sets.iter().all(|z| *z == p.mask));
            let (_, report) = p.merge.as_ref().unwrap();
            assert!(report.masks_identical);
            assert_eq!(report.post_merge_sparsity, p.model.sparsity());
        }
        assert!(floor_exact(&model, 0.95));
        assert_eq!(record.total_retrain_epochs, 3 * 3 * 2);
    }
}

#[test]
fn replica_threads_do_not_change_the_soup() {
    let (dense, data, s) = setup();
    let plan = PhasePlan::seed_varied(SparsityPlan::new(0.8, 2).unwrap(), 4, 21, &s, MergeMethod::Greedy);
    let (a, _) = sms_run(&dense, &plan, &s, &data).unwrap();
    let s4 = RetrainSettings { parallel: 4, ..s.clone() };
    let (b, _) = sms_run(&dense, &plan, &s4, &data).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn imp_budget_variants() {
    let (dense, data, s) = setup();
    let plan = SparsityPlan::new(0.9, 3).unwrap();
    let run = |v, m| imp_run(&dense, &plan, v, m, PruningKind::UnstructuredGlobal, &s, &data, 4).unwrap();

    let (std_model, std_rec) = run(ImpVariant::Standard, 1);
    let (once, _) = run(ImpVariant::MTimes, 1);
    assert_eq!(bytes(&std_model), bytes(&once));
    assert_eq!(std_rec.total_retrain_epochs, 3 * 2);

    let m = 2;
    let (_, mx) = run(ImpVariant::MTimes, m);
    assert_eq!(mx.phases.len(), 3);
    assert_eq!(mx.total_retrain_epochs, u64::from(m) * 2 * 3);
    check_ledger(&mx);

    let (_, mp) = run(ImpVariant::MPhases, m);
    assert_eq!(mp.phases.len(), 6);
    assert_eq!(mp.total_retrain_epochs, u64::from(m) * 2 * 3);
    for (j, p) in mp.phases.iter().enumerate() {
        let law = 1.0 - 0.1f64.powf((j + 1) as f64 / 6.0);
        assert!((p.target_sparsity - law).abs() < 1e-9);
    }
    check_ledger(&mp);
}

#[test]
fn structured_pruning_removes_whole_rows() {
    let (dense, data, s) = setup();
    let plan = SparsityPlan::new(0.5, 2).unwrap();
    let (model, record) = imp_run(&dense, &plan, ImpVariant::Standard, 1, PruningKind::StructuredRow, &s, &data, 0)
        .unwrap();
    let mask = &record.phases[1].mask;
    for t in &mask.tensors[..mask.tensors.len() - 1] {
        let cols = t.shape[1];
        let dead = t.keep.chunks(cols).filter(|r| r.iter().all(|&k| !k)).count();
        assert_eq!(dead, t.shape[0] / 2);
        assert!(t.keep.chunks(cols).all(|r| r.iter().all(|&k| k) || r.iter().all(|&k| !k)));
    }
    assert!(model.sparsity() > 0.0);
}

#[test]
fn reprune_restores_target() {
    let (dense, data, s) = setup();
    let plan = SparsityPlan::new(0.9, 2).unwrap();
    let (model, record) = imp_reprune_run(&dense, &plan, 3, PruningKind::UnstructuredGlobal, &s, &data, 8).unwrap();
    let r = record.reprune.as_ref().unwrap();
    assert!(floor_exact(&model, 0.9));
    assert_eq!(r.post_reprune_sparsity, model.sparsity());
    assert!(r.post_average_sparsity <= 0.9);
    assert!(r.pre_average_sparsities.iter().all(|&x| (x - r.pre_average_sparsities[0]).abs() < 1e-12));
    assert_eq!(record.sub_runs.len(), 3);
    assert_eq!(record.total_retrain_epochs, 3 * 2 * 2);
    assert!(imp_reprune_run(&dense, &plan, 1, PruningKind::UnstructuredGlobal, &s, &data, 8).is_err());
}

fn dst_cfg(method: DstMethod) -> DstConfig {
    DstConfig {
        method,
        arch: ArchSpec::new(vec![2, 16, 16, 4], true).unwrap(),
        seed: 17,
        epochs: 8,
        lr: LrCurve::Linear { from: 0.1, to: 0.001 },
        batch_size: BS,
        momentum: 0.9,
        weight_decay: 1e-4,
        target: 0.9,
        events: 3,
        prune_end_epoch: 6,
        pretrain_epochs: 2,
        variant: RetrainVariant::Ft,
        sms: false,
        m: 1,
        merge: MergeMethod::Uniform,
        parallel: 1,
        ood: Vec::new(),
    }
}

#[test]
fn dpf_updates_masked_coordinates_of_the_dense_copy() {
    let data = blob_run_data(4, 60, 0.8, 11);
    for sms in [false, true] {
        let cfg = DstConfig { method: DstMethod::Dpf, sms, m: 2, ..dst_cfg(DstMethod::Dpf) };
        let (model, record) = dst_run(&cfg, &data).unwrap();
        let dpf = record.dpf.as_ref().unwrap();
        assert!(dpf.masked_changed.iter().any(|&c| c > 0), "{:?}", dpf.masked_changed);
        let mask = &record.phases.last().unwrap().mask;
        assert!(floor_exact(&model, 0.9));
        for t in &mask.tensors {
            let (evald, dense) = (&model.params[t.param].data, &dpf.dense.params[t.param].data);
            for (j, &k) in t.keep.iter().enumerate() {
                if k {
                    assert_eq!(evald[j], dense[j]);
                } else {
                    assert_eq!(evald[j], 0.0);
                }
            }
        }
        assert!(dpf.dense.sparsity() < 0.9);
    }
}

#[test]
fn gmp_reaches_target_and_is_monotone() {
    let data = blob_run_data(4, 60, 0.8, 11);
    for sms in [false, true] {
        let cfg = DstConfig { sms, m: 2, ..dst_cfg(DstMethod::Gmp) };
        let (model, record) = dst_run(&cfg, &data).unwrap();
        assert_eq!(record.phases.len(), 3);
        check_ledger(&record);
        assert!(floor_exact(&model, 0.9));
    }
}

#[test]
fn gmp_single_event_at_start_is_one_shot_pruning() {
    let data = blob_run_data(4, 60, 0.8, 11);
    let cfg = DstConfig { events: 1, prune_end_epoch: 0, ..dst_cfg(DstMethod::Gmp) };
    let (model, _) = dst_run(&cfg, &data).unwrap();

    let mut reference = init_model(&cfg.arch, cfg.seed).unwrap();
    let mask = magnitude_mask(&reference, cfg.target, &Mask::full(&reference)).unwrap();
    apply_mask(&mut reference, &mask).unwrap();
    let schedule = OriginalSchedule::new(cfg.lr.clone(), cfg.epochs).unwrap();
    let mut opt = OptimizerState::new(&reference, cfg.momentum, cfg.weight_decay);
    train(&mut reference, &mask, &mut opt, &data.train, &schedule, cfg.epochs, BS, cfg.seed).unwrap();
    recompute_bn(&mut reference, &data.train, BS).unwrap();
    assert_eq!(bytes(&model), bytes(&reference));
}

#[test]
fn bimp_cycles_reach_target() {
    let data = blob_run_data(4, 60, 0.8, 11);
    for sms in [false, true] {
        let cfg = DstConfig { sms, m: 2, ..dst_cfg(DstMethod::Bimp) };
        let (model, record) = dst_run(&cfg, &data).unwrap();
        assert_eq!(record.phases.len(), 3);
        assert_eq!(record.phases[0].retrain_epochs[0], 2);
        check_ledger(&record);
        assert!(floor_exact(&model, 0.9));
    }
}
