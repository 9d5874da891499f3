use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{op_checks, stable_derivative};
use super::*;
use crate::autograd::{with_sign_fault, Graph, ParamStore};
use crate::fusion::selection_count;
use crate::synthdata::Split;

/// Eight sequences, two epochs, warm-up of one so AHSW is active.
fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.data.train_sequences = 6;
    cfg.data.val_sequences = 2;
    cfg.train.epochs = 2;
    cfg.ahsw.warmup = 1;
    cfg
}

#[test]
fn two_epochs_write_two_checkpoints_and_a_report() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    generate_dataset(&cfg, &data_dir).unwrap();
    let data = Dataset::load(&data_dir).unwrap();
    assert_eq!((data.train.len(), data.val.len()), (6, 2));
    let out = dir.path().join("run");
    let mut seen = Vec::new();
    let o = train::<f32>(&cfg, &data, &out, None, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    for e in 1..=2 {
        let ck = Checkpoint::<f32>::load(&checkpoint_path(&out, e)).unwrap();
        assert_eq!(ck.header.epoch, e);
        assert_eq!(ck.header.history.losses[0].len(), e);
    }
    assert!(!checkpoint_path(&out, 3).exists());
    let records = read_metrics(&out.join(METRICS_FILE)).unwrap();
    assert_eq!(records, o.report.records);
    // AHSW: epoch 2 is past warm-up, so ⌈0.7·6⌉ samples train.
    assert_eq!(records[1].participants, 6);
    assert_eq!(records[2].participants, 5);
    assert!(records[2].weight_range[0] >= 1.0 && records[2].weight_range[1] <= cfg.ahsw.lambda);
}

#[test]
fn same_seed_gives_identical_training() {
    let cfg = small_cfg();
    let data = Dataset::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = train::<f32>(&cfg, &data, &dir.path().join("a"), None, |_| {}).unwrap();
    let b = train::<f32>(&cfg, &data, &dir.path().join("b"), None, |_| {}).unwrap();
    let (la, lb) = (a.report.last().unwrap(), b.report.last().unwrap());
    assert_eq!(la.train, lb.train);
    assert_eq!(la.metrics, lb.metrics);
    assert_eq!(std::fs::read(checkpoint_path(&dir.path().join("a"), 2)).unwrap(), std::fs::read(checkpoint_path(&dir.path().join("b"), 2)).unwrap());
}

#[test]
fn resume_reproduces_uninterrupted_training() {
    let mut cfg = small_cfg();
    cfg.data.train_sequences = 4;
    cfg.train.epochs = 3;
    let data = Dataset::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let straight = dir.path().join("straight");
    train::<f32>(&cfg, &data, &straight, None, |_| {}).unwrap();

    let split = dir.path().join("split");
    let mut short = cfg.clone();
    short.train.epochs = 2;
    train::<f32>(&short, &data, &split, None, |_| {}).unwrap();
    let mut ck = Checkpoint::<f32>::load(&checkpoint_path(&split, 2)).unwrap();
    assert!(train::<f32>(&cfg, &data, &split, Some(ck.clone()), |_| {}).is_err(), "config mismatch must be rejected");
    // Same run, longer budget: restamp the header as the full-length config.
    ck.header.config = cfg.clone();
    ck.header.config_hash = cfg.hash();
    train::<f32>(&cfg, &data, &split, Some(ck), |_| {}).unwrap();
    let a = Checkpoint::<f32>::load(&checkpoint_path(&straight, 3)).unwrap();
    let b = Checkpoint::<f32>::load(&checkpoint_path(&split, 3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let cfg = small_cfg();
    let data = Dataset::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let o = train::<f32>(&cfg, &data, dir.path(), None, |_| {}).unwrap();
    let before = evaluate(&o.checkpoint, &data, Split::Val).unwrap();
    let loaded = Checkpoint::<f32>::load(&checkpoint_path(dir.path(), 2)).unwrap();
    assert_eq!(evaluate(&loaded, &data, Split::Val).unwrap(), before);
    assert_eq!(before, o.report.last().unwrap().metrics);
}

#[test]
fn oracle_scores_perfectly_and_grid_mismatch_is_rejected() {
    let cfg = small_cfg();
    let data = Dataset::generate(&cfg).unwrap();
    let m = evaluate(&Checkpoint::<f32>::oracle(&cfg), &data, Split::Val).unwrap();
    assert_eq!((m.iou, m.miou), (1.0, 1.0));
    let mut other = cfg.clone();
    other.data.grid_dims = [16, 16, 8];
    assert!(evaluate(&Checkpoint::<f32>::oracle(&other), &data, Split::Val).is_err());
}

#[test]
fn proxy_flag_removes_exactly_the_proxy_term() {
    let cfg = small_cfg().effective();
    let data = Dataset::generate(&small_cfg()).unwrap();
    let plan = ModelPlan::<f64>::new(&cfg).unwrap();
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let frames = &data.train[0].frames;
    let mut off = cfg.clone();
    off.ablation.proxy_loss = false;
    let parts = |c: &RunConfig| {
        let g = Graph::inference();
        let fwd = model.forward(&g, &store, &plan, c, frames, 7).unwrap();
        model.sample_loss(&g, &store, c, &fwd, frames, 0, 0).unwrap().1
    };
    let (on, no) = (parts(&cfg), parts(&off));
    assert_ne!(on.proxy, 0.0);
    assert_eq!(no.proxy, 0.0);
    assert_eq!((on.ce, on.lovasz, on.scal_geo, on.scal_sem, on.aux), (no.ce, no.lovasz, no.scal_geo, no.scal_sem, no.aux));
    assert_eq!(no.total, no.ce + no.lovasz + no.scal_geo + no.scal_sem + no.aux);
    assert!((on.total - no.total - on.proxy).abs() < 1e-12);
}

#[test]
fn warm_up_participation_is_uniform() {
    let mut cfg = small_cfg();
    cfg.ahsw.warmup = 2;
    cfg.train.epochs = 3;
    cfg.data.train_sequences = 5;
    let data = Dataset::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let o = train::<f32>(&cfg, &data, dir.path(), None, |_| {}).unwrap();
    for plan in &o.plans[..2] {
        assert!(plan.iter().all(|p| p.participates && p.weight == 1.0));
    }
    let last = &o.plans[2];
    assert_eq!(last.iter().filter(|p| p.participates).count(), 4);
    assert!(last.iter().all(|p| (1.0..=cfg.ahsw.lambda).contains(&p.weight)));
    // Histories are complete for every sample, participating or not.
    assert!(o.checkpoint.header.history.losses.iter().all(|h| h.len() == 3));
}

#[test]
fn fusion_work_counts() {
    let base = small_cfg();
    let data = Dataset::generate(&base).unwrap();
    let frames = &data.train[0].frames;
    let counts = |cfg: &RunConfig| {
        let eff = cfg.effective();
        let plan = ModelPlan::<f32>::new(&eff).unwrap();
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &eff, &mut ChaCha8Rng::seed_from_u64(0));
        (count_fusion_work(&model, &store, &plan, &eff, frames).unwrap(), plan.coarse.num_voxels())
    };
    let mut dense = base.clone();
    dense.model.scale = Scale::Dense;
    let (c, v) = counts(&dense);
    assert_eq!(c.len(), 2);
    assert!(c.iter().all(|l| l.attention_calls() == 2 * v));

    let mut k35 = base.clone();
    k35.fusion.k_percent = 35.0;
    let (c, v) = counts(&k35);
    let k = selection_count(35.0, v);
    assert_eq!(k, (0.35 * v as f64).ceil() as usize);
    assert!(c.iter().all(|l| l.attention_calls() == 2 * k && l.gsca_calls == k && l.ssca_calls == k));

    let mut no_ssca = base;
    no_ssca.ablation.ssca = false;
    let (c, _) = counts(&no_ssca);
    assert!(c.iter().all(|l| l.ssca_calls == 0 && l.gsca_calls > 0));
}

#[test]
fn stable_derivative_of_smooth_and_kinked_functions() {
    let d = stable_derivative(|x| (1.3 + x).sin() * 4.0, 1e-3);
    assert!((d - 1.3f64.cos() * 4.0).abs() < 1e-9);
    // A jump of 1e-3 at x = 5e-5: the largest step straddles it, smaller ones do not.
    let d = stable_derivative(|x| 2.0 * x + if x > 5e-5 { 1e-3 } else { 0.0 }, 1e-4);
    assert!((d - 2.0).abs() < 1e-8, "{d}");
}

#[test]
fn op_checks_pass_and_name_an_injected_sign_error() {
    let clean = op_checks(3);
    assert!(clean.iter().all(|r| r.passed), "{clean:?}");
    for op in ["hellinger_pairs", "deform_sample", "neighbor_conv"] {
        let faulty = with_sign_fault(op, || op_checks(3));
        let failed: Vec<&str> = faulty.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec![format!("op:{op}").as_str()]);
    }
}
