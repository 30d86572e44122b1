mod common;

use common::{examples, features, tiny_cfg};
use diffaudio::autograd::Tape;
use diffaudio::masking::MaskPlan;
use diffaudio::model::{init_model, pretrain_loss, teacher_forward};
use diffaudio::train::{clone_gradients, CloneJob, Finetuner, Pretrainer, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn teacher_forwards_count_clips_not_clones() {
    for clones in [1, 3] {
        let mut cfg = tiny_cfg();
        cfg.masking.clones = clones;
        let data = features(&cfg, 1);
        let mut p = Pretrainer::new(cfg, 3).unwrap();
        p.run(&data, |_| {}).unwrap();
        assert_eq!(p.teacher_forwards(), 3 * 2);
        assert_eq!(p.teacher.update_count, 3);
    }
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = tiny_cfg();
    let data = features(&cfg, 2);
    let run = || {
        let mut p = Pretrainer::new(cfg.clone(), 4).unwrap();
        let mut log = Vec::new();
        p.run(&data, |r| log.push(*r)).unwrap();
        (log, p.student, p.teacher.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn clone_average_equals_gradient_of_average() {
    let cfg = tiny_cfg();
    let data = features(&cfg, 3);
    let store = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let p = Pretrainer::from_student(cfg.clone(), store.clone(), 10).unwrap();
    let teach: Vec<_> = data[..2]
        .iter()
        .map(|f| teacher_forward(&p.teacher.params, f, &cfg).unwrap())
        .collect();
    let mut jobs = Vec::new();
    for b in 0..2 {
        for plan in p.clone_plans(data[b].n_tokens(), b).unwrap() {
            jobs.push(CloneJob {
                features: &data[b],
                teacher: &teach[b],
                plan,
            });
        }
    }
    let (avg, parts) = clone_gradients(&store, &jobs, &cfg).unwrap();

    let mut tape = Tape::new();
    tape.bind_store(&store, true);
    let mut losses = Vec::new();
    for j in &jobs {
        losses.push(pretrain_loss(&mut tape, j.features, j.teacher, &j.plan, &cfg).unwrap().0);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l).unwrap();
    }
    let mean = tape.scale(acc, 1.0 / jobs.len() as f64);
    assert!((tape.value(mean).item() - parts.total).abs() < 1e-12);
    let g = tape.backward(mean).unwrap().for_store(&tape, &store);
    for (name, t) in g.iter() {
        let d = t.max_abs_diff(avg.get(name).unwrap());
        assert!(d < 1e-10, "{name}: {d}");
    }
}

#[test]
fn single_clone_is_a_single_masked_view() {
    let mut cfg = tiny_cfg();
    cfg.masking.clones = 1;
    let data = features(&cfg, 5);
    let p = Pretrainer::new(cfg.clone(), 10).unwrap();
    let t = teacher_forward(&p.teacher.params, &data[0], &cfg).unwrap();
    let plan = p.clone_plans(data[0].n_tokens(), 0).unwrap().remove(0);
    let jobs = [CloneJob {
        features: &data[0],
        teacher: &t,
        plan: plan.clone(),
    }];
    let (g, parts) = clone_gradients(&p.student, &jobs, &cfg).unwrap();
    let mut tape = Tape::new();
    tape.bind_store(&p.student, true);
    let (loss, direct) = pretrain_loss(&mut tape, &data[0], &t, &plan, &cfg).unwrap();
    assert_eq!(parts, direct);
    let want = tape.backward(loss).unwrap().for_store(&tape, &p.student);
    assert_eq!(g, want);
}

#[test]
fn frozen_teacher_ignores_student_gradients() {
    let mut cfg = tiny_cfg();
    cfg.objective.ema_decay = 1.0;
    let data = features(&cfg, 6);
    let mut p = Pretrainer::new(cfg, 3).unwrap();
    let before = p.teacher.params.clone();
    let student_before = p.student.clone();
    p.run(&data, |_| {}).unwrap();
    assert_eq!(p.teacher.params, before);
    assert_ne!(p.student, student_before);
}

#[test]
fn losses_decompose_exactly() {
    let cfg = tiny_cfg();
    let data = features(&cfg, 7);
    let mut p = Pretrainer::new(cfg.clone(), 2).unwrap();
    p.run(&data, |r| {
        assert!(r.loss_utt >= 0.0 && r.loss_frame >= 0.0);
        assert!((r.loss_total - (cfg.objective.alpha * r.loss_utt + r.loss_frame)).abs() < 1e-12);
    })
    .unwrap();
}

#[test]
fn finetune_starts_at_uniform_cross_entropy() {
    let cfg = tiny_cfg();
    let data = examples(&cfg, 8);
    let student = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let ft = Finetuner::new(cfg, &student, 4, Task::SingleLabel, 10).unwrap();
    assert!(!ft.params.contains("mask_emb") && !ft.params.contains("dec.proj.w"));
    let batch: Vec<_> = data[..4].iter().collect();
    let plans: Vec<_> = batch.iter().map(|e| MaskPlan::all_visible(e.features.n_tokens())).collect();
    let (loss, grads) = ft.loss_and_grads(&batch, &plans).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    let enc_grad: f64 = grads
        .iter()
        .filter(|(n, _)| n.starts_with("enc.0."))
        .map(|(_, t)| t.sq_norm())
        .sum();
    // a zero head blocks gradient at step one; the head itself gets it
    assert!(grads.get("head.w").unwrap().sq_norm() > 0.0);
    assert_eq!(enc_grad, 0.0);
}

#[test]
fn finetune_gradient_reaches_first_layer() {
    let cfg = tiny_cfg();
    let data = examples(&cfg, 10);
    let student = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let mut ft = Finetuner::new(cfg, &student, 4, Task::SingleLabel, 10).unwrap();
    let batch: Vec<_> = data[..4].iter().collect();
    ft.train_step(&batch).unwrap();
    let plans: Vec<_> = batch.iter().map(|e| ft.plan_for(e.features.n_tokens(), 0).unwrap()).collect();
    let (_, grads) = ft.loss_and_grads(&batch, &plans).unwrap();
    let enc_grad: f64 = grads
        .iter()
        .filter(|(n, _)| n.starts_with("enc.0."))
        .map(|(_, t)| t.sq_norm())
        .sum();
    assert!(enc_grad > 0.0);
}

#[test]
fn finetune_masks_drop_a_fifth_and_zero_ratio_keeps_all() {
    let mut cfg = tiny_cfg();
    let data = examples(&cfg, 12);
    let student = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let ft = Finetuner::new(cfg.clone(), &student, 4, Task::SingleLabel, 10).unwrap();
    let plan = ft.plan_for(16, 0).unwrap();
    assert!(plan.n_masked() >= 4 && plan.n_masked() <= 5);
    cfg.masking.finetune_ratio = 0.0;
    let ft = Finetuner::new(cfg, &student, 4, Task::SingleLabel, 10).unwrap();
    assert_eq!(ft.plan_for(data[0].features.n_tokens(), 0).unwrap().n_masked(), 0);
}

#[test]
fn label_class_mismatch_is_an_error() {
    let cfg = tiny_cfg();
    let mut data = examples(&cfg, 14);
    let student = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let mut ft = Finetuner::new(cfg, &student, 4, Task::SingleLabel, 10).unwrap();
    data[0].labels = vec![7];
    assert!(ft.train_step(&[&data[0]]).is_err());
    data[0].labels = vec![0, 1];
    assert!(ft.train_step(&[&data[0]]).is_err());
}

#[test]
fn multi_label_finetune_runs() {
    let mut cfg = tiny_cfg();
    cfg.synthetic.multi_label = true;
    let data = examples(&cfg, 16);
    let student = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    let mut ft = Finetuner::new(cfg.clone(), &student, 4, Task::MultiLabel, 3).unwrap();
    let mut first = None;
    ft.run(&data, |_, l| {
        first.get_or_insert(l);
    })
    .unwrap();
    assert!((first.unwrap() - 2f64.ln()).abs() < 1e-12);
    let r = diffaudio::train::evaluate(&ft.params, &data, &cfg, Task::MultiLabel).unwrap();
    assert!(r.map.unwrap().map > 0.0);
}
