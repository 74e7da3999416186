use ndarray::{concatenate, Array2, Axis};
use parcon_core::losses::{cross_entropy_batch, scaled_supervised_contrastive};
use parcon_core::training::{ce_gradients, grad_alignment, ssc_gradients, LogRecord, LossKind};
use parcon_core::{
    build_indices, curate, generate, sample_ce_batch, ContrastiveConfig, Gradients, IndexedDataset, LrSchedule,
    NegativeWeights, NetworkDims, NetworkState, RunLog, Scheme, StepConfig, SynthSpec, TokenHashEmbedder, TrainPlan,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn split(seed: u64) -> (IndexedDataset, IndexedDataset) {
    let spec = SynthSpec {
        num_images: 32,
        seed,
        ..SynthSpec::default()
    };
    let (tr, te) = generate(&spec).unwrap().split_by_group(0.25, seed).unwrap();
    let emb = TokenHashEmbedder::default();
    (build_indices(tr, 0.95, &emb).unwrap(), build_indices(te, 0.95, &emb).unwrap())
}

fn dims(idx: &IndexedDataset) -> NetworkDims {
    NetworkDims {
        d_v: idx.header().d_v,
        d_q: idx.question_dim(),
        d_h: 16,
        d_z: 8,
        num_labels: idx.header().num_labels,
    }
}

fn plan(scheme: Scheme, total_iters: u64) -> TrainPlan {
    let mut schedule = LrSchedule::scaled_to(total_iters.max(1));
    schedule.base_lr = 1e-2;
    TrainPlan {
        scheme,
        total_iters,
        n_r: 6,
        schedule,
        seed: 7,
        ..TrainPlan::default()
    }
}

fn kinds(log: &RunLog) -> Vec<(u64, LossKind)> {
    log.steps().map(|(i, k, _)| (i, k)).collect()
}

#[test]
fn alternate_schedule_places_ssc_on_multiples_of_n_ce() {
    let (tr, _) = split(1);
    let out = parcon_core::train(&plan(Scheme::Alternate, 20), &tr, None, NetworkState::new(dims(&tr), 0)).unwrap();
    let ssc: Vec<u64> = kinds(&out.log)
        .into_iter()
        .filter(|&(_, k)| k == LossKind::Ssc)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(ssc, vec![4, 8, 12, 16, 20]);
    assert_eq!(out.log.steps().count(), 20);

    for (n, n_ce) in [(7, 2), (9, 3), (5, 6), (11, 5)] {
        let p = TrainPlan {
            n_ce,
            ..plan(Scheme::Alternate, n)
        };
        let out = parcon_core::train(&p, &tr, None, NetworkState::new(dims(&tr), 0)).unwrap();
        for (i, k) in kinds(&out.log) {
            let want = if i % n_ce == 0 { LossKind::Ssc } else { LossKind::Ce };
            assert_eq!(k, want, "N={n} N_ce={n_ce} i={i}");
        }
    }
}

#[test]
fn alternate_rejects_n_ce_below_two() {
    let (tr, _) = split(1);
    let p = TrainPlan {
        n_ce: 1,
        ..plan(Scheme::Alternate, 4)
    };
    assert!(parcon_core::train(&p, &tr, None, NetworkState::new(dims(&tr), 0)).is_err());
}

/// Joint gradient by a separate route: one forward and one backward pass
/// over the stacked curated and CE batches, upstream gradients pre-scaled.
fn stacked_joint_gradient(
    state: &NetworkState,
    idx: &IndexedDataset,
    curated: &[usize],
    relations: &parcon_core::BatchRelations,
    ce: &[usize],
    cfg: &ContrastiveConfig,
    beta: f64,
) -> Gradients {
    let (ci, cq) = idx.batch_inputs(curated).unwrap();
    let (ei, eq) = idx.batch_inputs(ce).unwrap();
    let images = concatenate(Axis(0), &[ci.view(), ei.view()]).unwrap();
    let questions = concatenate(Axis(0), &[cq.view(), eq.view()]).unwrap();
    let pass = state.forward(images.view(), questions.view()).unwrap();
    let z = pass.z.as_ref().unwrap();
    let n = curated.len();
    let ssc = scaled_supervised_contrastive(z.slice(ndarray::s![..n, ..]), relations, cfg).unwrap();
    let labels: Vec<usize> = ce.iter().map(|&i| idx.samples()[i].answer_label).collect();
    let (_, d_ce) = cross_entropy_batch(pass.logits.slice(ndarray::s![n.., ..]), &labels).unwrap();
    let mut d_z = Array2::zeros(z.raw_dim());
    d_z.slice_mut(ndarray::s![..n, ..]).assign(&(&ssc.grads * beta));
    let mut d_logits = Array2::zeros(pass.logits.raw_dim());
    d_logits.slice_mut(ndarray::s![n.., ..]).assign(&(&d_ce * (1.0 - beta)));
    state.backward(&pass, Some(&d_z), Some(&d_logits)).unwrap()
}

#[test]
fn joint_gradient_matches_accumulated_update() {
    let (tr, _) = split(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ContrastiveConfig::default();
    for trial in 0..20 {
        let state = NetworkState::new(dims(&tr), trial);
        let batch = curate(4, &tr, &NegativeWeights::default(), &mut rng).unwrap();
        let ce = sample_ce_batch(&tr, 24, &mut rng).unwrap();
        let beta = if trial == 0 { 0.5 } else { rng.random_range(0.0..1.0) };
        let (_, g_ssc) = ssc_gradients(&state, &tr, &batch, &cfg).unwrap();
        let (_, g_ce) = ce_gradients(&state, &tr, &ce).unwrap();
        let combined = Gradients::combine(&g_ssc, beta, &g_ce, 1.0 - beta).flat(&state);
        let stacked = stacked_joint_gradient(&state, &tr, &batch.samples, &batch.relations, &ce, &cfg, beta).flat(&state);
        assert_eq!(combined.len(), stacked.len());
        for (a, b) in combined.iter().zip(&stacked) {
            assert!((a - b).abs() <= 1e-12, "beta={beta}: {a} vs {b}");
        }
        if beta == 0.5 {
            let (s, c) = (g_ssc.flat(&state), g_ce.flat(&state));
            for j in 0..combined.len() {
                assert!((combined[j] - (s[j] + c[j]) / 2.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn joint_extremes_reproduce_single_loss_runs_bitwise() {
    let (tr, _) = split(3);
    let init = NetworkState::new(dims(&tr), 1);
    let n = 12;

    let joint0 = parcon_core::train(&TrainPlan { beta: 0.0, ..plan(Scheme::Joint, n) }, &tr, None, init.clone()).unwrap();
    let ce_only = parcon_core::train(&TrainPlan { n_ce: n + 1, ..plan(Scheme::Alternate, n) }, &tr, None, init.clone()).unwrap();
    assert_eq!(joint0.state, ce_only.state);
    let losses = |log: &RunLog| log.steps().map(|(_, _, l)| l.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&joint0.log), losses(&ce_only.log));

    let joint1 = parcon_core::train(&TrainPlan { beta: 1.0, ..plan(Scheme::Joint, n) }, &tr, None, init.clone()).unwrap();
    let ssc_only = parcon_core::train(
        &TrainPlan {
            n_p: n,
            n_f: 0,
            ..plan(Scheme::PretrainFinetune, n)
        },
        &tr,
        None,
        init,
    )
    .unwrap();
    assert_eq!(joint1.state, ssc_only.state);
    assert_eq!(losses(&joint1.log), losses(&ssc_only.log));
}

#[test]
fn each_loss_leaves_the_other_head_untouched() {
    let (tr, _) = split(4);
    let mut state = NetworkState::new(dims(&tr), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ContrastiveConfig::default();
    let schedule = LrSchedule {
        base_lr: 1e-2,
        ..LrSchedule::scaled_to(10)
    };
    for step in 0..10 {
        let before = state.clone();
        if step % 2 == 0 {
            let ce = sample_ce_batch(&tr, 24, &mut rng).unwrap();
            let (_, g) = ce_gradients(&state, &tr, &ce).unwrap();
            assert!(g.projection.is_none());
            state.apply_gradients(&g, &schedule, &StepConfig::default()).unwrap();
            assert_eq!(state.projection, before.projection, "CE moved g");
            assert_ne!(state.classifier, before.classifier);
        } else {
            let batch = curate(4, &tr, &NegativeWeights::default(), &mut rng).unwrap();
            let (_, g) = ssc_gradients(&state, &tr, &batch, &cfg).unwrap();
            assert!(g.classifier.is_none());
            state.apply_gradients(&g, &schedule, &StepConfig::default()).unwrap();
            assert_eq!(state.classifier, before.classifier, "SSC moved f^c");
            assert_ne!(state.projection, before.projection);
        }
        assert_ne!(state.encoder, before.encoder);
    }
}

#[test]
fn every_scheme_is_deterministic() {
    let (tr, te) = split(5);
    for scheme in [Scheme::Alternate, Scheme::Joint, Scheme::PretrainFinetune] {
        let p = TrainPlan {
            n_p: 6,
            n_f: 6,
            eval_every: Some(4),
            ..plan(scheme, 12)
        };
        let run = || parcon_core::train(&p, &tr, Some(&te), NetworkState::new(dims(&tr), 3)).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.state, b.state, "{scheme}");
        let bytes = |log: &RunLog| {
            let mut v = Vec::new();
            log.write_jsonl(&mut v).unwrap();
            v
        };
        assert_eq!(bytes(&a.log), bytes(&b.log), "{scheme}");
    }
}

#[test]
fn pretrain_without_pretraining_is_a_ce_run() {
    let (tr, _) = split(6);
    let init = NetworkState::new(dims(&tr), 4);
    let pf = parcon_core::train(
        &TrainPlan {
            n_p: 0,
            n_f: 10,
            ..plan(Scheme::PretrainFinetune, 10)
        },
        &tr,
        None,
        init.clone(),
    )
    .unwrap();
    let ce = parcon_core::train(&TrainPlan { n_ce: 11, ..plan(Scheme::Alternate, 10) }, &tr, None, init).unwrap();
    assert_eq!(pf.state, ce.state);
}

#[test]
fn phase_boundary_and_kinds() {
    let (tr, _) = split(6);
    let p = TrainPlan {
        n_p: 5,
        n_f: 4,
        ..plan(Scheme::PretrainFinetune, 9)
    };
    let init = NetworkState::new(dims(&tr), 4);
    let out = parcon_core::train(&p, &tr, None, init.clone()).unwrap();
    let k = kinds(&out.log);
    assert!(k[..5].iter().all(|&(_, kind)| kind == LossKind::Ssc));
    assert_eq!(k[5], (6, LossKind::Ce));
    assert!(k[5..].iter().all(|&(_, kind)| kind == LossKind::Ce));
    let boundary = out.phase_boundary.as_ref().unwrap();
    // The finetuning phase leaves the projection head where pretraining put it.
    assert_eq!(boundary.projection, out.state.projection);
    let pre_only = parcon_core::train(&TrainPlan { n_f: 0, ..p }, &tr, None, init).unwrap();
    assert_eq!(&pre_only.state, boundary);
    assert!(out.exported().projection.is_none());
}

#[test]
fn untrained_classifier_is_at_chance() {
    let (tr, te) = split(7);
    let p = TrainPlan {
        n_p: 30,
        n_f: 0,
        eval_every: Some(30),
        ..plan(Scheme::PretrainFinetune, 30)
    };
    let out = parcon_core::train(&p, &tr, Some(&te), NetworkState::new(dims(&tr), 5)).unwrap();
    let (_, acc, _) = out.log.last_eval().unwrap();
    let chance = 1.0 / tr.header().num_labels as f64;
    // Predictions within a scene are correlated, so allow a wide band.
    assert!((acc - chance).abs() < 0.08, "accuracy {acc} vs chance {chance}");
}

#[test]
fn alignment_examples() {
    assert_eq!(grad_alignment(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 5.0);
    let a = [0.5, -1.5, 2.0];
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert_eq!(grad_alignment(&a, &neg).unwrap(), -a.iter().map(|x| x * x).sum::<f64>());
    assert!(grad_alignment(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn joint_alignment_is_mostly_positive() {
    let (tr, _) = split(8);
    let out = parcon_core::train(&plan(Scheme::Joint, 120), &tr, None, NetworkState::new(dims(&tr), 6)).unwrap();
    let a = out.log.alignments();
    assert_eq!(a.len(), 120);
    let late = &a[20..];
    let positive = late.iter().filter(|&&x| x > 0.0).count() as f64 / late.len() as f64;
    assert!(positive > 0.5, "positive fraction {positive}");
}

#[test]
fn log_records_are_ordered_and_round_trip() {
    let (tr, te) = split(9);
    let p = plan(Scheme::Alternate, 40);
    let out = parcon_core::train(&p, &tr, Some(&te), NetworkState::new(dims(&tr), 0)).unwrap();
    let steps: Vec<u64> = out.log.steps().map(|(i, _, _)| i).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    let evals: Vec<u64> = out
        .log
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval { iteration, cs, .. } => {
                assert_eq!(cs.len(), 4);
                Some(*iteration)
            }
            LogRecord::Step { .. } => None,
        })
        .collect();
    assert_eq!(evals, (1..=20).map(|j| 2 * j).collect::<Vec<_>>());
    let mut buf = Vec::new();
    out.log.write_jsonl(&mut buf).unwrap();
    assert_eq!(RunLog::read_jsonl(buf.as_slice()).unwrap(), out.log);
}
