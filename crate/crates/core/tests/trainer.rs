use bimal_core::flow::{FlowConfig, FlowModel};
use bimal_core::losses::{LossWeights, TauConfig};
use bimal_core::scenegen::{Domain, DomainParams, SceneConfig, SceneDataset};
use bimal_core::trainer::{
    evaluate, train_flow, train_segmenter, FlowTrainConfig, OptimConfig, OracleSegmenter, SegMode, SegNet,
    SegTrainConfig, Sgd,
};
use bimal_core::{Error, Module, Param, Tensor};

fn values<M: Module>(m: &M) -> Vec<Tensor> {
    m.params().iter().map(|p| p.value.clone()).collect()
}

fn data(domain: Domain, n: usize, seed: u64) -> SceneDataset {
    SceneDataset::generate(&SceneConfig::default(), &DomainParams::for_domain(domain), domain, n, seed).unwrap()
}

fn tiny_flow(src: &SceneDataset) -> FlowModel {
    let cfg = FlowConfig {
        num_scales: 2,
        steps_per_scale: 1,
        hidden: 4,
        ..FlowConfig::default()
    };
    let mut flow = FlowModel::new(cfg, 5).unwrap();
    let tc = FlowTrainConfig {
        optim: OptimConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            max_steps: 3,
            ..OptimConfig::default()
        },
        eval_every: 1,
        monitor_size: 2,
        ..FlowTrainConfig::default()
    };
    train_flow(&mut flow, src, &tc).unwrap();
    flow
}

fn seg_cfg(steps: usize, lambda_t: f64) -> SegTrainConfig {
    SegTrainConfig {
        optim: OptimConfig {
            learning_rate: 3e-5,
            batch_size: 2,
            max_steps: steps,
            seed: 11,
            ..OptimConfig::default()
        },
        weights: LossWeights {
            lambda_t,
            lambda_tau: 1.0,
        },
        eval_every: 2,
        ..SegTrainConfig::default()
    }
}

#[test]
fn two_momentum_steps_on_a_parabola() {
    let cfg = OptimConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut w = Param::new("w", Tensor::vector(vec![1.0]));
    let mut sgd = Sgd::new();
    let mut seen = Vec::new();
    for _ in 0..2 {
        w.grad = w.value.map(|x| 2.0 * x);
        sgd.step(vec![&mut w], &cfg).unwrap();
        seen.push(w.value.data()[0]);
    }
    assert!((seen[0] - 0.8).abs() < 1e-15, "{}", seen[0]);
    assert!((seen[1] - 0.46).abs() < 1e-15, "{}", seen[1]);
}

#[test]
fn weight_decay_alone_shrinks_the_norm() {
    let cfg = OptimConfig {
        learning_rate: 0.5,
        weight_decay: 1e-2,
        ..OptimConfig::default()
    };
    let mut p = Param::new("w", Tensor::vector(vec![3.0, -1.0, 0.25]));
    let mut sgd = Sgd::new();
    let mut norm = p.value.sum_squares();
    for _ in 0..5 {
        sgd.step(vec![&mut p], &cfg).unwrap();
        let now = p.value.sum_squares();
        assert!(now < norm);
        norm = now;
    }
}

#[test]
fn zero_step_flow_training_changes_nothing() {
    let src = data(Domain::Source, 4, 1);
    let mut flow = tiny_flow(&src);
    let before = values(&flow);
    let tc = FlowTrainConfig {
        optim: OptimConfig {
            max_steps: 0,
            batch_size: 2,
            ..OptimConfig::default()
        },
        monitor_size: 2,
        ..FlowTrainConfig::default()
    };
    let run = train_flow(&mut flow, &src, &tc).unwrap();
    assert_eq!(run.curve.len(), 1);
    assert!(run.curve[0].loss.unwrap().is_finite());
    assert_eq!(values(&flow), before);
}

#[test]
fn flow_training_is_reproducible() {
    let src = data(Domain::Source, 4, 2);
    let a = tiny_flow(&src);
    let b = tiny_flow(&src);
    assert_eq!(values(&a), values(&b));
}

#[test]
fn zero_target_weight_matches_source_only() {
    let src = data(Domain::Source, 6, 3);
    let tgt = data(Domain::Target, 6, 4);
    let flow = tiny_flow(&src);
    let cfg = seg_cfg(6, 0.0);
    let mut a = SegNet::new(&[3, 4, 6], 2).unwrap();
    let mut b = a.clone();
    let ra = train_segmenter(&mut a, None, &src, &tgt, &src, SegMode::SourceOnly, &cfg).unwrap();
    let rb = train_segmenter(&mut b, Some(&flow), &src, &tgt, &src, SegMode::Bimal, &cfg).unwrap();
    let bits = |r: &bimal_core::trainer::SegTraining| -> Vec<u64> {
        r.curve.iter().map(|m| m.loss.unwrap().to_bits()).collect()
    };
    assert_eq!(bits(&ra), bits(&rb));
    assert_eq!(values(&a), values(&b));
}

#[test]
fn adaptation_leaves_the_flow_untouched() {
    let src = data(Domain::Source, 6, 5);
    let tgt = data(Domain::Target, 6, 6);
    let flow = tiny_flow(&src);
    let before = values(&flow);
    let mut seg = SegNet::new(&[3, 4, 6], 3).unwrap();
    let start = values(&seg);
    let run = train_segmenter(&mut seg, Some(&flow), &src, &tgt, &src, SegMode::Bimal, &seg_cfg(6, 1e-3)).unwrap();
    assert!(run.aborted.is_none());
    assert_eq!(values(&flow), before);
    assert_ne!(values(&seg), start);
}

#[test]
fn bimal_without_flow_is_rejected() {
    let src = data(Domain::Source, 2, 7);
    let mut seg = SegNet::new(&[3, 4, 6], 0).unwrap();
    let err = train_segmenter(&mut seg, None, &src, &src, &src, SegMode::Bimal, &seg_cfg(2, 1e-3));
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn evaluation_is_deterministic_and_oracle_is_perfect() {
    let src = data(Domain::Source, 3, 8);
    let tgt = data(Domain::Target, 3, 9);
    let flow = tiny_flow(&src);
    let seg = SegNet::new(&[3, 4, 6], 4).unwrap();
    let tau = TauConfig::default();
    let strip = |mut m: bimal_core::trainer::MetricsRecord| {
        m.wall_ms = 0;
        m
    };
    let a = strip(evaluate(&seg, Some(&flow), &tgt, &tau, 1.0, 0).unwrap());
    let b = strip(evaluate(&seg, Some(&flow), &tgt, &tau, 1.0, 0).unwrap());
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert!(a.uds_ub.unwrap().is_finite());

    let m = evaluate(&OracleSegmenter, None, &tgt, &tau, 1.0, 0).unwrap();
    assert_eq!(m.miou, Some(1.0));
    assert!(m.per_class_iou.iter().flatten().all(|&v| v == 1.0));
    assert_eq!(m.mean_entropy, Some(0.0));
}
