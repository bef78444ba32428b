mod common;

use common::{gradcheck, noise};
use motionrnn_core::model::{model_forward_step, param_count, rollout, Model, ModelConfig, ModelState};
use motionrnn_core::params::Bound;
use motionrnn_core::{Tape, Tensor, Var};
use proptest::prelude::*;

fn small(mh: bool, tv: bool, tm: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        lstm_kernel: 3,
        height: 8,
        width: 8,
        enable_mh: mh,
        enable_tv: tv,
        enable_tm: tm,
        ..ModelConfig::default()
    }
}

/// Scalar count of one MotionGRU unit, written out term by term.
fn motion_gru_count(c: usize, k: usize, transient: bool) -> usize {
    let q = c / 4;
    let f = 2 * k * k;
    let encoder = c * q * 16 + q;
    let learner = if transient { 3 * ((q + f) * f + f) } else { 0 };
    let mask = q * k * k + k * k;
    let squeeze = q * k * k * q + q;
    let up = q * c * 16 + c;
    let gate = 2 * c * c + c;
    encoder + learner + mask + squeeze + up + gate
}

#[test]
fn paper_scale_shapes() {
    let cfg = ModelConfig { patch: 4, ..ModelConfig::default() };
    let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let frame = tape.constant(Tensor::full([1, 1, 64, 64], 0.3f32));
    let state = ModelState::zeros(&tape, &cfg, 1);
    let (pred, st, traces) = model_forward_step(&model, &bound, frame, &state).unwrap();
    assert_eq!(pred.shape(), vec![1, 1, 64, 64]);
    assert_eq!(st.layers.len(), 4);
    for l in &st.layers {
        assert_eq!(l.h.shape(), vec![1, 64, 16, 16]);
    }
    assert_eq!(st.motion.len(), 3);
    assert_eq!(traces.len(), 3);
    for m in &st.motion {
        assert_eq!(m.f.shape(), vec![1, 18, 8, 8]);
    }
}

#[test]
fn parameter_counts_follow_the_unit_formulas() {
    let full = ModelConfig::default();
    let backbone = ModelConfig { enable_mh: false, enable_tv: false, enable_tm: false, ..full.clone() };
    let diff = param_count(&full).unwrap() - param_count(&backbone).unwrap();
    assert_eq!(diff, 3 * motion_gru_count(64, 3, true));

    let no_mh = ModelConfig { enable_mh: false, ..full.clone() };
    assert_eq!(param_count(&no_mh).unwrap(), param_count(&full).unwrap());

    let no_tv = ModelConfig { enable_tv: false, ..full.clone() };
    let learner = motion_gru_count(64, 3, true) - motion_gru_count(64, 3, false);
    assert_eq!(param_count(&full).unwrap() - param_count(&no_tv).unwrap(), 3 * learner);

    // backbone: embed, L blocks, readout
    let (c, k) = (64, 5);
    let expected = (c + c) + 4 * (4 * (2 * c) * c * k * k + 4 * c) + (c + 1);
    assert_eq!(param_count(&backbone).unwrap(), expected);
}

#[test]
fn shared_groups_are_identical_across_ablations() {
    let full = Model::<f32>::new(small(true, true, true), 9).unwrap();
    let plain = Model::<f32>::new(small(false, false, false), 9).unwrap();
    for (name, t) in plain.params.iter() {
        let id = full.params.find(name).unwrap();
        assert_eq!(full.params.get(id).data(), t.data(), "{name}");
    }
}

fn run_rollout(cfg: &ModelConfig, seed: u64, frames: &[Tensor<f32>], horizon: usize) -> Vec<Vec<f32>> {
    let model = Model::<f32>::new(cfg.clone(), seed).unwrap();
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let ctx: Vec<Var<f32>> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    let out = rollout(&model, &bound, &ctx, horizon, &[], None, None).unwrap();
    out.context_preds
        .iter()
        .chain(&out.horizon_preds)
        .map(|v| v.value().data().to_vec())
        .collect()
}

fn frames(n: usize, seed: u64) -> Vec<Tensor<f32>> {
    (0..n)
        .map(|t| noise(&[2, 1, 8, 8], seed + t as u64, 0.5).map(|v| v + 0.5).cast())
        .collect()
}

#[test]
fn rollout_is_deterministic() {
    let cfg = small(true, true, true);
    let f = frames(3, 1);
    let a = run_rollout(&cfg, 4, &f, 4);
    let b = run_rollout(&cfg, 4, &f, 4);
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let c = run_rollout(&cfg, 5, &f, 4);
    assert_ne!(a, c);
}

#[test]
fn all_truth_mask_equals_longer_context() {
    let cfg = small(true, true, true);
    let model = Model::<f64>::new(cfg.clone(), 2).unwrap();
    let seq: Vec<Tensor<f64>> = (0..6).map(|t| noise(&[1, 1, 8, 8], 40 + t, 0.5)).collect();
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let vars: Vec<_> = seq.iter().map(|t| tape.constant(t.clone())).collect();

    // 3 context frames then 3 horizon steps fed with truth frames 3 and 4
    let masked = rollout(&model, &bound, &vars[..3], 3, &vars[3..5], Some(&[true, true]), None).unwrap();
    // 5 context frames then 1 horizon step
    let extended = rollout(&model, &bound, &vars[..5], 1, &[], None, None).unwrap();
    assert_eq!(masked.horizon_preds[0].value().data(), extended.context_preds[2].value().data());
    assert_eq!(masked.horizon_preds[1].value().data(), extended.context_preds[3].value().data());
    assert_eq!(masked.horizon_preds[2].value().data(), extended.horizon_preds[0].value().data());
}

#[test]
fn horizon_zero_returns_post_context_state() {
    let cfg = small(true, true, true);
    let model = Model::<f64>::new(cfg, 2).unwrap();
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    let vars: Vec<_> = (0..3).map(|t| tape.constant(noise(&[1, 1, 8, 8], t, 0.5))).collect();
    let zero = rollout(&model, &bound, &vars, 0, &[], None, None).unwrap();
    let one = rollout(&model, &bound, &vars, 1, &[], None, None).unwrap();
    assert!(zero.horizon_preds.is_empty());
    assert_eq!(zero.context_preds.len(), 2);
    for (a, b) in zero.state.layers.iter().zip(&one.state.layers) {
        assert_eq!(a.h.value().data(), b.h.value().data());
    }
}

#[test]
fn rollout_errors() {
    let cfg = small(true, true, true);
    let model = Model::<f64>::new(cfg, 2).unwrap();
    let tape = Tape::new();
    let bound = model.params.bind_frozen(&tape);
    assert!(rollout(&model, &bound, &[], 2, &[], None, None).is_err());
    let ctx = [tape.constant(Tensor::zeros([1, 1, 8, 8]))];
    assert!(rollout(&model, &bound, &ctx, 3, &[], Some(&[true]), None).is_err());
    assert!(rollout(&model, &bound, &ctx, 3, &[], Some(&[true, false]), None).is_err());
    let wrong = [tape.constant(Tensor::zeros([1, 1, 6, 8]))];
    assert!(rollout(&model, &bound, &wrong, 1, &[], None, None).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = small(true, true, true);
    let model = Model::<f64>::new(cfg, 3).unwrap();
    let inputs: Vec<Tensor<f64>> = model
        .params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| if t.rank() == 1 { noise(t.shape(), 500 + i as u64, 0.1) } else { t.clone() })
        .collect();
    let seq: Vec<Tensor<f64>> = (0..4).map(|t| noise(&[1, 1, 8, 8], 60 + t, 0.5)).collect();
    let report = gradcheck(&inputs, |tape, v| {
        let bound = Bound::from_vars(v.to_vec());
        let ctx: Vec<_> = seq[..2].iter().map(|t| tape.constant(t.clone())).collect();
        let out = rollout(&model, &bound, &ctx, 2, &[], None, None)?;
        let mut loss = tape.constant(Tensor::scalar(0.0));
        for (p, target) in out.context_preds.iter().chain(&out.horizon_preds).zip(&seq[1..]) {
            loss = loss.add(p.sub(tape.constant(target.clone()))?.square().mean())?;
        }
        Ok(loss)
    });
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn state_shapes_do_not_drift(steps in 1usize..8, mh: bool, tv: bool, tm: bool) {
        let cfg = small(mh, tv, tm);
        let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let tape = Tape::new();
        let bound = model.params.bind_frozen(&tape);
        let mut state = ModelState::zeros(&tape, &cfg, 2);
        let init: Vec<_> = state.layers.iter().map(|l| l.h.shape()).collect();
        let minit: Vec<_> = state.motion.iter().map(|m| m.f.shape()).collect();
        for _ in 0..steps {
            let frame = tape.constant(Tensor::full([2, 1, 8, 8], 0.5f32));
            state = model_forward_step(&model, &bound, frame, &state).unwrap().1;
        }
        prop_assert_eq!(state.layers.iter().map(|l| l.h.shape()).collect::<Vec<_>>(), init);
        prop_assert_eq!(state.motion.iter().map(|m| m.f.shape()).collect::<Vec<_>>(), minit);
    }
}
