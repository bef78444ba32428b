mod common;

use common::{gradcheck, noise};
use motionrnn_core::cells::TrendConfig;
use motionrnn_core::motion_gru::{
    motion_gru_forward, neighborhood_offsets, warp, GateOverrides, MotionGruParams, MotionState,
};
use motionrnn_core::params::{Bound, ParamSet};
use motionrnn_core::rng::rng_for;
use motionrnn_core::{Tape, Tensor};
use proptest::prelude::*;

fn unit(channels: usize, k: usize, trend: bool, transient: bool, seed: u64) -> (ParamSet<f64>, MotionGruParams) {
    let mut set = ParamSet::new();
    let trend = trend.then(TrendConfig::default);
    let p = MotionGruParams::init(&mut set, &mut rng_for(seed, "unit"), "m", channels, k, trend, transient).unwrap();
    (set, p)
}

#[test]
fn zero_offsets_gather_clamped_neighbours_exactly() {
    let (c, h, w, k) = (3, 5, 6, 3);
    let img = noise(&[c, h, w], 11, 1.0);
    let tape = Tape::<f64>::new();
    let out = warp(tape.constant(img.clone()), tape.constant(Tensor::zeros([2 * k * k, h, w])), k)
        .unwrap()
        .value();
    assert_eq!(out.shape(), &[c, h, w, k * k]);
    for ch in 0..c {
        for m in 0..h {
            for n in 0..w {
                let mut i = 0;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let y = (m as isize + dr).clamp(0, h as isize - 1) as usize;
                        let x = (n as isize + dc).clamp(0, w as isize - 1) as usize;
                        assert_eq!(out.get(&[ch, m, n, i]), img.get(&[ch, y, x]));
                        i += 1;
                    }
                }
                assert_eq!(out.get(&[ch, m, n, 4]), img.get(&[ch, m, n]));
            }
        }
    }
}

#[test]
fn warp_offset_sign_moves_sample_backwards() {
    // a positive vertical offset samples from the row above
    let tape = Tape::<f64>::new();
    let img = Tensor::from_fn([1, 4, 1], |i| i as f64);
    let mut f = Tensor::zeros([2, 4, 1]);
    f.data_mut()[2] = 1.0;
    let out = warp(tape.constant(img), tape.constant(f), 1).unwrap().value();
    assert_eq!(out.data(), &[0.0, 1.0, 1.0, 3.0]);
}

#[test]
fn bilinear_midpoint() {
    let tape = Tape::<f64>::new();
    let img = tape.constant(Tensor::from_f64([1, 1, 2], &[0.0, 1.0]).unwrap());
    let f = tape.constant(Tensor::from_f64([2, 1, 2], &[0.0, 0.0, 0.0, 0.5]).unwrap());
    // column 1 − 0.5 = 0.5
    assert_eq!(warp(img, f, 1).unwrap().value().data()[1], 0.5);
}

#[test]
fn warp_gradients_match_finite_differences() {
    let inputs = vec![noise(&[2, 2, 5, 5], 1, 1.0), noise(&[2, 18, 5, 5], 2, 0.8)];
    let report = gradcheck(&inputs, |_, v| {
        let out = warp(v[0], v[1], 3)?;
        // weight taps unevenly so that every output element matters
        let weights = v[0].tape().constant(noise(&out.shape(), 3, 1.0));
        Ok(out.mul(weights)?.sum())
    });
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn full_unit_gradients_match_finite_differences() {
    let (set, p) = unit(4, 3, true, true, 5);
    let mut inputs: Vec<Tensor<f64>> = set
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| if t.rank() == 1 { noise(t.shape(), 100 + i as u64, 0.2) } else { t.clone() })
        .collect();
    let np = inputs.len();
    inputs.push(noise(&[4, 8, 8], 20, 1.0));
    inputs.push(noise(&[18, 4, 4], 21, 0.6));
    inputs.push(noise(&[18, 4, 4], 22, 0.6));
    let report = gradcheck(&inputs, |_, v| {
        let bound = Bound::from_vars(v[..np].to_vec());
        let state = MotionState { f: v[np + 1], d: v[np + 2] };
        let (x, st, _) = motion_gru_forward(&bound, &p, v[np], state, None, GateOverrides::default())?;
        x.sum().add(st.f.sum().scale(0.1))
    });
    assert_eq!(report.checked, inputs.iter().map(|t| t.numel()).sum::<usize>());
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn composed_filter_is_transient_plus_trend() {
    let (set, p) = unit(8, 3, true, true, 6);
    let tape = Tape::new();
    let bound = set.bind_frozen(&tape);
    let mut state = MotionState {
        f: tape.constant(noise(&[18, 4, 4], 1, 0.5)),
        d: tape.constant(noise(&[18, 4, 4], 2, 0.5)),
    };
    for step in 0..4 {
        let h = tape.constant(noise(&[8, 8, 8], 10 + step, 1.0));
        let (_, st, tr) = motion_gru_forward(&bound, &p, h, state, None, GateOverrides::default()).unwrap();
        let (fp, d, f) = (tr.f_prime.unwrap().value(), tr.d.value(), tr.f.value());
        for i in 0..f.numel() {
            assert_eq!(f.data()[i], fp.data()[i] + d.data()[i]);
        }
        for g in tr.gate.value().data().iter().chain(tr.mask.value().data()) {
            assert!(*g > 0.0 && *g < 1.0);
        }
        state = st;
    }
}

#[test]
fn ablated_filters_follow_the_remaining_term() {
    let tape = Tape::new();
    let f0 = noise(&[18, 4, 4], 1, 0.5);
    let d0 = noise(&[18, 4, 4], 2, 0.5);
    let h = tape.constant(noise(&[8, 8, 8], 3, 1.0));
    let state = MotionState { f: tape.constant(f0.clone()), d: tape.constant(d0.clone()) };

    // TV off: F = D = trend update of the carried state
    let (set, p) = unit(8, 3, true, false, 7);
    let bound = set.bind_frozen(&tape);
    let (_, _, tr) = motion_gru_forward(&bound, &p, h, state, None, GateOverrides::default()).unwrap();
    assert!(tr.f_prime.is_none());
    let expected = Tensor::from_fn([1, 18, 4, 4], |i| d0.data()[i] + 0.5 * (f0.data()[i] - d0.data()[i]));
    assert_eq!(tr.f.value().max_abs_diff(&expected), 0.0);

    // TM off: F = F', D carried unchanged
    let (set, p) = unit(8, 3, false, true, 7);
    let bound = set.bind_frozen(&tape);
    let (_, _, tr) = motion_gru_forward(&bound, &p, h, state, None, GateOverrides::default()).unwrap();
    assert_eq!(tr.f.value().data(), tr.f_prime.unwrap().value().data());
    assert_eq!(tr.d.value().data(), d0.data());
}

#[test]
fn forced_half_gate_averages_input_and_decoder() {
    let (set, p) = unit(8, 3, true, true, 8);
    let tape = Tape::new();
    let bound = set.bind_frozen(&tape);
    let h = tape.constant(noise(&[8, 8, 8], 4, 1.0));
    let overrides = GateOverrides { output_gate: Some(0.5), ..Default::default() };
    let (x, _, tr) = motion_gru_forward(&bound, &p, h, MotionState::zeros(&tape, &[18, 4, 4]), None, overrides).unwrap();
    let (xv, hv, dv) = (x.value(), h.value(), tr.decoded.value());
    for i in 0..xv.numel() {
        assert_eq!(xv.data()[i], 0.5 * hv.data()[i] + 0.5 * dv.data()[i]);
    }
}

#[test]
fn gate_operand_override_replaces_input_in_blend() {
    let (set, p) = unit(8, 3, true, true, 8);
    let tape = Tape::new();
    let bound = set.bind_frozen(&tape);
    let h = tape.constant(noise(&[8, 8, 8], 4, 1.0));
    let prev = tape.constant(noise(&[8, 8, 8], 5, 1.0));
    let overrides = GateOverrides { output_gate: Some(1.0), ..Default::default() };
    let (x, _, _) =
        motion_gru_forward(&bound, &p, h, MotionState::zeros(&tape, &[18, 4, 4]), Some(prev), overrides).unwrap();
    assert_eq!(x.value().data(), prev.value().data());
}

#[test]
fn zero_offset_unit_mask_path_is_affine_in_h() {
    // TV off with a zero state keeps every offset at zero
    let (set, p) = unit(8, 3, true, false, 9);
    let tape = Tape::new();
    let bound = set.bind_frozen(&tape);
    let overrides = GateOverrides { mask: Some(1.0), output_gate: Some(0.0) };
    let run = |h: Tensor<f64>| {
        let (x, st, _) = motion_gru_forward(
            &bound,
            &p,
            tape.constant(h),
            MotionState::zeros(&tape, &[18, 4, 4]),
            None,
            overrides,
        )
        .unwrap();
        assert!(st.f.value().data().iter().all(|&v| v == 0.0));
        x.value()
    };
    let a = noise(&[8, 8, 8], 1, 1.0);
    let b = noise(&[8, 8, 8], 2, 1.0);
    let zero = run(Tensor::zeros([8, 8, 8]));
    let (ya, yb) = (run(a.clone()), run(b.clone()));
    let sum = run(Tensor::from_fn([8, 8, 8], |i| a.data()[i] + 2.5 * b.data()[i]));
    let scaled = run(a.map(|v| 3.0 * v));
    for i in 0..zero.numel() {
        let z = zero.data()[i];
        let lin = (ya.data()[i] - z) + 2.5 * (yb.data()[i] - z);
        assert!((sum.data()[i] - z - lin).abs() < 1e-12);
        assert!((scaled.data()[i] - z - 3.0 * (ya.data()[i] - z)).abs() < 1e-12);
    }
}

#[test]
fn paper_shapes() {
    let (set, p) = unit(16, 3, true, true, 10);
    let tape = Tape::new();
    let bound = set.bind_frozen(&tape);
    let h = tape.constant(noise(&[16, 16, 16], 1, 1.0));
    let (x, st, tr) = motion_gru_forward(&bound, &p, h, MotionState::zeros(&tape, &[18, 8, 8]), None, GateOverrides::default()).unwrap();
    assert_eq!(tr.encoded.shape(), vec![1, 4, 8, 8]);
    assert_eq!(st.f.shape(), vec![18, 8, 8]);
    assert_eq!(x.shape(), vec![16, 16, 16]);

    // radar: 64 hidden channels over a 64×64 frame patched ×4
    let mut set = ParamSet::<f32>::new();
    let p = MotionGruParams::init(&mut set, &mut rng_for(1, "r"), "m", 64, 3, Some(TrendConfig::default()), true).unwrap();
    let tape = Tape::new();
    let bound = set.bind_frozen(&tape);
    let h = tape.constant(Tensor::full([64, 16, 16], 0.1f32));
    let (_, st, tr) = motion_gru_forward(&bound, &p, h, MotionState::zeros(&tape, &[18, 8, 8]), None, GateOverrides::default()).unwrap();
    assert_eq!(tr.encoded.shape(), vec![1, 16, 8, 8]);
    assert_eq!(st.d.shape(), vec![18, 8, 8]);
}

#[test]
fn offsets_enumerate_centered_grid() {
    for k in [1usize, 3, 5, 7] {
        let offs = neighborhood_offsets(k).unwrap();
        let half = (k / 2) as isize;
        let mut expected = Vec::new();
        for r in -half..=half {
            for c in -half..=half {
                expected.push((r, c));
            }
        }
        assert_eq!(offs, expected);
    }
    assert!(neighborhood_offsets(4).is_err());
}

proptest! {
    #[test]
    fn constant_image_survives_any_warp(value in -5.0f64..5.0, seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let img = tape.constant(Tensor::full([2, 4, 4], value));
        let f = tape.constant(noise(&[18, 4, 4], seed, 6.0));
        let out = warp(img, f, 3).unwrap().value();
        for v in out.data() {
            prop_assert!((v - value).abs() < 1e-12);
        }
    }
}
