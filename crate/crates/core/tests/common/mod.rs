#![allow(dead_code)]

use motionrnn_core::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_input: usize,
    pub worst_index: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// finite differences over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> GradReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&tape, &vars).expect("forward");
    let grads = root.backward().expect("backward");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |probe: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").value().item()
    };

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[ti].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&probe);
            probe[ti].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&probe);
            probe[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let e = rel_err(analytic[ti].data()[j], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_input = ti;
                report.worst_index = j;
            }
        }
    }
    report
}

/// Deterministic pseudo-random tensor in `[-scale, scale]`.
pub fn noise(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor::from_fn(shape.to_vec(), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
    })
}
