//! Backbone ConvLSTM block, the ConvGRU transient-variation learner and the
//! trending-momentum update.

use crate::error::{Error, Result};
use crate::ops::concat_channels;
use crate::params::{Bound, Conv2dParams, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hidden and cell memory of one backbone layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerState<'t, S: Scalar> {
    pub h: Var<'t, S>,
    pub c: Var<'t, S>,
}

impl<'t, S: Scalar> LayerState<'t, S> {
    pub fn zeros(tape: &'t Tape<S>, shape: &[usize]) -> Self {
        LayerState {
            h: tape.constant(Tensor::zeros(shape)),
            c: tape.constant(Tensor::zeros(shape)),
        }
    }

    pub fn detach(&self) -> Self {
        LayerState {
            h: self.h.detach(),
            c: self.c.detach(),
        }
    }
}

/// One convolution over `Concat(x, h)` producing the stacked `i, f, g̃, o`
/// pre-activations (`4·hidden` channels).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLstmParams {
    pub gates: Conv2dParams,
    pub input_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl ConvLstmParams {
    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        rng: &mut Rng,
        name: &str,
        input_channels: usize,
        hidden: usize,
        kernel: usize,
    ) -> Self {
        let gates = Conv2dParams::init(
            set,
            rng,
            &format!("{name}.gates"),
            input_channels + hidden,
            4 * hidden,
            kernel,
            1,
            kernel / 2,
        );
        ConvLstmParams {
            gates,
            input_channels,
            hidden,
            kernel,
        }
    }
}

/// One ConvLSTM step. Returns the new state and the output gate `o`.
///
/// `C' = f⊙C + i⊙g̃`, `H' = o⊙tanh(C')` with `i, f, o = σ(·)` and
/// `g̃ = tanh(·)`; no peepholes.
pub fn convlstm_step<'t, S: Scalar>(
    bound: &Bound<'t, S>,
    p: &ConvLstmParams,
    x: Var<'t, S>,
    prev: LayerState<'t, S>,
) -> Result<(LayerState<'t, S>, Var<'t, S>)> {
    let (xs, hs) = (x.shape(), prev.h.shape());
    let ch_axis = xs.len().saturating_sub(3);
    let spatial_ok = xs.len() == hs.len()
        && xs.len() >= 3
        && xs[..ch_axis] == hs[..ch_axis]
        && xs[ch_axis + 1..] == hs[ch_axis + 1..];
    if !spatial_ok || prev.c.shape() != hs {
        return Err(Error::ShapeMismatch {
            op: "convlstm_step",
            lhs: xs,
            rhs: hs,
        });
    }
    let pre = p.gates.apply(bound, concat_channels(&[x, prev.h])?)?;
    let ch = p.hidden;
    let parts = pre.split(ch_axis, &[ch, ch, ch, ch])?;
    let i = parts[0].sigmoid();
    let f = parts[1].sigmoid();
    let g = parts[2].tanh();
    let o = parts[3].sigmoid();
    let c = f.mul(prev.c)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok((LayerState { h, c }, o))
}

/// 1×1 convolutions `W_u, W_r, W_z` of the ConvGRU that learns the
/// transient variation, each mapping `C/4 + 2k²` channels to `2k²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransientLearnerParams {
    pub update: Conv2dParams,
    pub reset: Conv2dParams,
    pub candidate: Conv2dParams,
    pub filter_channels: usize,
}

impl TransientLearnerParams {
    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        rng: &mut Rng,
        name: &str,
        encoded_channels: usize,
        k: usize,
    ) -> Self {
        let fc = 2 * k * k;
        let cin = encoded_channels + fc;
        TransientLearnerParams {
            update: Conv2dParams::init(set, rng, &format!("{name}.update"), cin, fc, 1, 1, 0),
            reset: Conv2dParams::init(set, rng, &format!("{name}.reset"), cin, fc, 1, 1, 0),
            candidate: Conv2dParams::init(set, rng, &format!("{name}.candidate"), cin, fc, 1, 1, 0),
            filter_channels: fc,
        }
    }
}

/// `u⊙z + (1−u)⊙f_prev`.
pub fn gru_blend<'t, S: Scalar>(u: Var<'t, S>, z: Var<'t, S>, f_prev: Var<'t, S>) -> Result<Var<'t, S>> {
    u.mul(z)?.add(u.one_minus().mul(f_prev)?)
}

/// Transient variation `F′` from the encoded hidden state and the previous
/// motion filter.
pub fn transient_step<'t, S: Scalar>(
    bound: &Bound<'t, S>,
    p: &TransientLearnerParams,
    enc_h: Var<'t, S>,
    f_prev: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let fs = f_prev.shape();
    if fs.len() < 3 || fs[fs.len() - 3] != p.filter_channels {
        return Err(Error::ShapeMismatch {
            op: "transient_step",
            lhs: vec![p.filter_channels],
            rhs: fs,
        });
    }
    let joint = concat_channels(&[enc_h, f_prev])?;
    let u = p.update.apply(bound, joint)?.sigmoid();
    let r = p.reset.apply(bound, joint)?.sigmoid();
    let reset_f = r.mul(f_prev)?;
    let z = p.candidate.apply(bound, concat_channels(&[enc_h, reset_f])?)?.tanh();
    gru_blend(u, z, f_prev)
}

/// Momentum step size, `0 < alpha ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendConfig {
    alpha: f64,
}

impl TrendConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config("alpha", format!("must lie in (0, 1], got {alpha}")));
        }
        Ok(TrendConfig { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig { alpha: 0.5 }
    }
}

/// `D_t = D_{t−1} + α(F_{t−1} − D_{t−1})`.
pub fn trend_update<'t, S: Scalar>(f_prev: Var<'t, S>, d_prev: Var<'t, S>, cfg: TrendConfig) -> Result<Var<'t, S>> {
    if f_prev.shape() != d_prev.shape() {
        return Err(Error::ShapeMismatch {
            op: "trend_update",
            lhs: f_prev.shape(),
            rhs: d_prev.shape(),
        });
    }
    if cfg.alpha == 1.0 {
        return Ok(f_prev.scale(S::one()));
    }
    d_prev.add(f_prev.sub(d_prev)?.scale(S::of(cfg.alpha)))
}
