//! MotionGRU: learns per-pixel offsets (the motion filter) as the sum of a
//! transient variation and a trending momentum, then warps the encoded
//! hidden state by those offsets and gates the decoded result against the
//! input.
//!
//! Offsets live in the encoded (half) resolution. Channel `i < k²` of a
//! filter holds the vertical offset of tap `i`, channel `k² + i` the
//! horizontal one.

use crate::cells::{transient_step, trend_update, TransientLearnerParams, TrendConfig};
use crate::error::{Error, Result};
use crate::nn::image_dims;
use crate::ops::concat_channels;
use crate::params::{Bound, Conv2dParams, Deconv2dParams, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Centered `k×k` tap offsets `(row, col)` for 0-based tap index `i`:
/// `row = ⌊i/k⌋ − ⌊k/2⌋`, `col = (i mod k) − ⌊k/2⌋`.
pub fn neighborhood_offsets(k: usize) -> Result<Vec<(isize, isize)>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::config("k", format!("filter size must be odd and positive, got {k}")));
    }
    let half = (k / 2) as isize;
    Ok((0..k * k)
        .map(|i| ((i / k) as isize - half, (i % k) as isize - half))
        .collect())
}

#[derive(Clone, Copy, Default)]
struct Sample<S> {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: S,
    fx: S,
    // false when the coordinate was clamped, so the offset gets no gradient
    live_y: bool,
    live_x: bool,
}

fn sample_axis<S: Scalar>(coord: S, size: usize) -> (usize, usize, S, bool) {
    let hi = S::of((size - 1) as f64);
    let live = coord >= S::zero() && coord <= hi;
    let c = coord.max(S::zero()).min(hi);
    let c0 = c.floor();
    let i0 = c0.as_f64() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, c - c0, live)
}

/// Bilinear warp of `enc_h` (`C×h×w`, optionally batched) by the motion
/// filter `f` (`2k²×h×w`). Output is `C×h×w×k²`; tap `i` at `(m, n)` samples
/// `enc_h` at `(m + row_i − F[i,m,n], n + col_i − F[k²+i,m,n])`, with
/// coordinates clamped to the image.
pub fn warp<'t, S: Scalar>(enc_h: Var<'t, S>, f: Var<'t, S>, k: usize) -> Result<Var<'t, S>> {
    let offsets = neighborhood_offsets(k)?;
    let taps = k * k;
    let hv = enc_h.value();
    let fv = f.value();
    let (n, c, h, w, batched) = image_dims("warp", hv.shape())?;
    let (fn_, fc, fh, fw, fbatched) = image_dims("warp", fv.shape())?;
    if (fn_, fh, fw, fbatched) != (n, h, w, batched) || fc != 2 * taps {
        return Err(Error::ShapeMismatch {
            op: "warp",
            lhs: hv.shape().to_vec(),
            rhs: fv.shape().to_vec(),
        });
    }
    let plane = h * w;
    let mut samples = vec![Sample::<S>::default(); n * taps * plane];
    let (hd, fd) = (hv.data(), fv.data());
    let mut out = vec![S::zero(); n * c * plane * taps];
    for s in 0..n {
        for (i, &(dr, dc)) in offsets.iter().enumerate() {
            let fy = &fd[(s * 2 * taps + i) * plane..][..plane];
            let fx = &fd[(s * 2 * taps + taps + i) * plane..][..plane];
            for m in 0..h {
                for col in 0..w {
                    let pix = m * w + col;
                    let y = S::of((m as isize + dr) as f64) - fy[pix];
                    let x = S::of((col as isize + dc) as f64) - fx[pix];
                    let (y0, y1, ay, live_y) = sample_axis(y, h);
                    let (x0, x1, ax, live_x) = sample_axis(x, w);
                    let sm = Sample { y0, y1, x0, x1, fy: ay, fx: ax, live_y, live_x };
                    samples[(s * taps + i) * plane + pix] = sm;
                    let (wy0, wx0) = (S::one() - ay, S::one() - ax);
                    for ch in 0..c {
                        let img = &hd[(s * c + ch) * plane..][..plane];
                        let v = wy0 * (wx0 * img[y0 * w + x0] + ax * img[y0 * w + x1])
                            + ay * (wx0 * img[y1 * w + x0] + ax * img[y1 * w + x1]);
                        out[((s * c + ch) * plane + pix) * taps + i] = v;
                    }
                }
            }
        }
    }
    let mut shape = vec![c, h, w, taps];
    if batched {
        shape.insert(0, n);
    }
    let value = Tensor::new(shape, out)?;
    let (hid, fid) = (enc_h.id(), f.id());
    let backward = Box::new(move |g: &[S], sink: &mut GradSink<'_, S>| {
        let want_h = sink.wants(hid);
        let want_f = sink.wants(fid);
        let mut dh = vec![S::zero(); if want_h { hd_len(n, c, plane) } else { 0 }];
        let mut df = vec![S::zero(); if want_f { n * 2 * taps * plane } else { 0 }];
        let hd = hv.data();
        for s in 0..n {
            for i in 0..taps {
                for pix in 0..plane {
                    let sm = samples[(s * taps + i) * plane + pix];
                    let (wy0, wx0) = (S::one() - sm.fy, S::one() - sm.fx);
                    let (mut gy, mut gx) = (S::zero(), S::zero());
                    for ch in 0..c {
                        let go = g[((s * c + ch) * plane + pix) * taps + i];
                        let base = (s * c + ch) * plane;
                        let (i00, i01) = (base + sm.y0 * w + sm.x0, base + sm.y0 * w + sm.x1);
                        let (i10, i11) = (base + sm.y1 * w + sm.x0, base + sm.y1 * w + sm.x1);
                        if want_h {
                            dh[i00] += go * wy0 * wx0;
                            dh[i01] += go * wy0 * sm.fx;
                            dh[i10] += go * sm.fy * wx0;
                            dh[i11] += go * sm.fy * sm.fx;
                        }
                        if want_f {
                            let (v00, v01, v10, v11) = (hd[i00], hd[i01], hd[i10], hd[i11]);
                            gy += go * (wx0 * (v10 - v00) + sm.fx * (v11 - v01));
                            gx += go * (wy0 * (v01 - v00) + sm.fy * (v11 - v10));
                        }
                    }
                    if want_f {
                        // sample coordinate = base − F, hence the sign flip
                        if sm.live_y {
                            df[(s * 2 * taps + i) * plane + pix] -= gy;
                        }
                        if sm.live_x {
                            df[(s * 2 * taps + taps + i) * plane + pix] -= gx;
                        }
                    }
                }
            }
        }
        if want_h {
            sink.add(hid, &dh);
        }
        if want_f {
            sink.add(fid, &df);
        }
    });
    Ok(enc_h.record("warp", value, &[hid, fid], backward))
}

fn hd_len(n: usize, c: usize, plane: usize) -> usize {
    n * c * plane
}

/// Per-interface motion filter `F` and trending momentum `D`.
#[derive(Clone, Copy, Debug)]
pub struct MotionState<'t, S: Scalar> {
    pub f: Var<'t, S>,
    pub d: Var<'t, S>,
}

impl<'t, S: Scalar> MotionState<'t, S> {
    /// Zero offsets for a filter of shape `2k²×h×w` (optionally batched).
    pub fn zeros(tape: &'t Tape<S>, shape: &[usize]) -> Self {
        MotionState {
            f: tape.constant(Tensor::zeros(shape)),
            d: tape.constant(Tensor::zeros(shape)),
        }
    }

    pub fn detach(&self) -> Self {
        MotionState {
            f: self.f.detach(),
            d: self.d.detach(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionGruParams {
    /// `C → C/4`, kernel 4, stride 2, padding 1.
    pub encoder: Conv2dParams,
    /// Absent when the transient variation is ablated.
    pub transient: Option<TransientLearnerParams>,
    /// `W_hm`: `C/4 → k²`, 1×1.
    pub mask: Conv2dParams,
    /// `C/4·k² → C/4`, 1×1, over the tap-folded warp output.
    pub decoder_squeeze: Conv2dParams,
    /// `C/4 → C`, kernel 4, stride 2, padding 1.
    pub decoder_up: Deconv2dParams,
    /// `W_1×1` of the output gate: `2C → C`.
    pub gate: Conv2dParams,
    /// Absent when the trending momentum is ablated.
    pub trend: Option<TrendConfig>,
    pub k: usize,
    pub channels: usize,
}

impl MotionGruParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        k: usize,
        trend: Option<TrendConfig>,
        transient: bool,
    ) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(4) {
            return Err(Error::config("channels", format!("must be a positive multiple of 4, got {channels}")));
        }
        neighborhood_offsets(k)?;
        let q = channels / 4;
        let taps = k * k;
        let encoder = Conv2dParams::init(set, rng, &format!("{name}.encoder"), channels, q, 4, 2, 1);
        let transient = transient.then(|| TransientLearnerParams::init(set, rng, &format!("{name}.transient"), q, k));
        let mask = Conv2dParams::init(set, rng, &format!("{name}.mask"), q, taps, 1, 1, 0);
        let decoder_squeeze = Conv2dParams::init(set, rng, &format!("{name}.decoder_squeeze"), q * taps, q, 1, 1, 0);
        let decoder_up = Deconv2dParams::init(set, rng, &format!("{name}.decoder_up"), q, channels, 4, 2, 1);
        let gate = Conv2dParams::init(set, rng, &format!("{name}.gate"), 2 * channels, channels, 1, 1, 0);
        Ok(MotionGruParams {
            encoder,
            transient,
            mask,
            decoder_squeeze,
            decoder_up,
            gate,
            trend,
            k,
            channels,
        })
    }

    pub fn filter_channels(&self) -> usize {
        2 * self.k * self.k
    }
}

/// Intermediate values of one MotionGRU call, batched as the input was.
#[derive(Clone, Copy, Debug)]
pub struct MotionGruTrace<'t, S: Scalar> {
    pub encoded: Var<'t, S>,
    /// Transient variation; `None` when ablated.
    pub f_prime: Option<Var<'t, S>>,
    pub d: Var<'t, S>,
    pub f: Var<'t, S>,
    /// Motion mask before broadcasting, `k²×h/2×w/2`.
    pub mask: Var<'t, S>,
    /// Masked warp output, `C/4×h/2×w/2×k²`.
    pub warped: Var<'t, S>,
    pub decoded: Var<'t, S>,
    pub gate: Var<'t, S>,
}

/// Replaces a gate with a constant value; used to probe the unit.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverrides {
    pub mask: Option<f64>,
    pub output_gate: Option<f64>,
}

/// `g⊙a + (1−g)⊙b`.
pub fn gated_output<'t, S: Scalar>(g: Var<'t, S>, a: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    g.mul(a)?.add(g.one_minus().mul(b)?)
}

fn to_batched<'t, S: Scalar>(v: Var<'t, S>) -> Result<Var<'t, S>> {
    let mut s = v.shape();
    if s.len() == 3 {
        s.insert(0, 1);
        v.reshape(s)
    } else {
        Ok(v)
    }
}

fn from_batched<'t, S: Scalar>(v: Var<'t, S>, batched: bool) -> Result<Var<'t, S>> {
    if batched {
        Ok(v)
    } else {
        let s = v.shape();
        v.reshape(s[1..].to_vec())
    }
}

/// One MotionGRU step on hidden state `h` (`C×H×W`, optionally batched).
///
/// The gate blends `h` with the decoded warp; pass `gate_operand` to blend a
/// different tensor (for instance the same layer's previous hidden state)
/// instead of `h`.
pub fn motion_gru_forward<'t, S: Scalar>(
    bound: &Bound<'t, S>,
    p: &MotionGruParams,
    h: Var<'t, S>,
    state: MotionState<'t, S>,
    gate_operand: Option<Var<'t, S>>,
    overrides: GateOverrides,
) -> Result<(Var<'t, S>, MotionState<'t, S>, MotionGruTrace<'t, S>)> {
    let (_, c, hh, ww, batched) = image_dims("motion_gru_forward", &h.shape())?;
    if c != p.channels {
        return Err(Error::ShapeMismatch {
            op: "motion_gru_forward",
            lhs: vec![p.channels],
            rhs: h.shape(),
        });
    }
    if hh % 2 != 0 || ww % 2 != 0 {
        return Err(Error::shape("motion_gru_forward", format!("spatial size {hh}×{ww} must be even")));
    }
    let tape = h.tape();
    let h = to_batched(h)?;
    let f_prev = to_batched(state.f)?;
    let d_prev = to_batched(state.d)?;
    let taps = p.k * p.k;
    let q = p.channels / 4;

    let enc = p.encoder.apply(bound, h)?;
    let n = enc.shape()[0];
    let (h2, w2) = (enc.shape()[2], enc.shape()[3]);
    let expect_f = vec![n, 2 * taps, h2, w2];
    if f_prev.shape() != expect_f || d_prev.shape() != expect_f {
        return Err(Error::ShapeMismatch {
            op: "motion_gru_forward state",
            lhs: expect_f,
            rhs: f_prev.shape(),
        });
    }

    let f_prime = match &p.transient {
        Some(t) => Some(transient_step(bound, t, enc, f_prev)?),
        None => None,
    };
    let d = match p.trend {
        Some(cfg) => trend_update(f_prev, d_prev, cfg)?,
        None => d_prev,
    };
    let f = match (f_prime, p.trend.is_some()) {
        (Some(fp), true) => fp.add(d)?,
        (Some(fp), false) => fp,
        (None, _) => d,
    };

    let mask = match overrides.mask {
        Some(v) => tape.constant(Tensor::full([n, taps, h2, w2], S::of(v))),
        None => p.mask.apply(bound, enc)?.sigmoid(),
    };
    let mask_b = mask.permute(&[0, 2, 3, 1])?.reshape([n, 1, h2, w2, taps])?;
    let warped = mask_b.mul(warp(enc, f, p.k)?)?;
    let folded = warped.permute(&[0, 1, 4, 2, 3])?.reshape([n, q * taps, h2, w2])?;
    let decoded = p.decoder_up.apply(bound, p.decoder_squeeze.apply(bound, folded)?)?;

    let gate = match overrides.output_gate {
        Some(v) => tape.constant(Tensor::full(h.shape(), S::of(v))),
        None => p.gate.apply(bound, concat_channels(&[decoded, h])?)?.sigmoid(),
    };
    let operand = match gate_operand {
        Some(o) => to_batched(o)?,
        None => h,
    };
    let x = gated_output(gate, operand, decoded)?;

    let trace = MotionGruTrace {
        encoded: enc,
        f_prime,
        d,
        f,
        mask,
        warped,
        decoded,
        gate,
    };
    let new_state = MotionState {
        f: from_batched(f, batched)?,
        d: from_batched(d, batched)?,
    };
    Ok((from_batched(x, batched)?, new_state, trace))
}
