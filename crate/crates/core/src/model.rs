//! Stacked MotionRNN: ConvLSTM blocks with a MotionGRU between consecutive
//! layers and the Motion Highway
//! `H^{l+1} ← H^{l+1} + (1 − o^{l+1}) ⊙ H^l`.

use serde::{Deserialize, Serialize};

use crate::cells::{convlstm_step, ConvLstmParams, LayerState, TrendConfig};
use crate::error::{Error, Result};
use crate::motion_gru::{motion_gru_forward, GateOverrides, MotionGruParams, MotionGruTrace, MotionState};
use crate::nn::{depth_to_space, space_to_depth};
use crate::params::{Bound, Conv2dParams, ParamSet};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    /// MotionGRU filter size.
    pub k: usize,
    pub alpha: f64,
    pub patch: usize,
    pub lstm_kernel: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub enable_mh: bool,
    pub enable_tv: bool,
    pub enable_tm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 64,
            k: 3,
            alpha: 0.5,
            patch: 1,
            lstm_kernel: 5,
            in_channels: 1,
            height: 64,
            width: 64,
            enable_mh: true,
            enable_tv: true,
            enable_tm: true,
        }
    }
}

impl ModelConfig {
    /// Whether MotionGRU units sit between the layers.
    pub fn motion_active(&self) -> bool {
        self.enable_tv || self.enable_tm
    }

    /// Frame size after patching.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch.max(1), self.width / self.patch.max(1))
    }

    pub fn patched_channels(&self) -> usize {
        self.in_channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.motion_active() && self.layers < 2 {
            return Err(Error::config("layers", "MotionGRU needs at least 2 layers"));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(4) {
            return Err(Error::config("channels", format!("must be a positive multiple of 4, got {}", self.hidden)));
        }
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::config("k", format!("must be odd and positive, got {}", self.k)));
        }
        TrendConfig::new(self.alpha)?;
        if self.lstm_kernel == 0 || self.lstm_kernel.is_multiple_of(2) {
            return Err(Error::config("lstm_kernel", format!("must be odd and positive, got {}", self.lstm_kernel)));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(
                "patch",
                format!("{} must divide frame size {}×{}", self.patch, self.height, self.width),
            ));
        }
        let (gh, gw) = self.grid();
        if gh == 0 || gw == 0 {
            return Err(Error::config("height", "frame size must be positive"));
        }
        if self.motion_active() && (gh % 2 != 0 || gw % 2 != 0) {
            return Err(Error::config(
                "patch",
                format!("patched frame {gh}×{gw} must have even sides for the MotionGRU encoder"),
            ));
        }
        Ok(())
    }
}

/// Parameter layout of a model; ids index into the owning [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed: Conv2dParams,
    pub blocks: Vec<ConvLstmParams>,
    /// One unit per layer interface, empty when MotionGRU is disabled.
    pub motion: Vec<MotionGruParams>,
    pub readout: Conv2dParams,
}

/// Parameter layout plus values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub layout: ModelParams,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Model<S> {
    /// Initialises every parameter group from its own seed stream so shared
    /// groups get identical values regardless of the ablation flags.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let ch = config.hidden;
        let cin = config.patched_channels();
        let embed = Conv2dParams::init(&mut params, &mut rng_for(seed, "embed"), "embed", cin, ch, 1, 1, 0);
        let blocks = (0..config.layers)
            .map(|l| {
                let name = format!("block{l}");
                ConvLstmParams::init(&mut params, &mut rng_for(seed, &name), &name, ch, ch, config.lstm_kernel)
            })
            .collect();
        let mut motion = Vec::new();
        if config.motion_active() {
            let trend = if config.enable_tm {
                Some(TrendConfig::new(config.alpha)?)
            } else {
                None
            };
            for l in 0..config.layers - 1 {
                let name = format!("motion{l}");
                motion.push(MotionGruParams::init(
                    &mut params,
                    &mut rng_for(seed, &name),
                    &name,
                    ch,
                    config.k,
                    trend,
                    config.enable_tv,
                )?);
            }
        }
        let readout = Conv2dParams::init(&mut params, &mut rng_for(seed, "readout"), "readout", ch, cin, 1, 1, 0);
        Ok(Model {
            config,
            layout: ModelParams {
                embed,
                blocks,
                motion,
                readout,
            },
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Exact number of scalar parameters of a model built from `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::<f32>::new(cfg.clone(), 0)?.param_count())
}

/// Recurrent state of the whole stack.
#[derive(Clone, Debug)]
pub struct ModelState<'t, S: Scalar> {
    pub layers: Vec<LayerState<'t, S>>,
    /// One per layer interface when MotionGRU is active, else empty.
    pub motion: Vec<MotionState<'t, S>>,
}

impl<'t, S: Scalar> ModelState<'t, S> {
    pub fn zeros(tape: &'t Tape<S>, cfg: &ModelConfig, batch: usize) -> Self {
        let (gh, gw) = cfg.grid();
        let layers = (0..cfg.layers)
            .map(|_| LayerState::zeros(tape, &[batch, cfg.hidden, gh, gw]))
            .collect();
        let motion = if cfg.motion_active() {
            let taps = cfg.k * cfg.k;
            (0..cfg.layers - 1)
                .map(|_| MotionState::zeros(tape, &[batch, 2 * taps, gh / 2, gw / 2]))
                .collect()
        } else {
            Vec::new()
        };
        ModelState { layers, motion }
    }

    pub fn detach(&self) -> Self {
        ModelState {
            layers: self.layers.iter().map(LayerState::detach).collect(),
            motion: self.motion.iter().map(MotionState::detach).collect(),
        }
    }
}

/// Output gate reuse of the highway: `h_block + (1 − o) ⊙ h_lower`.
pub fn motion_highway<'t, S: Scalar>(h_block: Var<'t, S>, o: Var<'t, S>, h_lower: Var<'t, S>) -> Result<Var<'t, S>> {
    h_block.add(o.one_minus().mul(h_lower)?)
}

/// Advances the model by one frame (`B×C×H×W`) and predicts the next one.
pub fn model_forward_step<'t, S: Scalar>(
    model: &Model<S>,
    bound: &Bound<'t, S>,
    frame: Var<'t, S>,
    state: &ModelState<'t, S>,
) -> Result<(Var<'t, S>, ModelState<'t, S>, Vec<MotionGruTrace<'t, S>>)> {
    let cfg = &model.config;
    let lay = &model.layout;
    let fs = frame.shape();
    if fs.len() != 4 || fs[1..] != [cfg.in_channels, cfg.height, cfg.width] {
        return Err(Error::ShapeMismatch {
            op: "model_forward_step",
            lhs: vec![0, cfg.in_channels, cfg.height, cfg.width],
            rhs: fs,
        });
    }
    if state.layers.len() != cfg.layers || state.motion.len() != lay.motion.len() {
        return Err(Error::config("state", "layer count does not match the model"));
    }
    let x = if cfg.patch > 1 {
        space_to_depth(frame, cfg.patch)?
    } else {
        frame
    };
    let embedded = lay.embed.apply(bound, x)?;

    let mut layers = Vec::with_capacity(cfg.layers);
    let mut motion = Vec::with_capacity(lay.motion.len());
    let mut traces = Vec::with_capacity(lay.motion.len());

    let (first, _) = convlstm_step(bound, &lay.blocks[0], embedded, state.layers[0])?;
    layers.push(first);
    for l in 1..cfg.layers {
        let below = layers[l - 1].h;
        let input = match lay.motion.get(l - 1) {
            Some(unit) => {
                let (x, ms, tr) =
                    motion_gru_forward(bound, unit, below, state.motion[l - 1], None, GateOverrides::default())?;
                motion.push(ms);
                traces.push(tr);
                x
            }
            None => below,
        };
        let (mut st, o) = convlstm_step(bound, &lay.blocks[l], input, state.layers[l])?;
        if cfg.enable_mh {
            st.h = motion_highway(st.h, o, below)?;
        }
        layers.push(st);
    }
    let out = lay.readout.apply(bound, layers[cfg.layers - 1].h)?;
    let pred = if cfg.patch > 1 {
        depth_to_space(out, cfg.patch)?
    } else {
        out
    };
    Ok((pred, ModelState { layers, motion }, traces))
}

pub struct Rollout<'t, S: Scalar> {
    /// Next-frame predictions made while consuming context frames
    /// `0..T_in−1` (they predict frames `1..T_in`).
    pub context_preds: Vec<Var<'t, S>>,
    /// Predictions of the `horizon` frames after the context.
    pub horizon_preds: Vec<Var<'t, S>>,
    pub state: ModelState<'t, S>,
    /// MotionGRU traces per executed step.
    pub traces: Vec<Vec<MotionGruTrace<'t, S>>>,
}

/// Feeds the context frames, then predicts `horizon` frames.
///
/// Horizon prediction `j ≥ 1` is fed with ground truth frame
/// `ground_truth[j−1]` when `mask[j−1]` is true and with the previous
/// prediction otherwise; `mask` therefore has `horizon − 1` entries. Without
/// a mask every horizon step feeds back its own prediction.
pub fn rollout<'t, S: Scalar>(
    model: &Model<S>,
    bound: &Bound<'t, S>,
    context: &[Var<'t, S>],
    horizon: usize,
    ground_truth: &[Var<'t, S>],
    mask: Option<&[bool]>,
    initial: Option<ModelState<'t, S>>,
) -> Result<Rollout<'t, S>> {
    let first = context
        .first()
        .ok_or_else(|| Error::config("context", "context must contain at least one frame"))?;
    let feedback = horizon.saturating_sub(1);
    if let Some(m) = mask {
        if m.len() != feedback {
            return Err(Error::config(
                "mask",
                format!("expected {feedback} entries for horizon {horizon}, got {}", m.len()),
            ));
        }
        if m.iter().any(|&b| b) && ground_truth.len() < feedback {
            return Err(Error::config("ground_truth", format!("need {feedback} frames, got {}", ground_truth.len())));
        }
    }
    let batch = first.shape()[0];
    let mut state = initial.unwrap_or_else(|| ModelState::zeros(first.tape(), &model.config, batch));
    let mut context_preds = Vec::with_capacity(context.len());
    let mut horizon_preds = Vec::with_capacity(horizon);
    let mut traces = Vec::new();

    for (t, &frame) in context.iter().enumerate() {
        let (pred, next, tr) = model_forward_step(model, bound, frame, &state)?;
        state = next;
        traces.push(tr);
        if t + 1 < context.len() {
            context_preds.push(pred);
        } else if horizon > 0 {
            horizon_preds.push(pred);
        }
    }
    for j in 1..horizon {
        let use_truth = mask.is_some_and(|m| m[j - 1]);
        let input = if use_truth {
            ground_truth[j - 1]
        } else {
            horizon_preds[j - 1]
        };
        let (pred, next, tr) = model_forward_step(model, bound, input, &state)?;
        state = next;
        traces.push(tr);
        horizon_preds.push(pred);
    }
    Ok(Rollout {
        context_preds,
        horizon_preds,
        state,
        traces,
    })
}
