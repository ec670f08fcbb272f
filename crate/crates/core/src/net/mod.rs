//! The gated recurrent denoising pipeline.
//!
//! Per frame: spatial denoising at half resolution (`F_SD`), alignment of the
//! previous blended features (`F_WB`), a reset gate selecting what of `F_WB`
//! enters temporal denoising (`F_TD`), an update gate blending `F_TD` with
//! `F_WB` into the new recurrent state (`F_B`), and a reconstruction head that
//! predicts a residual at full resolution. Channels of paired feature maps
//! are always interleaved so grouped convolutions compare like with like.

pub mod align;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use align::Alignment;
pub use config::GrtnConfig;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::rsste::{rsste_forward, RssteParams, LAYER_NORM_EPS};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvParams {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        init: &mut Init,
    ) -> Self {
        let fan_in = cin / spec.groups * kernel * kernel;
        ConvParams {
            weight: store.add(
                format!("{name}.weight"),
                init.fan_in_uniform(&[cout, cin / spec.groups, kernel, kernel], fan_in),
            ),
            bias: store.add(format!("{name}.bias"), init.fan_in_uniform(&[cout], fan_in)),
            spec,
        }
    }

    fn apply<T: Element>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, bound.var(self.weight), Some(bound.var(self.bias)), self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseBranchParams {
    pub convs: Vec<ConvParams>,
    pub rsste: RssteParams,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub convs: Vec<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionParams {
    pub convs: Vec<ConvParams>,
}

/// Where each learnable tensor of the network lives in the store.
#[derive(Clone, Debug, PartialEq)]
pub struct GrtnLayout {
    pub spatial: DenoiseBranchParams,
    /// Absent when gates are disabled.
    pub reset_gate: Option<GateParams>,
    pub update_gate: Option<GateParams>,
    pub temporal: DenoiseBranchParams,
    pub reconstruction: ReconstructionParams,
}

impl GrtnLayout {
    fn build<T: Element>(cfg: &GrtnConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let ci = cfg.image_channels;
        let rcfg = cfg.rsste();
        let same = Conv2dSpec::same(3);

        let spatial = {
            let mut init = Init { rng: &mut *rng };
            let convs = vec![
                ConvParams::init(store, "spatial.conv1", ci + 1, c, 3, same.with_stride(2), &mut init),
                ConvParams::init(store, "spatial.conv2", c, c, 3, same, &mut init),
                ConvParams::init(store, "spatial.conv3", c, c, 3, same, &mut init),
            ];
            let rsste = RssteParams::init(store, "spatial.rsste", &rcfg, rng);
            DenoiseBranchParams {
                convs,
                rsste,
                norm_gamma: store.add("spatial.norm.gamma", Tensor::full(&[c], T::one())),
                norm_beta: store.add("spatial.norm.beta", Tensor::zeros(&[c])),
            }
        };

        let gate = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| {
            let mut init = Init { rng };
            GateParams {
                convs: vec![
                    ConvParams::init(store, &format!("{name}.conv1"), 2 * c, c, 3, same.with_groups(2), &mut init),
                    ConvParams::init(store, &format!("{name}.conv2"), c, c, 3, same.with_groups(2), &mut init),
                    ConvParams::init(store, &format!("{name}.conv3"), c, c, 1, Conv2dSpec::default(), &mut init),
                    ConvParams::init(store, &format!("{name}.conv4"), c, c, 1, Conv2dSpec::default(), &mut init),
                ],
            }
        };
        let reset_gate = cfg.gates_enabled.then(|| gate(store, rng, "reset_gate"));
        let update_gate = cfg.gates_enabled.then(|| gate(store, rng, "update_gate"));

        let temporal = {
            let mut init = Init { rng: &mut *rng };
            let convs = vec![
                ConvParams::init(store, "temporal.conv1", 2 * c, c, 3, same.with_groups(2), &mut init),
                ConvParams::init(store, "temporal.conv2", c, c, 3, same.with_groups(c / 2), &mut init),
                ConvParams::init(store, "temporal.conv3", c, c, 3, same, &mut init),
            ];
            let rsste = RssteParams::init(store, "temporal.rsste", &rcfg, rng);
            DenoiseBranchParams {
                convs,
                rsste,
                norm_gamma: store.add("temporal.norm.gamma", Tensor::full(&[c], T::one())),
                norm_beta: store.add("temporal.norm.beta", Tensor::zeros(&[c])),
            }
        };

        let reconstruction = {
            let mut init = Init { rng };
            ReconstructionParams {
                convs: vec![
                    ConvParams::init(store, "reconstruction.conv1", 2 * c, c, 3, same, &mut init),
                    ConvParams::init(store, "reconstruction.conv2", c, c, 3, same, &mut init),
                    ConvParams::init(store, "reconstruction.conv3", c, c, 3, same, &mut init),
                    ConvParams::init(store, "reconstruction.conv4", c, c, 3, same, &mut init),
                    ConvParams::init(store, "reconstruction.conv5", c / 4, ci, 3, same, &mut init),
                ],
            }
        };

        GrtnLayout {
            spatial,
            reset_gate,
            update_gate,
            temporal,
            reconstruction,
        }
    }

    /// Every RSSTE linear weight (projections, MLP layers, output maps).
    pub fn rsste_linear_weights(&self) -> Vec<ParamId> {
        let mut ids = self.spatial.rsste.linear_weights();
        ids.extend(self.temporal.rsste.linear_weights());
        ids
    }
}

/// Learnable state of a GRTN model.
#[derive(Clone, Debug, PartialEq)]
pub struct GrtnParams<T> {
    pub config: GrtnConfig,
    pub store: ParamStore<T>,
    pub layout: GrtnLayout,
}

impl<T: Element> GrtnParams<T> {
    pub fn init(config: &GrtnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = GrtnLayout::build(config, &mut store, &mut rng);
        Ok(GrtnParams {
            config: config.clone(),
            store,
            layout,
        })
    }

    /// Rebuilds the layout for `config` and fills it with `store`'s tensors.
    pub fn from_store(config: &GrtnConfig, store: ParamStore<T>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        params.store.assign_from(&store)?;
        Ok(params)
    }

    pub fn cast<U: Element>(&self) -> GrtnParams<U> {
        GrtnParams {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Zeroes the reconstruction head so the network returns its input.
    pub fn zero_reconstruction(&mut self) {
        for conv in &self.layout.reconstruction.convs {
            for id in [conv.weight, conv.bias] {
                let shape = self.store.get(id).shape().to_vec();
                *self.store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
    }

    pub fn count(&self) -> ParamCount {
        count_params(&self.store)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// `(submodule, count)` in first-appearance order.
    pub per_module: Vec<(String, usize)>,
}

/// Exact learnable-element count, broken down by top-level submodule.
pub fn count_params<T: Element>(store: &ParamStore<T>) -> ParamCount {
    let mut per_module: Vec<(String, usize)> = Vec::new();
    for (_, name, t) in store.iter() {
        let module = name.split('.').next().unwrap_or(name);
        match per_module.iter_mut().find(|(m, _)| m == module) {
            Some((_, n)) => *n += t.numel(),
            None => per_module.push((module.to_string(), t.numel())),
        }
    }
    ParamCount {
        total: store.numel(),
        per_module,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateKind {
    Reset,
    Update,
}

/// A bound network: configuration, layout and graph variables for one pass.
pub struct Net<'a> {
    pub config: &'a GrtnConfig,
    pub layout: &'a GrtnLayout,
    pub bound: &'a Bound,
}

/// Recurrent carry between frames as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub prev_sd: Var,
    pub prev_b: Var,
}

/// Intermediate maps of one step, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct StepOutputs {
    pub denoised: Var,
    pub f_sd: Var,
    pub f_wb: Var,
    pub reset_gate: Option<Var>,
    pub update_gate: Option<Var>,
    pub f_td: Var,
    pub f_b: Var,
}

impl StepOutputs {
    pub fn state(&self) -> StateVars {
        StateVars {
            prev_sd: self.f_sd,
            prev_b: self.f_b,
        }
    }
}

/// Constant `[N, 1, H, W]` planes holding `σ_b / normalizer`.
pub fn sigma_plane<T: Element>(
    g: &mut Graph<T>,
    sigmas: &[f64],
    h: usize,
    w: usize,
    normalizer: f64,
) -> Var {
    let plane = h * w;
    let t = Tensor::from_fn(&[sigmas.len(), 1, h, w], |i| T::of(sigmas[i / plane] / normalizer));
    g.constant(t)
}

fn norm_channels<T: Element>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let nhwc = g.channels_last(x)?;
    let normed = g.layer_norm(nhwc, gamma, beta, LAYER_NORM_EPS)?;
    g.channels_first(normed)
}

impl Net<'_> {
    fn slope(&self) -> f64 {
        self.config.leaky_slope
    }

    /// `F_SD = H_SD(Con(x, s))`, at half resolution.
    pub fn spatial_denoise<T: Element>(&self, g: &mut Graph<T>, x: Var, s: Var) -> Result<Var> {
        let p = &self.layout.spatial;
        let mut h = g.concat(&[x, s], 1)?;
        for conv in &p.convs {
            h = conv.apply(g, self.bound, h)?;
            h = g.leaky_relu(h, self.slope());
        }
        let h = rsste_forward(g, h, &p.rsste, self.bound, &self.config.rsste())?;
        norm_channels(g, h, self.bound.var(p.norm_gamma), self.bound.var(p.norm_beta))
    }

    /// Sigmoid gate over `InCon(F_SD, F_WB)`.
    pub fn gate<T: Element>(&self, g: &mut Graph<T>, f_sd: Var, f_wb: Var, which: GateKind) -> Result<Var> {
        let p = match which {
            GateKind::Reset => self.layout.reset_gate.as_ref(),
            GateKind::Update => self.layout.update_gate.as_ref(),
        }
        .ok_or_else(|| Error::Config("gates are disabled in this configuration".into()))?;
        let mut h = g.interleave_concat(f_sd, f_wb)?;
        let last = p.convs.len() - 1;
        for (i, conv) in p.convs.iter().enumerate() {
            h = conv.apply(g, self.bound, h)?;
            if i < last {
                h = g.leaky_relu(h, self.slope());
            }
        }
        Ok(g.sigmoid(h))
    }

    /// `F_TD = H_TD(InCon(W_RG ⊙ F_WB, F_SD))`; without a gate `F_WB` enters as is.
    pub fn temporal_denoise<T: Element>(
        &self,
        g: &mut Graph<T>,
        reset: Option<Var>,
        f_wb: Var,
        f_sd: Var,
    ) -> Result<Var> {
        let p = &self.layout.temporal;
        let kept = match reset {
            Some(w) => g.mul(w, f_wb)?,
            None => f_wb,
        };
        let mut h = g.interleave_concat(kept, f_sd)?;
        let last = p.convs.len() - 1;
        for (i, conv) in p.convs.iter().enumerate() {
            h = conv.apply(g, self.bound, h)?;
            if i < last {
                h = g.leaky_relu(h, self.slope());
            }
        }
        let h = rsste_forward(g, h, &p.rsste, self.bound, &self.config.rsste())?;
        norm_channels(g, h, self.bound.var(p.norm_gamma), self.bound.var(p.norm_beta))
    }

    /// `ŷ = H_RC(InCon(F_B, F_SD)) + x`.
    pub fn reconstruct<T: Element>(&self, g: &mut Graph<T>, f_b: Var, f_sd: Var, x: Var) -> Result<Var> {
        let convs = &self.layout.reconstruction.convs;
        let mut h = g.interleave_concat(f_b, f_sd)?;
        for conv in &convs[..3] {
            h = conv.apply(g, self.bound, h)?;
            h = g.leaky_relu(h, self.slope());
        }
        h = convs[3].apply(g, self.bound, h)?;
        h = g.pixel_shuffle(h, self.config.downsample)?;
        let residual = convs[4].apply(g, self.bound, h)?;
        if g.shape(residual) != g.shape(x) {
            return Err(Error::shapes("reconstruct", g.shape(x), g.shape(residual)));
        }
        g.add(residual, x)
    }

    /// One recurrent step on an even-sized batch `x: [N, C_img, H, W]`.
    ///
    /// Without a state the frame bootstraps itself: `F_WB := F_SD`.
    pub fn step_even<T: Element>(
        &self,
        g: &mut Graph<T>,
        state: Option<StateVars>,
        x: Var,
        s: Var,
    ) -> Result<StepOutputs> {
        let f_sd = self.spatial_denoise(g, x, s)?;
        let f_wb = match state {
            None => f_sd,
            Some(st) => {
                if g.shape(st.prev_b) != g.shape(f_sd) {
                    return Err(Error::FrameSizeChanged {
                        expected: g.shape(st.prev_b).to_vec(),
                        got: g.shape(f_sd).to_vec(),
                    });
                }
                align::align(
                    g,
                    st.prev_b,
                    f_sd,
                    st.prev_sd,
                    self.config.alignment,
                    self.config.search_radius,
                )?
            }
        };
        let (reset, update, f_td, f_b) = if self.config.gates_enabled {
            let reset = self.gate(g, f_sd, f_wb, GateKind::Reset)?;
            let f_td = self.temporal_denoise(g, Some(reset), f_wb, f_sd)?;
            let update = self.gate(g, f_sd, f_wb, GateKind::Update)?;
            let f_b = g.blend(update, f_td, f_wb)?;
            (Some(reset), Some(update), f_td, f_b)
        } else {
            let f_td = self.temporal_denoise(g, None, f_wb, f_sd)?;
            (None, None, f_td, f_td)
        };
        let denoised = self.reconstruct(g, f_b, f_sd, x)?;
        Ok(StepOutputs {
            denoised,
            f_sd,
            f_wb,
            reset_gate: reset,
            update_gate: update,
            f_td,
            f_b,
        })
    }

    /// One recurrent step for any frame size; odd sides are reflect padded
    /// for the network and the output is cropped back.
    pub fn step<T: Element>(
        &self,
        g: &mut Graph<T>,
        state: Option<StateVars>,
        x: Var,
        sigmas: &[f64],
    ) -> Result<(Var, StateVars)> {
        let (n, ci, h, w) = g.value(x).nchw("step")?;
        if ci != self.config.image_channels {
            return Err(Error::dim("step", "image_channels", self.config.image_channels, ci));
        }
        if sigmas.len() != n {
            return Err(Error::dim("step", "sigmas", n, sigmas.len()));
        }
        let (h2, w2) = (h + h % 2, w + w % 2);
        let xin = if (h2, w2) != (h, w) {
            g.reflect_pad_to(x, h2, w2)?
        } else {
            x
        };
        let s = sigma_plane(g, sigmas, h2, w2, self.config.sigma_normalizer);
        let out = self.step_even(g, state, xin, s)?;
        let y = if (h2, w2) != (h, w) {
            g.crop(out.denoised, h, w)?
        } else {
            out.denoised
        };
        Ok((y, out.state()))
    }
}

/// Recurrent carry between frames as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GrtnState<T> {
    pub prev_sd: Tensor<T>,
    pub prev_b: Tensor<T>,
    pub frame_index: usize,
    /// Shape of the frames seen so far.
    pub frame_shape: Vec<usize>,
}

/// Frame-by-frame causal inference.
pub struct Denoiser<'p, T> {
    params: &'p GrtnParams<T>,
    state: Option<GrtnState<T>>,
}

impl<'p, T: Element> Denoiser<'p, T> {
    pub fn new(params: &'p GrtnParams<T>) -> Self {
        Denoiser {
            params,
            state: None,
        }
    }

    pub fn state(&self) -> Option<&GrtnState<T>> {
        self.state.as_ref()
    }

    pub fn reset(&mut self) {
        self.state = None;
    }

    /// Denoises the next frames of a batch of sequences (`[N, C_img, H, W]`).
    pub fn push(&mut self, frame: &Tensor<T>, sigmas: &[f64]) -> Result<Tensor<T>> {
        if let Some(st) = &self.state {
            if st.frame_shape != frame.shape() {
                return Err(Error::FrameSizeChanged {
                    expected: st.frame_shape.clone(),
                    got: frame.shape().to_vec(),
                });
            }
        }
        let mut g = Graph::new();
        let bound = self.params.store.bind(&mut g, false);
        let net = Net {
            config: &self.params.config,
            layout: &self.params.layout,
            bound: &bound,
        };
        let state = self.state.as_ref().map(|st| StateVars {
            prev_sd: g.constant(st.prev_sd.clone()),
            prev_b: g.constant(st.prev_b.clone()),
        });
        let x = g.constant(frame.clone());
        let (y, next) = net.step(&mut g, state, x, sigmas)?;
        let frame_index = self.state.as_ref().map_or(0, |s| s.frame_index + 1);
        self.state = Some(GrtnState {
            prev_sd: g.value(next.prev_sd).clone(),
            prev_b: g.value(next.prev_b).clone(),
            frame_index,
            frame_shape: frame.shape().to_vec(),
        });
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GrtnConfig {
        GrtnConfig::tiny()
    }

    fn frame(seed: u64, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + seed as f64 * 7.3) * 0.61).sin() * 0.5 + 0.5)
    }

    #[test]
    fn spatial_output_is_half_resolution() {
        let p = GrtnParams::<f64>::init(&tiny(), 1).unwrap();
        let mut g = Graph::new();
        let bound = p.store.bind(&mut g, false);
        let net = Net { config: &p.config, layout: &p.layout, bound: &bound };
        let x = g.constant(frame(0, &[1, 1, 16, 12]));
        let s = sigma_plane(&mut g, &[25.0], 16, 12, 255.0);
        let f = net.spatial_denoise(&mut g, x, s).unwrap();
        assert_eq!(g.shape(f), &[1, p.config.channels, 8, 6]);
    }

    #[test]
    fn sigma_conditioning_is_live() {
        let p = GrtnParams::<f64>::init(&tiny(), 2).unwrap();
        let mut g = Graph::new();
        let bound = p.store.bind(&mut g, false);
        let net = Net { config: &p.config, layout: &p.layout, bound: &bound };
        let x = g.constant(frame(1, &[1, 1, 8, 8]));
        let s1 = sigma_plane(&mut g, &[10.0], 8, 8, 255.0);
        let s2 = sigma_plane(&mut g, &[40.0], 8, 8, 255.0);
        let a = net.spatial_denoise(&mut g, x, s1).unwrap();
        let b = net.spatial_denoise(&mut g, x, s2).unwrap();
        assert_ne!(g.value(a), g.value(b));
    }

    #[test]
    fn zero_weights_give_constant_spatial_features() {
        let mut p = GrtnParams::<f64>::init(&tiny(), 3).unwrap();
        for conv in p.layout.spatial.convs.clone() {
            let shape = p.store.get(conv.weight).shape().to_vec();
            *p.store.get_mut(conv.weight) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let bound = p.store.bind(&mut g, false);
        let net = Net { config: &p.config, layout: &p.layout, bound: &bound };
        let x = g.constant(frame(4, &[1, 1, 8, 8]));
        let s = sigma_plane(&mut g, &[20.0], 8, 8, 255.0);
        let f = net.spatial_denoise(&mut g, x, s).unwrap();
        let v = g.value(f);
        let plane = 16;
        for ch in 0..p.config.channels {
            let vals = &v.data()[ch * plane..(ch + 1) * plane];
            assert!(vals.iter().all(|&a| (a - vals[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_gate_weights_give_half() {
        let mut p = GrtnParams::<f64>::init(&tiny(), 4).unwrap();
        for conv in p.layout.reset_gate.clone().unwrap().convs {
            for id in [conv.weight, conv.bias] {
                let shape = p.store.get(id).shape().to_vec();
                *p.store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let mut g = Graph::new();
        let bound = p.store.bind(&mut g, false);
        let net = Net { config: &p.config, layout: &p.layout, bound: &bound };
        let c = p.config.channels;
        let a = g.constant(frame(5, &[1, c, 4, 4]));
        let b = g.constant(frame(6, &[1, c, 4, 4]));
        let w = net.gate(&mut g, a, b, GateKind::Reset).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_input_order_matters() {
        let p = GrtnParams::<f64>::init(&tiny(), 5).unwrap();
        let mut g = Graph::new();
        let bound = p.store.bind(&mut g, false);
        let net = Net { config: &p.config, layout: &p.layout, bound: &bound };
        let c = p.config.channels;
        let a = g.constant(frame(7, &[1, c, 4, 4]));
        let b = g.constant(frame(8, &[1, c, 4, 4]));
        let ab = net.gate(&mut g, a, b, GateKind::Update).unwrap();
        let ba = net.gate(&mut g, b, a, GateKind::Update).unwrap();
        assert_ne!(g.value(ab), g.value(ba));
    }

    #[test]
    fn temporal_reset_extremes() {
        let p = GrtnParams::<f64>::init(&tiny(), 6).unwrap();
        let mut g = Graph::new();
        let bound = p.store.bind(&mut g, false);
        let net = Net { config: &p.config, layout: &p.layout, bound: &bound };
        let c = p.config.channels;
        let shape = [1, c, 4, 4];
        let wb = g.constant(frame(9, &shape));
        let sd = g.constant(frame(10, &shape));
        let zeros = g.constant(Tensor::zeros(&shape));
        let ones = g.constant(Tensor::full(&shape, 1.0));
        // A zero reset gate hides the previous frame entirely.
        let suppressed = net.temporal_denoise(&mut g, Some(zeros), wb, sd).unwrap();
        let blank = net.temporal_denoise(&mut g, None, zeros, sd).unwrap();
        assert_eq!(g.value(suppressed), g.value(blank));
        // A unit gate passes it through untouched.
        let open = net.temporal_denoise(&mut g, Some(ones), wb, sd).unwrap();
        let ungated = net.temporal_denoise(&mut g, None, wb, sd).unwrap();
        assert_eq!(g.value(open), g.value(ungated));
        assert_eq!(g.shape(open), &shape);
    }

    #[test]
    fn zero_reconstruction_returns_input() {
        let mut p = GrtnParams::<f64>::init(&tiny(), 7).unwrap();
        p.zero_reconstruction();
        let mut d = Denoiser::new(&p);
        for seed in 0..3 {
            let x = frame(seed, &[1, 1, 8, 8]);
            assert_eq!(d.push(&x, &[25.0]).unwrap(), x);
        }
    }

    #[test]
    fn output_shape_matches_input_for_odd_sizes() {
        let p = GrtnParams::<f64>::init(&tiny(), 8).unwrap();
        let mut d = Denoiser::new(&p);
        let x = frame(1, &[1, 1, 9, 7]);
        let y = d.push(&x, &[30.0]).unwrap();
        assert_eq!(y.shape(), x.shape());
        let y2 = d.push(&frame(2, &[1, 1, 9, 7]), &[30.0]).unwrap();
        assert_eq!(y2.shape(), x.shape());
        assert_eq!(d.state().unwrap().frame_index, 1);
    }

    #[test]
    fn frame_size_change_is_rejected() {
        let p = GrtnParams::<f64>::init(&tiny(), 9).unwrap();
        let mut d = Denoiser::new(&p);
        d.push(&frame(0, &[1, 1, 8, 8]), &[10.0]).unwrap();
        let err = d.push(&frame(0, &[1, 1, 8, 10]), &[10.0]).unwrap_err();
        assert!(matches!(err, Error::FrameSizeChanged { .. }));
    }

    #[test]
    fn count_matches_store_total() {
        let p = GrtnParams::<f32>::init(&GrtnConfig::toy(), 0).unwrap();
        let count = p.count();
        let direct: usize = p.store.iter().map(|(_, _, t)| t.numel()).sum();
        assert_eq!(count.total, direct);
        assert_eq!(count.per_module.iter().map(|(_, n)| n).sum::<usize>(), direct);
        let names: Vec<&str> = count.per_module.iter().map(|(m, _)| m.as_str()).collect();
        assert_eq!(
            names,
            ["spatial", "reset_gate", "update_gate", "temporal", "reconstruction"]
        );
    }

    #[test]
    fn no_gate_variant_has_no_gate_params() {
        let mut cfg = tiny();
        cfg.gates_enabled = false;
        let p = GrtnParams::<f64>::init(&cfg, 0).unwrap();
        assert!(p.layout.reset_gate.is_none());
        let mut d = Denoiser::new(&p);
        let x = frame(0, &[1, 1, 8, 8]);
        d.push(&x, &[10.0]).unwrap();
        assert_eq!(d.push(&x, &[10.0]).unwrap().shape(), x.shape());
    }
}
