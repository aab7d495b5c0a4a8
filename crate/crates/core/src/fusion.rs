//! Adaptive fusion of semantic and artifact features.
//!
//! Each branch has a regulator mapping its feature vector to a coefficient
//! in `(0, 1)`; the coefficients scale the two vectors before concatenation
//! and a single fully connected layer maps the result to a logit. During
//! training one coefficient (never both) may be zeroed.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Adam, Linear, LinearGrads, LinearState, Moments};
use crate::weights::checksum_f64;

/// Anything that maps a feature vector to a scaling coefficient.
pub trait Regulate {
    fn coefficient(&self, v: &[f64]) -> f64;
}

/// Fixed coefficient, for wiring tests and the plain-concatenation ablation.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRegulator(pub f64);

impl Regulate for ConstantRegulator {
    fn coefficient(&self, _v: &[f64]) -> f64 {
        self.0
    }
}

/// Two-layer perceptron with a sigmoid scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Regulator {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct RegulatorTrace {
    hidden: Array1<f64>,
    coefficient: f64,
}

#[derive(Debug, Clone)]
pub struct RegulatorGrads {
    pub hidden: LinearGrads,
    pub output: LinearGrads,
}

impl Regulator {
    pub const HIDDEN: usize = 64;

    pub fn new<R: Rng>(inputs: usize, rng: &mut R) -> Self {
        let hidden = Linear::new(inputs, Self::HIDDEN, (2.0 / inputs.max(1) as f64).sqrt(), rng);
        let output = Linear::new(Self::HIDDEN, 1, (1.0 / Self::HIDDEN as f64).sqrt() * 0.1, rng);
        Self { hidden, output }
    }

    pub fn forward(&self, v: &[f64]) -> (f64, RegulatorTrace) {
        let h = self.hidden.forward(ArrayView1::from(v)).mapv(|a| a.max(0.0));
        let z = self.output.forward(h.view())[0];
        let coefficient = sigmoid(z);
        (
            coefficient,
            RegulatorTrace {
                hidden: h,
                coefficient,
            },
        )
    }

    /// Returns `dL/dv` given `dL/dcoefficient`.
    pub fn backward(&self, v: &[f64], trace: &RegulatorTrace, d_coef: f64, grads: &mut RegulatorGrads) -> Array1<f64> {
        let c = trace.coefficient;
        let dz = Array1::from_elem(1, d_coef * c * (1.0 - c));
        let mut dh = self.output.backward(trace.hidden.view(), dz.view(), &mut grads.output);
        for (g, &h) in dh.iter_mut().zip(trace.hidden.iter()) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        self.hidden.backward(ArrayView1::from(v), dh.view(), &mut grads.hidden)
    }

    pub fn zero_grads(&self) -> RegulatorGrads {
        RegulatorGrads {
            hidden: self.hidden.zero_grads(),
            output: self.output.zero_grads(),
        }
    }
}

impl Regulate for Regulator {
    fn coefficient(&self, v: &[f64]) -> f64 {
        self.forward(v).0
    }
}

/// Which features reach the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Regulated concatenation with constrained dropout.
    #[default]
    Adaptive,
    OnlySemantic,
    OnlyArtifact,
    /// Plain concatenation: coefficients fixed at 1, no dropout.
    SimpleConcat,
}

impl FusionMode {
    pub fn uses_semantic(self) -> bool {
        self != FusionMode::OnlyArtifact
    }

    pub fn uses_artifact(self) -> bool {
        self != FusionMode::OnlySemantic
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Adaptive => "adaptive",
            FusionMode::OnlySemantic => "only_semantic",
            FusionMode::OnlyArtifact => "only_artifact",
            FusionMode::SimpleConcat => "simple_concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            FusionMode::Adaptive,
            FusionMode::OnlySemantic,
            FusionMode::OnlyArtifact,
            FusionMode::SimpleConcat,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}`")))
    }
}

/// `(m_sem, m_art)`: which coefficients survive dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mask {
    pub sem: bool,
    pub art: bool,
}

impl Mask {
    pub const BOTH: Mask = Mask { sem: true, art: true };
    pub const SEM_ONLY: Mask = Mask { sem: true, art: false };
    pub const ART_ONLY: Mask = Mask { sem: false, art: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub v: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

/// `alpha = m_sem R_sem(v_sem)`, `beta = m_art R_art(v_art)`,
/// `v = alpha v_sem (+) beta v_art`.
pub fn fuse_with(
    v_sem: &[f64],
    v_art: &[f64],
    reg_sem: &dyn Regulate,
    reg_art: &dyn Regulate,
    mask: Mask,
) -> Result<Fused> {
    if !mask.sem && !mask.art {
        return Err(Error::BothFeaturesDropped);
    }
    let alpha = if mask.sem { reg_sem.coefficient(v_sem) } else { 0.0 };
    let beta = if mask.art { reg_art.coefficient(v_art) } else { 0.0 };
    let mut v = Vec::with_capacity(v_sem.len() + v_art.len());
    v.extend(v_sem.iter().map(|x| alpha * x));
    v.extend(v_art.iter().map(|x| beta * x));
    Ok(Fused { v, alpha, beta })
}

pub fn regulate_and_fuse(v_sem: &[f64], v_art: &[f64], net: &FusionNetwork, mask: Mask) -> Result<Fused> {
    net.check_dims(v_sem, v_art)?;
    match net.mode {
        FusionMode::Adaptive => fuse_with(v_sem, v_art, &net.reg_sem, &net.reg_art, mask),
        _ => fuse_with(v_sem, v_art, &ConstantRegulator(1.0), &ConstantRegulator(1.0), mask),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    #[default]
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p_drop_sem: f64,
    pub p_drop_art: f64,
    pub mode: DropoutMode,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            p_drop_sem: 0.15,
            p_drop_art: 0.15,
            mode: DropoutMode::Train,
        }
    }
}

impl DropoutPolicy {
    pub fn inference() -> Self {
        Self {
            mode: DropoutMode::Inference,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.p_drop_sem, self.p_drop_art);
        if s < 0.0 || a < 0.0 || s + a >= 1.0 {
            return Err(Error::Config(format!(
                "dropout probabilities must be >= 0 with sum < 1, got {s} + {a}"
            )));
        }
        Ok(())
    }
}

/// Categorical draw over `{(1,1), (0,1), (1,0)}` with probabilities
/// `{1 - p_sem - p_art, p_sem, p_art}`. Inference always keeps both.
pub fn sample_dropout_mask<R: Rng + ?Sized>(policy: &DropoutPolicy, rng: &mut R) -> Mask {
    if policy.mode == DropoutMode::Inference {
        return Mask::BOTH;
    }
    let u: f64 = rng.gen();
    if u < policy.p_drop_sem {
        Mask::ART_ONLY
    } else if u < policy.p_drop_sem + policy.p_drop_art {
        Mask::SEM_ONLY
    } else {
        Mask::BOTH
    }
}

/// Regulators plus the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionNetwork {
    pub mode: FusionMode,
    pub dim_sem: usize,
    pub dim_art: usize,
    pub reg_sem: Regulator,
    pub reg_art: Regulator,
    pub head: Linear,
}

/// Forward-pass values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    mask: Mask,
    v: Array1<f64>,
    alpha: f64,
    beta: f64,
    reg_sem: Option<RegulatorTrace>,
    reg_art: Option<RegulatorTrace>,
    pub logit: f64,
}

impl FusionTrace {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub reg_sem: RegulatorGrads,
    pub reg_art: RegulatorGrads,
    pub head: LinearGrads,
}

#[derive(Debug, Clone, Default)]
pub struct FusionMoments {
    slots: [Moments<f64>; 10],
}

impl FusionNetwork {
    pub fn new(mode: FusionMode, dim_sem: usize, dim_art: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reg_sem = Regulator::new(dim_sem, &mut rng);
        let reg_art = Regulator::new(dim_art, &mut rng);
        let head_in = Self::head_inputs(mode, dim_sem, dim_art);
        let head = Linear::new(head_in, 1, 0.01, &mut rng);
        Self {
            mode,
            dim_sem,
            dim_art,
            reg_sem,
            reg_art,
            head,
        }
    }

    fn head_inputs(mode: FusionMode, dim_sem: usize, dim_art: usize) -> usize {
        match mode {
            FusionMode::OnlySemantic => dim_sem,
            FusionMode::OnlyArtifact => dim_art,
            _ => dim_sem + dim_art,
        }
    }

    fn check_dims(&self, v_sem: &[f64], v_art: &[f64]) -> Result<()> {
        if self.mode.uses_semantic() && v_sem.len() != self.dim_sem {
            return Err(Error::DimensionMismatch(v_sem.len(), self.dim_sem));
        }
        if self.mode.uses_artifact() && v_art.len() != self.dim_art {
            return Err(Error::DimensionMismatch(v_art.len(), self.dim_art));
        }
        Ok(())
    }

    /// Logit for one sample. Branches unused by the mode may be passed as
    /// empty slices.
    pub fn forward(&self, v_sem: &[f64], v_art: &[f64], mask: Mask) -> Result<FusionTrace> {
        self.check_dims(v_sem, v_art)?;
        if !mask.sem && !mask.art {
            return Err(Error::BothFeaturesDropped);
        }
        let (v, alpha, beta, reg_sem, reg_art) = match self.mode {
            FusionMode::OnlySemantic => (v_sem.to_vec(), 1.0, 0.0, None, None),
            FusionMode::OnlyArtifact => (v_art.to_vec(), 0.0, 1.0, None, None),
            FusionMode::SimpleConcat => ([v_sem, v_art].concat(), 1.0, 1.0, None, None),
            FusionMode::Adaptive => {
                let (alpha, ts) = if mask.sem {
                    let (a, t) = self.reg_sem.forward(v_sem);
                    (a, Some(t))
                } else {
                    (0.0, None)
                };
                let (beta, ta) = if mask.art {
                    let (b, t) = self.reg_art.forward(v_art);
                    (b, Some(t))
                } else {
                    (0.0, None)
                };
                let mut v = Vec::with_capacity(v_sem.len() + v_art.len());
                v.extend(v_sem.iter().map(|x| alpha * x));
                v.extend(v_art.iter().map(|x| beta * x));
                (v, alpha, beta, ts, ta)
            }
        };
        let v = Array1::from(v);
        let logit = self.head.forward(v.view())[0];
        Ok(FusionTrace {
            mask,
            v,
            alpha,
            beta,
            reg_sem,
            reg_art,
            logit,
        })
    }

    /// Score with the inference mask.
    pub fn score(&self, v_sem: &[f64], v_art: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.forward(v_sem, v_art, Mask::BOTH)?.logit))
    }

    pub fn zero_grads(&self) -> FusionGrads {
        FusionGrads {
            reg_sem: self.reg_sem.zero_grads(),
            reg_art: self.reg_art.zero_grads(),
            head: self.head.zero_grads(),
        }
    }

    /// Accumulates parameter gradients for `dL/dlogit` and returns `dL/dv_art`
    /// (empty when the artifact branch is unused).
    pub fn backward(&self, v_sem: &[f64], v_art: &[f64], trace: &FusionTrace, d_logit: f64, grads: &mut FusionGrads) -> Vec<f64> {
        let dv = self
            .head
            .backward(trace.v.view(), Array1::from_elem(1, d_logit).view(), &mut grads.head);
        match self.mode {
            FusionMode::OnlySemantic => Vec::new(),
            FusionMode::OnlyArtifact => dv.to_vec(),
            FusionMode::SimpleConcat => dv.slice(ndarray::s![self.dim_sem..]).to_vec(),
            FusionMode::Adaptive => {
                let (dv_sem, dv_art) = dv.view().split_at(ndarray::Axis(0), self.dim_sem);
                if let Some(t) = &trace.reg_sem {
                    let d_alpha: f64 = dv_sem.iter().zip(v_sem).map(|(g, x)| g * x).sum();
                    // v_sem comes from the frozen backbone; its gradient is dropped.
                    self.reg_sem.backward(v_sem, t, d_alpha, &mut grads.reg_sem);
                }
                let mut d_art: Vec<f64> = dv_art.iter().map(|g| g * trace.beta).collect();
                if let Some(t) = &trace.reg_art {
                    let d_beta: f64 = dv_art.iter().zip(v_art).map(|(g, x)| g * x).sum();
                    let via_reg = self.reg_art.backward(v_art, t, d_beta, &mut grads.reg_art);
                    for (d, r) in d_art.iter_mut().zip(via_reg.iter()) {
                        *d += r;
                    }
                }
                debug_assert!(trace.mask.art || trace.beta == 0.0);
                d_art
            }
        }
    }

    /// Visits every trainable scalar in a fixed order.
    pub fn for_each_param(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in self.layers_mut() {
            l.weight.iter_mut().for_each(&mut f);
            l.bias.iter_mut().for_each(&mut f);
        }
    }

    fn layers_mut(&mut self) -> [&mut Linear; 5] {
        [
            &mut self.reg_sem.hidden,
            &mut self.reg_sem.output,
            &mut self.reg_art.hidden,
            &mut self.reg_art.output,
            &mut self.head,
        ]
    }

    fn layers(&self) -> [&Linear; 5] {
        [
            &self.reg_sem.hidden,
            &self.reg_sem.output,
            &self.reg_art.hidden,
            &self.reg_art.output,
            &self.head,
        ]
    }

    pub fn apply_adam(&mut self, opt: &Adam, grads: &FusionGrads, scale: f64, moments: &mut FusionMoments) {
        let g = [
            &grads.reg_sem.hidden,
            &grads.reg_sem.output,
            &grads.reg_art.hidden,
            &grads.reg_art.output,
            &grads.head,
        ];
        let mut slots = moments.slots.iter_mut();
        for (layer, lg) in self.layers_mut().into_iter().zip(g) {
            let gw: Vec<f64> = lg.weight.iter().map(|v| v * scale).collect();
            let gb: Vec<f64> = lg.bias.iter().map(|v| v * scale).collect();
            opt.update(layer.weight.as_slice_mut().unwrap(), &gw, slots.next().unwrap());
            opt.update(layer.bias.as_slice_mut().unwrap(), &gb, slots.next().unwrap());
        }
    }

    pub fn checksum(&self) -> String {
        let layers = self.layers();
        checksum_f64(layers.iter().flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()]))
    }

    pub fn state(&self) -> FusionNetworkState {
        FusionNetworkState {
            mode: self.mode,
            dim_sem: self.dim_sem,
            dim_art: self.dim_art,
            reg_sem: [(&self.reg_sem.hidden).into(), (&self.reg_sem.output).into()],
            reg_art: [(&self.reg_art.hidden).into(), (&self.reg_art.output).into()],
            head: (&self.head).into(),
        }
    }
}

impl FusionGrads {
    /// Gradients flattened in [`FusionNetwork::for_each_param`] order.
    pub fn flatten(&self) -> Vec<f64> {
        [
            &self.reg_sem.hidden,
            &self.reg_sem.output,
            &self.reg_art.hidden,
            &self.reg_art.output,
            &self.head,
        ]
        .iter()
        .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied().collect::<Vec<_>>())
        .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionNetworkState {
    pub mode: FusionMode,
    pub dim_sem: usize,
    pub dim_art: usize,
    pub reg_sem: [LinearState; 2],
    pub reg_art: [LinearState; 2],
    pub head: LinearState,
}

impl FusionNetworkState {
    pub fn restore(&self) -> std::result::Result<FusionNetwork, String> {
        let net = FusionNetwork {
            mode: self.mode,
            dim_sem: self.dim_sem,
            dim_art: self.dim_art,
            reg_sem: Regulator {
                hidden: self.reg_sem[0].restore()?,
                output: self.reg_sem[1].restore()?,
            },
            reg_art: Regulator {
                hidden: self.reg_art[0].restore()?,
                output: self.reg_art[1].restore()?,
            },
            head: self.head.restore()?,
        };
        if net.head.inputs() != FusionNetwork::head_inputs(self.mode, self.dim_sem, self.dim_art)
            || net.reg_sem.hidden.inputs() != self.dim_sem
            || net.reg_art.hidden.inputs() != self.dim_art
        {
            return Err("fusion network dimensions are inconsistent".into());
        }
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// Ablation combiners

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    OnlySemantic,
    OnlyArtifact,
    Avg,
    Max,
    Min,
    SimpleConcat,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::OnlySemantic,
        AblationMode::OnlyArtifact,
        AblationMode::Avg,
        AblationMode::Max,
        AblationMode::Min,
        AblationMode::SimpleConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::OnlySemantic => "only_semantic",
            AblationMode::OnlyArtifact => "only_artifact",
            AblationMode::Avg => "avg",
            AblationMode::Max => "max",
            AblationMode::Min => "min",
            AblationMode::SimpleConcat => "simple_concat",
        }
    }
}

/// Features plus the head for the plain-concatenation variant.
#[derive(Debug, Clone, Copy)]
pub struct ConcatInputs<'a> {
    pub v_sem: &'a [f64],
    pub v_art: &'a [f64],
    pub head: &'a Linear,
}

/// Per-branch outputs available to an ablation combiner.
#[derive(Debug, Clone, Copy, Default)]
pub struct BranchInputs<'a> {
    /// Score of a detector trained on semantic features only.
    pub sem_score: Option<f64>,
    /// Score of a detector trained on artifact features only.
    pub art_score: Option<f64>,
    pub concat: Option<ConcatInputs<'a>>,
}

pub fn ablation_fuse(mode: AblationMode, inputs: &BranchInputs<'_>) -> Result<f64> {
    let sem = || inputs.sem_score.ok_or(Error::MissingBranch("semantic score"));
    let art = || inputs.art_score.ok_or(Error::MissingBranch("artifact score"));
    Ok(match mode {
        AblationMode::OnlySemantic => sem()?,
        AblationMode::OnlyArtifact => art()?,
        AblationMode::Avg => (sem()? + art()?) / 2.0,
        AblationMode::Max => sem()?.max(art()?),
        AblationMode::Min => sem()?.min(art()?),
        AblationMode::SimpleConcat => {
            let c = inputs.concat.ok_or(Error::MissingBranch("concatenated features"))?;
            let fused = fuse_with(c.v_sem, c.v_art, &ConstantRegulator(1.0), &ConstantRegulator(1.0), Mask::BOTH)?;
            if fused.v.len() != c.head.inputs() {
                return Err(Error::DimensionMismatch(fused.v.len(), c.head.inputs()));
            }
            sigmoid(c.head.forward(ArrayView1::from(&fused.v))[0])
        }
    })
}
