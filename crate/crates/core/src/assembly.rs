//! Parameter selection and the full pipeline
//! `T = outer ∘ scale_seg ∘ attention ∘ sr_block`.

use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{make_column_sum_attention, AttentionLayer, LoweredAttention};
use crate::error::{KstError, Result};
use crate::ffn::{FfnBlock, LoweredBlock};
use crate::inner::{check_kdn_cap, make_scaling_segmentation, synth_sr_block, FlawReport, InnerVariant, DEFAULT_KDN_CAP};
use crate::matrix::Matrix;
use crate::memo::{
    assemble_outer_block, build_label_table, LabelAnchor, LabelTable, MemoBackend, OuterOptions, WindingParams,
    DEFAULT_ENUM_CAP,
};
use crate::scalar::{f64_to_rational, Arith, Mode, Scalar};
use crate::target::TargetOracle;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Linf,
    Lp(f64),
}

impl Metric {
    pub fn p(&self) -> Option<f64> {
        match self {
            Metric::Linf => None,
            Metric::Lp(p) => Some(*p),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Linf => f.write_str("linf"),
            Metric::Lp(p) => write!(f, "l{p}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamChoice {
    pub k: usize,
    pub h: usize,
    /// The formula gave a value below 1 for K or H.
    pub clamped: bool,
}

const CEIL_GUARD: f64 = 1e-9;

/// `ceil(v)` clamped to at least 1, tolerant of rounding just above an integer.
fn ceil_clamped(v: f64) -> (usize, bool) {
    let c = (v - CEIL_GUARD).ceil();
    if c < 1.0 || !c.is_finite() {
        (1, true)
    } else {
        (c as usize, false)
    }
}

fn h_from(arg: f64) -> (usize, bool) {
    if arg <= 0.0 {
        return (1, false);
    }
    ceil_clamped(arg.log2())
}

/// `H = ceil(log2(2 g_range / eps))`, `K = ceil(log2(2^(1-beta) Q / eps) / beta)`.
pub fn select_params_linfty(beta: f64, q: f64, epsilon: f64, g_range: f64) -> ParamChoice {
    let (k, ck) = ceil_clamped(((1.0 - beta).exp2() * q / epsilon).log2() / beta);
    let (h, ch) = h_from(2.0 * g_range / epsilon);
    ParamChoice { k, h, clamped: ck || ch }
}

/// The Hölder term of the L^p choice of `K`.
pub fn lp_k_holder_term(beta: f64, q: f64, epsilon: f64, p: f64, d: usize, n: usize) -> usize {
    let two_dn = (2 * d * n) as f64;
    ceil_clamped(((1.0 - beta).exp2() * two_dn.powf(1.0 / p) * q / epsilon).log2() / beta).0
}

#[allow(clippy::too_many_arguments)]
pub fn select_params_lp(
    beta: f64,
    q: f64,
    epsilon: f64,
    p: f64,
    d: usize,
    n: usize,
    b_sigma: f64,
    f_max: f64,
    g_range: f64,
) -> ParamChoice {
    let dn = (d * n) as f64;
    let range_term = (2f64.powf(1.0 / p) * dn.powf(2.0 / p) * (b_sigma + f_max) / epsilon).log2() / beta;
    let (k1, c1) = ceil_clamped(range_term);
    let two_dn = 2.0 * dn;
    let (k2, c2) = ceil_clamped(((1.0 - beta).exp2() * two_dn.powf(1.0 / p) * q / epsilon).log2() / beta);
    let (h, ch) = h_from(2.0 * two_dn.powf(1.0 / p) * g_range / epsilon);
    ParamChoice { k: k1.max(k2), h, clamped: (c1 && c2) || ch }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionParams {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub h: usize,
    /// Memorization depth knob; recorded only, the bitpack backend ignores it.
    pub l: usize,
    pub beta: f64,
    pub q: f64,
    pub metric: Metric,
    pub epsilon: f64,
    pub b_sigma: f64,
    pub f_max: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub inner_variant: InnerVariant,
    pub memo_backend: MemoBackend,
    pub anchor: LabelAnchor,
    pub seed: u64,
    pub target: String,
}

impl ConstructionParams {
    pub fn g_range(&self) -> f64 {
        self.g_max - self.g_min
    }

    pub fn kdn(&self) -> usize {
        self.k * self.d * self.n
    }

    /// `p` for the ReLU flaw schedule; the L^inf setting never builds one.
    fn flaw_p(&self) -> f64 {
        self.metric.p().unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub stage: String,
    pub role: String,
    pub depth: usize,
    pub width: usize,
    pub activations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub k: usize,
    pub h: usize,
    pub l: usize,
    pub lambda_size: u64,
    pub m_total: String,
    pub stages: Vec<StageInfo>,
    pub flaw: Option<FlawReport>,
    pub winding: Vec<WindingParams>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerPipeline {
    pub params: ConstructionParams,
    pub manifest: Manifest,
    pub sr_block: FfnBlock,
    pub attention: AttentionLayer,
    pub scale_seg: FfnBlock,
    pub outer_block: FfnBlock,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub kdn_cap: usize,
    pub enum_cap: u64,
    pub anchor: LabelAnchor,
    /// Winding tolerance; defaults to `epsilon / 2`.
    pub winding_delta: Option<f64>,
    pub winding_budget: u64,
    pub bitpack_cap: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        let outer = OuterOptions::default();
        BuildOptions {
            kdn_cap: DEFAULT_KDN_CAP,
            enum_cap: DEFAULT_ENUM_CAP,
            anchor: LabelAnchor::default(),
            winding_delta: None,
            winding_budget: outer.winding_budget,
            bitpack_cap: outer.bitpack_cap,
        }
    }
}

fn stage(name: &str, role: &str, block: &FfnBlock) -> StageInfo {
    StageInfo {
        stage: name.into(),
        role: role.into(),
        depth: block.depth(),
        width: block.width(),
        activations: block.activation_set().iter().map(ToString::to_string).collect(),
    }
}

fn labels_for(f: &TargetOracle, k: usize, opts: &BuildOptions) -> Result<LabelTable> {
    let (d, n) = f.shape();
    check_kdn_cap(k, d, n, opts.kdn_cap)?;
    build_label_table(f, k, opts.anchor, opts.enum_cap)
}

pub fn build_transformer(
    f: &TargetOracle,
    epsilon: f64,
    metric: Metric,
    inner_variant: InnerVariant,
    memo_backend: MemoBackend,
    seed: u64,
    opts: &BuildOptions,
) -> Result<TransformerPipeline> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(KstError::OutOfDomain(format!("epsilon {epsilon} must be positive")));
    }
    if let Metric::Lp(p) = metric {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(KstError::OutOfDomain(format!("p = {p} outside [1, inf)")));
        }
    }
    if metric == Metric::Linf && inner_variant == InnerVariant::Relu {
        return Err(KstError::IncompatibleVariant(
            "the ReLU inner network has flaw intervals, so it cannot carry a sup-norm guarantee".into(),
        ));
    }
    let (d, n) = f.shape();
    let (beta, q) = (f.beta(), f.q());
    let mut warnings = Vec::new();

    let (k, labels, choice) = match metric {
        Metric::Linf => {
            let k = select_params_linfty(beta, q, epsilon, 0.0).k;
            let labels = labels_for(f, k, opts)?;
            (k, labels.clone(), select_params_linfty(beta, q, epsilon, labels.g_range()))
        }
        Metric::Lp(p) => {
            // B_sigma needs labels and labels need K: start from the Hölder
            // term alone and raise K until the range term is satisfied.
            let mut k = lp_k_holder_term(beta, q, epsilon, p, d, n);
            loop {
                let labels = labels_for(f, k, opts)?;
                let b_sigma = labels.g_min.abs().max(labels.g_max.abs());
                let choice = select_params_lp(beta, q, epsilon, p, d, n, b_sigma, labels.f_max, labels.g_range());
                if choice.k <= k {
                    break (k, labels, ParamChoice { k, ..choice });
                }
                k = choice.k;
            }
        }
    };
    if choice.clamped {
        warnings.push(format!("epsilon = {epsilon} is large; K or H clamped to 1 (K = {k}, H = {})", choice.h));
    }
    let h = choice.h;
    let params = ConstructionParams {
        d,
        n,
        k,
        h,
        l: d * n,
        beta,
        q,
        metric,
        epsilon,
        b_sigma: labels.g_min.abs().max(labels.g_max.abs()),
        f_max: labels.f_max,
        g_min: labels.g_min,
        g_max: labels.g_max,
        inner_variant,
        memo_backend,
        anchor: opts.anchor,
        seed,
        target: f.name().to_string(),
    };

    let (sr_block, flaw) = synth_sr_block(k, d, n, inner_variant, params.flaw_p(), beta)?;
    let attention = make_column_sum_attention(d, n);
    let scale_seg = make_scaling_segmentation(k, d, n);
    let outer_opts = OuterOptions {
        winding_delta: opts.winding_delta.unwrap_or(epsilon / 2.0),
        winding_budget: opts.winding_budget,
        seed,
        saw_gadget: metric == Metric::Linf,
        bitpack_cap: opts.bitpack_cap,
    };
    let outer = assemble_outer_block(&labels, h, memo_backend, &outer_opts)?;
    if memo_backend != MemoBackend::Bitpack {
        warnings.push("winding backend: sup-norm reports are sampled, not certified".into());
    }

    let sr_role = match inner_variant {
        InnerVariant::Floor => "translation, piecewise floor inner functions, readout (exact on [0,1])",
        InnerVariant::Relu => "translation, piecewise ReLU inner functions, readout (exact off flaw set)",
    };
    let outer_role = match memo_backend {
        MemoBackend::Bitpack => "rounding, 2^(m-M), bit extraction per row and binary digit, normalization",
        MemoBackend::WindingNp => "exp generator, sawtooth winding, affine readout",
        MemoBackend::WindingRc => "reciprocal generator, sawtooth winding, affine readout",
    };
    let attention_stage = StageInfo {
        stage: "attention".into(),
        role: "single head, zero scores, column sum into bottom block".into(),
        depth: 1,
        width: 2 * d,
        activations: vec!["softmax".into()],
    };
    let manifest = Manifest {
        k,
        h,
        l: d * n,
        lambda_size: labels.entries.len() as u64,
        m_total: outer.m_total.to_string(),
        stages: vec![
            stage("sr_block", sr_role, &sr_block),
            attention_stage,
            stage("scale_seg", "scaling by 3^(Kdn) and per-column segmentation shift", &scale_seg),
            stage("outer_block", outer_role, &outer.block),
        ],
        flaw,
        winding: outer.winding,
        warnings,
    };
    Ok(TransformerPipeline { params, manifest, sr_block, attention, scale_seg, outer_block: outer.block })
}

/// Pipeline with weights lowered to one backend.
pub struct CompiledPipeline<T> {
    d: usize,
    n: usize,
    sr: LoweredBlock<T>,
    attention: LoweredAttention<T>,
    scale_seg: LoweredBlock<T>,
    outer: LoweredBlock<T>,
}

impl<T: Arith> CompiledPipeline<T> {
    pub fn inner_matrix(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let z2 = self.sr.eval(x)?;
        let z3 = self.attention.eval(&z2)?;
        self.scale_seg.eval(&z3)
    }

    pub fn eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.shape() != (self.d, self.n) {
            return Err(KstError::ShapeMismatch(format!(
                "pipeline expects {}x{}, got {}x{}",
                self.d,
                self.n,
                x.rows(),
                x.cols()
            )));
        }
        self.outer.eval(&self.inner_matrix(x)?)
    }
}

impl TransformerPipeline {
    pub fn compile<T: Arith>(&self) -> Result<CompiledPipeline<T>> {
        let bitpack = self.params.memo_backend == MemoBackend::Bitpack && self.params.g_range() > 0.0;
        if T::MODE == Mode::Float && bitpack {
            let m_total: u128 = self.manifest.m_total.parse().unwrap_or(u128::MAX);
            if m_total > 53 {
                return Err(KstError::ModeUnsupported(format!(
                    "the bitpack outer block packs {m_total} bits; float evaluation is only sound up to 53"
                )));
            }
        }
        Ok(CompiledPipeline {
            d: self.params.d,
            n: self.params.n,
            sr: self.sr_block.lower()?,
            attention: self.attention.lower()?,
            scale_seg: self.scale_seg.lower()?,
            outer: self.outer_block.lower()?,
        })
    }

    /// Exact whenever every stage allows it.
    pub fn preferred_mode(&self) -> Mode {
        let exact = self.sr_block.exact_capable()
            && self.outer_block.exact_capable()
            && self.scale_seg.exact_capable()
            && self.attention.has_zero_scores();
        if exact {
            Mode::Exact
        } else {
            Mode::Float
        }
    }

    /// Checks that the stored stages chain and match the recorded parameters.
    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.params.d, self.params.n);
        let shapes = [
            (self.sr_block.input_rows(), d),
            (self.sr_block.output_rows(), 2 * d),
            (self.attention.d_model(), 2 * d),
            (self.scale_seg.input_rows(), 2 * d),
            (self.scale_seg.output_rows(), d),
            (self.outer_block.input_rows(), d),
            (self.outer_block.output_rows(), d),
        ];
        if shapes.iter().any(|(got, want)| got != want)
            || [&self.sr_block, &self.scale_seg, &self.outer_block].iter().any(|b| b.n_columns() != n)
        {
            return Err(KstError::ShapeMismatch("pipeline stages do not chain as d x n -> 2d x n -> d x n".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| KstError::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: TransformerPipeline = serde_json::from_str(text).map_err(|e| KstError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// Evaluates many points in the preferred mode, in parallel, keeping order.
    pub fn eval_batch(&self, points: &[Matrix<f64>]) -> Result<Vec<Matrix<f64>>> {
        for x in points {
            check_domain_f64(x)?;
        }
        match self.preferred_mode() {
            Mode::Exact => {
                let c = self.compile::<BigRational>()?;
                points
                    .par_iter()
                    .map(|x| {
                        let exact = x.try_map(|v| f64_to_rational(*v))?;
                        Ok(c.eval(&exact)?.map(crate::scalar::rational_to_f64))
                    })
                    .collect()
            }
            Mode::Float => {
                let c = self.compile::<f64>()?;
                points.par_iter().map(|x| c.eval(x)).collect()
            }
        }
    }
}

fn check_domain_f64(x: &Matrix<f64>) -> Result<()> {
    match x.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        Some(bad) => Err(KstError::OutOfDomain(format!("input entry {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

pub fn eval_transformer(pipeline: &TransformerPipeline, x: &Matrix<Scalar>, mode: Mode) -> Result<Matrix<Scalar>> {
    for v in x.iter() {
        let f = v.to_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(KstError::OutOfDomain(format!("input entry {v} outside [0, 1]")));
        }
    }
    match mode {
        Mode::Exact => Ok(pipeline.compile::<BigRational>()?.eval(&x.read()?)?.into_scalars()),
        Mode::Float => Ok(pipeline.compile::<f64>()?.eval(&x.read()?)?.into_scalars()),
    }
}
