use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, AffineLayer, KeyedRng, Scalar, Tensor, Trans};

use super::{LoraAdapter, LORA_SCALE};

/// Tolerance on `Σ w_i = 1` for fusion weights.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Which adapters of one class to combine, and with what convex weights.
/// Adapters are referenced by their source image id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub class: usize,
    pub sources: Vec<u64>,
    pub weights: Vec<f64>,
}

impl FusionSpec {
    pub fn new(class: usize, sources: Vec<u64>, weights: Vec<f64>) -> Result<Self> {
        let spec = FusionSpec { class, sources, weights };
        spec.validate()?;
        Ok(spec)
    }

    pub fn singleton(class: usize, source: u64) -> Self {
        FusionSpec {
            class,
            sources: vec![source],
            weights: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidFusion("no adapters".into()));
        }
        if self.sources.len() != self.weights.len() {
            return Err(Error::InvalidFusion(format!(
                "{} adapters but {} weights",
                self.sources.len(),
                self.weights.len()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidFusion(format!("negative or non-finite weight {w}")));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidFusion(format!("weights sum to {sum}, not 1")));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if self.sources[..i].contains(s) {
                return Err(Error::InvalidFusion(format!("adapter {s} listed twice")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Adapters resolved from a [`FusionSpec`] together with their weights.
/// An empty mix means "base model".
#[derive(Clone, Debug)]
pub struct AdapterMix<'a, F = f32> {
    terms: Vec<(&'a LoraAdapter<F>, F)>,
}

impl<'a, F: Scalar> AdapterMix<'a, F> {
    pub fn empty() -> Self {
        AdapterMix { terms: Vec::new() }
    }

    pub fn single(adapter: &'a LoraAdapter<F>) -> Self {
        AdapterMix {
            terms: vec![(adapter, F::one())],
        }
    }

    /// All adapters must share rank and layer set.
    pub fn new(terms: Vec<(&'a LoraAdapter<F>, F)>) -> Result<Self> {
        if let Some((first, _)) = terms.first() {
            let shapes = first.shapes();
            for (a, _) in &terms[1..] {
                if a.rank() != first.rank() {
                    return Err(Error::InvalidFusion(format!("rank {} vs {}", a.rank(), first.rank())));
                }
                if a.shapes() != shapes {
                    return Err(Error::InvalidFusion("adapters cover different layer sets".into()));
                }
            }
        }
        Ok(AdapterMix { terms })
    }

    /// Resolves a spec against a pool of adapters, matching on class and
    /// source id.
    pub fn resolve(spec: &FusionSpec, pool: &'a [LoraAdapter<F>]) -> Result<Self> {
        spec.validate()?;
        let terms = spec
            .sources
            .iter()
            .zip(&spec.weights)
            .map(|(&src, &w)| {
                pool.iter()
                    .find(|a| a.source_id() == src && a.class() == spec.class)
                    .map(|a| (a, F::of(w)))
                    .ok_or_else(|| {
                        Error::InvalidFusion(format!("no adapter for class {} source {src}", spec.class))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(terms)
    }

    pub fn terms(&self) -> &[(&'a LoraAdapter<F>, F)] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Adds `Σ w_i · s · B_i (A_i x)` for the adapted layer at `layer_idx`
    /// to every row of `out`. Terms with weight exactly zero are skipped, so
    /// a one-hot mix computes the same floats as the singleton adapter.
    ///
    /// When `cache` is given it receives `A_i x` (`n × r`) per term.
    pub fn add_branches(
        &self,
        layer_idx: usize,
        x: &[F],
        n: usize,
        out: &mut [F],
        mut cache: Option<&mut Vec<Vec<F>>>,
    ) {
        if let Some(c) = cache.as_deref_mut() {
            c.clear();
        }
        for &(adapter, w) in &self.terms {
            let layer = &adapter.layers()[layer_idx];
            let (d_out, d_in, r) = (layer.d_out(), layer.d_in(), layer.rank());
            let mut u_all = if cache.is_some() { vec![F::zero(); n * r] } else { Vec::new() };
            if w != F::zero() {
                let coef = w * F::of(LORA_SCALE);
                let mut u = vec![F::zero(); r];
                for i in 0..n {
                    add_branch_row(layer, coef, &x[i * d_in..(i + 1) * d_in], &mut u, &mut out[i * d_out..(i + 1) * d_out]);
                    if cache.is_some() {
                        u_all[i * r..(i + 1) * r].copy_from_slice(&u);
                    }
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.push(u_all);
            }
        }
    }
}

#[inline]
pub(crate) fn add_branch_row<F: Scalar>(layer: &super::LoraLayer<F>, coef: F, x: &[F], u: &mut [F], out: &mut [F]) {
    let r = layer.rank();
    let d_in = layer.d_in();
    let a = layer.a.data();
    for (j, uj) in u.iter_mut().enumerate() {
        *uj = dot(&a[j * d_in..(j + 1) * d_in], x);
    }
    let b = layer.b.data();
    for (o, brow) in out.iter_mut().zip(b.chunks_exact(r)) {
        let mut acc = F::zero();
        for (bj, uj) in brow.iter().zip(u.iter()) {
            acc += *bj * *uj;
        }
        *o += coef * acc;
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn layer_index<F: Scalar>(adapter: &LoraAdapter<F>, name: &str) -> Result<usize> {
    adapter
        .layers()
        .iter()
        .position(|l| l.name == name)
        .ok_or_else(|| Error::UnknownLayer(name.to_owned()))
}

/// `h_out = W h_in + b + Σ_i w_i · s · B_i (A_i h_in)` for a batch of `n`
/// rows, evaluated branch-wise.
pub fn fused_forward<F: Scalar>(layer: &AffineLayer<F>, mix: &AdapterMix<'_, F>, h_in: &[F], n: usize) -> Result<Vec<F>> {
    let mut out = layer.forward(h_in, n)?;
    if let Some((first, _)) = mix.terms().first() {
        let idx = layer_index(first, layer.name())?;
        let f = &first.layers()[idx];
        if f.d_out() != layer.d_out() || f.d_in() != layer.d_in() {
            return Err(Error::shape(
                layer.name(),
                format!("{}x{}", layer.d_out(), layer.d_in()),
                format!("adapter {}x{}", f.d_out(), f.d_in()),
            ));
        }
        mix.add_branches(idx, h_in, n, &mut out, None);
    }
    Ok(out)
}

/// Dense `Σ_i w_i · s · B_i A_i` for one layer. Test oracle for the
/// branch-wise path; never used when generating.
pub fn materialize_delta<F: Scalar>(mix: &AdapterMix<'_, F>, layer_name: &str) -> Result<Tensor<F>> {
    let (first, _) = mix
        .terms()
        .first()
        .ok_or_else(|| Error::InvalidFusion("empty mix".into()))?;
    let idx = layer_index(first, layer_name)?;
    let l0 = &first.layers()[idx];
    let (d_out, d_in) = (l0.d_out(), l0.d_in());
    let mut delta = Tensor::zeros(vec![d_out, d_in]);
    for &(adapter, w) in mix.terms() {
        let l = &adapter.layers()[idx];
        gemm(
            Trans::No,
            Trans::No,
            d_out,
            d_in,
            l.rank(),
            w * F::of(LORA_SCALE),
            l.b.data(),
            l.a.data(),
            F::one(),
            delta.data_mut(),
        );
    }
    Ok(delta)
}

/// How fusion weights are chosen for each generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaSampler {
    /// Two adapters with weights `[λ, 1−λ]`.
    Fixed(f64),
    /// Two adapters, `λ ~ Beta(α, α)` drawn per image.
    Beta(f64),
    /// `k` distinct adapters with the given simplex weights.
    Explicit(Vec<f64>),
}

impl LambdaSampler {
    pub fn validate(&self) -> Result<()> {
        match self {
            LambdaSampler::Fixed(l) if !(0.0..=1.0).contains(l) => {
                Err(Error::InvalidArgument(format!("fixed lambda {l} outside [0, 1]")))
            }
            LambdaSampler::Beta(a) if !(*a > 0.0 && a.is_finite()) => {
                Err(Error::InvalidArgument(format!("beta concentration {a} must be positive")))
            }
            LambdaSampler::Explicit(w) => {
                if w.is_empty() || w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                    return Err(Error::InvalidArgument(format!("weight vector {w:?} not on the simplex")));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::InvalidArgument(format!("weight vector {w:?} sums to {sum}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Explicit weights whose sum is off by rounding (e.g. `[0.33, 0.33,
    /// 0.33]`) are rescaled onto the simplex; sums off by more than 2% are
    /// rejected.
    pub fn explicit_normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite()) || (sum - 1.0).abs() > 0.02 {
            return Err(Error::InvalidArgument(format!("weight vector {weights:?} sums to {sum}")));
        }
        let weights = if (sum - 1.0).abs() > SIMPLEX_TOL {
            weights.into_iter().map(|w| w / sum).collect()
        } else {
            weights
        };
        let s = LambdaSampler::Explicit(weights);
        s.validate()?;
        Ok(s)
    }
}

impl fmt::Display for LambdaSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaSampler::Fixed(l) => write!(f, "fixed:{l}"),
            LambdaSampler::Beta(a) => write!(f, "beta:{a}"),
            LambdaSampler::Explicit(w) => {
                let parts: Vec<String> = w.iter().map(|x| x.to_string()).collect();
                write!(f, "vec:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for LambdaSampler {
    type Err = Error;

    /// `fixed:0.5`, `beta:10`, or `vec:0.7,0.15,0.15`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse lambda sampler {s:?}"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        let sampler = match kind.trim() {
            "fixed" => LambdaSampler::Fixed(num(arg)?),
            "beta" => LambdaSampler::Beta(num(arg)?),
            "vec" => return LambdaSampler::explicit_normalized(arg.split(',').map(num).collect::<Result<_>>()?),
            _ => return Err(bad()),
        };
        sampler.validate()?;
        Ok(sampler)
    }
}

/// Picks the adapters and weights for one generated image.
///
/// `Fixed`/`Beta` pick an unordered pair of distinct adapters uniformly and
/// assign `[λ, 1−λ]` in random order; with a single adapter available the
/// singleton spec `[1]` is returned. `Explicit` of length `k` picks `k`
/// distinct adapters and needs at least `k` available.
pub fn sample_fusion<F: Scalar>(
    adapters: &[&LoraAdapter<F>],
    sampler: &LambdaSampler,
    rng: &mut KeyedRng,
) -> Result<FusionSpec> {
    sampler.validate()?;
    let first = adapters
        .first()
        .ok_or_else(|| Error::InvalidFusion("no adapters to fuse".into()))?;
    let class = first.class();
    if adapters.iter().any(|a| a.class() != class) {
        return Err(Error::InvalidFusion("adapters from different classes".into()));
    }
    let (picks, weights) = match sampler {
        LambdaSampler::Explicit(w) => {
            if w.len() > adapters.len() {
                return Err(Error::InvalidFusion(format!(
                    "weight vector of length {} but only {} adapters",
                    w.len(),
                    adapters.len()
                )));
            }
            (rng.choose_distinct(adapters.len(), w.len()), w.clone())
        }
        _ if adapters.len() == 1 => (vec![0], vec![1.0]),
        LambdaSampler::Fixed(l) => (rng.choose_distinct(adapters.len(), 2), vec![*l, 1.0 - l]),
        LambdaSampler::Beta(alpha) => {
            let pair = rng.choose_distinct(adapters.len(), 2);
            let l = rng.beta_symmetric(*alpha);
            (pair, vec![l, 1.0 - l])
        }
    };
    FusionSpec::new(class, picks.iter().map(|&i| adapters[i].source_id()).collect(), weights)
}
