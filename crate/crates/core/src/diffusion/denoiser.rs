use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{decode_model_header, encode_model, write_atomic};
use crate::error::{Error, Result};
use crate::lora::{AdapterMix, LayerShape, LoraAdapter, LORA_SCALE};
use crate::numerics::{gemm, Activation, AffineLayer, KeyedRng, LayerGrads, Scalar, Tensor, Trans};

use super::{make_schedule, NoiseSchedule};

/// Architecture of the class-conditional MLP denoiser, plus the diffusion
/// schedule it was trained with. Serialized as the checkpoint descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserArch {
    pub height: usize,
    pub width: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub time_features: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            height: 16,
            width: 16,
            hidden: 512,
            depth: 3,
            time_features: 32,
            num_classes: 6,
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl DenoiserArch {
    pub fn image_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn null_token(&self) -> usize {
        self.num_classes
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["in".to_owned()];
        names.extend((1..self.depth).map(|i| format!("h{i}")));
        names.push("out".to_owned());
        names
    }

    /// Every affine layer of the main stack (`in`, `h1…`, `out`); these are
    /// the layers adapters attach to. The time projection is not adapted.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let d = self.image_dim();
        self.layer_names()
            .into_iter()
            .enumerate()
            .map(|(i, name)| LayerShape {
                name,
                d_out: if i == self.depth { d } else { self.hidden },
                d_in: if i == 0 { d } else { self.hidden },
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.image_dim() == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(format!("degenerate denoiser architecture {self:?}")));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::InvalidArgument("time_features must be a positive even number".into()));
        }
        self.schedule().map(|_| ())
    }
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    #[serde(flatten)]
    arch: DenoiserArch,
}

/// How adapters enter a denoiser forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Adaptation<'a, F = f32> {
    Base,
    /// Same adapter mix on every row (fine-tuning).
    Shared(&'a AdapterMix<'a, F>),
    /// One mix per row (generation, where every image has its own fusion).
    PerRow(&'a [AdapterMix<'a, F>]),
}

/// Anything that predicts noise for a batch of noisy images. Implemented by
/// [`DenoiserWeights`] and by test stubs.
pub trait EpsModel: Sync {
    fn image_dim(&self) -> usize;
    fn num_classes(&self) -> usize;

    /// `z` is `n × image_dim`; `tokens[i] == num_classes()` selects the null
    /// (unconditional) embedding.
    fn predict(&self, z: &[f32], t: &[usize], tokens: &[usize], adapt: Adaptation<'_, f32>) -> Result<Vec<f32>>;
}

/// Parameters of the noise predictor `ε_θ(z_t, class, t)`.
///
/// `h0 = act(W_in z + b_in + W_time φ(t) + b_time + E[class])`, then `depth−1`
/// residual hidden layers `h ← h + act(W h + b)`, then a linear read-out plus
/// a linear shortcut `W_skip z + b_skip` from the input. `E` has `C + 1` rows; the last row
/// is the null token used for classifier-free guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserWeights<F = f32> {
    arch: DenoiserArch,
    class_embed: Tensor<F>,
    time: AffineLayer<F>,
    /// Linear shortcut from the noisy input to the output.
    skip: AffineLayer<F>,
    layers: Vec<AffineLayer<F>>,
}

/// Gradients of all base parameters.
#[derive(Clone, Debug)]
pub struct DenoiserGrads<F> {
    pub class_embed: Tensor<F>,
    pub time: LayerGrads<F>,
    pub skip: LayerGrads<F>,
    pub layers: Vec<LayerGrads<F>>,
}

impl<F: Scalar> DenoiserGrads<F> {
    /// Same order as [`DenoiserWeights::params_mut`].
    pub fn flatten(self) -> Vec<Tensor<F>> {
        let mut out = vec![
            self.class_embed,
            self.time.weight,
            self.time.bias,
            self.skip.weight,
            self.skip.bias,
        ];
        for l in self.layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        out
    }
}

/// Gradients of one adapter's factors, `[dB0, dA0, dB1, dA1, …]`.
#[derive(Clone, Debug)]
pub struct AdapterGrads<F> {
    pub layers: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> AdapterGrads<F> {
    pub fn flatten(self) -> Vec<Tensor<F>> {
        self.layers.into_iter().flat_map(|(b, a)| [b, a]).collect()
    }
}

/// What `loss_and_grads` should differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Base,
    Adapters,
    Both,
}

#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub base: Option<DenoiserGrads<F>>,
    /// One entry per term of the shared adapter mix.
    pub adapters: Vec<AdapterGrads<F>>,
}

/// A batch of noised training examples with its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyBatch<F = f32> {
    pub z_t: Vec<F>,
    pub eps: Vec<F>,
    pub t: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl<F: Scalar> NoisyBatch<F> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> NoisyBatch<G> {
        let c = |v: &[F]| v.iter().map(|&x| G::of(x.as_f64())).collect();
        NoisyBatch {
            z_t: c(&self.z_t),
            eps: c(&self.eps),
            t: self.t.clone(),
            tokens: self.tokens.clone(),
        }
    }
}

struct Trace<F> {
    n: usize,
    phi: Vec<F>,
    /// Input of every stack layer.
    inputs: Vec<Vec<F>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<F>>,
    output: Vec<F>,
    /// `A·x` per stack layer per shared-mix term.
    lora_u: Vec<Vec<Vec<F>>>,
}

/// Sinusoidal features of an integer timestep.
pub fn time_features<F: Scalar>(t: usize, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for i in 0..half {
        let freq = (-(1000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = F::of(arg.sin());
        out[half + i] = F::of(arg.cos());
    }
    out
}

impl<F: Scalar> DenoiserWeights<F> {
    pub fn init(arch: DenoiserArch, rng: &mut KeyedRng) -> Result<Self> {
        arch.validate()?;
        let class_embed = Tensor::from_fn(vec![arch.num_classes + 1, arch.hidden], |_| F::of(rng.normal()));
        let time = AffineLayer::init("time", arch.hidden, arch.time_features, rng);
        let skip = AffineLayer::init("skip", arch.image_dim(), arch.image_dim(), rng);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|s| AffineLayer::init(s.name, s.d_out, s.d_in, rng))
            .collect();
        Ok(DenoiserWeights {
            arch,
            class_embed,
            time,
            skip,
            layers,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn layers(&self) -> &[AffineLayer<F>] {
        &self.layers
    }

    pub fn class_embed(&self) -> &Tensor<F> {
        &self.class_embed
    }

    /// Parameters in declaration order: class table, time projection, then
    /// the stack layers (`weight`, `bias` each).
    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![
            &self.class_embed,
            self.time.weight(),
            self.time.bias(),
            self.skip.weight(),
            self.skip.bias(),
        ];
        for l in &self.layers {
            out.push(l.weight());
            out.push(l.bias());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let (tw, tb) = self.time.params_mut();
        let (sw, sb) = self.skip.params_mut();
        let mut out = vec![&mut self.class_embed, tw, tb, sw, sb];
        for l in &mut self.layers {
            let (w, b) = l.params_mut();
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["class_embed", "time.weight", "time.bias", "skip.weight", "skip.bias"]
            .map(String::from)
            .into();
        for l in &self.layers {
            out.push(format!("{}.weight", l.name()));
            out.push(format!("{}.bias", l.name()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserWeights<G> {
        DenoiserWeights {
            arch: self.arch.clone(),
            class_embed: self.class_embed.cast(),
            time: self.time.cast(),
            skip: self.skip.cast(),
            layers: self.layers.iter().map(AffineLayer::cast).collect(),
        }
    }

    fn check_mix(&self, mix: &AdapterMix<'_, F>) -> Result<()> {
        for (adapter, _) in mix.terms() {
            let ls = adapter.layers();
            if ls.len() != self.layers.len() {
                return Err(Error::InvalidFusion(format!(
                    "adapter covers {} layers, denoiser has {}",
                    ls.len(),
                    self.layers.len()
                )));
            }
            for (a, l) in ls.iter().zip(&self.layers) {
                if a.name != l.name() || a.d_out() != l.d_out() || a.d_in() != l.d_in() {
                    return Err(Error::UnknownLayer(a.name.clone()));
                }
            }
        }
        Ok(())
    }

    fn check_inputs(&self, z: &[F], t: &[usize], tokens: &[usize], adapt: &Adaptation<'_, F>) -> Result<usize> {
        let n = t.len();
        let d = self.arch.image_dim();
        if z.len() != n * d {
            return Err(Error::shape("in", format!("{n}x{d} noisy images"), format!("{} elements", z.len())));
        }
        if tokens.len() != n {
            return Err(Error::shape("class_embed", format!("{n} tokens"), tokens.len()));
        }
        if let Some(&bad) = tokens.iter().find(|&&c| c > self.arch.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.arch.num_classes,
            });
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > self.arch.timesteps) {
            return Err(Error::InvalidArgument(format!("timestep {bad} outside [1, {}]", self.arch.timesteps)));
        }
        match adapt {
            Adaptation::Base => {}
            Adaptation::Shared(m) => self.check_mix(m)?,
            Adaptation::PerRow(ms) => {
                if ms.len() != n {
                    return Err(Error::InvalidArgument(format!("{} row mixes for {n} rows", ms.len())));
                }
                for m in ms.iter() {
                    self.check_mix(m)?;
                }
            }
        }
        Ok(n)
    }

    /// Hidden-to-hidden layers carry an identity skip around their activation.
    fn is_residual(&self, idx: usize) -> bool {
        idx > 0 && idx + 1 < self.layers.len()
    }

    fn apply_branches(adapt: &Adaptation<'_, F>, idx: usize, x: &[F], n: usize, out: &mut [F], cache: &mut Vec<Vec<F>>) {
        match adapt {
            Adaptation::Base => {}
            Adaptation::Shared(m) => m.add_branches(idx, x, n, out, Some(cache)),
            Adaptation::PerRow(ms) => {
                let (d_in, d_out) = (x.len() / n, out.len() / n);
                for (i, m) in ms.iter().enumerate() {
                    m.add_branches(idx, &x[i * d_in..(i + 1) * d_in], 1, &mut out[i * d_out..(i + 1) * d_out], None);
                }
            }
        }
    }

    fn forward_trace(&self, z: &[F], t: &[usize], tokens: &[usize], adapt: Adaptation<'_, F>) -> Result<Trace<F>> {
        let n = self.check_inputs(z, t, tokens, &adapt)?;
        let act = Activation::Silu;
        let h = self.arch.hidden;
        let tf = self.arch.time_features;

        let mut phi = Vec::with_capacity(n * tf);
        for &s in t {
            phi.extend(time_features::<F>(s, tf));
        }

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.arch.depth);
        let mut lora_u = Vec::with_capacity(self.layers.len());
        let mut cur = z.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut a = vec![F::zero(); n * layer.d_out()];
            layer.forward_into(&cur, n, &mut a);
            let mut cache = Vec::new();
            Self::apply_branches(&adapt, idx, &cur, n, &mut a, &mut cache);
            lora_u.push(cache);
            if idx == 0 {
                let mut temb = vec![F::zero(); n * h];
                self.time.forward_into(&phi, n, &mut temb);
                let e = self.class_embed.data();
                for i in 0..n {
                    let row = &mut a[i * h..(i + 1) * h];
                    let erow = &e[tokens[i] * h..(tokens[i] + 1) * h];
                    for ((x, &te), &ce) in row.iter_mut().zip(&temb[i * h..(i + 1) * h]).zip(erow) {
                        *x += te + ce;
                    }
                }
            }
            if idx + 1 < self.layers.len() {
                let next = if self.is_residual(idx) {
                    a.iter().zip(&cur).map(|(&v, &skip)| act.apply(v) + skip).collect()
                } else {
                    a.iter().map(|&v| act.apply(v)).collect()
                };
                inputs.push(std::mem::replace(&mut cur, next));
                pre.push(a);
            } else {
                inputs.push(std::mem::replace(&mut cur, a));
            }
        }
        let mut shortcut = vec![F::zero(); n * self.skip.d_out()];
        self.skip.forward_into(z, n, &mut shortcut);
        for (y, s) in cur.iter_mut().zip(shortcut) {
            *y += s;
        }
        Ok(Trace {
            n,
            phi,
            inputs,
            pre,
            output: cur,
            lora_u,
        })
    }

    /// Predicted noise for `n` rows.
    pub fn forward(&self, z: &[F], t: &[usize], tokens: &[usize], adapt: Adaptation<'_, F>) -> Result<Vec<F>> {
        Ok(self.forward_trace(z, t, tokens, adapt)?.output)
    }

    /// Mean squared error between predicted and true noise over every
    /// element of the batch, with gradients for `target`.
    ///
    /// Adapter gradients require [`Adaptation::Shared`].
    pub fn loss_and_grads(
        &self,
        batch: &NoisyBatch<F>,
        adapt: Adaptation<'_, F>,
        target: GradTarget,
    ) -> Result<(F, Gradients<F>)> {
        if matches!(adapt, Adaptation::PerRow(_)) {
            return Err(Error::InvalidArgument("gradients need a shared adapter mix".into()));
        }
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let trace = self.forward_trace(&batch.z_t, &batch.t, &batch.tokens, adapt)?;
        let count = F::of(trace.output.len() as f64);
        let mut loss = F::zero();
        let d_out: Vec<F> = trace
            .output
            .iter()
            .zip(&batch.eps)
            .map(|(&y, &e)| {
                let r = y - e;
                loss += r * r;
                (r + r) / count
            })
            .collect();
        let grads = self.backward(&trace, &batch.tokens, d_out, adapt, target);
        Ok((loss / count, grads))
    }

    fn backward(
        &self,
        trace: &Trace<F>,
        tokens: &[usize],
        d_out: Vec<F>,
        adapt: Adaptation<'_, F>,
        target: GradTarget,
    ) -> Gradients<F> {
        let n = trace.n;
        let act = Activation::Silu;
        let want_base = matches!(target, GradTarget::Base | GradTarget::Both);
        let shared = match adapt {
            Adaptation::Shared(m) => Some(m),
            _ => None,
        };
        let want_adapters = target != GradTarget::Base;

        let mut base = want_base.then(|| DenoiserGrads {
            class_embed: Tensor::zeros(self.class_embed.shape().to_vec()),
            time: LayerGrads::zeros_like(&self.time),
            skip: LayerGrads::zeros_like(&self.skip),
            layers: self.layers.iter().map(LayerGrads::zeros_like).collect(),
        });
        let mut adapters: Vec<AdapterGrads<F>> = match (want_adapters, shared) {
            (true, Some(m)) => m
                .terms()
                .iter()
                .map(|(a, _)| AdapterGrads {
                    layers: a
                        .layers()
                        .iter()
                        .map(|l| (Tensor::zeros(l.b.shape().to_vec()), Tensor::zeros(l.a.shape().to_vec())))
                        .collect(),
                })
                .collect(),
            _ => Vec::new(),
        };

        if let Some(b) = base.as_mut() {
            self.skip.backward(&trace.inputs[0], &d_out, n, Some(&mut b.skip), None);
        }
        let mut delta = d_out;
        // Gradient w.r.t. the input of the layer above.
        let mut upper: Option<Vec<F>> = None;
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let x = &trace.inputs[idx];
            let (d_out, d_in) = (layer.d_out(), layer.d_in());
            let need_dx = idx > 0;

            let mut dx = if need_dx { vec![F::zero(); n * d_in] } else { Vec::new() };
            layer.backward(
                x,
                &delta,
                n,
                base.as_mut().map(|b| &mut b.layers[idx]),
                need_dx.then_some(dx.as_mut_slice()),
            );

            if let Some(mix) = shared {
                for (j, &(adapter, w)) in mix.terms().iter().enumerate() {
                    let coef = w * F::of(LORA_SCALE);
                    let l = &adapter.layers()[idx];
                    let r = l.rank();
                    let u = &trace.lora_u[idx][j];
                    let mut du = vec![F::zero(); n * r];
                    gemm(Trans::No, Trans::No, n, r, d_out, coef, &delta, l.b.data(), F::zero(), &mut du);
                    if let Some(g) = adapters.get_mut(j) {
                        let (db, da) = &mut g.layers[idx];
                        gemm(Trans::Yes, Trans::No, d_out, r, n, coef, &delta, u, F::one(), db.data_mut());
                        gemm(Trans::Yes, Trans::No, r, d_in, n, F::one(), &du, x, F::one(), da.data_mut());
                    }
                    if need_dx {
                        gemm(Trans::No, Trans::No, n, d_in, r, F::one(), &du, l.a.data(), F::one(), &mut dx);
                    }
                }
            }

            if idx == 0 {
                if let Some(b) = base.as_mut() {
                    self.time.backward(&trace.phi, &delta, n, Some(&mut b.time), None);
                    let h = self.arch.hidden;
                    let ge = b.class_embed.data_mut();
                    for (i, &tok) in tokens.iter().enumerate() {
                        for (g, &d) in ge[tok * h..(tok + 1) * h].iter_mut().zip(&delta[i * h..(i + 1) * h]) {
                            *g += d;
                        }
                    }
                }
            } else {
                if self.is_residual(idx) {
                    let g = upper.as_ref().expect("set by the layer above");
                    for (d, &gs) in dx.iter_mut().zip(g) {
                        *d += gs;
                    }
                }
                delta = dx.iter().zip(&trace.pre[idx - 1]).map(|(&d, &a)| d * act.derivative(a)).collect();
                upper = Some(dx);
            }
        }
        Gradients { base, adapters }
    }
}

impl DenoiserWeights<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let desc = Descriptor {
            kind: "denoiser".into(),
            arch: self.arch.clone(),
        };
        let params = self.params();
        let blobs: Vec<&[f32]> = params.iter().map(|p| p.data()).collect();
        encode_model(&desc, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (desc, mut r): (Descriptor, _) = decode_model_header(bytes)?;
        if desc.kind != "denoiser" {
            return Err(Error::Malformed(format!("expected a denoiser checkpoint, found {:?}", desc.kind)));
        }
        desc.arch.validate()?;
        // Shapes come from a throwaway init; only the shapes are used.
        let template = DenoiserWeights::<f32>::init(desc.arch.clone(), &mut crate::numerics::RngKey::new(0).stream())?;
        let mut weights = template;
        let names = weights.param_names();
        for (p, name) in weights.params_mut().into_iter().zip(names) {
            let data = r.f32s(p.len(), &name)?;
            p.data_mut().copy_from_slice(&data);
        }
        r.expect_end()?;
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the checkpoint bytes.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::content_hash(&self.to_bytes()?))
    }
}

impl EpsModel for DenoiserWeights<f32> {
    fn image_dim(&self) -> usize {
        self.arch.image_dim()
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn predict(&self, z: &[f32], t: &[usize], tokens: &[usize], adapt: Adaptation<'_, f32>) -> Result<Vec<f32>> {
        self.forward(z, t, tokens, adapt)
    }
}

/// Convenience for tests and tools: a zero-`B` adapter shaped for `weights`.
pub fn fresh_adapter<F: Scalar>(weights: &DenoiserWeights<F>, rank: usize, class: usize, source: u64, rng: &mut KeyedRng) -> Result<LoraAdapter<F>> {
    LoraAdapter::init(&weights.arch().layer_shapes(), rank, class, source, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngKey;

    fn small_arch() -> DenoiserArch {
        DenoiserArch {
            height: 3,
            width: 3,
            hidden: 8,
            depth: 2,
            time_features: 4,
            num_classes: 3,
            timesteps: 10,
            beta_start: 1e-3,
            beta_end: 0.1,
        }
    }

    #[test]
    fn layer_shapes_follow_arch() {
        let shapes = DenoiserArch::default().layer_shapes();
        let names: Vec<_> = shapes.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["in", "h1", "h2", "out"]);
        assert_eq!((shapes[0].d_out, shapes[0].d_in), (512, 256));
        assert_eq!((shapes[3].d_out, shapes[3].d_in), (256, 512));
    }

    #[test]
    fn rejects_bad_tokens_and_timesteps() {
        let w = DenoiserWeights::<f32>::init(small_arch(), &mut RngKey::new(0).stream()).unwrap();
        let z = vec![0.0; 9];
        assert!(w.forward(&z, &[1], &[3], Adaptation::Base).is_ok());
        assert!(matches!(
            w.forward(&z, &[1], &[4], Adaptation::Base),
            Err(Error::LabelOutOfRange { label: 4, .. })
        ));
        assert!(w.forward(&z, &[0], &[0], Adaptation::Base).is_err());
        assert!(w.forward(&z, &[11], &[0], Adaptation::Base).is_err());
        assert!(w.forward(&z[..8], &[1], &[0], Adaptation::Base).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_lossless() {
        let w = DenoiserWeights::<f32>::init(small_arch(), &mut RngKey::new(3).stream()).unwrap();
        let bytes = w.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LFTM");
        let back = DenoiserWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(matches!(
            DenoiserWeights::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::UnexpectedEof(_))
        ));
    }

    #[test]
    fn fresh_adapter_is_bitwise_neutral() {
        let w = DenoiserWeights::<f32>::init(small_arch(), &mut RngKey::new(4).stream()).unwrap();
        let a = fresh_adapter(&w, 2, 0, 0, &mut RngKey::new(5).stream()).unwrap();
        let mut rng = RngKey::new(6).stream();
        let z: Vec<f32> = (0..27).map(|_| rng.normal_f32()).collect();
        let t = [1, 5, 10];
        let tok = [0, 1, 3];
        let base = w.forward(&z, &t, &tok, Adaptation::Base).unwrap();
        let mix = AdapterMix::single(&a);
        let shared = w.forward(&z, &t, &tok, Adaptation::Shared(&mix)).unwrap();
        let rows = vec![mix.clone(), mix.clone(), mix.clone()];
        let per_row = w.forward(&z, &t, &tok, Adaptation::PerRow(&rows)).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&base), bits(&shared));
        assert_eq!(bits(&base), bits(&per_row));
    }
}
