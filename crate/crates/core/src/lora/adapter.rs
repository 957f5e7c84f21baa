use crate::error::{Error, Result};
use crate::numerics::{KeyedRng, Scalar, Tensor};

/// Multiplier on every `B·A` product. Fixed at 1 (no alpha/rank rescaling).
pub const LORA_SCALE: f64 = 1.0;

/// Source id recorded for adapters fitted on a whole class rather than one image.
pub const CLASS_SOURCE_ID: u64 = u64::MAX;

/// Shape of one adaptable affine layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
}

/// Low-rank factors for one layer: `ΔW = B·A` with `B: d_out×r`, `A: r×d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<F = f32> {
    pub name: String,
    pub b: Tensor<F>,
    pub a: Tensor<F>,
}

impl<F: Scalar> LoraLayer<F> {
    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }
}

/// A set of low-rank factors over the adapted layers of one denoiser, tied
/// to the real image (or class) it was fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F = f32> {
    class: usize,
    source_id: u64,
    rank: usize,
    layers: Vec<LoraLayer<F>>,
}

impl<F: Scalar> LoraAdapter<F> {
    pub fn new(class: usize, source_id: u64, rank: usize, layers: Vec<LoraLayer<F>>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("LoRA rank must be at least 1".into()));
        }
        for l in &layers {
            let (bo, br) = l.b.dims2();
            let (ar, ai) = l.a.dims2();
            if br != rank || ar != rank {
                return Err(Error::shape(&l.name, format!("rank {rank} factors"), format!("B {bo}x{br}, A {ar}x{ai}")));
            }
            if rank > bo.min(ai) {
                return Err(Error::RankTooLarge {
                    layer: l.name.clone(),
                    rank,
                    d_out: bo,
                    d_in: ai,
                });
            }
        }
        Ok(LoraAdapter {
            class,
            source_id,
            rank,
            layers,
        })
    }

    /// Fresh adapter: `B = 0` and `A ~ N(0, 1/d_in)`, so `ΔW = 0` exactly.
    pub fn init(shapes: &[LayerShape], rank: usize, class: usize, source_id: u64, rng: &mut KeyedRng) -> Result<Self> {
        let layers = shapes
            .iter()
            .map(|s| {
                if rank == 0 || rank > s.d_out.min(s.d_in) {
                    return Err(Error::RankTooLarge {
                        layer: s.name.clone(),
                        rank,
                        d_out: s.d_out,
                        d_in: s.d_in,
                    });
                }
                let std = (1.0 / s.d_in as f64).sqrt();
                Ok(LoraLayer {
                    name: s.name.clone(),
                    b: Tensor::zeros(vec![s.d_out, rank]),
                    a: Tensor::from_fn(vec![rank, s.d_in], |_| F::of(rng.normal() * std)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(class, source_id, rank, layers)
    }

    pub fn class(&self) -> usize {
        self.class
    }

    /// Id of the real image this adapter was fitted on ([`CLASS_SOURCE_ID`]
    /// for per-class adapters). Unique within one class's adapter set.
    pub fn source_id(&self) -> u64 {
        self.source_id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layers(&self) -> &[LoraLayer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LoraLayer<F>] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LoraLayer<F>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape {
                name: l.name.clone(),
                d_out: l.d_out(),
                d_in: l.d_in(),
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }

    /// Factors in `[B0, A0, B1, A1, …]` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.b, &mut l.a]).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [format!("{}.lora_b", l.name), format!("{}.lora_a", l.name)])
            .collect()
    }

    pub fn is_fresh(&self) -> bool {
        self.layers.iter().all(|l| l.b.data().iter().all(|&x| x == F::zero()))
    }

    pub fn cast<G: Scalar>(&self) -> LoraAdapter<G> {
        LoraAdapter {
            class: self.class,
            source_id: self.source_id,
            rank: self.rank,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    name: l.name.clone(),
                    b: l.b.cast(),
                    a: l.a.cast(),
                })
                .collect(),
        }
    }
}
