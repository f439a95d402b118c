//! Low-rank adapters attached to every projection site of the model.
//!
//! Each site carries `A ∈ R^{r×d_in}` and `B ∈ R^{d_out×r}` and contributes
//! `(α/r)·B·A·x` on top of the frozen `W_0·x`. With `B = 0` at
//! initialization the adapted model reproduces the base model exactly.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Param, Site};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const A_INIT_STD: f64 = 0.02;

/// Model dimensions an adapter set was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDims {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl AdapterDims {
    pub fn of(config: &ModelConfig) -> Self {
        AdapterDims {
            n_layers: config.n_layers,
            d_model: config.d_model,
            d_ff: config.d_ff,
        }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let want = AdapterDims::of(config);
        if *self != want {
            return Err(Error::Config(format!(
                "adapters built for {self:?}, model has {want:?}"
            )));
        }
        Ok(())
    }

    /// `(d_out, d_in)` of the wrapped weight at `site`.
    pub fn site_dims(&self, site: Site) -> (usize, usize) {
        let (d, ff) = (self.d_model, self.d_ff);
        match site {
            Site::Q | Site::K | Site::V | Site::O => (d, d),
            Site::Gate | Site::Up => (ff, d),
            Site::Down => (d, ff),
        }
    }
}

/// A `(layer, site)` address of one weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentId {
    pub layer: usize,
    pub site: Site,
}

impl ComponentId {
    pub fn new(layer: usize, site: Site) -> Self {
        ComponentId { layer, site }
    }

    /// All components of an `n_layers` model, layer-major in site order.
    pub fn all(n_layers: usize) -> Vec<ComponentId> {
        (0..n_layers)
            .flat_map(|l| Site::ALL.map(|s| ComponentId::new(l, s)))
            .collect()
    }

    pub fn flat_index(&self) -> usize {
        self.layer * Site::ALL.len() + self.site.index()
    }
}

impl std::fmt::Display for ComponentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}.{}", self.layer, self.site)
    }
}

#[derive(Clone)]
pub struct LoraSite<T> {
    pub layer: usize,
    pub site: Site,
    /// `[r × d_in]`
    pub a: Param<T>,
    /// `[d_out × r]`
    pub b: Param<T>,
}

impl<T: Scalar> LoraSite<T> {
    pub fn id(&self) -> ComponentId {
        ComponentId::new(self.layer, self.site)
    }

    /// `(α/r)·B·A`, shaped like the wrapped weight.
    pub fn effective_update(&self, alpha: f64, rank: usize) -> Tensor<T> {
        let ba = self
            .b
            .matmul(&self.a)
            .expect("adapter factor shapes are validated");
        ba.scaled(T::lit(alpha / rank as f64))
    }
}

#[derive(Clone)]
pub struct LoraAdapterSet<T> {
    dims: AdapterDims,
    rank: usize,
    alpha: f64,
    task_label: String,
    /// Layer-major, then [`Site::ALL`] order.
    sites: Vec<LoraSite<T>>,
}

/// Graph handles for an adapter set, produced by [`LoraAdapterSet::bind`].
#[derive(Debug, Clone)]
pub struct AdapterVars<T> {
    pub scale: T,
    /// `(A, B)` per component in canonical order.
    pub factors: Vec<(Var, Var)>,
}

impl<T: Scalar> AdapterVars<T> {
    pub fn site(&self, layer: usize, site: Site) -> (Var, Var) {
        self.factors[ComponentId::new(layer, site).flat_index()]
    }

    /// Every factor handle, A before B, in canonical order.
    pub fn all(&self) -> Vec<Var> {
        self.factors.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

impl<T: Scalar> LoraAdapterSet<T> {
    /// Fresh adapters: `B = 0`, `A ~ N(0, 0.02²)`.
    pub fn init(config: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let dims = AdapterDims::of(config);
        Self::validate(dims, rank, alpha)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = ComponentId::all(dims.n_layers)
            .into_iter()
            .map(|c| {
                let (o, i) = dims.site_dims(c.site);
                LoraSite {
                    layer: c.layer,
                    site: c.site,
                    a: Arc::new(Tensor::randn(&[rank, i], A_INIT_STD, &mut rng)),
                    b: Arc::new(Tensor::zeros(&[o, rank])),
                }
            })
            .collect();
        Ok(LoraAdapterSet {
            dims,
            rank,
            alpha,
            task_label: String::new(),
            sites,
        })
    }

    fn validate(dims: AdapterDims, rank: usize, alpha: f64) -> Result<()> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !alpha.is_finite() {
            return Err(Error::Config(format!(
                "adapter alpha {alpha} is not finite"
            )));
        }
        for s in Site::ALL {
            let (o, i) = dims.site_dims(s);
            if rank > o.min(i) {
                return Err(Error::Config(format!(
                    "rank {rank} exceeds min(d_in, d_out) = {} at site {s}",
                    o.min(i)
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds a set from named factors as produced by
    /// [`LoraAdapterSet::named_tensors`].
    pub fn from_named(
        dims: AdapterDims,
        rank: usize,
        alpha: f64,
        task_label: String,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        Self::validate(dims, rank, alpha)?;
        let ids = ComponentId::all(dims.n_layers);
        if named.len() != 2 * ids.len() {
            return Err(Error::Corruption(format!(
                "expected {} adapter tensors, found {}",
                2 * ids.len(),
                named.len()
            )));
        }
        let mut it = named.into_iter();
        let mut sites = Vec::with_capacity(ids.len());
        for c in ids {
            let (o, i) = dims.site_dims(c.site);
            let mut take = |suffix: &str, shape: [usize; 2]| -> Result<Param<T>> {
                let (name, t) = it.next().expect("length checked");
                let want = format!("{}.{}", Self::site_name(c), suffix);
                if name != want || t.shape() != shape {
                    return Err(Error::Corruption(format!(
                        "tensor {name} {:?} does not match expected {want} {shape:?}",
                        t.shape()
                    )));
                }
                Ok(Arc::new(t))
            };
            let a = take("a", [rank, i])?;
            let b = take("b", [o, rank])?;
            sites.push(LoraSite {
                layer: c.layer,
                site: c.site,
                a,
                b,
            });
        }
        Ok(LoraAdapterSet {
            dims,
            rank,
            alpha,
            task_label,
            sites,
        })
    }

    fn site_name(c: ComponentId) -> String {
        format!("layers.{}.{}", c.layer, c.site)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.sites
            .iter()
            .flat_map(|s| {
                let base = Self::site_name(s.id());
                [(format!("{base}.a"), &*s.a), (format!("{base}.b"), &*s.b)]
            })
            .collect()
    }

    pub fn dims(&self) -> AdapterDims {
        self.dims
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The `α/r` factor applied to every low-rank product.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn task_label(&self) -> &str {
        &self.task_label
    }

    pub fn set_task_label(&mut self, label: impl Into<String>) {
        self.task_label = label.into();
    }

    pub fn sites(&self) -> &[LoraSite<T>] {
        &self.sites
    }

    pub fn sites_mut(&mut self) -> &mut [LoraSite<T>] {
        &mut self.sites
    }

    pub fn site(&self, layer: usize, site: Site) -> &LoraSite<T> {
        &self.sites[ComponentId::new(layer, site).flat_index()]
    }

    pub fn effective_update(&self, layer: usize, site: Site) -> Tensor<T> {
        self.site(layer, site)
            .effective_update(self.alpha, self.rank)
    }

    /// Number of scalars across all factors.
    pub fn n_params(&self) -> usize {
        self.sites.iter().map(|s| s.a.numel() + s.b.numel()).sum()
    }

    /// All factors as one vector: layer-major, site order, A before B,
    /// row-major within each matrix.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        for s in &self.sites {
            out.extend_from_slice(s.a.data());
            out.extend_from_slice(s.b.data());
        }
        out
    }

    /// Inverse of [`LoraAdapterSet::flatten`] for a set with the same
    /// dimensions, rank and scale as `self`.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::Config(format!(
                "flat vector has {} entries, adapters need {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut out = self.clone();
        let mut pos = 0;
        for s in &mut out.sites {
            for p in [&mut s.a, &mut s.b] {
                let n = p.numel();
                Arc::make_mut(p)
                    .data_mut()
                    .copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        Ok(out)
    }

    /// Copy in which every component outside `keep` has zero factors.
    pub fn restricted_to(&self, keep: &[ComponentId]) -> Self {
        let mut out = self.clone();
        for s in &mut out.sites {
            if !keep.contains(&s.id()) {
                s.a = Arc::new(Tensor::zeros(s.a.shape()));
                s.b = Arc::new(Tensor::zeros(s.b.shape()));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapterSet<U> {
        LoraAdapterSet {
            dims: self.dims,
            rank: self.rank,
            alpha: self.alpha,
            task_label: self.task_label.clone(),
            sites: self
                .sites
                .iter()
                .map(|s| LoraSite {
                    layer: s.layer,
                    site: s.site,
                    a: Arc::new(s.a.cast()),
                    b: Arc::new(s.b.cast()),
                })
                .collect(),
        }
    }

    /// Records every factor on `g`, checking the set fits `config`.
    pub fn bind(
        &self,
        g: &mut Graph<T>,
        trainable: bool,
        config: &ModelConfig,
    ) -> Result<AdapterVars<T>> {
        self.dims.check(config)?;
        let factors = self
            .sites
            .iter()
            .map(|s| {
                (
                    g.leaf(Arc::clone(&s.a), trainable),
                    g.leaf(Arc::clone(&s.b), trainable),
                )
            })
            .collect();
        Ok(AdapterVars {
            scale: T::lit(self.scale()),
            factors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_zeroes_b_and_is_seeded() {
        let a = LoraAdapterSet::<f32>::init(&cfg(), 2, 16.0, 3).unwrap();
        let b = LoraAdapterSet::<f32>::init(&cfg(), 2, 16.0, 3).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert!(a
            .sites()
            .iter()
            .all(|s| s.b.data().iter().all(|&x| x == 0.0)));
        assert_eq!(a.scale(), 8.0);
        let c = LoraAdapterSet::<f32>::init(&cfg(), 2, 16.0, 4).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn rank_bounds() {
        assert!(matches!(
            LoraAdapterSet::<f32>::init(&cfg(), 0, 1.0, 0),
            Err(Error::Config(_))
        ));
        assert!(LoraAdapterSet::<f32>::init(&cfg(), 8, 1.0, 0).is_ok());
        assert!(matches!(
            LoraAdapterSet::<f32>::init(&cfg(), 9, 1.0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn outer_product_update() {
        let c = ModelConfig {
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_ff: 2,
            ..ModelConfig::default()
        };
        let mut ad = LoraAdapterSet::<f64>::init(&c, 1, 1.0, 0).unwrap();
        let s = &mut ad.sites_mut()[0];
        s.a = Arc::new(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        s.b = Arc::new(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        assert_eq!(
            ad.effective_update(0, Site::Q).data(),
            &[3.0, 6.0, 4.0, 8.0]
        );
        assert!(ad
            .effective_update(0, Site::K)
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn flatten_length_and_zero_count() {
        let ad = LoraAdapterSet::<f32>::init(&ModelConfig::default(), 2, 16.0, 0).unwrap();
        // per layer: q,k,v,o are 2·(64+64); gate, up, down are 2·(64+128)
        assert_eq!(ad.flatten().len(), 4 * (4 * 256 + 3 * 384));
        let b_entries: usize = ad.sites().iter().map(|s| s.b.numel()).sum();
        let zeros = ad.flatten().iter().filter(|&&x| x == 0.0).count();
        assert_eq!(zeros, b_entries);
    }

    #[test]
    fn unflatten_inverts_flatten() {
        let ad = LoraAdapterSet::<f64>::init(&cfg(), 2, 4.0, 1).unwrap();
        let mut flat = ad.flatten();
        flat[17] = 5.0;
        let back = ad.unflatten(&flat).unwrap();
        let diff: Vec<usize> = back
            .flatten()
            .iter()
            .zip(ad.flatten())
            .enumerate()
            .filter(|(_, (x, y))| **x != *y)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(diff, vec![17]);
        assert!(ad.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn restriction_zeroes_other_components() {
        let ad = LoraAdapterSet::<f64>::init(&cfg(), 2, 4.0, 1).unwrap();
        let keep = [ComponentId::new(1, Site::Up)];
        let r = ad.restricted_to(&keep);
        for s in r.sites() {
            let nz = s.a.data().iter().any(|&x| x != 0.0);
            assert_eq!(nz, keep.contains(&s.id()));
        }
    }

    #[test]
    fn bind_rejects_mismatched_model() {
        let ad = LoraAdapterSet::<f64>::init(&cfg(), 2, 4.0, 1).unwrap();
        let mut g = Graph::new();
        let other = ModelConfig {
            n_layers: 3,
            ..cfg()
        };
        assert!(matches!(
            ad.bind(&mut g, false, &other),
            Err(Error::Config(_))
        ));
    }
}
