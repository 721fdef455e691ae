//! Parameter layout of the query-embedding model.
//!
//! | group                              | shape      |
//! |------------------------------------|------------|
//! | `entity.axis`                      | `|E| x d`  |
//! | `relation.raw_axis`                | `|R| x d`  |
//! | `relation.raw_aperture`            | `|R| x d`  |
//! | `relation.se_scale`, `.se_shift`   | `|R| x 1`  |
//! | `intersection.attention.{l}.*`     | `2d→d→d`, no output bias |
//! | `intersection.deepsets_inner.{l}.*`| `2d→d→d`   |
//! | `intersection.deepsets_outer.{l}.*`| `d→d→d`    |
//! | `projection.{l}.*` (base only)     | `2d→d→2d`  |
//!
//! Entities are points: only their axis angles are learned.

use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::diff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{ConeBatch, RelationRotation};
use crate::operators::{IntersectionNet, Linear, Mlp, MlpSpec, Variant};

/// Target initial aperture rotation of every relation.
pub const INITIAL_RELATION_APERTURE: f64 = 0.1;

/// Half-width of the uniform jitter added to the initial raw aperture and to
/// the sigmoid-expansion scale (around 1) and shift (around 0), so different
/// relations never start with exactly equal apertures. Equal apertures would
/// put every intersection on the kink of its minimum.
const APERTURE_JITTER: f64 = 0.05;

/// Sizes fixing the parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub entities: usize,
    pub relations: usize,
    pub dim: usize,
    pub variant: Variant,
}

/// Weight and bias ids of each layer of one perceptron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpIds {
    pub layers: Vec<(ParamId, Option<ParamId>)>,
}

/// Resolved parameter ids for a store laid out by [`init_store`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub entity: ParamId,
    pub rel_axis: ParamId,
    pub rel_aperture: ParamId,
    pub se_scale: ParamId,
    pub se_shift: ParamId,
    pub attention: MlpIds,
    pub deepsets_inner: MlpIds,
    pub deepsets_outer: MlpIds,
    pub projection: Option<MlpIds>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

fn register_mlp(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, rng: &mut impl Rng) -> Result<MlpIds> {
    let mut layers = Vec::new();
    let last = spec.widths.len() - 2;
    for (l, w) in spec.widths.windows(2).enumerate() {
        let bound = 1.0 / (w[0] as f64).sqrt();
        let weight = store.register(&format!("{prefix}.{l}.weight"), uniform(rng, w[0], w[1], -bound, bound))?;
        let bias = if l < last || spec.output_bias {
            Some(store.register(&format!("{prefix}.{l}.bias"), uniform(rng, 1, w[1], -bound, bound))?)
        } else {
            None
        };
        layers.push((weight, bias));
    }
    Ok(MlpIds { layers })
}

fn resolve_mlp(store: &ParamStore, prefix: &str, spec: &MlpSpec) -> Result<MlpIds> {
    let mut layers = Vec::new();
    let last = spec.widths.len() - 2;
    for (l, w) in spec.widths.windows(2).enumerate() {
        let weight = store.require(&format!("{prefix}.{l}.weight"))?;
        expect_shape(store, weight, (w[0], w[1]))?;
        let bias = if l < last || spec.output_bias {
            let bias = store.require(&format!("{prefix}.{l}.bias"))?;
            expect_shape(store, bias, (1, w[1]))?;
            Some(bias)
        } else {
            None
        };
        layers.push((weight, bias));
    }
    Ok(MlpIds { layers })
}

fn expect_shape(store: &ParamStore, id: ParamId, shape: (usize, usize)) -> Result<()> {
    let got = store.value(id).shape();
    if got != shape {
        return Err(Error::Data(format!(
            "parameter '{}' has shape {}x{}, expected {}x{}",
            store.name(id),
            got.0,
            got.1,
            shape.0,
            shape.1
        )));
    }
    Ok(())
}

/// Fresh parameters.
///
/// Entity and relation axis angles are uniform in `[-π, π)`; the raw relation
/// aperture starts near the logit giving [`INITIAL_RELATION_APERTURE`]; network
/// weights and biases are uniform in `±1/√fan_in`.
pub fn init_store(shape: ModelShape, rng: &mut impl Rng) -> Result<(ParamStore, ModelParams)> {
    if shape.entities == 0 || shape.relations == 0 || shape.dim == 0 {
        return Err(Error::Config(format!("empty model shape {shape:?}")));
    }
    let ModelShape { entities: ne, relations: nr, dim: d, .. } = shape;
    let mut store = ParamStore::new();
    store.register("entity.axis", uniform(rng, ne, d, -PI, PI))?;
    store.register("relation.raw_axis", uniform(rng, nr, d, -PI, PI))?;
    let p = INITIAL_RELATION_APERTURE / TAU;
    let logit = (p / (1.0 - p)).ln();
    store.register("relation.raw_aperture", uniform(rng, nr, d, logit - APERTURE_JITTER, logit + APERTURE_JITTER))?;
    store.register("relation.se_scale", uniform(rng, nr, 1, 1.0 - APERTURE_JITTER, 1.0 + APERTURE_JITTER))?;
    store.register("relation.se_shift", uniform(rng, nr, 1, -APERTURE_JITTER, APERTURE_JITTER))?;
    register_mlp(&mut store, "intersection.attention", &MlpSpec::attention(d), rng)?;
    register_mlp(&mut store, "intersection.deepsets_inner", &MlpSpec::pair_to_dim(d), rng)?;
    register_mlp(&mut store, "intersection.deepsets_outer", &MlpSpec::dim_to_dim(d), rng)?;
    if shape.variant == Variant::Base {
        register_mlp(&mut store, "projection", &MlpSpec::pair_to_pair(d), rng)?;
    }
    let params = ModelParams::resolve(&store, shape.variant)?;
    Ok((store, params))
}

impl ModelParams {
    /// Looks up and shape-checks every group, e.g. after loading a checkpoint.
    pub fn resolve(store: &ParamStore, variant: Variant) -> Result<Self> {
        let entity = store.require("entity.axis")?;
        let rel_axis = store.require("relation.raw_axis")?;
        let (entities, dim) = store.value(entity).shape();
        let relations = store.value(rel_axis).rows();
        expect_shape(store, rel_axis, (relations, dim))?;
        let rel_aperture = store.require("relation.raw_aperture")?;
        expect_shape(store, rel_aperture, (relations, dim))?;
        let se_scale = store.require("relation.se_scale")?;
        expect_shape(store, se_scale, (relations, 1))?;
        let se_shift = store.require("relation.se_shift")?;
        expect_shape(store, se_shift, (relations, 1))?;
        let projection = if variant == Variant::Base {
            Some(resolve_mlp(store, "projection", &MlpSpec::pair_to_pair(dim))?)
        } else {
            None
        };
        Ok(Self {
            shape: ModelShape { entities, relations, dim, variant },
            entity,
            rel_axis,
            rel_aperture,
            se_scale,
            se_shift,
            attention: resolve_mlp(store, "intersection.attention", &MlpSpec::attention(dim))?,
            deepsets_inner: resolve_mlp(store, "intersection.deepsets_inner", &MlpSpec::pair_to_dim(dim))?,
            deepsets_outer: resolve_mlp(store, "intersection.deepsets_outer", &MlpSpec::dim_to_dim(dim))?,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn variant(&self) -> Variant {
        self.shape.variant
    }

    fn check_entity(&self, e: usize) -> Result<()> {
        if e >= self.shape.entities {
            return Err(Error::Data(format!("entity {e} out of range ({} entities)", self.shape.entities)));
        }
        Ok(())
    }

    /// Point cone of an entity.
    pub fn entity_cone(&self, store: &ParamStore, e: usize) -> Result<ConeBatch> {
        self.check_entity(e)?;
        ConeBatch::point(store.value(self.entity).row_slice(e).to_vec())
    }

    /// Raw axis angles of an entity (not snapped to the cone grid).
    pub fn entity_axis<'a>(&self, store: &'a ParamStore, e: usize) -> Result<&'a [f64]> {
        self.check_entity(e)?;
        Ok(store.value(self.entity).row_slice(e))
    }

    pub fn relation(&self, store: &ParamStore, r: usize) -> Result<RelationRotation> {
        if r >= self.shape.relations {
            return Err(Error::Data(format!("relation {r} out of range ({} relations)", self.shape.relations)));
        }
        let mut rot = RelationRotation::from_raw(
            store.value(self.rel_axis).row_slice(r).to_vec(),
            store.value(self.rel_aperture).row_slice(r).to_vec(),
        )?;
        rot.se_scale = store.value(self.se_scale).get(r, 0);
        rot.se_shift = store.value(self.se_shift).get(r, 0);
        Ok(rot)
    }

    pub fn mlp(store: &ParamStore, ids: &MlpIds) -> Mlp {
        Mlp {
            layers: ids
                .layers
                .iter()
                .map(|&(w, b)| {
                    let weight = store.value(w).clone();
                    let bias = b.map_or_else(|| Tensor::zeros(1, weight.cols()), |b| store.value(b).clone());
                    Linear { weight, bias }
                })
                .collect(),
        }
    }

    pub fn intersection_net(&self, store: &ParamStore) -> IntersectionNet {
        IntersectionNet {
            attention: Self::mlp(store, &self.attention),
            deepsets_inner: Self::mlp(store, &self.deepsets_inner),
            deepsets_outer: Self::mlp(store, &self.deepsets_outer),
        }
    }

    pub fn projection_net(&self, store: &ParamStore) -> Option<Mlp> {
        self.projection.as_ref().map(|ids| Self::mlp(store, ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ModelShape { entities: 5, relations: 3, dim: 4, variant: Variant::Rotate };
        let (store, p) = init_store(shape, &mut rng).unwrap();
        assert_eq!(store.value(p.entity).shape(), (5, 4));
        assert!(store.value(p.entity).data().iter().all(|a| (-PI..PI).contains(a)));
        assert!(p.projection.is_none());
        let r = p.relation(&store, 2).unwrap();
        for &a in r.aperture() {
            assert!((a - INITIAL_RELATION_APERTURE).abs() < 0.01);
        }
        let w = store.value(p.attention.layers[0].0);
        assert_eq!(w.shape(), (8, 4));
        let bound = 1.0 / 8f64.sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
        assert!(p.relation(&store, 3).is_err());
        assert!(p.entity_cone(&store, 5).is_err());
    }

    #[test]
    fn base_variant_adds_projection_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ModelShape { entities: 2, relations: 1, dim: 3, variant: Variant::Base };
        let (store, p) = init_store(shape, &mut rng).unwrap();
        let net = p.projection_net(&store).unwrap();
        assert_eq!(net.input_width(), 6);
        assert!(ModelParams::resolve(&store, Variant::Rotate).is_ok());
    }

    #[test]
    fn same_seed_same_store() {
        let shape = ModelShape { entities: 4, relations: 2, dim: 3, variant: Variant::SigmoidExpand };
        let a = init_store(shape, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        let b = init_store(shape, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        assert_eq!(a, b);
    }
}
