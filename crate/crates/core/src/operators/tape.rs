//! Differentiable operators on a [`Graph`].
//!
//! A [`ConeVar`] holds a batch of cones as two `B x d` tensors. Angles on the
//! tape are not snapped to the grid used by [`ConeBatch`]; wrapping has unit
//! derivative.
//!
//! [`ConeBatch`]: crate::geometry::ConeBatch

use std::f64::consts::{PI, TAU};

use super::{InsideDistance, Variant};
use crate::diff::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{MlpIds, ModelParams};

/// Batch of cones on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConeVar {
    pub axis: Var,
    pub aperture: Var,
}

/// Whether a degenerate circular mean is nudged (training) or reported (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Train,
    Infer,
}

/// Perturbation added to a zero resultant during training.
pub const DEGENERATE_NUDGE: f64 = 1e-12;

pub fn mlp<T: Real>(g: &mut Graph<T>, store: &ParamStore, ids: &MlpIds, x: Var) -> Result<Var> {
    let mut h = x;
    for (l, &(w, b)) in ids.layers.iter().enumerate() {
        let wv = g.param(store, w);
        h = g.matmul(h, wv)?;
        if let Some(b) = b {
            let bv = g.param(store, b);
            h = g.add(h, bv)?;
        }
        if l + 1 < ids.layers.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Point cones for a batch of entities.
pub fn anchors<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    model: &ModelParams,
    entities: &[usize],
) -> Result<ConeVar> {
    let raw = g.gather_param(store, model.entity, entities)?;
    let axis = g.wrap(raw);
    let aperture = g.constant(Tensor::zeros(entities.len(), model.dim()));
    Ok(ConeVar { axis, aperture })
}

/// Relational projection of row `i` of `q` by relation `relations[i]`.
pub fn project<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    model: &ModelParams,
    q: ConeVar,
    relations: &[usize],
) -> Result<ConeVar> {
    let raw_axis = g.gather_param(store, model.rel_axis, relations)?;
    let rel_axis = g.wrap(raw_axis);
    let raw_ap = g.gather_param(store, model.rel_aperture, relations)?;
    let s = g.sigmoid(raw_ap);
    let rel_ap = g.scale(s, TAU);
    let shifted_axis = g.add(q.axis, rel_axis)?;
    match model.variant() {
        Variant::Rotate | Variant::Trunc => {
            let upper = if model.variant() == Variant::Rotate { TAU } else { PI };
            let axis = g.wrap(shifted_axis);
            let sum = g.add(q.aperture, rel_ap)?;
            let aperture = g.clamp(sum, 0.0, upper);
            Ok(ConeVar { axis, aperture })
        }
        Variant::SigmoidExpand => {
            let axis = g.wrap(shifted_axis);
            let scale = g.gather_param(store, model.se_scale, relations)?;
            let shift = g.gather_param(store, model.se_shift, relations)?;
            let centered = g.offset(q.aperture, -PI);
            let z = g.mul(centered, scale)?;
            let z = g.add(z, shift)?;
            let s = g.sigmoid(z);
            let aperture = g.scale(s, TAU);
            Ok(ConeVar { axis, aperture })
        }
        Variant::Base => {
            let ids = model
                .projection
                .as_ref()
                .ok_or_else(|| Error::Config("base variant without a projection network".into()))?;
            let shifted_ap = g.add(q.aperture, rel_ap)?;
            let x = g.concat_cols(&[shifted_axis, shifted_ap])?;
            let y = mlp(g, store, ids, x)?;
            let d = model.dim();
            let ya = g.slice_cols(y, 0, d)?;
            let yp = g.slice_cols(y, d, 2 * d)?;
            let ta = g.tanh(ya);
            let axis = g.scale(ta, PI);
            let tp = g.tanh(yp);
            let tp = g.offset(tp, 1.0);
            let aperture = g.scale(tp, PI);
            Ok(ConeVar { axis, aperture })
        }
    }
}

fn boundary_angles<T: Real>(g: &mut Graph<T>, c: ConeVar) -> Result<Var> {
    let half = g.scale(c.aperture, 0.5);
    let lower = g.sub(c.axis, half)?;
    let upper = g.add(c.axis, half)?;
    g.concat_cols(&[lower, upper])
}

/// Intersection: attention-weighted circular mean of the axes, and the
/// smallest aperture gated by a DeepSets network.
pub fn intersect<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    model: &ModelParams,
    cones: &[ConeVar],
    mode: ExecMode,
) -> Result<ConeVar> {
    if cones.is_empty() {
        return Err(Error::Contract("intersection of zero cones".into()));
    }
    let feats = cones.iter().map(|c| boundary_angles(g, *c)).collect::<Result<Vec<_>>>()?;

    let axis = if cones.len() == 1 {
        cones[0].axis
    } else {
        let logits = feats.iter().map(|f| mlp(g, store, &model.attention, *f)).collect::<Result<Vec<_>>>()?;
        let weights = g.softmax(&logits)?;
        let mut xs = Vec::with_capacity(cones.len());
        let mut ys = Vec::with_capacity(cones.len());
        for (c, a) in cones.iter().zip(&weights) {
            let cs = g.cos(c.axis);
            let sn = g.sin(c.axis);
            xs.push(g.mul(*a, cs)?);
            ys.push(g.mul(*a, sn)?);
        }
        let mut x = xs[0];
        let mut y = ys[0];
        for (xi, yi) in xs.iter().zip(&ys).skip(1) {
            x = g.add(x, *xi)?;
            y = g.add(y, *yi)?;
        }
        let (xv, yv) = (g.value(x), g.value(y));
        let bad: Vec<usize> =
            (0..xv.len()).filter(|&i| xv.data()[i].to_f64() == 0.0 && yv.data()[i].to_f64() == 0.0).collect();
        if let Some(&first) = bad.first() {
            match mode {
                ExecMode::Infer => return Err(Error::Degenerate { index: first % xv.cols() }),
                ExecMode::Train => {
                    let mut nudge = Tensor::<T>::zeros(xv.rows(), xv.cols());
                    for i in bad {
                        nudge.data_mut()[i] = T::from_f64(DEGENERATE_NUDGE);
                    }
                    let c = g.constant(nudge);
                    x = g.add(x, c)?;
                }
            }
        }
        g.atan2(y, x)?
    };

    let inner = feats.iter().map(|f| mlp(g, store, &model.deepsets_inner, *f)).collect::<Result<Vec<_>>>()?;
    let pooled = g.mean_stack(&inner)?;
    let gate = mlp(g, store, &model.deepsets_outer, pooled)?;
    let gate = g.sigmoid(gate);
    let apertures: Vec<Var> = cones.iter().map(|c| c.aperture).collect();
    let smallest = g.min(&apertures)?;
    let aperture = g.mul(smallest, gate)?;
    Ok(ConeVar { axis, aperture })
}

/// Complement: axis turned by π, aperture `2π − θ_ap`.
pub fn negate<T: Real>(g: &mut Graph<T>, q: ConeVar) -> ConeVar {
    let turned = g.offset(q.axis, PI);
    let axis = g.wrap(turned);
    let flipped = g.neg(q.aperture);
    let aperture = g.offset(flipped, TAU);
    ConeVar { axis, aperture }
}

/// Cosine and sine of target angles, shared by every distance to them.
#[derive(Debug, Clone, Copy)]
pub struct TargetVar {
    cos: Var,
    sin: Var,
}

pub fn target<T: Real>(g: &mut Graph<T>, angles: Var) -> TargetVar {
    TargetVar { cos: g.cos(angles), sin: g.sin(angles) }
}

/// Cosine and sine parts of a batch of angles.
fn unit<T: Real>(g: &mut Graph<T>, angles: Var) -> (Var, Var) {
    (g.cos(angles), g.sin(angles))
}

/// Combined distance `d_o + λ·d_i` between cone row `rows[k]` and target row
/// `k`, as a column with one entry per target.
pub fn cone_distance<T: Real>(
    g: &mut Graph<T>,
    cone: ConeVar,
    rows: &[usize],
    t: TargetVar,
    lambda: f64,
    inside: InsideDistance,
) -> Result<Var> {
    let half = g.scale(cone.aperture, 0.5);
    let upper = g.add(cone.axis, half)?;
    let lower = g.sub(cone.axis, half)?;
    let hu = unit(g, upper);
    let hl = unit(g, lower);
    let hax = unit(g, cone.axis);
    let tt = (t.cos, t.sin);
    let du = g.l1_rows(hu, rows, tt)?;
    let dl = g.l1_rows(hl, rows, tt)?;
    let outside = g.min(&[du, dl])?;
    let dax = g.l1_rows(hax, rows, tt)?;
    let cap = match inside {
        InsideDistance::AsPrinted => {
            let own: Vec<usize> = (0..g.value(cone.axis).rows()).collect();
            let per_cone = g.l1_rows(hu, &own, hax)?;
            g.gather_rows(per_cone, rows)?
        }
        InsideDistance::TargetToUpper => du,
    };
    let inner = g.min(&[dax, cap])?;
    let inner = g.scale(inner, lambda);
    g.add(outside, inner)
}

/// Minimum of [`cone_distance`] over the members of a cone set.
pub fn set_distance<T: Real>(
    g: &mut Graph<T>,
    members: &[ConeVar],
    rows: &[usize],
    t: TargetVar,
    lambda: f64,
    inside: InsideDistance,
) -> Result<Var> {
    if members.is_empty() {
        return Err(Error::Contract("distance to an empty cone set".into()));
    }
    let ds = members.iter().map(|m| cone_distance(g, *m, rows, t, lambda, inside)).collect::<Result<Vec<_>>>()?;
    if ds.len() == 1 {
        Ok(ds[0])
    } else {
        g.min(&ds)
    }
}
