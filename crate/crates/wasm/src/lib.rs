//! Browser bindings for the cone operators.
//!
//! Cones cross the boundary as two equal-length arrays of angles (axis and
//! aperture); results come back as one array with the axes first.

use rocone::geometry::{ConeBatch, RelationRotation, UnitComplexVec};
use rocone::operators::{self, ConeSet, InsideDistance, IntersectionNet, Variant};
use wasm_bindgen::prelude::*;

fn cone(axis: Vec<f64>, aperture: Vec<f64>) -> Result<ConeBatch, String> {
    ConeBatch::new(axis, aperture).map_err(|e| e.to_string())
}

fn flat(c: &ConeBatch) -> Vec<f64> {
    [c.axis(), c.aperture()].concat()
}

/// Rotates a cone by a relation. `variant` is `rocone`, `trunc` or `se`.
#[wasm_bindgen]
pub fn project(
    axis: Vec<f64>,
    aperture: Vec<f64>,
    rel_axis: Vec<f64>,
    rel_aperture: Vec<f64>,
    variant: &str,
) -> Result<Vec<f64>, String> {
    let variant: Variant = variant.parse().map_err(|e: rocone::Error| e.to_string())?;
    if variant == Variant::Base {
        return Err("the base variant needs a trained projection network".into());
    }
    let r = RelationRotation::from_angles(rel_axis, rel_aperture).map_err(|e| e.to_string())?;
    let q = cone(axis, aperture)?;
    operators::project(&q, &r, variant).map(|c| flat(&c)).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn negate(axis: Vec<f64>, aperture: Vec<f64>) -> Result<Vec<f64>, String> {
    Ok(flat(&operators::negate(&cone(axis, aperture)?)))
}

/// Intersection with all-zero network weights: the axis is the plain
/// circular mean and the aperture half the smaller input.
#[wasm_bindgen]
pub fn intersect(
    axis_a: Vec<f64>,
    aperture_a: Vec<f64>,
    axis_b: Vec<f64>,
    aperture_b: Vec<f64>,
) -> Result<Vec<f64>, String> {
    let a = cone(axis_a, aperture_a)?;
    let b = cone(axis_b, aperture_b)?;
    let net = IntersectionNet::zeros(a.dim());
    operators::intersect(&[a, b], &net).map(|c| flat(&c)).map_err(|e| e.to_string())
}

/// Distance from a point at the given angles to a cone.
#[wasm_bindgen]
pub fn distance(entity: Vec<f64>, axis: Vec<f64>, aperture: Vec<f64>, lambda: f64) -> Result<f64, String> {
    let target = UnitComplexVec::from_angles(&entity);
    let q = ConeSet::singleton(cone(axis, aperture)?);
    operators::distance(&target, &q, lambda, InsideDistance::AsPrinted).map_err(|e| e.to_string())
}
