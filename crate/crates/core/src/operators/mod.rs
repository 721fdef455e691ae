//! Logical operators over cones and the cone-to-entity distance.
//!
//! These functions work on plain [`ConeBatch`] values with fixed network
//! weights. The differentiable versions used for training live in
//! [`tape`]; both compute the same formulas.

pub mod tape;

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{
    arg, axis_vector, boundaries, canonical_aperture, canonical_axis, sigmoid, AngleVec, ConeBatch, RelationRotation,
    UnitComplexVec,
};

/// How relations act on cones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Rotation of both boundaries; aperture sums clamped at 2π.
    Rotate,
    /// Rotation with the aperture truncated at π.
    Trunc,
    /// Axis rotation with a per-relation sigmoid map of the aperture.
    SigmoidExpand,
    /// No rotation: a learned network maps the relation-shifted cone.
    Base,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::SigmoidExpand, Variant::Trunc, Variant::Rotate];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rotate => "rocone",
            Variant::Trunc => "trunc",
            Variant::SigmoidExpand => "se",
            Variant::Base => "base",
        }
    }

    /// Row label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Rotate => "RoConE",
            Variant::Trunc => "RoConE (Trunc)",
            Variant::SigmoidExpand => "RoConE (S.E.)",
            Variant::Base => "RoConE (Base)",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rocone" | "rotate" => Ok(Variant::Rotate),
            "trunc" => Ok(Variant::Trunc),
            "se" | "s.e." => Ok(Variant::SigmoidExpand),
            "base" => Ok(Variant::Base),
            other => Err(Error::Config(format!("unknown variant '{other}' (expected rocone, base, trunc or se)"))),
        }
    }
}

/// Which second term the inside distance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InsideDistance {
    /// `min(‖h_ax − h*‖₁, ‖h_U − h_ax‖₁)`: the second term caps the inside
    /// distance at the half-aperture chord and does not involve the target.
    #[default]
    AsPrinted,
    /// `min(‖h_ax − h*‖₁, ‖h_U − h*‖₁)`.
    TargetToUpper,
}

impl InsideDistance {
    pub fn as_str(self) -> &'static str {
        match self {
            InsideDistance::AsPrinted => "as-printed",
            InsideDistance::TargetToUpper => "target-to-upper",
        }
    }
}

impl FromStr for InsideDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "as-printed" => Ok(InsideDistance::AsPrinted),
            "target-to-upper" => Ok(InsideDistance::TargetToUpper),
            other => Err(Error::Config(format!(
                "unknown inside distance '{other}' (expected as-printed or target-to-upper)"
            ))),
        }
    }
}

/// A fully connected layer, `y = x·W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weight.row_slice(i)) {
                *o += xi * w;
            }
        }
        out
    }
}

/// Layer widths of a perceptron with rectified-linear hidden layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    /// Whether the last layer has a bias.
    pub output_bias: bool,
}

impl MlpSpec {
    /// `2d → d → d`, the inner DeepSets network.
    pub fn pair_to_dim(d: usize) -> Self {
        Self { widths: vec![2 * d, d, d], output_bias: true }
    }

    /// `2d → d → d` without an output bias: the attention logits feed a
    /// softmax across inputs, which a shared bias cannot change.
    pub fn attention(d: usize) -> Self {
        Self { output_bias: false, ..Self::pair_to_dim(d) }
    }

    /// `d → d → d`, the outer DeepSets network.
    pub fn dim_to_dim(d: usize) -> Self {
        Self { widths: vec![d, d, d], output_bias: true }
    }

    /// `2d → d → 2d`, the projection network of the non-rotating variant.
    pub fn pair_to_pair(d: usize) -> Self {
        Self { widths: vec![2 * d, d, 2 * d], output_bias: true }
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    /// All-zero weights: every output is 0.
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Linear { weight: Tensor::zeros(w[0], w[1]), bias: Tensor::zeros(1, w[1]) })
            .collect();
        Self { layers }
    }
}

/// Weights of the intersection operator.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionNet {
    pub attention: Mlp,
    pub deepsets_inner: Mlp,
    pub deepsets_outer: Mlp,
}

impl IntersectionNet {
    pub fn zeros(d: usize) -> Self {
        Self {
            attention: Mlp::zeros(&MlpSpec::attention(d)),
            deepsets_inner: Mlp::zeros(&MlpSpec::pair_to_dim(d)),
            deepsets_outer: Mlp::zeros(&MlpSpec::dim_to_dim(d)),
        }
    }
}

/// Union of cones: the DNF branches of a query, combined only at distance time.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeSet {
    members: Vec<ConeBatch>,
}

impl ConeSet {
    pub fn new(members: Vec<ConeBatch>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Contract("a cone set needs at least one member".into()));
        };
        let d = first.dim();
        if members.iter().any(|m| m.dim() != d) {
            return Err(Error::Contract("cone set members differ in dimension".into()));
        }
        Ok(Self { members })
    }

    pub fn singleton(cone: ConeBatch) -> Self {
        Self { members: vec![cone] }
    }

    pub fn members(&self) -> &[ConeBatch] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }
}

fn check_dims(q: &ConeBatch, d: usize, what: &str) -> Result<()> {
    if q.dim() != d {
        return Err(Error::Contract(format!("{what}: cone has {} dimensions, expected {d}", q.dim())));
    }
    Ok(())
}

/// Relational projection for the rotating variants.
///
/// [`Variant::Base`] has no rotation and needs its network; see
/// [`project_neural`].
pub fn project(q: &ConeBatch, r: &RelationRotation, variant: Variant) -> Result<ConeBatch> {
    check_dims(q, r.dim(), "project")?;
    let axis: Vec<f64> = q.axis().iter().zip(r.axis()).map(|(a, b)| a + b).collect();
    let aperture: Vec<f64> = match variant {
        Variant::Rotate => q.aperture().iter().zip(r.aperture()).map(|(a, b)| a + b).collect(),
        Variant::Trunc => q.aperture().iter().zip(r.aperture()).map(|(a, b)| (a + b).min(PI)).collect(),
        Variant::SigmoidExpand => {
            q.aperture().iter().map(|a| TAU * sigmoid(r.se_scale * (a - PI) + r.se_shift)).collect()
        }
        Variant::Base => {
            return Err(Error::Config("the base variant projects through a network; use project_neural".into()))
        }
    };
    ConeBatch::new(axis, aperture)
}

/// Non-rotating projection: `[θ_ax + θ_ax,r ; θ_ap + θ_ap,r]` through `net`,
/// then `θ_ax' = π·tanh(·)`, `θ_ap' = π·(tanh(·) + 1)`.
pub fn project_neural(q: &ConeBatch, r: &RelationRotation, net: &Mlp) -> Result<ConeBatch> {
    let d = q.dim();
    check_dims(q, r.dim(), "project_neural")?;
    if net.input_width() != 2 * d {
        return Err(Error::Contract(format!(
            "projection network takes {} inputs, expected {}",
            net.input_width(),
            2 * d
        )));
    }
    let mut x: Vec<f64> = q.axis().iter().zip(r.axis()).map(|(a, b)| a + b).collect();
    x.extend(q.aperture().iter().zip(r.aperture()).map(|(a, b)| a + b));
    let y = net.forward(&x);
    let axis = y[..d].iter().map(|v| PI * v.tanh()).collect();
    let aperture = y[d..].iter().map(|v| PI * (v.tanh() + 1.0)).collect();
    ConeBatch::new(axis, aperture)
}

/// `[θ_ax − θ_ap/2 ; θ_ax + θ_ap/2]`, the network input for a cone.
fn boundary_angles(c: &ConeBatch) -> Vec<f64> {
    let mut v: Vec<f64> = c.axis().iter().zip(c.aperture()).map(|(a, p)| a - p / 2.0).collect();
    v.extend(c.axis().iter().zip(c.aperture()).map(|(a, p)| a + p / 2.0));
    v
}

fn check_inputs(cones: &[ConeBatch], net_input: usize, what: &str) -> Result<usize> {
    let Some(first) = cones.first() else {
        return Err(Error::Contract(format!("{what} of zero cones")));
    };
    let d = first.dim();
    for c in cones {
        check_dims(c, d, what)?;
    }
    if net_input != 2 * d {
        return Err(Error::Contract(format!("{what}: network takes {net_input} inputs, expected {}", 2 * d)));
    }
    Ok(d)
}

/// Attention-weighted circular mean of the input axes.
///
/// Weights are a softmax across the inputs, per dimension, of the attention
/// network applied to each cone's boundary angles. A single input returns its
/// own axis.
pub fn semantic_average(cones: &[ConeBatch], attention: &Mlp) -> Result<AngleVec> {
    let d = check_inputs(cones, attention.input_width(), "semantic_average")?;
    if cones.len() == 1 {
        return AngleVec::new(cones[0].axis().to_vec());
    }
    let logits: Vec<Vec<f64>> = cones.iter().map(|c| attention.forward(&boundary_angles(c))).collect();
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    for k in 0..d {
        let m = logits.iter().map(|l| l[k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l[k] - m).exp()).sum();
        for (l, c) in logits.iter().zip(cones) {
            let a = (l[k] - m).exp() / z;
            x[k] += a * c.axis()[k].cos();
            y[k] += a * c.axis()[k].sin();
        }
    }
    arg(&x, &y)
}

/// Intersection aperture: the smallest input aperture scaled by a learned
/// factor in (0, 1).
pub fn card_min(cones: &[ConeBatch], net: &IntersectionNet) -> Result<AngleVec> {
    let d = check_inputs(cones, net.deepsets_inner.input_width(), "card_min")?;
    let n = cones.len() as f64;
    let mut pooled = vec![0.0; d];
    for c in cones {
        for (p, v) in pooled.iter_mut().zip(net.deepsets_inner.forward(&boundary_angles(c))) {
            *p += v / n;
        }
    }
    let gate = net.deepsets_outer.forward(&pooled);
    let out = (0..d)
        .map(|i| {
            let m = cones.iter().map(|c| c.aperture()[i]).fold(f64::INFINITY, f64::min);
            m * sigmoid(gate[i])
        })
        .collect();
    AngleVec::new(out)
}

/// Intersection of cones.
///
/// Every input enters through a symmetric reduction (softmax-weighted sum,
/// mean, min), so reordering the inputs changes the result only through
/// floating-point summation order, by at most a few ulps before the final
/// snap to the angle grid.
pub fn intersect(cones: &[ConeBatch], net: &IntersectionNet) -> Result<ConeBatch> {
    let axis = semantic_average(cones, &net.attention)?;
    let aperture = card_min(cones, net)?;
    ConeBatch::new(axis.into_inner(), aperture.into_inner())
}

/// Complement: the upper and lower boundaries trade places.
///
/// Exact on the angle grid, so `negate(negate(q)) == q`.
pub fn negate(q: &ConeBatch) -> ConeBatch {
    let axis = q.axis().iter().map(|a| canonical_axis(a + PI)).collect();
    let aperture = q.aperture().iter().map(|a| canonical_aperture(TAU - a)).collect();
    ConeBatch::new(axis, aperture).expect("complement of a valid cone is valid")
}

/// Concatenates the members of every branch, in order.
pub fn union(branches: &[ConeSet]) -> Result<ConeSet> {
    ConeSet::new(branches.iter().flat_map(|b| b.members().iter().cloned()).collect())
}

/// Outside and inside distance of one cone to a target point.
pub fn cone_distance(target: &UnitComplexVec, cone: &ConeBatch, lambda: f64, inside: InsideDistance) -> Result<f64> {
    check_dims(cone, target.dim(), "distance")?;
    let (upper, lower) = boundaries(cone);
    let axis = axis_vector(cone);
    let outside = upper.l1_distance(target).min(lower.l1_distance(target));
    let cap = match inside {
        InsideDistance::AsPrinted => upper.l1_distance(&axis),
        InsideDistance::TargetToUpper => upper.l1_distance(target),
    };
    let inside = axis.l1_distance(target).min(cap);
    Ok(outside + lambda * inside)
}

/// Distance from a target entity to a query: the minimum over the members.
pub fn distance(target: &UnitComplexVec, q: &ConeSet, lambda: f64, inside: InsideDistance) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Contract(format!("λ must lie in (0, 1), got {lambda}")));
    }
    if q.is_empty() {
        return Err(Error::Contract("distance to an empty cone set".into()));
    }
    let mut best = f64::INFINITY;
    for m in q.members() {
        best = best.min(cone_distance(target, m, lambda, inside)?);
    }
    Ok(best)
}
