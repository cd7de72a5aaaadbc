//! Feature interpolation over the mesh.
//!
//! Every interpolant here is linear in the per-vertex data of the containing
//! triangle: `F(p) = Σ a_i f_i + Σ g_i · ∇f_i`. The nine scalar weights
//! `[a_0, a_1, a_2, g_0x, g_0y, g_1x, g_1y, g_2x, g_2y]` depend only on the
//! triangle geometry and `p`, so a forward pass is a 9-term weighted sum and
//! the backward pass to positions only needs the 9 x 6 Jacobian of the
//! weights, obtained with forward-mode dual numbers.
//!
//! Three interpolants are provided:
//!
//! * [`Interpolation::Linear`]: barycentric, C⁰.
//! * [`Interpolation::CubicPatch`]: one cubic Bézier patch per triangle built
//!   from the ten control points of [`ct_control_points`].
//! * [`Interpolation::CloughTocher`]: the classical split into three cubic
//!   sub-triangles around the centroid, C¹ across every edge.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::real::Real;

/// Number of per-triangle basis entries an interpolant combines.
pub const N_WEIGHTS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Interpolation {
    Linear,
    CubicPatch,
    #[default]
    CloughTocher,
}

impl Interpolation {
    pub const ALL: [Interpolation; 3] = [
        Interpolation::Linear,
        Interpolation::CubicPatch,
        Interpolation::CloughTocher,
    ];

    /// Whether the interpolant reads vertex gradients.
    pub fn needs_gradients(self) -> bool {
        self != Interpolation::Linear
    }

    pub fn id(self) -> u8 {
        match self {
            Interpolation::Linear => 0,
            Interpolation::CubicPatch => 1,
            Interpolation::CloughTocher => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Interpolation::ALL
            .into_iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| Error::Unknown {
                kind: "interpolation id",
                name: id.to_string(),
            })
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::Linear => "linear",
            Interpolation::CubicPatch => "cubic-patch",
            Interpolation::CloughTocher => "clough-tocher",
        })
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "barycentric" => Ok(Interpolation::Linear),
            "cubic-patch" | "patch" => Ok(Interpolation::CubicPatch),
            "clough-tocher" | "ct" => Ok(Interpolation::CloughTocher),
            _ => Err(Error::Unknown {
                kind: "interpolation",
                name: s.to_string(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Scalars

/// Arithmetic needed by the geometry kernels.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
}

impl Scalar for f64 {
    #[inline(always)]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn val(self) -> f64 {
        self
    }
}

/// Forward-mode dual number with `N` tangent directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Dual { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] += o.d[i];
        }
        Dual { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] -= o.d[i];
        }
        Dual { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline(always)]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - q * o.d[i]) * inv;
        }
        Dual { v: q, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        Dual {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    #[inline(always)]
    fn cst(v: f64) -> Self {
        Dual { v, d: [0.0; N] }
    }
    #[inline(always)]
    fn val(self) -> f64 {
        self.v
    }
}

type P2<S> = [S; 2];

#[inline(always)]
fn cross<S: Scalar>(o: P2<S>, a: P2<S>, b: P2<S>) -> S {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

// ---------------------------------------------------------------------------
// Barycentric coordinates

/// Area barycentrics `α_i = A_i / A` of `p` in the triangle `(v0, v1, v2)`.
pub fn bary_tri(p: [f64; 2], v0: [f64; 2], v1: [f64; 2], v2: [f64; 2]) -> Result<[f64; 3]> {
    let d = cross(v0, v1, v2);
    let scale = ((v1[0] - v0[0]).abs() + (v1[1] - v0[1]).abs() + (v2[0] - v0[0]).abs() + (v2[1] - v0[1]).abs())
        .powi(2);
    if d.abs() <= 1e-14 * scale || !d.is_finite() {
        return Err(Error::Degenerate("zero-area triangle"));
    }
    Ok(bary_generic(p, [v0, v1, v2]))
}

#[inline(always)]
fn bary_generic<S: Scalar>(p: P2<S>, v: [P2<S>; 3]) -> [S; 3] {
    let d = cross(v[0], v[1], v[2]);
    [
        cross(p, v[1], v[2]) / d,
        cross(p, v[2], v[0]) / d,
        cross(p, v[0], v[1]) / d,
    ]
}

fn triple(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
}

/// Volume barycentrics `α_i = V_i / V` of `p` in the tetrahedron `v`.
pub fn bary_tet(p: [f64; 3], v: [[f64; 3]; 4]) -> Result<[f64; 4]> {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let vol = |a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]| triple(sub(b, a), sub(c, a), sub(d, a));
    let total = vol(v[0], v[1], v[2], v[3]);
    let scale: f64 = (1..4).map(|i| sub(v[i], v[0]).iter().map(|x| x.abs()).sum::<f64>()).sum();
    if total.abs() <= 1e-14 * scale.powi(3) || !total.is_finite() {
        return Err(Error::Degenerate("coplanar tetrahedron"));
    }
    Ok([
        vol(p, v[1], v[2], v[3]) / total,
        vol(v[0], p, v[2], v[3]) / total,
        vol(v[0], v[1], p, v[3]) / total,
        vol(v[0], v[1], v[2], p) / total,
    ])
}

// ---------------------------------------------------------------------------
// Cubic Bézier machinery on coefficient vectors

/// A control point expressed as weights over the 9 basis entries.
type Coef<S> = [S; N_WEIGHTS];

#[inline(always)]
fn coef_zero<S: Scalar>() -> Coef<S> {
    [S::cst(0.0); N_WEIGHTS]
}

#[inline(always)]
fn coef_corner<S: Scalar>(i: usize) -> Coef<S> {
    let mut c = coef_zero();
    c[i] = S::cst(1.0);
    c
}

/// `f_i + ∇f_i · (to - from) / 3`.
#[inline(always)]
fn coef_tangent<S: Scalar>(i: usize, from: P2<S>, to: P2<S>) -> Coef<S> {
    let mut c = coef_corner(i);
    let third = S::cst(1.0 / 3.0);
    c[3 + 2 * i] = (to[0] - from[0]) * third;
    c[4 + 2 * i] = (to[1] - from[1]) * third;
    c
}

#[inline(always)]
fn coef_lin<S: Scalar>(terms: &[(S, &Coef<S>)]) -> Coef<S> {
    let mut out = coef_zero();
    for (w, c) in terms {
        for k in 0..N_WEIGHTS {
            out[k] = out[k] + *w * c[k];
        }
    }
    out
}

/// Control points in the order `300, 030, 003, 210, 120, 021, 012, 102, 201, 111`.
pub const CP_INDICES: [[u8; 3]; 10] = [
    [3, 0, 0],
    [0, 3, 0],
    [0, 0, 3],
    [2, 1, 0],
    [1, 2, 0],
    [0, 2, 1],
    [0, 1, 2],
    [1, 0, 2],
    [2, 0, 1],
    [1, 1, 1],
];

/// Cubic Bernstein polynomials at `b`, in [`CP_INDICES`] order.
#[inline(always)]
fn bernstein3<S: Scalar>(b: [S; 3]) -> [S; 10] {
    let [u, v, w] = b;
    let three = S::cst(3.0);
    [
        u * u * u,
        v * v * v,
        w * w * w,
        three * u * u * v,
        three * u * v * v,
        three * v * v * w,
        three * v * w * w,
        three * u * w * w,
        three * u * u * w,
        S::cst(6.0) * u * v * w,
    ]
}

/// Partial derivatives of the cubic Bernstein basis with respect to each barycentric.
fn bernstein3_grad(b: [f64; 3]) -> [[f64; 3]; 10] {
    let [u, v, w] = b;
    [
        [3.0 * u * u, 0.0, 0.0],
        [0.0, 3.0 * v * v, 0.0],
        [0.0, 0.0, 3.0 * w * w],
        [6.0 * u * v, 3.0 * u * u, 0.0],
        [3.0 * v * v, 6.0 * u * v, 0.0],
        [0.0, 6.0 * v * w, 3.0 * v * v],
        [0.0, 3.0 * w * w, 6.0 * v * w],
        [3.0 * w * w, 0.0, 6.0 * u * w],
        [6.0 * u * w, 0.0, 3.0 * u * u],
        [6.0 * v * w, 6.0 * u * w, 6.0 * u * v],
    ]
}

#[inline(always)]
fn eval_coef_patch<S: Scalar>(cp: &[Coef<S>; 10], b: [S; 3]) -> Coef<S> {
    let bern = bernstein3(b);
    let mut out = coef_zero();
    for (c, &w) in cp.iter().zip(&bern) {
        for k in 0..N_WEIGHTS {
            out[k] = out[k] + w * c[k];
        }
    }
    out
}

/// The single-patch control points of [`ct_control_points`] as coefficient vectors.
fn patch_coefs<S: Scalar>(v: [P2<S>; 3]) -> [Coef<S>; 10] {
    let c300 = coef_corner(0);
    let c030 = coef_corner(1);
    let c003 = coef_corner(2);
    let c210 = coef_tangent(0, v[0], v[1]);
    let c120 = coef_tangent(1, v[1], v[0]);
    let c021 = coef_tangent(1, v[1], v[2]);
    let c012 = coef_tangent(2, v[2], v[1]);
    let c102 = coef_tangent(2, v[2], v[0]);
    let c201 = coef_tangent(0, v[0], v[2]);
    let s = S::cst(1.0 / 6.0);
    let c111 = coef_lin(&[
        (s, &c210),
        (s, &c120),
        (s, &c021),
        (s, &c012),
        (s, &c102),
        (s, &c201),
        (-s, &c300),
        (-s, &c030),
        (-s, &c003),
    ]);
    [c300, c030, c003, c210, c120, c021, c012, c102, c201, c111]
}

/// Control points of the three Clough–Tocher sub-triangles `(P_a, P_b, Q)`
/// for edges `(0,1)`, `(1,2)`, `(2,0)`, `Q` the centroid.
fn ct_split_coefs<S: Scalar>(v: [P2<S>; 3]) -> [[Coef<S>; 10]; 3] {
    let third = S::cst(1.0 / 3.0);
    let q = [
        (v[0][0] + v[1][0] + v[2][0]) * third,
        (v[0][1] + v[1][1] + v[2][1]) * third,
    ];
    let corner: [Coef<S>; 3] = [coef_corner(0), coef_corner(1), coef_corner(2)];
    // Tangent-plane points towards the centroid.
    let s: [Coef<S>; 3] = [coef_tangent(0, v[0], q), coef_tangent(1, v[1], q), coef_tangent(2, v[2], q)];
    let one = S::cst(1.0);
    let half = S::cst(0.5);
    // Edge points making the cross-edge derivative linear along each macro edge.
    let edge = |a: usize, b: usize| -> (Coef<S>, Coef<S>, Coef<S>) {
        let e = [v[b][0] - v[a][0], v[b][1] - v[a][1]];
        let h = [q[0] - v[a][0], q[1] - v[a][1]];
        let lb = -(h[0] * e[0] + h[1] * e[1]) / (e[0] * e[0] + e[1] * e[1]);
        let la = -lb - one;
        let t_ab = coef_tangent(a, v[a], v[b]);
        let t_ba = coef_tangent(b, v[b], v[a]);
        let d20 = coef_lin(&[(la, &corner[a]), (lb, &t_ab), (one, &s[a])]);
        let d02 = coef_lin(&[(la, &t_ba), (lb, &corner[b]), (one, &s[b])]);
        let e_ab = coef_lin(&[(half, &d20), (half, &d02), (-la, &t_ab), (-lb, &t_ba)]);
        (t_ab, t_ba, e_ab)
    };
    let edges = [edge(0, 1), edge(1, 2), edge(2, 0)];
    // Spoke points: q_a averages S_a with the edge points on both sides of a.
    let spoke = |a: usize| -> Coef<S> {
        let before = &edges[(a + 2) % 3].2;
        let after = &edges[a].2;
        coef_lin(&[(third, &s[a]), (third, after), (third, before)])
    };
    let qs = [spoke(0), spoke(1), spoke(2)];
    let center = coef_lin(&[(third, &qs[0]), (third, &qs[1]), (third, &qs[2])]);
    std::array::from_fn(|k| {
        let (a, b) = (k, (k + 1) % 3);
        let (t_ab, t_ba, e_ab) = edges[k];
        [
            corner[a],
            corner[b],
            center,
            t_ab,
            t_ba,
            s[b],
            qs[b],
            qs[a],
            s[a],
            e_ab,
        ]
    })
}

/// Interpolation weights of `p` in the triangle with vertices `v`.
pub fn weights<S: Scalar>(mode: Interpolation, v: [P2<S>; 3], p: P2<S>) -> [S; N_WEIGHTS] {
    let b = bary_generic(p, v);
    match mode {
        Interpolation::Linear => {
            let mut w = coef_zero();
            w[..3].copy_from_slice(&b);
            w
        }
        Interpolation::CubicPatch => eval_coef_patch(&patch_coefs(v), b),
        Interpolation::CloughTocher => {
            let bv = [b[0].val(), b[1].val(), b[2].val()];
            // Sub-triangle opposite the smallest barycentric; lowest index on ties.
            let m = if bv[0] <= bv[1] && bv[0] <= bv[2] {
                0
            } else if bv[1] <= bv[2] {
                1
            } else {
                2
            };
            let k = (m + 1) % 3;
            let (a, bb) = (k, (k + 1) % 3);
            let sub = [b[a] - b[m], b[bb] - b[m], S::cst(3.0) * b[m]];
            let cps = ct_split_coefs(v);
            eval_coef_patch(&cps[k], sub)
        }
    }
}

/// Weights and their Jacobian with respect to the six vertex coordinates
/// `[x0, y0, x1, y1, x2, y2]`.
pub fn weights_jacobian(mode: Interpolation, v: [[f64; 2]; 3], p: [f64; 2]) -> ([f64; N_WEIGHTS], [[f64; 6]; N_WEIGHTS]) {
    let vd: [P2<Dual<6>>; 3] = std::array::from_fn(|i| [Dual::var(v[i][0], 2 * i), Dual::var(v[i][1], 2 * i + 1)]);
    let pd = [Dual::cst(p[0]), Dual::cst(p[1])];
    let w = weights(mode, vd, pd);
    (w.map(|x| x.v), w.map(|x| x.d))
}

// ---------------------------------------------------------------------------
// Explicit single-patch API

/// Ten cubic Bézier control points, each a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CtPatch {
    /// In [`CP_INDICES`] order.
    pub points: [Vec<f64>; 10],
}

impl CtPatch {
    pub fn get(&self, i: u8, j: u8, k: u8) -> &[f64] {
        let idx = CP_INDICES.iter().position(|c| *c == [i, j, k]).expect("i + j + k must be 3");
        &self.points[idx]
    }
}

/// Single-patch control points from vertex values `f`, gradients `g`
/// (`g[i][axis][c]`) and positions `v`.
pub fn ct_control_points(f: [&[f64]; 3], g: [[&[f64]; 2]; 3], v: [[f64; 2]; 3]) -> Result<CtPatch> {
    bary_tri(v[0], v[0], v[1], v[2])?;
    let n = f[0].len();
    let coefs = patch_coefs(v);
    let points = coefs.map(|c| {
        (0..n)
            .map(|ch| {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += c[i] * f[i][ch] + c[3 + 2 * i] * g[i][0][ch] + c[4 + 2 * i] * g[i][1][ch];
                }
                acc
            })
            .collect()
    });
    Ok(CtPatch { points })
}

/// `Σ c_ijk B³_ijk(α)`.
pub fn ct_eval(patch: &CtPatch, bary: [f64; 3]) -> Vec<f64> {
    let bern = bernstein3(bary);
    let n = patch.points[0].len();
    let mut out = vec![0.0; n];
    for (cp, &w) in patch.points.iter().zip(&bern) {
        for (o, &c) in out.iter_mut().zip(cp) {
            *o += w * c;
        }
    }
    out
}

/// Gradients of `⟨grad_out, ct_eval(patch, bary)⟩` with respect to the
/// control points (one Bernstein weight each) and the barycentrics.
pub fn ct_eval_backward(patch: &CtPatch, bary: [f64; 3], grad_out: &[f64]) -> ([f64; 10], [f64; 3]) {
    let bern = bernstein3(bary);
    let dbern = bernstein3_grad(bary);
    let mut gb = [0.0; 3];
    for (cp, db) in patch.points.iter().zip(&dbern) {
        let dot: f64 = cp.iter().zip(grad_out).map(|(a, b)| a * b).sum();
        for k in 0..3 {
            gb[k] += dot * db[k];
        }
    }
    (bern, gb)
}

// ---------------------------------------------------------------------------
// Feature field and vertex gradients

/// Per-vertex latent features with a cache of their estimated gradients.
#[derive(Debug, Clone)]
pub struct FeatureField<T> {
    n_f: usize,
    features: Vec<T>,
    /// `[v][axis][channel]`.
    gradients: Vec<T>,
    revision: u64,
    gradients_at: Option<u64>,
}

impl<T: Real> FeatureField<T> {
    pub fn new(n_f: usize, features: Vec<T>) -> Result<Self> {
        if n_f == 0 || !features.len().is_multiple_of(n_f) {
            return Err(Error::Shape(format!(
                "{} feature values are not a multiple of n_f = {n_f}",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSample {
                index: i,
                value: features[i].f64(),
            });
        }
        Ok(FeatureField {
            n_f,
            features,
            gradients: Vec::new(),
            revision: 0,
            gradients_at: None,
        })
    }

    pub fn zeros(n_vertices: usize, n_f: usize) -> Self {
        Self::new(n_f, vec![T::zero(); n_vertices * n_f]).expect("zero field is valid")
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn num_vertices(&self) -> usize {
        self.features.len() / self.n_f
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn feature(&self, v: usize) -> &[T] {
        &self.features[v * self.n_f..(v + 1) * self.n_f]
    }

    /// Mutable access invalidates the gradient cache.
    pub fn features_mut(&mut self) -> &mut [T] {
        self.revision += 1;
        &mut self.features
    }

    pub fn push_vertex(&mut self, f: &[T]) {
        assert_eq!(f.len(), self.n_f);
        self.revision += 1;
        self.features.extend_from_slice(f);
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Cached gradients, `None` when stale.
    pub fn gradients(&self) -> Option<&[T]> {
        (self.gradients_at == Some(self.revision)).then_some(&self.gradients[..])
    }

    pub fn refresh_gradients(&mut self, stencil: &GradientStencil) {
        self.gradients = stencil.apply(&self.features, self.n_f);
        self.gradients_at = Some(self.revision);
    }

    pub fn cast<U: Real>(&self) -> FeatureField<U> {
        FeatureField::new(self.n_f, self.features.iter().map(|v| U::of(v.f64())).collect())
            .expect("cast preserves shape")
    }
}

/// Per-vertex least-squares weights: `∇f_v = Σ_j (f_j − f_v) u_j`,
/// `u_j = A⁻¹ Δp_j`, `A = Σ Δp_j Δp_jᵀ` (Tikhonov-regularized when near singular).
#[derive(Debug, Clone)]
pub struct GradientStencil {
    offsets: Vec<u32>,
    neighbors: Vec<u32>,
    u: Vec<[f64; 2]>,
    /// Symmetric `A⁻¹` as `[xx, xy, yy]`.
    a_inv: Vec<[f64; 3]>,
    /// Tikhonov factor κ (`λ = κ·tr A`), zero when unregularized.
    kappa: Vec<f64>,
}

/// Relative Tikhonov strength applied to near-singular normal matrices.
pub const TIKHONOV: f64 = 1e-8;

impl GradientStencil {
    pub fn new(mesh: &Mesh) -> Self {
        let n = mesh.num_vertices();
        let pos = mesh.positions();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        let mut u = Vec::new();
        let mut a_inv = Vec::with_capacity(n);
        let mut kappa = Vec::with_capacity(n);
        offsets.push(0);
        for v in 0..n {
            let ring = mesh.one_ring(v);
            let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
            for &j in ring {
                let d = [pos[j as usize][0] - pos[v][0], pos[j as usize][1] - pos[v][1]];
                xx += d[0] * d[0];
                xy += d[0] * d[1];
                yy += d[1] * d[1];
            }
            let tr = xx + yy;
            let mut det = xx * yy - xy * xy;
            let mut k = 0.0;
            if !(det > 1e-10 * tr * tr) {
                k = TIKHONOV;
                let lam = TIKHONOV * tr;
                xx += lam;
                yy += lam;
                det = xx * yy - xy * xy;
            }
            let inv = if det > 0.0 {
                [yy / det, -xy / det, xx / det]
            } else {
                [0.0; 3]
            };
            for &j in ring {
                let d = [pos[j as usize][0] - pos[v][0], pos[j as usize][1] - pos[v][1]];
                u.push([inv[0] * d[0] + inv[1] * d[1], inv[1] * d[0] + inv[2] * d[1]]);
                neighbors.push(j);
            }
            a_inv.push(inv);
            kappa.push(k);
            offsets.push(neighbors.len() as u32);
        }
        GradientStencil {
            offsets,
            neighbors,
            u,
            a_inv,
            kappa,
        }
    }

    fn range(&self, v: usize) -> std::ops::Range<usize> {
        self.offsets[v] as usize..self.offsets[v + 1] as usize
    }

    /// Gradients `[v][axis][channel]` for features `[v][channel]`.
    pub fn apply<T: Real>(&self, features: &[T], n_f: usize) -> Vec<T> {
        let n = self.a_inv.len();
        let mut out = vec![T::zero(); n * 2 * n_f];
        for v in 0..n {
            let fv = &features[v * n_f..(v + 1) * n_f];
            let (gx, gy) = out[v * 2 * n_f..(v + 1) * 2 * n_f].split_at_mut(n_f);
            for k in self.range(v) {
                let j = self.neighbors[k] as usize;
                let (ux, uy) = (T::of(self.u[k][0]), T::of(self.u[k][1]));
                let fj = &features[j * n_f..(j + 1) * n_f];
                for c in 0..n_f {
                    let df = fj[c] - fv[c];
                    gx[c] += ux * df;
                    gy[c] += uy * df;
                }
            }
        }
        out
    }

    /// Accumulates `dL/df` given `dL/d∇f` (`[v][axis][channel]`).
    pub fn backward_features<T: Real>(&self, grad_g: &[T], n_f: usize, grad_f: &mut [T]) {
        let n = self.a_inv.len();
        for v in 0..n {
            let gv = &grad_g[v * 2 * n_f..(v + 1) * 2 * n_f];
            let (gx, gy) = gv.split_at(n_f);
            for k in self.range(v) {
                let j = self.neighbors[k] as usize;
                let (ux, uy) = (T::of(self.u[k][0]), T::of(self.u[k][1]));
                for c in 0..n_f {
                    let s = gx[c] * ux + gy[c] * uy;
                    grad_f[j * n_f + c] += s;
                    grad_f[v * n_f + c] -= s;
                }
            }
        }
    }

    /// Accumulates `dL/dp` through `A⁻¹` and `Δp` given `dL/d∇f` and the features.
    pub fn backward_positions<T: Real>(
        &self,
        mesh: &Mesh,
        features: &[T],
        grad_g: &[T],
        n_f: usize,
        grad_p: &mut [[f64; 2]],
    ) {
        let pos = mesh.positions();
        let n = self.a_inv.len();
        let mut s_buf: Vec<[f64; 2]> = Vec::new();
        for v in 0..n {
            let range = self.range(v);
            if range.is_empty() {
                continue;
            }
            let gv = &grad_g[v * 2 * n_f..(v + 1) * 2 * n_f];
            let (gx, gy) = gv.split_at(n_f);
            let fv = &features[v * n_f..(v + 1) * n_f];
            let inv = self.a_inv[v];
            s_buf.clear();
            let mut m = [[0.0; 2]; 2];
            for k in range.clone() {
                let j = self.neighbors[k] as usize;
                let fj = &features[j * n_f..(j + 1) * n_f];
                let mut r = [0.0; 2];
                for c in 0..n_f {
                    let df = (fj[c] - fv[c]).f64();
                    r[0] += gx[c].f64() * df;
                    r[1] += gy[c].f64() * df;
                }
                let s = [inv[0] * r[0] + inv[1] * r[1], inv[1] * r[0] + inv[2] * r[1]];
                let u = self.u[k];
                m[0][0] += s[0] * u[0];
                m[0][1] += s[0] * u[1];
                m[1][0] += s[1] * u[0];
                m[1][1] += s[1] * u[1];
                s_buf.push(s);
            }
            let sym = [
                [2.0 * m[0][0], m[0][1] + m[1][0]],
                [m[0][1] + m[1][0], 2.0 * m[1][1]],
            ];
            let reg = 2.0 * self.kappa[v] * (m[0][0] + m[1][1]);
            for (k, s) in range.zip(&s_buf) {
                let j = self.neighbors[k] as usize;
                let d = [pos[j][0] - pos[v][0], pos[j][1] - pos[v][1]];
                let g = [
                    s[0] - sym[0][0] * d[0] - sym[0][1] * d[1] - reg * d[0],
                    s[1] - sym[1][0] * d[0] - sym[1][1] * d[1] - reg * d[1],
                ];
                grad_p[j][0] += g[0];
                grad_p[j][1] += g[1];
                grad_p[v][0] -= g[0];
                grad_p[v][1] -= g[1];
            }
        }
    }
}

/// One-ring least-squares gradients of every vertex, `[v][axis][channel]`.
pub fn vertex_gradients<T: Real>(mesh: &Mesh, field: &FeatureField<T>) -> Vec<T> {
    GradientStencil::new(mesh).apply(field.features(), field.n_f())
}

/// Basis entry `k` of triangle `tri` as a slice of length `n_f`.
#[inline(always)]
pub fn basis_slice<'a, T>(tri: [u32; 3], k: usize, features: &'a [T], gradients: &'a [T], n_f: usize) -> &'a [T] {
    if k < 3 {
        let v = tri[k] as usize;
        &features[v * n_f..(v + 1) * n_f]
    } else {
        let i = (k - 3) / 2;
        let axis = (k - 3) % 2;
        let off = tri[i] as usize * 2 * n_f + axis * n_f;
        &gradients[off..off + n_f]
    }
}

/// `out = Σ_k w_k · basis_k`.
#[inline]
pub fn apply_weights<T: Real>(tri: [u32; 3], w: &[f64; N_WEIGHTS], features: &[T], gradients: &[T], n_f: usize, out: &mut [T]) {
    out.fill(T::zero());
    let used = if gradients.is_empty() { 3 } else { N_WEIGHTS };
    for k in 0..used {
        if w[k] == 0.0 {
            continue;
        }
        let wk = T::of(w[k]);
        for (o, &b) in out.iter_mut().zip(basis_slice(tri, k, features, gradients, n_f)) {
            *o += wk * b;
        }
    }
}

/// Interpolated feature at `p` with the given interpolant.
pub fn interpolate<T: Real>(mesh: &Mesh, field: &FeatureField<T>, mode: Interpolation, p: [f64; 2]) -> Result<Vec<T>> {
    let (t, _) = mesh.locate(p)?;
    let tri = mesh.triangles()[t];
    let w = weights(mode, mesh.triangle_points(t), p);
    let owned;
    let grads: &[T] = if mode.needs_gradients() {
        match field.gradients() {
            Some(g) => g,
            None => {
                owned = vertex_gradients(mesh, field);
                &owned
            }
        }
    } else {
        &[]
    };
    let mut out = vec![T::zero(); field.n_f()];
    apply_weights(tri, &w, field.features(), grads, field.n_f(), &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_triangle(r: &mut impl Rng) -> [[f64; 2]; 3] {
        loop {
            let v: [[f64; 2]; 3] = std::array::from_fn(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]);
            if cross(v[0], v[1], v[2]).abs() > 1.0 {
                return v;
            }
        }
    }

    fn random_bary(r: &mut impl Rng) -> [f64; 3] {
        let a: f64 = r.random_range(0.0..1.0);
        let b: f64 = r.random_range(0.0..1.0);
        let (a, b) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
        [1.0 - a - b, a, b]
    }

    fn at(v: [[f64; 2]; 3], b: [f64; 3]) -> [f64; 2] {
        [
            b[0] * v[0][0] + b[1] * v[1][0] + b[2] * v[2][0],
            b[0] * v[0][1] + b[1] * v[1][1] + b[2] * v[2][1],
        ]
    }

    #[test]
    fn bary_tri_basics() {
        let v = [[0.0, 0.0], [4.0, 0.0], [0.0, 3.0]];
        assert_eq!(bary_tri(v[0], v[0], v[1], v[2]).unwrap(), [1.0, 0.0, 0.0]);
        let c = bary_tri([4.0 / 3.0, 1.0], v[0], v[1], v[2]).unwrap();
        for x in c {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(bary_tri([0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [2.0, 2.0]).is_err());
    }

    #[test]
    fn bary_tri_matches_linear_solve() {
        let mut r = rng(1);
        for _ in 0..1000 {
            let v = random_triangle(&mut r);
            let p = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let b = bary_tri(p, v[0], v[1], v[2]).unwrap();
            // Solve [e1 e2] [b1 b2]^T = p - v0 by Cramer's rule.
            let e1 = [v[1][0] - v[0][0], v[1][1] - v[0][1]];
            let e2 = [v[2][0] - v[0][0], v[2][1] - v[0][1]];
            let q = [p[0] - v[0][0], p[1] - v[0][1]];
            let det = e1[0] * e2[1] - e1[1] * e2[0];
            let b1 = (q[0] * e2[1] - q[1] * e2[0]) / det;
            let b2 = (e1[0] * q[1] - e1[1] * q[0]) / det;
            assert!((b[1] - b1).abs() < 1e-12 && (b[2] - b2).abs() < 1e-12);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bary_tet_basics() {
        let v = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        assert_eq!(bary_tet(v[0], v).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        let c = bary_tet([0.25, 0.5, 0.75], v).unwrap();
        for x in c {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert!(bary_tet([0.0; 3], [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]).is_err());
    }

    #[test]
    fn ct_patch_zero_gradients_collapse() {
        let f = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let z = [0.0, 0.0];
        let patch = ct_control_points(
            [&f[0], &f[1], &f[2]],
            [[&z, &z], [&z, &z], [&z, &z]],
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(patch.get(2, 1, 0), &f[0]);
        assert_eq!(patch.get(1, 2, 0), &f[1]);
        assert_eq!(patch.get(0, 1, 2), &f[2]);
        assert_eq!(patch.get(3, 0, 0), &f[0]);
    }

    #[test]
    fn ct_patch_interior_point_of_constant_field() {
        let one = [1.0];
        let z = [0.0];
        let patch = ct_control_points(
            [&one, &one, &one],
            [[&z, &z], [&z, &z], [&z, &z]],
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        assert!((patch.get(1, 1, 1)[0] - 0.5).abs() < 1e-15);
        // Corners are still exact.
        assert_eq!(ct_eval(&patch, [1.0, 0.0, 0.0]), vec![1.0]);
    }

    #[test]
    fn ct_patch_boundary_points_on_linear_field() {
        let mut r = rng(2);
        for _ in 0..100 {
            let v = random_triangle(&mut r);
            let (a, b, c0) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            let lin = |p: [f64; 2]| a * p[0] + b * p[1] + c0;
            let f = v.map(|p| [lin(p)]);
            let gx = [a];
            let gy = [b];
            let patch = ct_control_points([&f[0], &f[1], &f[2]], [[&gx, &gy]; 3], v).unwrap();
            for (idx, ijk) in CP_INDICES.iter().enumerate().take(9) {
                let bb = ijk.map(|x| x as f64 / 3.0);
                assert!((patch.points[idx][0] - lin(at(v, bb))).abs() < 1e-10);
            }
            // The interior point lands on half the value at the centroid.
            let cen = lin(at(v, [1.0 / 3.0; 3]));
            assert!((patch.points[9][0] - 0.5 * cen).abs() < 1e-10);
        }
    }

    #[test]
    fn ct_eval_backward_matches_fd() {
        let mut r = rng(3);
        let points: [Vec<f64>; 10] = std::array::from_fn(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect());
        let patch = CtPatch { points };
        let g = [0.3, -0.7, 1.1];
        let b = [0.2, 0.5, 0.3];
        let (gcp, gb) = ct_eval_backward(&patch, b, &g);
        let h = 1e-5;
        let loss = |p: &CtPatch, b: [f64; 3]| -> f64 { ct_eval(p, b).iter().zip(&g).map(|(x, y)| x * y).sum() };
        for k in 0..3 {
            let mut bp = b;
            bp[k] += h;
            let mut bm = b;
            bm[k] -= h;
            let fd = (loss(&patch, bp) - loss(&patch, bm)) / (2.0 * h);
            assert!((fd - gb[k]).abs() < 1e-4 * fd.abs().max(1e-3));
        }
        for i in 0..10 {
            let mut p = patch.clone();
            p.points[i][1] += h;
            let mut m = patch.clone();
            m.points[i][1] -= h;
            let fd = (loss(&p, b) - loss(&m, b)) / (2.0 * h);
            assert!((fd - gcp[i] * g[1]).abs() < 1e-4 * fd.abs().max(1e-3));
        }
    }

    fn eval_weights(mode: Interpolation, v: [[f64; 2]; 3], p: [f64; 2], f: [f64; 3], g: [[f64; 2]; 3]) -> f64 {
        let w = weights(mode, v, p);
        let mut acc = 0.0;
        for i in 0..3 {
            acc += w[i] * f[i] + w[3 + 2 * i] * g[i][0] + w[4 + 2 * i] * g[i][1];
        }
        acc
    }

    #[test]
    fn partition_of_unity_and_linear_reproduction() {
        let mut r = rng(4);
        for _ in 0..1000 {
            let v = random_triangle(&mut r);
            let p = at(v, random_bary(&mut r));
            let (a, b, c) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            let lin = |q: [f64; 2]| a * q[0] + b * q[1] + c;
            for mode in [Interpolation::Linear, Interpolation::CloughTocher] {
                let w = weights(mode, v, p);
                assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-10);
                let val = eval_weights(mode, v, p, v.map(lin), [[a, b]; 3]);
                assert!((val - lin(p)).abs() < 1e-9, "{mode}");
            }
        }
    }

    #[test]
    fn clough_tocher_reproduces_quadratics_at_vertices() {
        let mut r = rng(5);
        let v = random_triangle(&mut r);
        let f = [1.5, -0.5, 2.0];
        let g = [[0.3, 0.1], [-1.0, 0.4], [0.2, 0.9]];
        for i in 0..3 {
            assert!((eval_weights(Interpolation::CloughTocher, v, v[i], f, g) - f[i]).abs() < 1e-12);
            assert!((eval_weights(Interpolation::CubicPatch, v, v[i], f, g) - f[i]).abs() < 1e-12);
        }
    }

    /// Directional derivative of the interpolant across a shared edge from each side.
    fn edge_derivatives(mode: Interpolation, seed: u64) -> f64 {
        let mut r = rng(seed);
        // Two triangles sharing edge (1, 2): (0, 1, 2) and (3, 2, 1).
        let v: [[f64; 2]; 4] = [
            [r.random_range(-3.0..-1.0), r.random_range(-1.0..1.0)],
            [r.random_range(-0.5..0.5), r.random_range(-3.0..-1.0)],
            [r.random_range(-0.5..0.5), r.random_range(1.0..3.0)],
            [r.random_range(1.0..3.0), r.random_range(-1.0..1.0)],
        ];
        let f: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let g: [[f64; 2]; 4] = std::array::from_fn(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
        let t0 = [v[0], v[1], v[2]];
        let t1 = [v[3], v[2], v[1]];
        let e = [v[2][0] - v[1][0], v[2][1] - v[1][1]];
        let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
        let n = [e[1] / len, -e[0] / len];
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for s in 1..=100 {
            let t = s as f64 / 101.0;
            let p = [v[1][0] + t * e[0], v[1][1] + t * e[1]];
            let eval0 = |q: [f64; 2]| eval_weights(mode, t0, q, [f[0], f[1], f[2]], [g[0], g[1], g[2]]);
            let eval1 = |q: [f64; 2]| eval_weights(mode, t1, q, [f[3], f[2], f[1]], [g[3], g[2], g[1]]);
            // One-sided derivatives evaluated by extending each polynomial piece across the edge.
            let d0 = (eval0([p[0] + h * n[0], p[1] + h * n[1]]) - eval0([p[0] - h * n[0], p[1] - h * n[1]])) / (2.0 * h);
            let d1 = (eval1([p[0] + h * n[0], p[1] + h * n[1]]) - eval1([p[0] - h * n[0], p[1] - h * n[1]])) / (2.0 * h);
            worst = worst.max((d0 - d1).abs() / d0.abs().max(1.0));
        }
        worst
    }

    #[test]
    fn clough_tocher_is_c1_across_edges() {
        for seed in 0..20 {
            assert!(edge_derivatives(Interpolation::CloughTocher, seed) < 1e-6);
        }
    }

    #[test]
    fn cubic_patch_is_not_c1() {
        let worst = (0..20).map(|s| edge_derivatives(Interpolation::CubicPatch, s)).fold(0.0, f64::max);
        assert!(worst > 1e-3);
    }

    #[test]
    fn clough_tocher_is_c1_inside_the_triangle() {
        // Across the interior spokes from the centroid to each vertex.
        let mut r = rng(6);
        let v = random_triangle(&mut r);
        let f = [0.3, -0.8, 1.2];
        let g = [[0.5, -0.2], [1.1, 0.7], [-0.4, 0.6]];
        let q = at(v, [1.0 / 3.0; 3]);
        let h = 1e-5;
        for i in 0..3 {
            let e = [v[i][0] - q[0], v[i][1] - q[1]];
            let n = [-e[1], e[0]];
            for s in 1..20 {
                let t = s as f64 / 20.0;
                let p = [q[0] + t * e[0], q[1] + t * e[1]];
                let val = |x: f64| eval_weights(Interpolation::CloughTocher, v, [p[0] + x * n[0], p[1] + x * n[1]], f, g);
                let left = (val(0.0) - val(-h)) / h;
                let right = (val(h) - val(0.0)) / h;
                assert!((left - right).abs() < 1e-4 * left.abs().max(1.0), "{left} {right}");
            }
        }
    }

    #[test]
    fn weight_jacobian_matches_fd() {
        let mut r = rng(7);
        for mode in Interpolation::ALL {
            for _ in 0..20 {
                let v = random_triangle(&mut r);
                let p = at(v, random_bary(&mut r));
                let (w, jac) = weights_jacobian(mode, v, p);
                for (a, b) in w.iter().zip(weights(mode, v, p)) {
                    assert!((a - b).abs() < 1e-12);
                }
                let h = 1e-6;
                for c in 0..6 {
                    let mut vp = v;
                    vp[c / 2][c % 2] += h;
                    let mut vm = v;
                    vm[c / 2][c % 2] -= h;
                    let (wp, wm) = (weights(mode, vp, p), weights(mode, vm, p));
                    for k in 0..N_WEIGHTS {
                        let fd = (wp[k] - wm[k]) / (2.0 * h);
                        assert!((fd - jac[k][c]).abs() < 1e-5 * fd.abs().max(1.0), "{mode} w{k} d{c}: {fd} vs {}", jac[k][c]);
                    }
                }
            }
        }
    }

    fn random_mesh(seed: u64) -> Mesh {
        let mut r = rng(seed);
        let mut pts = vec![[0.0, 0.0], [20.0, 0.0], [20.0, 20.0], [0.0, 20.0]];
        for _ in 0..30 {
            pts.push([r.random_range(1.0..19.0), r.random_range(1.0..19.0)]);
        }
        Mesh::from_points(20.0, 20.0, pts).unwrap()
    }

    #[test]
    fn vertex_gradients_exact_for_linear_fields() {
        let mesh = random_mesh(8);
        let feats: Vec<f64> = mesh.positions().iter().flat_map(|p| [3.0 * p[0] - 2.0 * p[1], 7.0]).collect();
        let field = FeatureField::new(2, feats).unwrap();
        let g = vertex_gradients(&mesh, &field);
        for v in 0..mesh.num_vertices() {
            let gv = &g[v * 4..v * 4 + 4];
            assert!((gv[0] - 3.0).abs() < 1e-10 && (gv[2] + 2.0).abs() < 1e-10);
            assert!(gv[1].abs() < 1e-12 && gv[3].abs() < 1e-12);
        }
    }

    #[test]
    fn vertex_gradients_match_normal_equations() {
        let mesh = random_mesh(9);
        let mut r = rng(10);
        let feats: Vec<f64> = (0..mesh.num_vertices()).map(|_| r.random_range(-1.0..1.0)).collect();
        let field = FeatureField::new(1, feats.clone()).unwrap();
        let g = vertex_gradients(&mesh, &field);
        for v in 0..mesh.num_vertices() {
            // Minimize Σ (Δf_j − g·Δp_j)² by direct 2x2 normal equations.
            let p = mesh.positions();
            let (mut a, mut b, mut c, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &j in mesh.one_ring(v) {
                let j = j as usize;
                let dx = p[j][0] - p[v][0];
                let dy = p[j][1] - p[v][1];
                let df = feats[j] - feats[v];
                a += dx * dx;
                b += dx * dy;
                c += dy * dy;
                r0 += dx * df;
                r1 += dy * df;
            }
            let det = a * c - b * b;
            let gx = (c * r0 - b * r1) / det;
            let gy = (a * r1 - b * r0) / det;
            assert!((g[2 * v] - gx).abs() < 1e-10 && (g[2 * v + 1] - gy).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_backward_matches_fd() {
        let mesh = random_mesh(11);
        let mut r = rng(12);
        let n_f = 2;
        let nv = mesh.num_vertices();
        let feats: Vec<f64> = (0..nv * n_f).map(|_| r.random_range(-1.0..1.0)).collect();
        let gg: Vec<f64> = (0..nv * 2 * n_f).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mesh, f: &[f64]| -> f64 {
            GradientStencil::new(m).apply(f, n_f).iter().zip(&gg).map(|(a, b)| a * b).sum()
        };
        let st = GradientStencil::new(&mesh);
        let mut gf = vec![0.0; nv * n_f];
        st.backward_features(&gg, n_f, &mut gf);
        let mut gp = vec![[0.0; 2]; nv];
        st.backward_positions(&mesh, &feats, &gg, n_f, &mut gp);
        let h = 1e-6;
        for i in 0..nv * n_f {
            let mut a = feats.clone();
            a[i] += h;
            let mut b = feats.clone();
            b[i] -= h;
            let fd = (loss(&mesh, &a) - loss(&mesh, &b)) / (2.0 * h);
            assert!((fd - gf[i]).abs() < 1e-4 * fd.abs().max(1e-3));
        }
        for v in 0..nv {
            for ax in 0..2 {
                let mut pp = mesh.positions().to_vec();
                pp[v][ax] += h;
                let mut pm = mesh.positions().to_vec();
                pm[v][ax] -= h;
                let mut mp = mesh.clone();
                mp.set_positions(pp).unwrap();
                let mut mm = mesh.clone();
                mm.set_positions(pm).unwrap();
                let fd = (loss(&mp, &feats) - loss(&mm, &feats)) / (2.0 * h);
                assert!((fd - gp[v][ax]).abs() < 1e-4 * fd.abs().max(1e-3), "v{v} ax{ax}: {fd} vs {}", gp[v][ax]);
            }
        }
    }

    #[test]
    fn field_cache_revision() {
        let mesh = random_mesh(13);
        let mut field = FeatureField::<f64>::zeros(mesh.num_vertices(), 3);
        assert!(field.gradients().is_none());
        field.refresh_gradients(&GradientStencil::new(&mesh));
        assert!(field.gradients().is_some());
        field.features_mut()[0] = 1.0;
        assert!(field.gradients().is_none());
        assert!(FeatureField::new(3, vec![0.0f64; 4]).is_err());
        assert!(FeatureField::new(1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn mesh_interpolation_reproduces_linear_field() {
        let mesh = random_mesh(14);
        let feats: Vec<f64> = mesh.positions().iter().map(|p| 0.5 * p[0] + 0.25 * p[1] - 1.0).collect();
        let field = FeatureField::new(1, feats).unwrap();
        let mut r = rng(15);
        for mode in Interpolation::ALL {
            if mode == Interpolation::CubicPatch {
                continue;
            }
            for _ in 0..200 {
                let p = [r.random_range(0.0..20.0), r.random_range(0.0..20.0)];
                let v = interpolate(&mesh, &field, mode, p).unwrap()[0];
                assert!((v - (0.5 * p[0] + 0.25 * p[1] - 1.0)).abs() < 1e-9);
            }
        }
    }
}
