//! Heisenberg-type group law, horizontal frames and the objects derived from them.
//!
//! The group is ℝ³ with
//! `(x, y, z)·(x', y', z') = (x + x', y + y', z + z' + 2α(x y' − y x'))`,
//! whose left-invariant horizontal fields are `g₁ = ∂x − 2αy ∂z` and
//! `g₂ = ∂y + 2αx ∂z` with bracket `[g₁, g₂] = 4α ∂z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A state `(x, y, z)` of the Heisenberg-type group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GroupPoint {
    pub const IDENTITY: GroupPoint = GroupPoint {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        GroupPoint { x, y, z }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        GroupPoint::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Planar radius `√(x² + y²)`.
    pub fn planar_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Group product `p·q`.
pub fn group_mul(p: GroupPoint, q: GroupPoint, alpha: f64) -> GroupPoint {
    GroupPoint {
        x: p.x + q.x,
        y: p.y + q.y,
        z: p.z + q.z + 2.0 * alpha * (p.x * q.y - p.y * q.x),
    }
}

/// Group inverse; the identity is the origin so the inverse is the negation.
pub fn group_inv(p: GroupPoint) -> GroupPoint {
    GroupPoint {
        x: -p.x,
        y: -p.y,
        z: -p.z,
    }
}

/// `q0⁻¹·q`, the displacement the translated heat kernel depends on.
///
/// Its vertical part is `z − z0 − 2α(x0 y − y0 x)`, the twisted vertical offset.
pub fn relative(q0: GroupPoint, q: GroupPoint, alpha: f64) -> GroupPoint {
    group_mul(group_inv(q0), q, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    /// Bracket-generating Heisenberg frame (rank 2, hypoelliptic).
    Heisenberg,
    /// Constant rank-2 frame spanning the planar directions only.
    PlanarConstant,
    /// Identity frame, isotropic diffusion in ℝ³.
    Isotropic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    pub alpha: f64,
    pub frame_kind: FrameKind,
}

/// A 3×m matrix of horizontal fields evaluated at a point, stored by column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMatrix {
    pub cols: [[f64; 3]; 3],
    pub m: usize,
}

impl FrameMatrix {
    /// `g·u` for a control vector with `m` active entries.
    pub fn apply(&self, u: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (col, &ui) in self.cols.iter().zip(u).take(self.m) {
            for r in 0..3 {
                out[r] += col[r] * ui;
            }
        }
        out
    }

    /// `gᵀ·v`, returned padded to length 3 (trailing entries zero when `m < 3`).
    pub fn apply_transpose(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, col) in self.cols.iter().enumerate().take(self.m) {
            out[c] = col[0] * v[0] + col[1] * v[1] + col[2] * v[2];
        }
        out
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.cols[col][row]
    }
}

/// The horizontal frame used to drive a diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizontalFrame {
    pub params: FrameParams,
    pub m: usize,
}

impl HorizontalFrame {
    pub fn new(kind: FrameKind, alpha: f64) -> Result<Self> {
        if kind == FrameKind::Heisenberg && !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "heisenberg frame needs alpha > 0, got {alpha}"
            )));
        }
        let m = match kind {
            FrameKind::Heisenberg | FrameKind::PlanarConstant => 2,
            FrameKind::Isotropic => 3,
        };
        Ok(HorizontalFrame {
            params: FrameParams {
                alpha,
                frame_kind: kind,
            },
            m,
        })
    }

    pub fn heisenberg(alpha: f64) -> Result<Self> {
        Self::new(FrameKind::Heisenberg, alpha)
    }

    pub fn kind(&self) -> FrameKind {
        self.params.frame_kind
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha
    }
}

/// The frame matrix `g(p)`.
pub fn frame_at(frame: &HorizontalFrame, p: GroupPoint) -> FrameMatrix {
    let a = frame.params.alpha;
    match frame.params.frame_kind {
        FrameKind::Heisenberg => FrameMatrix {
            cols: [
                [1.0, 0.0, -2.0 * a * p.y],
                [0.0, 1.0, 2.0 * a * p.x],
                [0.0; 3],
            ],
            m: 2,
        },
        FrameKind::PlanarConstant => FrameMatrix {
            cols: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0; 3]],
            m: 2,
        },
        FrameKind::Isotropic => FrameMatrix {
            cols: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            m: 3,
        },
    }
}

/// Component of a spatial vector `v` along the normal of the horizontal plane at `p`.
///
/// For `v = g(p)·u` this is exactly zero in floating point: the Heisenberg
/// normal is `(2αy, −2αx, 1)`, and the products pair with the ones formed in
/// [`FrameMatrix::apply`] up to sign.
pub fn horizontality_residual(frame: &HorizontalFrame, p: GroupPoint, v: [f64; 3]) -> f64 {
    let a = frame.params.alpha;
    match frame.params.frame_kind {
        FrameKind::Heisenberg => {
            let s = (2.0 * a * p.y) * v[0] - (2.0 * a * p.x) * v[1];
            s + v[2]
        }
        FrameKind::PlanarConstant => v[2],
        FrameKind::Isotropic => 0.0,
    }
}

/// Diffusion tensor `G = g gᵀ`.
pub fn diffusion_tensor(frame: &HorizontalFrame, p: GroupPoint) -> [[f64; 3]; 3] {
    let g = frame_at(frame, p);
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, entry) in row.iter_mut().enumerate() {
            *entry = g.cols[..g.m].iter().map(|col| col[r] * col[c]).sum();
        }
    }
    out
}

/// Itô drift correction `b_ε = (ε/2) Σᵢ ∇_{gᵢ} gᵢ`, in closed form per frame kind.
///
/// Each Heisenberg column is constant along its own flow (`g₁` has no `y`
/// component and its only non-constant entry depends on `y`; likewise for `g₂`),
/// and the other two frames are constant, so the correction vanishes for every
/// supported kind. The sign convention (`+ε/2`) is irrelevant for that reason.
pub fn stratonovich_drift(frame: &HorizontalFrame, p: GroupPoint, epsilon: f64) -> [f64; 3] {
    let _ = (frame, p);
    let sum_of_self_derivatives = [0.0_f64; 3];
    sum_of_self_derivatives.map(|v| 0.5 * epsilon * v)
}

/// Finite-difference step used by the self-test helpers.
pub const FD_STEP: f64 = 1e-5;

/// Directional derivative `∇_v w (p) = J_w(p) · v(p)` by central differences.
pub fn directional_derivative<V, W>(v: V, w: W, p: [f64; 3], h: f64) -> [f64; 3]
where
    V: Fn([f64; 3]) -> [f64; 3],
    W: Fn([f64; 3]) -> [f64; 3],
{
    let dir = v(p);
    let plus = w([p[0] + h * dir[0], p[1] + h * dir[1], p[2] + h * dir[2]]);
    let minus = w([p[0] - h * dir[0], p[1] - h * dir[1], p[2] - h * dir[2]]);
    [0, 1, 2].map(|r| (plus[r] - minus[r]) / (2.0 * h))
}

/// Lie bracket `[g₁, g₂](p) = ∇_{g₁} g₂ − ∇_{g₂} g₁` by central differences.
pub fn lie_bracket_check(frame: &HorizontalFrame, p: GroupPoint) -> Result<[f64; 3]> {
    if frame.kind() != FrameKind::Heisenberg {
        return Err(Error::InvalidArgument(
            "lie bracket self-test requires the heisenberg frame".into(),
        ));
    }
    let f = *frame;
    let g1 = move |q: [f64; 3]| frame_at(&f, GroupPoint::from_array(q)).cols[0];
    let g2 = move |q: [f64; 3]| frame_at(&f, GroupPoint::from_array(q)).cols[1];
    let a = directional_derivative(g1, g2, p.to_array(), FD_STEP);
    let b = directional_derivative(g2, g1, p.to_array(), FD_STEP);
    Ok([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}
