use std::sync::Arc;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{apply_affine, trilinear, Grid, Interpolation, LabelVolume, Volume3D};

/// 4×4 homogeneous map acting on world coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

const MIN_DET: f64 = 1e-9;

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        AffineTransform {
            matrix: Matrix4::new_translation(&Vector3::from(t)),
        }
    }

    /// Rotation by `degrees` about the z axis through `center`.
    pub fn rotation_z(degrees: f64, center: [f64; 3]) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), degrees.to_radians());
        let c = Vector3::from(center);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
        let t = c - r.matrix() * c;
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        AffineTransform { matrix: m }
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidParameter("affine last row must be (0,0,0,1)".into()));
        }
        let t = AffineTransform { matrix };
        if !t.is_invertible() {
            return Err(Error::DegenerateAffine);
        }
        Ok(t)
    }

    /// Wrap a matrix without the invertibility check.
    pub fn from_matrix_unchecked(matrix: Matrix4<f64>) -> Self {
        AffineTransform { matrix }
    }

    /// Build from the linear part and translation.
    pub fn from_parts(linear: Matrix3<f64>, translation: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(translation));
        AffineTransform { matrix: m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.matrix[(0, 3)], self.matrix[(1, 3)], self.matrix[(2, 3)]]
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.linear().determinant();
        d.is_finite() && d.abs() > MIN_DET
    }

    pub fn inverse(&self) -> Result<Self> {
        if !self.is_invertible() {
            return Err(Error::DegenerateAffine);
        }
        self.matrix
            .try_inverse()
            .map(|m| AffineTransform { matrix: m })
            .ok_or(Error::DegenerateAffine)
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn then_after(&self, inner: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: self.matrix * inner.matrix,
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.matrix, p)
    }
}

/// Dense displacement on a fixed grid. The vector stored at voxel `x` is in
/// that grid's voxel units and sends `x` to the point `x + d(x)`, read back
/// into world coordinates through the same grid. Off-grid queries use the
/// border-clamped (replicated) field.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    components: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        DisplacementField {
            grid,
            components: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn new(grid: Grid, components: [Vec<f64>; 3]) -> Result<Self> {
        if components.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::InvalidGeometry("field component length mismatch".into()));
        }
        if components.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite displacement".into()));
        }
        Ok(DisplacementField { grid, components })
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, components: [Vec<f64>; 3]) -> Self {
        DisplacementField { grid, components }
    }

    pub fn from_fn<F>(grid: Grid, f: F) -> Self
    where
        F: Fn([usize; 3]) -> [f64; 3] + Sync,
    {
        let v: Vec<[f64; 3]> = (0..grid.len())
            .into_par_iter()
            .map(|idx| f(grid.coords(idx)))
            .collect();
        let components = [0, 1, 2].map(|a| v.iter().map(|d| d[a]).collect());
        DisplacementField { grid, components }
    }

    /// Voxel-unit rendering of an affine map: the field sending each voxel
    /// to `affine(world(x))`, expressed in this grid's voxel coordinates.
    pub fn from_affine(grid: Grid, affine: &AffineTransform) -> Self {
        let g = grid.clone();
        DisplacementField::from_fn(grid, move |c| {
            let x = c.map(|v| v as f64);
            let y = g.world_to_voxel(affine.apply(g.voxel_to_world(x)));
            [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.components
    }

    pub fn into_components(self) -> [Vec<f64>; 3] {
        self.components
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [f64; 3] {
        [self.components[0][idx], self.components[1][idx], self.components[2][idx]]
    }

    /// Trilinear displacement at a continuous voxel coordinate, clamped to
    /// the grid.
    #[inline]
    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let dims = self.grid.dims();
        let q = [0, 1, 2].map(|a| p[a].clamp(0.0, (dims[a] - 1) as f64));
        [
            trilinear(&self.components[0], dims, q),
            trilinear(&self.components[1], dims, q),
            trilinear(&self.components[2], dims, q),
        ]
    }

    #[inline]
    pub fn apply(&self, world: [f64; 3]) -> [f64; 3] {
        let x = self.grid.world_to_voxel(world);
        let d = self.displacement_at(x);
        self.grid.voxel_to_world([x[0] + d[0], x[1] + d[1], x[2] + d[2]])
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| {
                let d = self.at(i);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Mean endpoint distance (voxels) to another field on the same grid,
    /// optionally restricted to a mask.
    pub fn mean_endpoint_error(&self, other: &DisplacementField, mask: Option<&[bool]>) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 0..self.grid.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let a = self.at(i);
            let b = other.at(i);
            acc += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }

    /// Jacobian determinant of `x ↦ x + d(x)` at interior voxels (border
    /// voxels report 1).
    pub fn jacobian_determinants(&self) -> Vec<f64> {
        let g = &self.grid;
        let dims = g.dims();
        let st = [1, dims[0], dims[0] * dims[1]];
        (0..g.len())
            .into_par_iter()
            .map(|idx| {
                let c = g.coords(idx);
                if (0..3).any(|a| c[a] == 0 || c[a] + 1 >= dims[a]) {
                    return 1.0;
                }
                let mut j = Matrix3::identity();
                for comp in 0..3 {
                    let f = &self.components[comp];
                    for ax in 0..3 {
                        j[(comp, ax)] += 0.5 * (f[idx + st[ax]] - f[idx - st[ax]]);
                    }
                }
                j.determinant()
            })
            .collect()
    }

    /// Fixed-point inverse: `e(y) = -d(y + e(y))`.
    pub fn inverse(&self, iterations: usize) -> DisplacementField {
        let g = &self.grid;
        let n = g.len();
        let mut inv = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for _ in 0..iterations {
            let next: Vec<[f64; 3]> = (0..n)
                .into_par_iter()
                .map(|idx| {
                    let c = g.coords(idx);
                    let p = [
                        c[0] as f64 + inv[0][idx],
                        c[1] as f64 + inv[1][idx],
                        c[2] as f64 + inv[2][idx],
                    ];
                    let d = self.displacement_at(p);
                    [-d[0], -d[1], -d[2]]
                })
                .collect();
            for a in 0..3 {
                inv[a] = next.iter().map(|v| v[a]).collect();
            }
        }
        DisplacementField::from_parts_unchecked(g.clone(), inv)
    }

    /// Fold an affine applied after this field into a single field on the
    /// same grid: `x ↦ affine(world(x + d(x)))`.
    pub fn followed_by_affine(&self, affine: &AffineTransform) -> DisplacementField {
        let g = &self.grid;
        DisplacementField::from_fn(g.clone(), |c| {
            let idx = g.index(c[0], c[1], c[2]);
            let d = self.at(idx);
            let x = c.map(|v| v as f64);
            let p = [x[0] + d[0], x[1] + d[1], x[2] + d[2]];
            let y = g.world_to_voxel(affine.apply(g.voxel_to_world(p)));
            [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
        })
    }
}

/// One link of a transform chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Affine(AffineTransform),
    Field(Arc<DisplacementField>),
}

impl Transform {
    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            Transform::Affine(a) => a.apply(p),
            Transform::Field(f) => f.apply(p),
        }
    }
}

/// Ordered transforms applied right-to-left to a target-space world point,
/// yielding the corresponding source-space point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransformChain {
    transforms: Vec<Transform>,
}

impl TransformChain {
    pub fn identity() -> Self {
        TransformChain::default()
    }

    pub fn new(transforms: Vec<Transform>) -> Self {
        TransformChain { transforms }
    }

    pub fn from_affine(a: AffineTransform) -> Self {
        TransformChain::new(vec![Transform::Affine(a)])
    }

    pub fn from_field(f: DisplacementField) -> Self {
        TransformChain::new(vec![Transform::Field(Arc::new(f))])
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    #[inline]
    pub fn resolve(&self, p: [f64; 3]) -> [f64; 3] {
        self.transforms.iter().rev().fold(p, |q, t| t.apply(q))
    }
}

/// Lazy concatenation: resolving the result applies `inner` first, then
/// `outer`. No field is resampled.
pub fn compose(outer: &TransformChain, inner: &TransformChain) -> TransformChain {
    let mut transforms = outer.transforms.clone();
    transforms.extend(inner.transforms.iter().cloned());
    TransformChain { transforms }
}

/// Pull `moving` back onto `target` through `chain`.
pub fn warp_image(moving: &Volume3D, chain: &TransformChain, target: &Grid, mode: Interpolation) -> Volume3D {
    let mg = moving.grid();
    let data = (0..target.len())
        .into_par_iter()
        .map(|idx| {
            let c = target.coords(idx).map(|v| v as f64);
            let src = chain.resolve(target.voxel_to_world(c));
            moving.sample(mg.world_to_voxel(src), mode)
        })
        .collect();
    Volume3D::from_parts_unchecked(target.clone(), data)
}

/// Nearest-neighbour label pullback; the dictionary is carried unchanged.
pub fn warp_labels(moving: &LabelVolume, chain: &TransformChain, target: &Grid) -> LabelVolume {
    let mg = moving.grid();
    let labels = (0..target.len())
        .into_par_iter()
        .map(|idx| {
            let c = target.coords(idx).map(|v| v as f64);
            let src = chain.resolve(target.voxel_to_world(c));
            moving.sample_nearest(mg.world_to_voxel(src))
        })
        .collect();
    LabelVolume::from_parts_unchecked(target.clone(), labels, moving.dictionary().clone())
}

/// Warp an intensity image and its label map with one chain, checking that
/// they share geometry.
pub fn warp_pair(
    image: &Volume3D,
    labels: &LabelVolume,
    chain: &TransformChain,
    target: &Grid,
) -> Result<(Volume3D, LabelVolume)> {
    image.grid().check_same(labels.grid(), "image/label pair")?;
    Ok((
        warp_image(image, chain, target, Interpolation::Trilinear),
        warp_labels(labels, chain, target),
    ))
}
