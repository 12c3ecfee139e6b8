use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};

/// Sampling geometry shared by intensity volumes, label volumes and
/// displacement fields: voxel counts, spacing in mm and the voxel→world
/// affine. Voxel index order is x fastest, then y, then z.
#[derive(Debug, Clone)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    inverse: Matrix4<f64>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.affine == other.affine
    }
}

const SPACING_TOL: f64 = 1e-4;

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::NonPositiveSpacing(spacing));
        }
        if affine.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite affine".into()));
        }
        let last = affine.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidGeometry("affine last row must be (0,0,0,1)".into()));
        }
        for axis in 0..3 {
            let norm = affine.fixed_view::<3, 1>(0, axis).norm();
            if (norm - spacing[axis]).abs() > SPACING_TOL * spacing[axis].max(1.0) {
                return Err(Error::InvalidGeometry(format!(
                    "affine column {axis} has norm {norm}, spacing is {}",
                    spacing[axis]
                )));
            }
        }
        let inverse = affine.try_inverse().ok_or(Error::DegenerateAffine)?;
        Ok(Grid {
            dims,
            spacing,
            affine,
            inverse,
        })
    }

    /// Axis-aligned grid with the given origin (world position of voxel 0).
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = spacing[a];
            affine[(a, 3)] = origin[a];
        }
        Grid::new(dims, spacing, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn inverse_affine(&self) -> &Matrix4<f64> {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn contains(&self, i: i64, j: i64, k: i64) -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < self.dims[0]
            && (j as usize) < self.dims[1]
            && (k as usize) < self.dims[2]
    }

    #[inline]
    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, p)
    }

    #[inline]
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.inverse, p)
    }

    /// World coordinate of the grid centre.
    pub fn center_world(&self) -> [f64; 3] {
        let c = [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ];
        self.voxel_to_world(c)
    }

    /// Direction-cosine part of the affine with spacing divided out.
    pub fn directions(&self) -> Matrix3<f64> {
        let mut m = self.affine.fixed_view::<3, 3>(0, 0).into_owned();
        for a in 0..3 {
            for r in 0..3 {
                m[(r, a)] /= self.spacing[a];
            }
        }
        m
    }

    /// Sub-grid starting at voxel `min` with the given dims; world
    /// coordinates of retained voxels are unchanged.
    pub fn subgrid(&self, min: [usize; 3], dims: [usize; 3]) -> Result<Grid> {
        let shift = Matrix4::new_translation(&nalgebra::Vector3::new(
            min[0] as f64,
            min[1] as f64,
            min[2] as f64,
        ));
        Grid::new(dims, self.spacing, self.affine * shift)
    }

    /// Grid at half resolution: coarse voxel `c` sits on fine voxel `2c`.
    pub fn downsampled(&self) -> Grid {
        let dims = self.dims.map(|d| d.div_ceil(2));
        let spacing = self.spacing.map(|s| s * 2.0);
        let scale = Matrix4::new_nonuniform_scaling(&nalgebra::Vector3::new(2.0, 2.0, 2.0));
        Grid::new(dims, spacing, self.affine * scale).expect("downsampled grid stays valid")
    }

    pub fn same_geometry(&self, other: &Grid, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
            && self
                .affine
                .iter()
                .zip(other.affine.iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    pub(crate) fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_geometry(other, 1e-6) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

#[inline]
pub(crate) fn apply_affine(m: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
    let v = m * Vector4::new(p[0], p[1], p[2], 1.0);
    [v[0], v[1], v[2]]
}

/// Inclusive voxel-index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [i64; 3],
    pub max: [i64; 3],
}

impl BoundingBox {
    pub fn new(min: [i64; 3], max: [i64; 3]) -> Self {
        BoundingBox { min, max }
    }

    pub fn full(grid: &Grid) -> Self {
        let d = grid.dims();
        BoundingBox {
            min: [0; 3],
            max: [d[0] as i64 - 1, d[1] as i64 - 1, d[2] as i64 - 1],
        }
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|a| self.min[a] > self.max[a])
    }

    pub fn extents(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.max[a] - self.min[a] + 1).max(0) as usize)
    }

    pub fn voxel_count(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Intersect with the grid; `EmptyBox` if nothing remains.
    pub fn clamped(&self, grid: &Grid) -> Result<BoundingBox> {
        let d = grid.dims();
        let mut out = *self;
        for a in 0..3 {
            out.min[a] = out.min[a].max(0);
            out.max[a] = out.max[a].min(d[a] as i64 - 1);
        }
        if out.is_empty() {
            Err(Error::EmptyBox)
        } else {
            Ok(out)
        }
    }

    pub fn dilated(&self, by: [i64; 3]) -> BoundingBox {
        BoundingBox {
            min: [0, 1, 2].map(|a| self.min[a] - by[a]),
            max: [0, 1, 2].map(|a| self.max[a] + by[a]),
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.min[a] + self.max[a]) as f64 / 2.0)
    }
}
