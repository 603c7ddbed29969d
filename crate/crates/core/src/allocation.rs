//! Dynamic query allocation: project every 3D anchor into every camera,
//! keep the valid (anchor, camera) pairs as 2D query columns, cap the
//! truncated ones per camera, and gather 3D query rows into 2D queries.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{project_anchor, Anchor3D, CameraRig, ProjectionResult};
use crate::real::Real;
use crate::tensor::{Graph, TensorId};

/// Per-camera cap on truncated (projection-center) 2D queries.
pub const MAX_TRUNCATED_PER_CAMERA: usize = 100;

/// One 2D query column: which camera it lives in and which 3D query owns it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ColumnEntry {
    pub camera: usize,
    pub owner: usize,
}

/// Sparse binary N x M association between 3D queries and per-camera 2D
/// queries. Columns are stored camera-major; within a camera group the owner
/// indices are strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MappingMatrix {
    pub n: usize,
    pub columns: Vec<ColumnEntry>,
    /// Length V + 1; camera v's columns are `columns[offsets[v]..offsets[v+1]]`.
    pub group_offsets: Vec<usize>,
}

impl MappingMatrix {
    pub fn m(&self) -> usize {
        self.columns.len()
    }

    pub fn cameras(&self) -> usize {
        self.group_offsets.len().saturating_sub(1)
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.group_offsets
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect()
    }

    pub fn group_range(&self, camera: usize) -> std::ops::Range<usize> {
        self.group_offsets[camera]..self.group_offsets[camera + 1]
    }

    pub fn owners(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c.owner).collect()
    }

    /// Dense N x M realization (row-major). Debug and test aid only; the
    /// sparse form is the one used everywhere else.
    pub fn dense<R: Real>(&self) -> Vec<R> {
        let mut t = vec![R::zero(); self.n * self.m()];
        for (j, col) in self.columns.iter().enumerate() {
            t[col.owner * self.m() + j] = R::one();
        }
        t
    }

    fn validate(&self) -> Result<()> {
        for v in 0..self.cameras() {
            let group = &self.columns[self.group_range(v)];
            for w in group.windows(2) {
                if w[0].owner >= w[1].owner {
                    return Err(Error::Usage("mapping: owners not strictly increasing in group".into()));
                }
            }
            if group.iter().any(|c| c.camera != v) {
                return Err(Error::Usage("mapping: column camera does not match group".into()));
            }
        }
        Ok(())
    }
}

/// Project every (clamped) anchor into every camera. Outer index camera,
/// inner index anchor.
pub fn project_all<R: Real>(anchors: &[Anchor3D<R>], rig: &CameraRig<R>) -> Vec<Vec<ProjectionResult<R>>> {
    rig.iter()
        .map(|cam| anchors.iter().map(|a| project_anchor(&a.clamped(), cam)).collect())
        .collect()
}

/// Keep the diagonal columns whose validity predicate fires, camera by camera.
pub fn build_mapping<R: Real>(anchors: &[Anchor3D<R>], rig: &CameraRig<R>) -> MappingMatrix {
    let projs = project_all(anchors, rig);
    build_mapping_from(anchors.len(), &projs)
}

fn build_mapping_from<R: Real>(n: usize, projs: &[Vec<ProjectionResult<R>>]) -> MappingMatrix {
    let mut columns = Vec::new();
    let mut group_offsets = vec![0];
    for (v, cam_projs) in projs.iter().enumerate() {
        for (j, proj) in cam_projs.iter().enumerate() {
            if proj.valid {
                columns.push(ColumnEntry { camera: v, owner: j });
            }
        }
        group_offsets.push(columns.len());
        let _ = v;
    }
    let m = MappingMatrix { n, columns, group_offsets };
    debug_assert!(m.validate().is_ok());
    m
}

/// Cap truncated columns (projected object center outside the image or behind
/// the camera) at [`MAX_TRUNCATED_PER_CAMERA`] per camera, dropping the
/// smallest projected-rectangle areas first; ties break toward keeping the
/// lower 3D-query index.
pub fn apply_caps<R: Real>(
    mapping: &MappingMatrix,
    anchors: &[Anchor3D<R>],
    rig: &CameraRig<R>,
) -> MappingMatrix {
    let projs = project_all(anchors, rig);
    apply_caps_from(mapping, &projs)
}

fn apply_caps_from<R: Real>(mapping: &MappingMatrix, projs: &[Vec<ProjectionResult<R>>]) -> MappingMatrix {
    let mut columns = Vec::new();
    let mut group_offsets = vec![0];
    for v in 0..mapping.cameras() {
        let group = &mapping.columns[mapping.group_range(v)];
        let truncated: Vec<&ColumnEntry> = group
            .iter()
            .filter(|c| !projs[v][c.owner].center_inside)
            .collect();
        let mut dropped: Vec<usize> = Vec::new();
        if truncated.len() > MAX_TRUNCATED_PER_CAMERA {
            let mut by_area: Vec<(f64, usize)> = truncated
                .iter()
                .map(|c| {
                    let area = projs[v][c.owner]
                        .rect
                        .map(|r| ((r.x1 - r.x0) * (r.y1 - r.y0)).as_f64())
                        .unwrap_or(0.0);
                    (area, c.owner)
                })
                .collect();
            // smallest area first; ties keep the lower owner index, so the
            // higher index is dropped earlier
            by_area.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(&a.1)));
            dropped = by_area[..truncated.len() - MAX_TRUNCATED_PER_CAMERA]
                .iter()
                .map(|&(_, owner)| owner)
                .collect();
        }
        for c in group {
            if !dropped.contains(&c.owner) || projs[v][c.owner].center_inside {
                columns.push(*c);
            }
        }
        group_offsets.push(columns.len());
    }
    MappingMatrix {
        n: mapping.n,
        columns,
        group_offsets,
    }
}

/// Materialized per-camera 2D queries for one decoder block.
#[derive(Debug)]
pub struct AllocationResult<R: Real = f64> {
    pub mapping: MappingMatrix,
    /// `[M, C]` gather of the owning 3D query rows.
    pub q2d: TensorId,
    /// Pixel reference point per 2D query: projected center when it lands
    /// strictly inside the image, else the clipped bounding-rectangle center.
    pub reference_points: Vec<(R, R)>,
    /// Truncation indicator per 2D query: projected object center outside the
    /// camera's image or behind it.
    pub truncation: Vec<bool>,
    pub group_sizes: Vec<usize>,
}

/// Build the capped mapping for `anchors` and gather `q3d` rows into 2D
/// queries with reference points and truncation bits.
pub fn allocate<R: Real>(
    g: &mut Graph<R>,
    q3d: TensorId,
    anchors: &[Anchor3D<R>],
    rig: &CameraRig<R>,
) -> Result<AllocationResult<R>> {
    let n = g.shape(q3d)[0];
    if n != anchors.len() {
        return Err(Error::Usage(format!(
            "allocate: {} query rows but {} anchors",
            n,
            anchors.len()
        )));
    }
    let projs = project_all(anchors, rig);
    let mapping = build_mapping_from(anchors.len(), &projs);
    let mapping = apply_caps_from(&mapping, &projs);

    let owners = mapping.owners();
    let q2d = g.gather_rows(q3d, &owners)?;
    let mut reference_points = Vec::with_capacity(mapping.m());
    let mut truncation = Vec::with_capacity(mapping.m());
    for col in &mapping.columns {
        let proj = &projs[col.camera][col.owner];
        truncation.push(!proj.center_inside);
        let rp = if proj.center_inside {
            (proj.points[0].u, proj.points[0].v)
        } else {
            // a valid column always has at least one in-front point
            proj.rect
                .as_ref()
                .map(|r| r.center())
                .ok_or_else(|| Error::Usage("valid column without bounding rectangle".into()))?
        };
        reference_points.push(rp);
    }
    let group_sizes = mapping.group_sizes();
    Ok(AllocationResult {
        mapping,
        q2d,
        reference_points,
        truncation,
        group_sizes,
    })
}
