//! Triangle meshes: marching-cubes extraction from sampled scalar fields and
//! minimal ASCII OBJ/PLY writers.
//!
//! The field convention is positive outside / negative inside; a surface
//! crossing exists where the field passes through the iso level. Vertices on
//! shared cell edges are welded through a canonical edge key, so a surface
//! that closes inside the grid comes out watertight.

mod tables {
    include!("mesh_tables.rs");
}

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::Vector3;

use crate::scalar::{s, Scalar};

#[derive(Debug, Clone)]
pub struct TriangleMesh<S: Scalar> {
    pub vertices: Vec<Vector3<S>>,
    pub triangles: Vec<[u32; 3]>,
}

impl<S: Scalar> TriangleMesh<S> {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Counts edges not shared by exactly two triangles (0 for a closed mesh).
    pub fn boundary_edge_count(&self) -> usize {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let a = t[k];
                let b = t[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }
}

/// Corner offsets in the Lorensen-Cline numbering the tables assume.
const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs forming the 12 cell edges.
const EDGE_CONNECTIONS: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Extracts the iso-surface from a scalar field sampled on a regular grid.
///
/// `values` holds `dims[0] * dims[1] * dims[2]` samples with x fastest:
/// index `(iz * dims[1] + iy) * dims[0] + ix`. Grid point `(ix, iy, iz)`
/// sits at `origin + spacing * (ix, iy, iz)`. Returns an empty mesh when the
/// field never crosses the iso level.
pub fn marching_cubes<S: Scalar>(
    values: &[S],
    dims: [usize; 3],
    origin: [f64; 3],
    spacing: [f64; 3],
    iso: f64,
) -> TriangleMesh<S> {
    let [nx, ny, nz] = dims;
    assert_eq!(values.len(), nx * ny * nz, "grid sample count");
    let point_index = |ix: usize, iy: usize, iz: usize| (iz * ny + iy) * nx + ix;

    let mut vertices: Vec<Vector3<S>> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // Canonical key: (lower grid-point index, axis of the edge direction).
    let mut edge_vertex: HashMap<(usize, u8), u32> = HashMap::new();

    for iz in 0..nz.saturating_sub(1) {
        for iy in 0..ny.saturating_sub(1) {
            for ix in 0..nx.saturating_sub(1) {
                let mut corner_vals = [0.0f64; 8];
                let mut corner_pts = [[0usize; 3]; 8];
                let mut case = 0usize;
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    let p = [ix + off[0], iy + off[1], iz + off[2]];
                    corner_pts[c] = p;
                    let v = values[point_index(p[0], p[1], p[2])].widen();
                    corner_vals[c] = v;
                    if v < iso {
                        case |= 1 << c;
                    }
                }
                let edge_mask = tables::EDGE_TABLE[case];
                if edge_mask == 0 {
                    continue;
                }

                let mut edge_verts = [u32::MAX; 12];
                for (e, conn) in EDGE_CONNECTIONS.iter().enumerate() {
                    if edge_mask & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = (conn[0], conn[1]);
                    let (pa, pb) = (corner_pts[a], corner_pts[b]);
                    let ia = point_index(pa[0], pa[1], pa[2]);
                    let ib = point_index(pb[0], pb[1], pb[2]);
                    let (lo, lo_p, hi_p, va, vb) = if ia <= ib {
                        (ia, pa, pb, corner_vals[a], corner_vals[b])
                    } else {
                        (ib, pb, pa, corner_vals[b], corner_vals[a])
                    };
                    let axis = if lo_p[0] != hi_p[0] {
                        0u8
                    } else if lo_p[1] != hi_p[1] {
                        1
                    } else {
                        2
                    };
                    let key = (lo, axis);
                    let idx = *edge_vertex.entry(key).or_insert_with(|| {
                        let denom = vb - va;
                        let t = if denom.abs() < 1e-6 {
                            0.5
                        } else {
                            ((iso - va) / denom).clamp(0.0, 1.0)
                        };
                        let pos = Vector3::new(
                            s::<S>(origin[0]
                                + spacing[0] * (lo_p[0] as f64 + t * (hi_p[0] as f64 - lo_p[0] as f64))),
                            s::<S>(origin[1]
                                + spacing[1] * (lo_p[1] as f64 + t * (hi_p[1] as f64 - lo_p[1] as f64))),
                            s::<S>(origin[2]
                                + spacing[2] * (lo_p[2] as f64 + t * (hi_p[2] as f64 - lo_p[2] as f64))),
                        );
                        vertices.push(pos);
                        (vertices.len() - 1) as u32
                    });
                    edge_verts[e] = idx;
                }

                let tri_row = &tables::TRIANGLE_TABLE[case];
                let mut k = 0;
                while tri_row[k] >= 0 {
                    let a = edge_verts[tri_row[k] as usize];
                    let b = edge_verts[tri_row[k + 1] as usize];
                    let c = edge_verts[tri_row[k + 2] as usize];
                    if a != b && b != c && a != c {
                        // Reversed so normals face the positive (outside)
                        // region under the corner<iso case numbering.
                        triangles.push([a, c, b]);
                    }
                    k += 3;
                }
            }
        }
    }
    TriangleMesh { vertices, triangles }
}

/// Writes Wavefront OBJ (positions and faces only).
pub fn write_obj<S: Scalar>(mesh: &TriangleMesh<S>, out: &mut impl Write) -> io::Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x.widen(), v.y.widen(), v.z.widen())?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

/// Writes ASCII PLY.
pub fn write_ply<S: Scalar>(mesh: &TriangleMesh<S>, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", mesh.vertices.len())?;
    writeln!(out, "property float x")?;
    writeln!(out, "property float y")?;
    writeln!(out, "property float z")?;
    writeln!(out, "element face {}", mesh.triangles.len())?;
    writeln!(out, "property list uchar int vertex_indices")?;
    writeln!(out, "end_header")?;
    for v in &mesh.vertices {
        writeln!(out, "{} {} {}", v.x.widen(), v.y.widen(), v.z.widen())?;
    }
    for t in &mesh.triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}
