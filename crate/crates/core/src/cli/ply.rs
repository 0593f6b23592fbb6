//! Binary little-endian PLY export for meshes and colored point clouds.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::tetmesh::{TriMesh, Vec3};

/// Vertex color used when a mesh carries none.
pub const DEFAULT_GRAY: u8 = 200;

pub fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(vertices: usize, faces: Option<usize>) -> String {
    let mut h = format!(
        "ply\nformat binary_little_endian 1.0\ncomment trigen\nelement vertex {vertices}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n"
    );
    if let Some(f) = faces {
        h.push_str(&format!("element face {f}\nproperty list uchar int vertex_indices\n"));
    }
    h.push_str("end_header\n");
    h
}

fn vertex_bytes(out: &mut Vec<u8>, points: &[Vec3], colors: Option<&[Vec3]>) {
    for (i, p) in points.iter().enumerate() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        match colors {
            Some(cols) => out.extend(cols[i].map(quantize)),
            None => out.extend([DEFAULT_GRAY; 3]),
        }
    }
}

pub fn mesh_ply_bytes(mesh: &TriMesh) -> Vec<u8> {
    let mut out = header(mesh.vertices.len(), Some(mesh.faces.len())).into_bytes();
    vertex_bytes(&mut out, &mesh.vertices, mesh.colors.as_deref());
    for f in &mesh.faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

pub fn export_ply(mesh: &TriMesh, path: &Path) -> Result<()> {
    write_bytes(path, &mesh_ply_bytes(mesh))
}

/// Vertex-only PLY.
pub fn export_points_ply(points: &[Vec3], colors: Option<&[Vec3]>, path: &Path) -> Result<()> {
    let mut out = header(points.len(), None).into_bytes();
    vertex_bytes(&mut out, points, colors);
    write_bytes(path, &out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}
