//! Extract a watertight surface from a signed distance field on the tet grid and write it as PLY.
//!
//! `cargo run --release --example marching_tets -- [grid_res] [out.ply]`

use trigen::cli::ply::export_ply;
use trigen::data::desk4_shape;
use trigen::tetmesh::{marching_tets, watertight_report, TetGrid};

fn main() -> trigen::Result<()> {
    let mut args = std::env::args().skip(1);
    let res: usize = args.next().map_or(48, |a| a.parse().expect("grid resolution"));
    let out = args.next().unwrap_or_else(|| "torus.ply".into());

    let spec = desk4_shape("torus")?;
    let grid = TetGrid::build(res)?;
    println!("grid {res}: {} vertices, {} tets", grid.num_vertices(), grid.tets.len());
    let sdf: Vec<f64> = grid.vertices.iter().map(|&p| spec.sdf(p)).collect();
    let mesh = marching_tets(&grid, &sdf, &vec![[0.0; 3]; grid.num_vertices()])?;
    let rep = watertight_report(&mesh);
    println!("{} vertices, {} faces, area {:.4}, {rep:?}", mesh.vertices.len(), mesh.faces.len(), mesh.area());
    export_ply(&mesh, out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
