//! Render one desk4 shape three ways: sphere-traced ground truth, hard rasterization of the
//! extracted mesh, and the soft rasterizer with a gradient w.r.t. mesh vertices.

use trigen::data::{desk4_shape, sphere_trace_render};
use trigen::metrics::mask_iou;
use trigen::render::{rasterize_hard, rasterize_soft, render_losses, sample_camera, write_pfm, write_pgm, CameraDist, SoftParams};
use trigen::numerics::Tape;
use trigen::tetmesh::{marching_tets, TetGrid};

fn main() -> trigen::Result<()> {
    let spec = desk4_shape("sphere_box")?;
    let cam = sample_camera(3, &CameraDist { resolution: 128, ..CameraDist::default() })?;
    let truth = sphere_trace_render(&spec, &cam);

    let grid = TetGrid::build(64)?;
    let sdf: Vec<f64> = grid.vertices.iter().map(|&p| spec.sdf(p)).collect();
    let mesh = marching_tets(&grid, &sdf, &vec![[0.0; 3]; grid.num_vertices()])?;
    let hard = rasterize_hard(&mesh, &cam);
    println!("coverage {:.3}, mask IoU traced vs rasterized {:.4}", truth.coverage(), mask_iou(&truth.mask, &hard.mask)?);

    let dir = std::env::temp_dir().join("trigen-render");
    std::fs::create_dir_all(&dir)?;
    write_pgm(&dir.join("mask.pgm"), cam.width, cam.height, &hard.mask)?;
    write_pfm(&dir.join("depth.pfm"), cam.width, cam.height, &hard.depth)?;
    println!("wrote {}/mask.pgm and depth.pfm", dir.display());

    let tape = Tape::new();
    let v = tape.var(mesh.vertex_tensor());
    let soft = rasterize_soft(v, &mesh.faces, &cam, SoftParams::default())?;
    let (lm, ld) = render_losses(soft, &truth)?;
    let g = tape.backward(lm.add(ld)?)?;
    let gn = g.wrt(v).data().iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("soft losses: mask {:.5} depth {:.5}; |d loss / d vertices| = {gn:.4}", lm.item(), ld.item());
    Ok(())
}
