//! Procedural shapes: the desk4 fixture, colored surface clouds, and a custom CSG shape
//! serialized to the JSON format accepted by `data.shapes`.

use trigen::data::{desk4, normalize_shape, sample_colored_pointcloud, ColorRule, Csg, Primitive, ShapeSpec};

fn main() -> trigen::Result<()> {
    for s in desk4() {
        let c = sample_colored_pointcloud(&s, 2048, 0)?;
        let mean: Vec<f64> = (0..3).map(|k| c.colors.iter().map(|x| x[k]).sum::<f64>() / c.len() as f64).collect();
        println!("{:<11} {} points, mean color {mean:.2?}", s.name, c.len());
    }

    let mug = ShapeSpec::new(
        "mug",
        Csg::subtraction(
            Csg::union(
                Csg::leaf(Primitive::Cylinder { center: [0.0, 0.0, 0.0], radius: 0.5, half_height: 0.6 }),
                Csg::leaf(Primitive::Torus { center: [0.55, 0.0, 0.0], major: 0.25, minor: 0.07 }),
            ),
            Csg::leaf(Primitive::Cylinder { center: [0.0, 0.0, 0.15], radius: 0.42, half_height: 0.6 }),
        ),
        ColorRule::Stripes { axis: 2, period: 0.25, colors: [[0.9, 0.9, 0.85], [0.2, 0.3, 0.7]] },
    )?;
    let mug = normalize_shape(&mug, 4096, 0)?;
    println!("{}", serde_json::to_string_pretty(&mug).expect("shape serializes"));
    Ok(())
}
