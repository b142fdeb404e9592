//! Generates a few synthetic scenes, stores them and writes their frames as PNG.
//!
//! Run with `cargo run --example synthetic_scenes -- [out_dir]`.

use std::path::PathBuf;

use svsm_lab::scenegen::{read_dataset, scene_seeds, write_dataset, SceneDataset, TrajectoryConfig};

fn main() -> svsm_lab::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("svsm-scenes"));
    std::fs::create_dir_all(&out).map_err(|e| svsm_lab::Error::io(&out, e))?;

    let traj = TrajectoryConfig { window: 8, ..TrajectoryConfig::default() };
    let ds = SceneDataset::generate(&scene_seeds(0, 3), &traj, 64, 64)?;
    let path = out.join("scenes.bin");
    write_dataset(&path, &ds)?;
    let back = read_dataset(&path)?;
    assert_eq!(back, ds);

    for (s, frames) in back.scenes.iter().enumerate() {
        for (f, view) in frames.iter().enumerate() {
            view.image.save_png(&out.join(format!("scene{s}_frame{f}.png")))?;
        }
        let c = frames[0].pose.camera_center();
        println!("scene {s}: {} frames, first camera at ({:.2}, {:.2}, {:.2})", frames.len(), c.x, c.y, c.z);
    }
    println!("wrote {} and {} PNG frames to {}", path.display(), back.scenes.len() * traj.window, out.display());
    Ok(())
}
