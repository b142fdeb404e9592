use svsm_lab::scenegen::{
    generate_scene, read_dataset, render_view, scene_seed, write_dataset, SceneDataset, TrajectoryConfig,
};

#[test]
fn stored_frames_round_trip_and_rerender_exactly() {
    let base = 40;
    let traj = TrajectoryConfig::stereo();
    let seeds: Vec<u64> = (0..3).map(|i| scene_seed(base, i)).collect();
    let ds = SceneDataset::generate(&seeds, &traj, 16, 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.bin");
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.to_bytes(), ds.to_bytes());
    assert_eq!(std::fs::read(&path).unwrap(), ds.to_bytes());
    for (i, frames) in back.scenes.iter().enumerate() {
        let scene = generate_scene(scene_seed(base, i));
        for f in frames {
            let again = render_view(&scene, &f.pose, &f.intrinsics, back.height, back.width).unwrap();
            let same = again.data.iter().zip(&f.image.data).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "scene {i}");
        }
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let ds = SceneDataset::generate(&[1], &TrajectoryConfig::default(), 8, 8).unwrap();
    let bytes = ds.to_bytes();
    assert!(SceneDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(SceneDataset::from_bytes(&bad).is_err());
}
