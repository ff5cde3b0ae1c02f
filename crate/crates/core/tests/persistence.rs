use cdp_core::cascade::{CascadeConfig, TrainSettings};
use cdp_core::expert::{generate_dataset, Dataset, DatasetParams, Split};
use cdp_core::nets::{checkpoint, Conditioning, Level};
use cdp_core::workspace::{OccupancyGrid, VALIDATION_STEP};

fn small_dataset() -> Dataset {
    generate_dataset(6, 21, Split::Train, &DatasetParams::default()).unwrap()
}

#[test]
fn dataset_files_round_trip_byte_identically() {
    let d = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let first = std::fs::read(Dataset::records_path(dir.path(), Split::Train)).unwrap();
    let loaded = Dataset::load(dir.path(), Split::Train).unwrap();
    assert_eq!(loaded.records, d.records);
    let again = tempfile::tempdir().unwrap();
    loaded.save(again.path()).unwrap();
    assert_eq!(std::fs::read(Dataset::records_path(again.path(), Split::Train)).unwrap(), first);
    assert_eq!(
        std::fs::read(Dataset::manifest_path(dir.path(), Split::Train)).unwrap(),
        std::fs::read(Dataset::manifest_path(again.path(), Split::Train)).unwrap()
    );
}

#[test]
fn generation_is_deterministic_and_experts_are_valid() {
    let (a, b) = (small_dataset(), small_dataset());
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    for r in &a.records {
        assert!(r.workspace.path_valid(&r.trajectory, VALIDATION_STEP).valid);
        assert_eq!(r.trajectory.len(), 65);
        assert_eq!(r.trajectory[0], r.workspace.start);
        assert_eq!(r.trajectory[64], r.workspace.goal);
    }
}

#[test]
fn checkpoint_reload_reproduces_denoiser_outputs() {
    let data = small_dataset();
    let cc = CascadeConfig::default();
    let settings = TrainSettings { steps: 2, batch_size: 4, warmup_steps: 1, ..TrainSettings::default() };
    let state = cdp_core::cascade::train_high(&data.records, &cc, &settings, 5, &mut |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("high.ckpt");
    checkpoint::save(&state, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.step, state.step);
    assert_eq!(back.m, state.m);
    assert_eq!(back.v, state.v);

    let ws = &data.records[0].workspace;
    let n = state.model.config.states;
    let grid = OccupancyGrid::rasterize(ws, cc.grid_resolution).with_markers(ws.start, ws.goal);
    let cond = Conditioning::new(&grid, ws.start, ws.goal, None, vec![0.0; 2 * n]);
    let x: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.37).sin()).collect();
    for t in [1, 50, 100] {
        let a = state.model.denoise(&x, t, std::slice::from_ref(&cond)).unwrap();
        let b = back.model.denoise(&x, t, std::slice::from_ref(&cond)).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(back.model.level(), Level::High);
}
