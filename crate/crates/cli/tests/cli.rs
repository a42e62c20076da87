use std::path::Path;
use std::process::{Command, Output};

fn ego3rt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ego3rt")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 4
[scene]
image_width = 16
image_height = 16
[grid]
radial = 4
rays = 8
bev_side = 16
bev_cell = 1.0
[decoder]
layers = 1
dim = 8
pyramid_channels = 4
ffn_hidden = 8
[heads]
encoder_blocks = 1
seg_hidden = 4
seg_ratio = 2
[train]
steps = 4
scenes = 2
checkpoint_every = 2
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let out = dir.join("run");
    let body = format!("output_dir = {:?}\n{TINY}{extra}", out.to_str().unwrap());
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let scenes = dir.path().join("scenes");
    let o = ego3rt(&["gen-scenes", "--count", "2", "--seed", "4", "--out", scenes.to_str().unwrap(), "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    assert!(scenes.join("scene_0001").join("scene.toml").is_file());

    let o = ego3rt(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    assert!(text(&o).contains("final loss"));
    let run = dir.path().join("run");
    assert_eq!(std::fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 5);
    let ckpt = run.join("final").join("manifest.toml");
    assert!(ckpt.is_file() && run.join("ckpt_2").is_dir());

    let o = ego3rt(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--scenes", scenes.to_str().unwrap(), "--raw"]);
    assert!(o.status.success(), "{o:?}");
    let kv = text(&o);
    assert!(kv.contains("nds=") && kv.contains("iou_divider="));
    let again = ego3rt(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--scenes", scenes.to_str().unwrap(), "--raw"]);
    assert_eq!(text(&again), kv);

    let scene = scenes.join("scene_0000");
    let vdir = dir.path().join("viz");
    let o = ego3rt(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--scene", scene.to_str().unwrap(), "--viz", vdir.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    for f in ["camera_v0.ppm", "eyes_polar.ppm", "eyes_rect.ppm", "mask_drivable.ppm", "boxes.ppm"] {
        assert!(vdir.join(f).is_file(), "{f}");
    }
    let o = ego3rt(&["viz", "--ckpt", ckpt.to_str().unwrap(), "--scene", scene.to_str().unwrap(), "--out", dir.path().join("v2").to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[loss]\nelements = [\"lane\"]\n");
    assert_eq!(ego3rt(&["train", "--config", &cfg]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nstepz = 1\n").unwrap();
    assert_eq!(ego3rt(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn diverging_run_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("steps = 4", "steps = 30\nlr = 1e150\ngrad_clip = 0.0\nmomentum = 0.0");
    std::fs::write(&cfg, text).unwrap();
    let o = ego3rt(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(dir.path().join("run").join("diagnostic.txt").is_file());
}
