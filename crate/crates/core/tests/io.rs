use std::collections::BTreeMap;
use std::path::Path;

use hyperplanes::io::{
    generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, sphere_cameras, synthetic_datasets, Primitive,
    PrimitiveKind, SyntheticScene, SyntheticSpec, MANIFEST_NAME,
};
use hyperplanes::meta::{Split, TrainConfig, Trainer};
use hyperplanes::par::ExecPolicy;
use hyperplanes::render::{render_image, RenderConfig};
use hyperplanes::Error;

fn spec(objects: usize, test_objects: usize, views: usize) -> SyntheticSpec {
    SyntheticSpec {
        objects,
        test_objects,
        views,
        resolution: 8,
        oracle_samples: 32,
        ..SyntheticSpec::default()
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn fifty_views_split_evenly_between_support_and_query() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(1, 0, 50), dir.path(), ExecPolicy::Sequential).unwrap();
    let data = load_dataset(dir.path(), Split::Train, ExecPolicy::Sequential).unwrap();
    let task = &data.tasks[0];
    assert_eq!((task.support.len(), task.query.len()), (25, 25));
    assert!(task.support.iter().all(|v| v.view_id % 2 == 0));
    // an object directory on its own loads as a single task
    let single = load_dataset(&dir.path().join(&task.object_id), Split::Test, ExecPolicy::Sequential).unwrap();
    assert_eq!(single.tasks[0].query.len(), 25);
}

#[test]
fn malformed_pose_is_reported_with_its_view() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&spec(1, 0, 6), dir.path(), ExecPolicy::Sequential).unwrap();
    let manifest = dir.path().join("obj_000").join(MANIFEST_NAME);
    let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    json["frames"][3]["transform_matrix"][0][0] = serde_json::json!(2.5);
    std::fs::write(&manifest, serde_json::to_vec(&json).unwrap()).unwrap();
    match load_dataset(dir.path(), Split::Train, ExecPolicy::Sequential) {
        Err(Error::Format { path, field, message }) => {
            assert_eq!(path, manifest);
            assert_eq!(field, "frames[3].transform_matrix");
            assert!(message.contains("view 3"), "{message}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn loading_matches_the_in_memory_dataset() {
    let s = spec(3, 1, 6);
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&s, dir.path(), ExecPolicy::Parallel).unwrap();
    let (train, test) = synthetic_datasets(&s, ExecPolicy::Parallel).unwrap();
    for (split, memory) in [(Split::Train, train), (Split::Test, test)] {
        let first = load_dataset(dir.path(), split, ExecPolicy::Parallel).unwrap();
        let again = load_dataset(dir.path(), split, ExecPolicy::Sequential).unwrap();
        assert_eq!(first, again);
        assert_eq!(first.tasks.len(), memory.tasks.len());
        for (a, b) in first.tasks.iter().zip(&memory.tasks) {
            assert_eq!(a.object_id, b.object_id);
            for (va, vb) in a.support.iter().chain(&a.query).zip(b.support.iter().chain(&b.query)) {
                assert_eq!(va.pixels, vb.pixels);
                let drift = (va.camera.c2w() - vb.camera.c2w()).abs().max();
                assert!(drift < 1e-12, "pose drift {drift}");
            }
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let s = spec(2, 1, 4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&s, a.path(), ExecPolicy::Parallel).unwrap();
    generate_synthetic(&s, b.path(), ExecPolicy::Sequential).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);
}

fn oracle(samples: usize) -> RenderConfig {
    RenderConfig {
        coarse_samples: samples,
        fine_samples: 0,
        policy: ExecPolicy::Sequential,
        ..RenderConfig::default()
    }
}

#[test]
fn oracle_sphere_silhouette_matches_the_exact_chord() {
    let prim = Primitive {
        kind: PrimitiveKind::Sphere { radius: 0.9 },
        center: [0.2, 0.0, -0.1],
        albedo: [0.1, 0.6, 0.3],
        density: 20.0,
    };
    let cams = sphere_cameras(&SyntheticSpec {
        views: 3,
        resolution: 32,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = oracle(512);
    let (mut agree, mut total) = (0, 0);
    for cam in &cams {
        let out = render_image(&SyntheticScene(prim), cam, &cfg).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let ray = cam.pixel_ray(x, y, cfg.near, cfg.far).unwrap();
                let exact = prim.exact_color(&ray, cfg.background);
                let exact_opacity = (1.0 - exact[0]) / (1.0 - prim.albedo[0]);
                agree += usize::from((out.pixels[y * 32 + x].opacity > 0.5) == (exact_opacity > 0.5));
                total += 1;
            }
        }
    }
    assert!(agree as f64 >= 0.999 * total as f64, "{agree} of {total}");
}

#[test]
fn transparent_primitive_renders_pure_background() {
    let prim = Primitive {
        kind: PrimitiveKind::Box {
            half_extent: [0.5, 0.6, 0.7],
        },
        center: [0.0; 3],
        albedo: [0.2, 0.2, 0.2],
        density: 0.0,
    };
    let cam = &sphere_cameras(&spec(1, 0, 2)).unwrap()[0];
    let img = render_image(&SyntheticScene(prim), cam, &oracle(64)).unwrap().image;
    assert!(img.data().iter().all(|&v| v == 1.0));
}

#[test]
fn checkpoint_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run").join("c.ckpt");
    let cfg = TrainConfig {
        policy: ExecPolicy::Sequential,
        ..TrainConfig::profile("micro").unwrap()
    };
    let (train, _) = synthetic_datasets(
        &SyntheticSpec {
            resolution: 12,
            ..spec(2, 0, 8)
        },
        ExecPolicy::Sequential,
    )
    .unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.run(&train, None, 3, |_, _| Ok(())).unwrap();
    let ckpt = trainer.checkpoint();
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

    let bytes = std::fs::read(&path).unwrap();
    for keep in [0, 7, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..keep]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { path: p, .. }) => assert_eq!(p, path),
            other => panic!("truncated to {keep} bytes: {other:?}"),
        }
    }
}
