use super::*;
use crate::priorlab::{Primitive, PrimitiveKind, TRAIN_PALETTE};

fn centered_shape() -> ShapeSpec {
    ShapeSpec {
        primitives: vec![Primitive {
            kind: PrimitiveKind::Box {
                half_extents: [0.25, 0.2, 0.2],
            },
            center: [0.0; 3],
            color: [0.9, 0.2, 0.1],
        }],
        seed: 1,
    }
}

fn small_spec() -> SequenceSpec {
    let mut spec = SequenceSpec::new(centered_shape(), 4);
    spec.frames = 6;
    spec.width = 32;
    spec.height = 32;
    spec.focal = 32.0;
    spec.grid_size = 16;
    spec
}

fn render_config() -> RenderConfig {
    RenderConfig {
        samples: 32,
        ..RenderConfig::default()
    }
}

#[test]
fn unoccluded_frames_match_the_silhouette() {
    let seq = make_sequence(&small_spec(), &render_config()).unwrap();
    assert_eq!(seq.frames.len(), 6);
    for f in &seq.frames {
        assert!(f.validity_mask.iter().all(|&v| v == 1.0));
        let out = renderer::render(&seq.truth.fields, &f.camera, &render_config()).unwrap();
        let silhouette: Vec<f64> = out.mask.iter().map(|&m| (m >= 0.5) as u8 as f64).collect();
        assert_eq!(f.object_mask, silhouette);
        assert_eq!(f.rgb, out.rgb, "ground truth reproduces the frame");
        assert!(f.object_mask.contains(&1.0));
    }
    assert_eq!(seq.truth.surface.len(), SURFACE_POINTS);
}

#[test]
fn left_half_crop_invalidates_left_half() {
    let mut spec = small_spec();
    spec.crop = Some(Crop {
        x0: 0.5,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    });
    let seq = make_sequence(&spec, &render_config()).unwrap();
    for f in &seq.frames {
        for v in 0..32 {
            for u in 0..32 {
                let i = v * 32 + u;
                assert_eq!(f.validity_mask[i], (u >= 16) as u8 as f64);
                if u < 16 {
                    assert_eq!(f.object_mask[i], 0.0);
                    assert_eq!(&f.rgb[3 * i..3 * i + 3], &[0.0; 3]);
                }
            }
        }
    }
}

#[test]
fn occlusion_hides_the_requested_fraction() {
    let render = RenderConfig::default();
    for (i, shape) in [OccluderShape::Rectangle, OccluderShape::Ellipse]
        .into_iter()
        .enumerate()
    {
        let mut measured = Vec::new();
        for s in 0..4u64 {
            let mut spec = SequenceSpec::new(ShapeSpec::random(100 + s, &TRAIN_PALETTE), s + 10 * i as u64);
            spec.occlusion.fraction = 0.3;
            spec.occlusion.shape = shape;
            let seq = make_sequence(&spec, &render).unwrap();
            for f in &seq.frames {
                let out = renderer::render(&seq.truth.fields, &f.camera, &render).unwrap();
                let silhouette = out.mask.iter().filter(|&&m| m >= 0.5).count();
                let visible = f.object_mask.iter().filter(|&&m| m == 1.0).count();
                let hidden = (silhouette - visible) as f64 / silhouette as f64;
                assert!((0.2..=0.4).contains(&hidden), "{shape:?} hides {hidden}");
                measured.push(hidden);
                // Occluded pixels are painted with the occluder color.
                for p in 0..f.validity_mask.len() {
                    if f.validity_mask[p] == 0.0 {
                        assert_eq!(&f.rgb[3 * p..3 * p + 3], &spec.occlusion.color);
                    }
                }
            }
        }
        let mean = measured.iter().sum::<f64>() / measured.len() as f64;
        assert!((mean - 0.3).abs() < 0.05, "mean hidden fraction {mean}");
    }
}

#[test]
fn generation_is_deterministic() {
    let mut spec = small_spec();
    spec.occlusion.fraction = 0.3;
    let a = make_sequence(&spec, &render_config()).unwrap();
    let b = make_sequence(&spec, &render_config()).unwrap();
    assert_eq!(a.frames, b.frames);
    spec.seed += 1;
    let c = make_sequence(&spec, &render_config()).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[test]
fn invalid_sequences_rejected() {
    let mut spec = small_spec();
    spec.frames = 4;
    assert!(matches!(
        make_sequence(&spec, &render_config()),
        Err(FinvError::InvalidConfig(_))
    ));
    let mut spec = small_spec();
    spec.occlusion.fraction = 1.0;
    assert!(spec.validate().is_err());
    let mut spec = small_spec();
    spec.crop = Some(Crop {
        x0: 0.99,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    });
    assert!(matches!(
        make_sequence(&spec, &render_config()),
        Err(FinvError::InvalidInput(_))
    ));
}

#[test]
fn trajectory_follows_the_arc() {
    let spec = small_spec();
    let cams = spec.cameras().unwrap();
    for (t, cam) in cams.iter().enumerate() {
        let c = cam.center();
        let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        assert!((r - 1.6).abs() < 1e-12);
        assert!(((c[2] / r).asin().to_degrees() - 25.0).abs() < 1e-9);
        let az = c[1].atan2(c[0]).to_degrees().rem_euclid(360.0);
        assert!((az - 36.0 * t as f64).abs() < 1e-9, "frame {t} at {az}");
        let p = cam.project([0.0; 3]);
        assert!((p.pixel[0] - 16.0).abs() < 1e-9 && (p.pixel[1] - 16.0).abs() < 1e-9);
    }
}

#[test]
fn save_load_round_trip() {
    let mut spec = small_spec();
    spec.occlusion.fraction = 0.3;
    let seq = make_sequence(&spec, &render_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_sequence(&seq.frames, Some(&spec), dir.path()).unwrap();
    for name in ["manifest.json", "rgb_0000.png", "mask_0005.png", "valid_0003.png"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let loaded = load_sequence(dir.path()).unwrap();
    assert_eq!(loaded.len(), seq.frames.len());
    for (a, b) in loaded.iter().zip(&seq.frames) {
        assert_eq!(a.index, b.index);
        assert_eq!(a.object_mask, b.object_mask);
        assert_eq!(a.validity_mask, b.validity_mask);
        for r in 0..4 {
            for c in 0..4 {
                assert!((a.camera.world_to_camera[r][c] - b.camera.world_to_camera[r][c]).abs() <= 1e-12);
            }
        }
        assert_eq!((a.camera.fx, a.camera.cy), (b.camera.fx, b.camera.cy));
        let worst = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0);
    }
    let reader = SequenceReader::open(dir.path()).unwrap();
    assert_eq!(reader.spec(), Some(&spec));
    let first = reader.first(1).unwrap();
    assert_eq!(first.len(), 1);
    assert_eq!(reader.accessed(), vec![0]);
    reader.camera(5).unwrap();
    assert_eq!(reader.accessed(), vec![0], "camera lookups do not read frames");

    let again = tempfile::tempdir().unwrap();
    save_sequence(&seq.frames, Some(&spec), again.path()).unwrap();
    assert_eq!(
        fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(again.path().join(MANIFEST_FILE)).unwrap()
    );
}

#[test]
fn missing_and_malformed_files() {
    let seq = make_sequence(&small_spec(), &render_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_sequence(dir.path()), Err(FinvError::MissingFile(_))));
    save_sequence(&seq.frames, None, dir.path()).unwrap();
    fs::remove_file(dir.path().join("rgb_0002.png")).unwrap();
    match load_sequence(dir.path()) {
        Err(FinvError::MissingFile(p)) => assert!(p.ends_with("rgb_0002.png")),
        other => panic!("expected a missing-file error, got {other:?}"),
    }
    let manifest = dir.path().join(MANIFEST_FILE);
    fs::write(&manifest, "{\"schema\": \"FINVSEQ1\"").unwrap();
    assert!(matches!(load_sequence(dir.path()), Err(FinvError::Malformed { .. })));
    fs::write(&manifest, "{\"schema\": \"OTHER\", \"frames\": []}").unwrap();
    assert!(matches!(load_sequence(dir.path()), Err(FinvError::Malformed { .. })));
}

#[test]
fn benchmark_uses_held_out_shapes() {
    let specs = benchmark_specs(5, 3, 0.3);
    let train = priorlab::dataset(Split::Train, 64, 3);
    assert_eq!(specs.len(), 5);
    for s in &specs {
        assert!(s.validate().is_ok());
        assert!(!train.contains(&s.shape));
        assert_eq!(s.occlusion.fraction, 0.3);
    }
    assert_eq!(specs, benchmark_specs(5, 3, 0.3));
}
