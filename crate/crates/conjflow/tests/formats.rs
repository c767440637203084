use std::fs;
use std::path::Path;

use conjflow::checkpoint::Checkpoint;
use conjflow::config::{desk, preset, preset_names, RunConfig};
use conjflow::io::{generate_toy_stream, read_flo, read_frame, read_labels, write_flo, write_frame, write_labels, DirectoryStream, FLOW_MAGIC};
use conjflow::protocol::TrainSession;
use conjflow::Error;
use conjflow_core::stream::{toy_spec, FrameSource, SyntheticStream};
use conjflow_core::Tensor;
use proptest::prelude::*;

fn ramp(c: usize, h: usize, w: usize) -> Tensor {
    let n = c * h * w;
    Tensor::from_vec(&[c, h, w], (0..n).map(|i| (i % 256) as f64 / 255.0).collect()).unwrap()
}

fn write_stream(root: &Path, frames: usize, h: usize, w: usize) {
    fs::create_dir_all(root.join("frames")).unwrap();
    for t in 0..frames {
        write_frame(&root.join("frames").join(format!("{t:06}.png")), &ramp(3, h, w)).unwrap();
    }
}

#[test]
fn flo_layout_is_magic_height_width_then_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.flo");
    let mut flow = Tensor::zeros(&[2, 2, 3]);
    flow.set3(0, 1, 2, 1.5);
    flow.set3(1, 1, 2, -0.25);
    write_flo(&path, &flow).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], &FLOW_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    assert_eq!(bytes.len(), 12 + 2 * 3 * 8);
    let last = 12 + 5 * 8;
    assert_eq!(f32::from_le_bytes(bytes[last..last + 4].try_into().unwrap()), 1.5);
    assert_eq!(f32::from_le_bytes(bytes[last + 4..last + 8].try_into().unwrap()), -0.25);
    assert_eq!(read_flo(&path).unwrap(), flow);
}

#[test]
fn truncated_flo_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.flo");
    write_flo(&path, &Tensor::zeros(&[2, 4, 4])).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_flo(&path), Err(Error::Format { .. })));
    fs::write(&path, b"nope").unwrap();
    assert!(matches!(read_flo(&path), Err(Error::Format { .. })));
}

#[test]
fn frames_round_trip_through_eight_bits() {
    let dir = tempfile::tempdir().unwrap();
    for c in [1, 3] {
        let path = dir.path().join(if c == 1 { "g.pgm" } else { "c.png" });
        let frame = ramp(c, 5, 7);
        write_frame(&path, &frame).unwrap();
        assert_eq!(read_frame(&path).unwrap(), frame);
    }
}

#[test]
fn labels_are_grey_class_ids() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.png");
    let labels: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
    write_labels(&path, &labels, 3, 4).unwrap();
    assert_eq!(read_labels(&path).unwrap(), (labels, 3, 4));
    assert!(write_labels(&path, &[0; 5], 3, 4).is_err());
}

#[test]
fn missing_frames_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(DirectoryStream::open(dir.path()), Err(Error::MissingDirectory(_))));
}

#[test]
fn mixed_resolution_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_stream(dir.path(), 3, 6, 8);
    write_frame(&dir.path().join("frames/000002.png"), &ramp(3, 6, 9)).unwrap();
    match DirectoryStream::open(dir.path()) {
        Err(Error::Resolution { index, expected, found }) => {
            assert_eq!(index, 2);
            assert_eq!(expected, (6, 8, 3));
            assert_eq!(found, (6, 9, 3));
        }
        other => panic!("expected a resolution error, got {other:?}"),
    }
}

#[test]
fn gaps_and_bad_names_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_stream(dir.path(), 3, 4, 4);
    fs::remove_file(dir.path().join("frames/000001.png")).unwrap();
    assert!(matches!(DirectoryStream::open(dir.path()), Err(Error::Format { .. })));
    let dir = tempfile::tempdir().unwrap();
    write_stream(dir.path(), 2, 4, 4);
    write_frame(&dir.path().join("frames/7.png"), &ramp(3, 4, 4)).unwrap();
    assert!(matches!(DirectoryStream::open(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn hundred_frame_directory_reads_in_order() {
    let dir = tempfile::tempdir().unwrap();
    write_stream(dir.path(), 100, 4, 6);
    let mut s = DirectoryStream::open(dir.path()).unwrap();
    assert_eq!(s.len(), Some(100));
    assert_eq!((s.channels(), s.height(), s.width()), (3, 4, 6));
    for t in 0..100 {
        assert_eq!(s.next_frame().unwrap().t, t);
    }
    assert!(matches!(s.next_frame(), Err(conjflow_core::Error::EndOfStream { frames: 100 })));
    s.seek(42).unwrap();
    assert_eq!(s.next_frame().unwrap().t, 42);
    assert!(s.ground_truth(3).unwrap().is_none());
}

#[test]
fn generated_stream_matches_the_synthetic_source() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy_spec(1, 0);
    let summary = generate_toy_stream(&spec, dir.path()).unwrap();
    assert_eq!(summary.frames as usize, spec.frames());
    assert_eq!(summary.classes, ["background", "square", "disc"]);
    let synthetic = SyntheticStream::new(spec.clone()).unwrap();
    let mut disk = DirectoryStream::open(dir.path()).unwrap();
    for t in 0..spec.frames() as u64 {
        let frame = disk.next_frame().unwrap();
        let rendered = synthetic.render(t as usize);
        assert!(frame.pixels.max_abs_diff(&rendered) <= 0.5 / 255.0 + 1e-12);
        let gt = disk.ground_truth(t).unwrap().unwrap();
        let expected = synthetic.ground_truth(t).unwrap().unwrap();
        assert_eq!(gt.labels, expected.labels);
        match (gt.flow, expected.flow) {
            (Some(a), Some(b)) => assert!(a.max_abs_diff(&b) == 0.0),
            (None, None) => assert_eq!(t, 0),
            _ => panic!("flow presence differs at {t}"),
        }
    }
    // generation is deterministic
    let again = tempfile::tempdir().unwrap();
    generate_toy_stream(&spec, again.path()).unwrap();
    for sub in ["frames/000007.png", "labels/000007.png", "flow/000007.flo"] {
        assert_eq!(fs::read(dir.path().join(sub)).unwrap(), fs::read(again.path().join(sub)).unwrap());
    }
}

fn tiny() -> RunConfig {
    let mut cfg = desk();
    if let conjflow::config::StreamConfig::Synthetic(s) = &mut cfg.stream {
        s.laps = 2;
    }
    cfg.protocol.train_laps = 1;
    cfg.protocol.eval_laps = 1;
    cfg.eval.template_spacing = 4;
    cfg
}

#[test]
fn checkpoint_header_and_hash_check() {
    let cfg = tiny();
    let mut session = TrainSession::new(cfg.clone()).unwrap();
    session.run_until(4).unwrap();
    let ckpt = session.checkpoint();
    let hash = cfg.hash();
    let bytes = ckpt.to_bytes(&hash).unwrap();
    assert_eq!(&bytes[..8], b"CJFLCKPT");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(&bytes[12..44], &hash);
    let (back, stored) = Checkpoint::from_bytes(&bytes, Some(&hash)).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(stored, hash);

    let mut other = cfg.clone();
    other.contrastive.tau = 0.2;
    assert!(matches!(Checkpoint::from_bytes(&bytes, Some(&other.hash())), Err(Error::ConfigMismatch)));
    // the hash ignores output settings
    let mut cosmetic = cfg.clone();
    cosmetic.output.log_every = 3;
    assert_eq!(cosmetic.hash(), hash);

    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad, None), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..20], None), Err(Error::Checkpoint(_))));
}

#[test]
fn configs_round_trip_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    for name in preset_names() {
        let cfg = preset(name).unwrap();
        let path = dir.path().join(format!("{name}.toml"));
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
    let path = dir.path().join("broken.toml");
    fs::write(&path, "[model]\nlevels = \"two\"\n").unwrap();
    assert!(RunConfig::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flo_round_trips_f32_values(h in 1usize..6, w in 1usize..6, seed in prop::collection::vec(-100.0f32..100.0, 72)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.flo");
        let data: Vec<f64> = (0..2 * h * w).map(|i| seed[i % seed.len()] as f64).collect();
        let flow = Tensor::from_vec(&[2, h, w], data).unwrap();
        write_flo(&path, &flow).unwrap();
        prop_assert_eq!(read_flo(&path).unwrap(), flow);
    }
}
