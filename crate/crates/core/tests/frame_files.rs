use std::fs;

use grtn_core::data::io::{list_frames, load_frame, load_sequence, save_frame, save_sequence};
use grtn_core::data::{synth_sequence, SynthKind};
use grtn_core::harness::{Checkpoint, RunConfig, Trainer};
use grtn_core::Error;

#[test]
fn sequence_round_trips_through_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth_sequence(SynthKind::TexturedPan, 4, (9, 7), 3, 1).unwrap();
    let quantized: Vec<_> = seq
        .frames
        .iter()
        .map(|f| f.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
        .collect();
    let paths = save_sequence(dir.path(), &quantized).unwrap();
    assert!(paths[3].ends_with("frame_0003.ppm"));
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    assert_eq!(list_frames(dir.path()).unwrap(), paths);
    assert_eq!(load_sequence(dir.path()).unwrap().frames, quantized);
}

#[test]
fn errors_name_the_file_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.pgm");
    fs::write(&bad, b"P5 3 3 255\n\x01\x02").unwrap();
    match load_frame(&bad) {
        Err(Error::Parse { offset, msg }) => {
            assert_eq!(offset, 13);
            assert!(msg.contains("broken.pgm"), "{msg}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    assert!(matches!(list_frames(dir.path().join("missing").as_path()), Err(Error::Io(_))));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_sequence(empty.path()), Err(Error::Data(_))));
}

#[test]
fn mismatched_frame_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_sequence(SynthKind::MovingShapes, 1, (4, 4), 1, 0).unwrap();
    let b = synth_sequence(SynthKind::MovingShapes, 1, (4, 6), 1, 0).unwrap();
    save_frame(&dir.path().join("a.pgm"), &a.frames[0]).unwrap();
    save_frame(&dir.path().join("b.pgm"), &b.frames[0]).unwrap();
    assert!(matches!(load_sequence(dir.path()), Err(Error::FrameSizeChanged { .. })));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut run = RunConfig::preset("tiny").unwrap();
    run.train.iterations = 2;
    let mut t = Trainer::<f32>::new(run).unwrap();
    t.run(|_| {}).unwrap();
    let ck = t.checkpoint();
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ck);
    assert!(fs::metadata(&path).unwrap().len() > 0);
}
