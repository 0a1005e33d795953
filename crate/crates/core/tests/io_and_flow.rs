use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use tempretinex::data_io::{
    load_dataset, load_frame, load_sequence, save_frame, save_sequence, synth_sequence, SaveFormat, SynthKind,
};
use tempretinex::flow::{
    align_previous, build_estimator, build_estimator_or_classical, ClassicalFlow, ExternalFlow, FlowBackend,
    FlowEstimator, FlowField, ZeroFlow,
};
use tempretinex::networks::{FinalInit, Networks, RetinexPair};
use tempretinex::pipeline::{enhance_sequence, TemporalState};
use tempretinex::preprocessing::{channel_histogram, histogram_match};
use tempretinex::{Error, Frame, RunConfig};

fn textured(h: usize, w: usize) -> Frame {
    Frame::from_fn(h, w, |y, x, c| ((x * 7 + y * 13 + c * 31) % 97) as f32 / 96.0)
}

#[test]
fn png8_round_trip_within_half_step() {
    let dir = tempfile::tempdir().unwrap();
    let f = textured(17, 19);
    let p = dir.path().join("a.png");
    save_frame(&f, &p, SaveFormat::Png8).unwrap();
    let back = load_frame(&p).unwrap();
    assert_eq!(back.dims(), (17, 19));
    assert!(back.max_abs_diff(&f).unwrap() <= 0.5 / 255.0 + 1e-6);
}

#[test]
fn png16_round_trip_within_half_step() {
    let dir = tempfile::tempdir().unwrap();
    let f = textured(16, 16).map(|v| v * 0.37);
    let p = dir.path().join("a.png");
    save_frame(&f, &p, SaveFormat::Png16).unwrap();
    let back = load_frame(&p).unwrap();
    assert!(back.max_abs_diff(&f).unwrap() <= 0.5 / 65535.0 + 1e-7);
}

#[test]
fn sequences_load_in_name_order_and_filter_by_pattern() {
    let dir = tempfile::tempdir().unwrap();
    let (low, _) = synth_sequence(SynthKind::Pan, 3, (16, 20), 0.5, 0.0, 1).unwrap();
    assert_eq!(save_sequence(&low, dir.path(), SaveFormat::Png16).unwrap(), 3);
    std::fs::write(dir.path().join("notes.txt"), "not a frame").unwrap();
    save_frame(&textured(16, 20), &dir.path().join("other_0.png"), SaveFormat::Png8).unwrap();

    let seq = load_sequence(dir.path(), "frame_*.png").unwrap();
    assert_eq!(seq.len(), 3);
    for (a, b) in seq.frames.iter().zip(&low.frames) {
        assert!(a.max_abs_diff(b).unwrap() <= 1e-4);
    }
    assert_eq!(load_sequence(dir.path(), "*").unwrap().len(), 4);
}

#[test]
fn dataset_has_one_sequence_per_subdirectory() {
    let root = tempfile::tempdir().unwrap();
    for (i, name) in ["b_clip", "a_clip"].iter().enumerate() {
        let (seq, _) = synth_sequence(SynthKind::Static, 2 + i, (16, 16), 0.5, 0.0, i as u64).unwrap();
        save_sequence(&seq, &root.path().join(name), SaveFormat::Png8).unwrap();
    }
    let data = load_dataset(root.path(), "*.png").unwrap();
    let names: Vec<_> = data.iter().map(|s| (s.name.as_str(), s.len())).collect();
    assert_eq!(names, [("a_clip", 3), ("b_clip", 2)]);
}

#[test]
fn load_errors_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_sequence(dir.path(), "*.png"), Err(Error::NoFrames { .. })));
    let bad = dir.path().join("broken.png");
    std::fs::write(&bad, b"not a png").unwrap();
    assert!(matches!(load_frame(&bad), Err(Error::Image { .. })));
    save_frame(&textured(8, 8), &dir.path().join("tiny.png"), SaveFormat::Png8).unwrap();
    assert!(matches!(load_sequence(dir.path(), "tiny.png"), Err(Error::Shape(_))));
    assert!(load_sequence(&dir.path().join("missing"), "*.png").is_err());
}

/// A stand-in for a deep flow model: ignores its inputs and emits a fixed
/// field of the right size.
fn fake_flow_command(dir: &Path, h: usize, w: usize) -> (String, std::path::PathBuf) {
    let flo = dir.join("fixed.flo");
    FlowField::constant(h, w, 0.5, -0.25).write_flo(&flo).unwrap();
    let script = dir.join("fake_flow.sh");
    std::fs::write(&script, format!("#!/bin/sh\ntest -f \"$1\" && test -f \"$2\" && test -f \"$3\" && cp '{}' \"$4\"\n", flo.display()))
        .unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    let ckpt = dir.join("model.pth");
    std::fs::write(&ckpt, b"opaque").unwrap();
    (script.display().to_string(), ckpt)
}

#[test]
fn external_adapter_reads_the_program_output() {
    let dir = tempfile::tempdir().unwrap();
    let (cmd, ckpt) = fake_flow_command(dir.path(), 16, 16);
    let mut est = ExternalFlow::new(Some(&cmd), Some(&ckpt)).unwrap();
    let flow = est.estimate(&textured(16, 16), &textured(16, 16)).unwrap();
    assert_eq!(flow.at(3, 4), (0.5, -0.25));
    // Wrong-size output from the program is rejected.
    assert!(est.estimate(&textured(16, 18), &textured(16, 18)).is_err());

    let mut failing = ExternalFlow::new(Some("false"), Some(&ckpt)).unwrap();
    assert!(matches!(
        failing.estimate(&textured(16, 16), &textured(16, 16)),
        Err(Error::EstimatorUnavailable(_))
    ));
}

#[test]
fn missing_external_model_falls_back_to_classical() {
    let missing = Path::new("/nonexistent/flow.pth");
    assert!(matches!(
        build_estimator(FlowBackend::External, Some("raft"), Some(missing)),
        Err(Error::EstimatorUnavailable(_))
    ));
    let mut est = build_estimator_or_classical(FlowBackend::External, Some("raft"), Some(missing)).unwrap();
    let f = textured(32, 32);
    assert!(est.estimate(&f, &f).unwrap().max_abs() <= 0.5);
}

#[test]
fn pipeline_runs_with_every_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let (cmd, ckpt) = fake_flow_command(dir.path(), 16, 16);
    let nets = Networks::with_final_init(1, FinalInit::Random);
    let seq = synth_sequence(SynthKind::Pan, 3, (16, 16), 0.2, 0.01, 2).unwrap().0;
    let cfg = RunConfig {
        self_ensemble: false,
        ..RunConfig::default()
    };
    let estimators: Vec<Box<dyn FlowEstimator>> = vec![
        Box::new(ZeroFlow),
        Box::new(ClassicalFlow::default()),
        Box::new(ExternalFlow::new(Some(&cmd), Some(&ckpt)).unwrap()),
    ];
    for mut est in estimators {
        let out = enhance_sequence(&nets, &seq, est.as_mut(), &cfg).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.frames.iter().all(|f| f.data().iter().all(|v| v.is_finite())));
    }
}

#[test]
fn static_scene_alignment_is_near_identity() {
    let (_, truth) = synth_sequence(SynthKind::Static, 2, (32, 32), 1.0, 0.0, 0).unwrap();
    let prev = truth.frames[0].clone();
    let state = TemporalState::from_pair(RetinexPair {
        r: prev.clone(),
        s: Frame::filled(32, 32, 0.5),
    });
    let (warped, _) = align_previous(&state, &prev.map(|v| 0.3 * v), &mut ClassicalFlow::default(), 1).unwrap();
    assert!(warped.r.max_abs_diff(&prev).unwrap() <= 0.02);
}

#[test]
fn brightness_shift_is_removed_before_estimation() {
    struct Recorder(Vec<(Frame, Frame)>);
    impl FlowEstimator for Recorder {
        fn estimate(&mut self, reference: &Frame, target: &Frame) -> tempretinex::Result<FlowField> {
            self.0.push((reference.clone(), target.clone()));
            let (h, w) = reference.dims();
            Ok(FlowField::zeros(h, w))
        }
    }
    let (_, truth) = synth_sequence(SynthKind::Occlusion, 2, (64, 64), 1.0, 0.0, 0).unwrap();
    let prev = truth.frames[0].clone();
    let state = TemporalState::from_pair(RetinexPair {
        r: prev.clone(),
        s: Frame::filled(64, 64, 0.5),
    });
    let mut rec = Recorder(Vec::new());
    align_previous(&state, &prev.map(|v| 0.3 * v), &mut rec, 1).unwrap();
    let (reference, target) = &rec.0[0];
    for c in 0..3 {
        let a = channel_histogram(reference.channel(c));
        let b = channel_histogram(target.channel(c));
        let l1: u64 = a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y)).sum();
        assert!(l1 as f64 <= 0.05 * 4096.0, "channel {c}: {l1}");
    }
    assert_eq!(*target, histogram_match(&prev.map(|v| 0.3 * v), &prev));
}
