//! Keyframe selection and manifest building over in-memory frame sources.

use image::{Rgb, RgbImage};

use procdiff::encoder::ToyEncoder;
use procdiff::pipeline::{
    build_manifest, select_keyframe, Frame, FrameSource, PipelineConfig, VecFrames, VideoAnnotation, STORED_SIZE,
};
use procdiff::procedure::{load_manifest, Split, Step};
use procdiff::Error;

fn frame(t: f64, v: u8) -> Frame {
    Frame {
        timestamp: t,
        image: RgbImage::from_pixel(16, 12, Rgb([v, 128, 255 - v])),
    }
}

fn video(id: &str, split: Split, spans: &[(f64, f64)]) -> VideoAnnotation {
    VideoAnnotation {
        recipe_id: id.into(),
        split,
        label: None,
        steps: spans
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| (format!("step {} of {id}", i + 1), a, b))
            .collect(),
    }
}

fn frames(n: usize, dt: f64) -> Box<dyn FrameSource> {
    Box::new(VecFrames::new(
        (0..n).map(|i| frame(i as f64 * dt, (i * 37 % 256) as u8)).collect(),
    ))
}

#[test]
fn identical_frames_keep_the_earliest() {
    let encoder = ToyEncoder::new(0);
    let mut src = VecFrames::new((0..6).map(|i| frame(i as f64, 77)).collect());
    let step = Step::new(1, "stir the sauce").with_span(1.0, 5.0);
    let (record, _) = select_keyframe(&mut src, "r", &step, &encoder, 1.0).unwrap();
    assert_eq!(record.timestamp, 1.0);
}

#[test]
fn span_end_is_exclusive() {
    let encoder = ToyEncoder::new(0);
    let mut src = VecFrames::new(vec![frame(3.0, 10)]);
    let step = Step::new(1, "plate").with_span(2.5, 3.0);
    match select_keyframe(&mut src, "r", &step, &encoder, 1.0) {
        Err(Error::NoFrame { step: 1, .. }) => {}
        other => panic!("expected NoFrame, got {other:?}"),
    }
}

#[test]
fn selected_frame_lies_in_span() {
    let encoder = ToyEncoder::new(3);
    for (a, b) in [(0.0, 1.0), (2.2, 7.9), (5.0, 5.5)] {
        let mut src = VecFrames::new((0..40).map(|i| frame(i as f64 * 0.25, (i * 11) as u8)).collect());
        let step = Step::new(1, "fold the dough").with_span(a, b);
        let (record, _) = select_keyframe(&mut src, "r", &step, &encoder, 2.0).unwrap();
        assert!(
            record.timestamp >= a && record.timestamp < b,
            "{} outside [{a}, {b})",
            record.timestamp
        );
    }
}

#[test]
fn uncovered_video_is_skipped_whole() {
    let dir = tempfile::tempdir().unwrap();
    let encoder = ToyEncoder::new(0);
    let videos = vec![
        (video("a", Split::Train, &[(0.0, 2.0), (2.0, 4.0)]), frames(10, 0.5)),
        (video("b", Split::Train, &[(0.0, 2.0), (30.0, 32.0)]), frames(10, 0.5)),
        (video("c", Split::Validation, &[(1.0, 3.0)]), frames(10, 0.5)),
    ];
    let report = build_manifest(videos, &encoder, &PipelineConfig::default(), dir.path()).unwrap();
    let ids: Vec<&str> = report.manifest.recipes.iter().map(|r| r.recipe_id.as_str()).collect();
    assert_eq!(ids, ["a", "c"]);
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.skipped[0].recipe_id, "b");
    assert!(!dir.path().join("images/b").exists());

    let loaded = load_manifest(&report.manifest_path).unwrap();
    assert_eq!(loaded.recipes, report.manifest.recipes);
    assert_eq!(loaded.pair_count(Split::Train), 2);
    let img = image::open(dir.path().join("images/a/2.png")).unwrap();
    assert_eq!((img.width(), img.height()), (STORED_SIZE, STORED_SIZE));
}

#[test]
fn manifest_bytes_are_reproducible() {
    let build = || {
        let dir = tempfile::tempdir().unwrap();
        let videos = vec![
            (video("x", Split::Train, &[(0.0, 3.0), (3.0, 6.0)]), frames(24, 0.25)),
            (video("y", Split::Validation, &[(0.5, 2.5)]), frames(24, 0.25)),
        ];
        let report = build_manifest(videos, &ToyEncoder::new(1), &PipelineConfig::default(), dir.path()).unwrap();
        std::fs::read(report.manifest_path).unwrap()
    };
    assert_eq!(build(), build());
}

#[test]
fn nothing_usable_is_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let videos = vec![(video("z", Split::Train, &[(50.0, 60.0)]), frames(4, 1.0))];
    match build_manifest(videos, &ToyEncoder::new(0), &PipelineConfig::default(), dir.path()) {
        Err(Error::EmptyCorpus) => {}
        other => panic!("expected EmptyCorpus, got {:?}", other.map(|r| r.manifest)),
    }
    let skipped = std::fs::read_to_string(dir.path().join("skipped.jsonl")).unwrap();
    assert_eq!(skipped.lines().count(), 1);
}
