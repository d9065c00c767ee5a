mod common;

use gazesr::angular_error_deg;
use gazesr::data::{generate_synthetic, load_mpii_layout, synthesize, SynthParams};

#[test]
fn rendered_pixels_encode_the_label() {
    let p = SynthParams { n_subjects: 4, per_subject: 25, image_size: 56, seed: 11 };
    for s in synthesize(&p).unwrap() {
        let g = common::oracle_gaze(&s.image, &s.geometry).expect("iris visible");
        assert!(angular_error_deg(g, s.gaze) < 1.0, "{}: {:?} vs {:?}", s.file_name, g, s.gaze);
    }
}

#[test]
fn disk_round_trip_keeps_labels_and_geometry() {
    let d = tempfile::tempdir().unwrap();
    let p = SynthParams { n_subjects: 2, per_subject: 10, image_size: 32, seed: 3 };
    let ds = generate_synthetic(&p, d.path()).unwrap();
    let mem = synthesize(&p).unwrap();
    assert_eq!(ds.samples.len(), mem.len());
    for (a, b) in ds.samples.iter().zip(&mem) {
        assert_eq!(a.gaze, b.gaze);
        assert_eq!(a.geometry.as_ref(), Some(&b.geometry));
        assert_eq!(gazesr::ImageU8::load(&a.image_path).unwrap(), b.image);
    }
    let reloaded = load_mpii_layout(d.path()).unwrap();
    assert_eq!(reloaded.content_hash().unwrap(), ds.content_hash().unwrap());
}
