use action_kit::atnz;
use action_kit::cam::{cam_export, class_activation, to_feature_coords, write_pgm};
use action_kit::data::{gen_direction_dataset, tsn_sample, SampleMode};
use action_kit::error::Error;
use action_kit::tensor::Tensor;
use action_kit::toynet::{TemporalModule, ToyConfig, ToyNet};

fn setup(module: TemporalModule) -> (ToyNet<f32>, Tensor<f32>) {
    let mut net = ToyNet::<f32>::new(ToyConfig::default().with_module(module), 1).unwrap();
    net.randomize_modules(2);
    let ds = gen_direction_dataset(1, 16, 32, 32, 0.05, 3).unwrap();
    (net, tsn_sample(&ds.videos[0], 8, SampleMode::Center, 0).unwrap())
}

#[test]
fn heatmap_matches_feature_shape() {
    let (net, clip) = setup(TemporalModule::Action);
    let (_, features) = net.forward_with_features(&clip.reshape(&[1, 8, 1, 32, 32]).unwrap()).unwrap();
    let fs = features.shape();
    let cam = class_activation(&net, &clip, 2).unwrap();
    assert_eq!(cam.raw.shape(), &[8, fs[2], fs[3]]);
    assert_eq!(cam.normalized.shape(), cam.raw.shape());
    assert_eq!(cam.frames(), 8);
    assert!(cam.normalized.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn raw_map_is_class_weighted_feature_sum() {
    let (net, clip) = setup(TemporalModule::Ste);
    let (_, f) = net.forward_with_features(&clip.reshape(&[1, 8, 1, 32, 32]).unwrap()).unwrap();
    let [t, c, h, w] = [f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]];
    let class = 1;
    let fc = net.fc_weight.value.data();
    let cam = class_activation(&net, &clip, class).unwrap();
    for ti in 0..t {
        for p in 0..h * w {
            let want: f64 = (0..c).map(|ci| fc[class * c + ci] as f64 * f.data()[(ti * c + ci) * h * w + p] as f64).sum();
            let got = cam.raw.data()[ti * h * w + p] as f64;
            assert!((got - want).abs() <= 1e-4 * (1.0 + want.abs()), "t {ti} p {p}: {got} vs {want}");
        }
    }
}

#[test]
fn zero_class_weights_give_zero_maps() {
    let (mut net, clip) = setup(TemporalModule::Action);
    let c = net.fc_weight.value.shape()[1];
    net.fc_weight.value.data_mut()[3 * c..4 * c].fill(0.0);
    let cam = class_activation(&net, &clip, 3).unwrap();
    assert!(cam.raw.data().iter().all(|&v| v == 0.0));
    assert!(cam.normalized.data().iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_input_gives_uniform_maps() {
    let net = ToyNet::<f32>::new(ToyConfig::default().with_module(TemporalModule::None), 4).unwrap();
    let clip = Tensor::<f32>::full(&[8, 1, 32, 32], 0.0);
    let cam = class_activation(&net, &clip, 0).unwrap();
    let hw = cam.raw.shape()[1] * cam.raw.shape()[2];
    for frame in cam.raw.data().chunks(hw) {
        let spread = frame.iter().fold(0f32, |m, &v| m.max((v - frame[0]).abs()));
        assert!(spread <= 1e-5 * (1.0 + frame[0].abs()), "spread {spread}");
    }
}

#[test]
fn out_of_range_class_is_a_data_error() {
    let (net, clip) = setup(TemporalModule::None);
    assert!(matches!(class_activation(&net, &clip, 4), Err(Error::Data(_))));
}

#[test]
fn export_writes_readable_artifacts() {
    let (net, clip) = setup(TemporalModule::Action);
    let dir = tempfile::tempdir().unwrap();
    let cam = cam_export(&net, &clip, 0, dir.path()).unwrap();
    let raw: Tensor<f32> = atnz::read(dir.path().join("cam_raw.atnz")).unwrap();
    let norm: Tensor<f32> = atnz::read(dir.path().join("cam.atnz")).unwrap();
    assert_eq!(raw, cam.raw);
    assert_eq!(norm, cam.normalized);
    let (h, w) = (cam.raw.shape()[1], cam.raw.shape()[2]);
    for t in 0..8 {
        let bytes = std::fs::read(dir.path().join(format!("frame_{t:02}.pgm"))).unwrap();
        let header = format!("P5\n{w} {h}\n255\n");
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + h * w);
    }
}

#[test]
fn pgm_rejects_mismatched_sizes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(write_pgm(dir.path().join("x.pgm"), &[0.0; 5], 2, 3), Err(Error::Shape(_))));
    write_pgm(dir.path().join("y.pgm"), &[0.0, 0.5, 1.0, 2.0], 2, 2).unwrap();
    let bytes = std::fs::read(dir.path().join("y.pgm")).unwrap();
    assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 255]);
}

#[test]
fn feature_coordinates_scale_pixel_centres() {
    assert_eq!(to_feature_coords([15.5, 15.5], [32, 32], [4, 4]), [1.5, 1.5]);
    assert_eq!(to_feature_coords([3.5, 31.5], [32, 32], [4, 4]), [0.0, 3.5]);
    assert_eq!(to_feature_coords([7.0, 7.0], [32, 32], [32, 32]), [7.0, 7.0]);
}
