//! Loading the frozen feature extractor from DLWT files.

use darklighter::error::Error;
use darklighter::losses::{FeatureExtractor, VggPrefix, PREFIX_DIMS};
use darklighter::tensor::Tensor;
use darklighter::train::{train, FeatureSource, TrainConfig};
use darklighter::weights::WeightFile;

/// Encodes tensors by hand, independently of `WeightFile::to_bytes`.
fn encode(tensors: &[(String, Vec<u64>, Vec<f32>)]) -> Vec<u8> {
    let mut out = b"DLWT".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(0);
        out.push(dims.len() as u8);
        for d in dims {
            out.extend(d.to_le_bytes());
        }
        for v in data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

/// Distinct, exactly representable values per tensor.
fn prefix_tensors() -> Vec<(String, Vec<u64>, Vec<f32>)> {
    let mut tensors = Vec::new();
    for (i, &(o, inp)) in PREFIX_DIMS.iter().enumerate() {
        let n = o * inp * 9;
        let weight = (0..n).map(|k| ((k % 97) as f32 - 48.0) / 1024.0 + i as f32).collect();
        let bias = (0..o).map(|k| k as f32 / 256.0 - i as f32).collect();
        tensors.push((
            format!("fx.conv{}.weight", i + 1),
            vec![o as u64, inp as u64, 3, 3],
            weight,
        ));
        tensors.push((format!("fx.conv{}.bias", i + 1), vec![o as u64], bias));
    }
    tensors
}

#[test]
fn loads_every_prefix_tensor_in_order() {
    let tensors = prefix_tensors();
    let file = WeightFile::from_bytes(&encode(&tensors)).unwrap();
    let fx = VggPrefix::<f32>::from_weights(&file).unwrap();
    for (i, conv) in fx.convs.iter().enumerate() {
        let (o, inp) = PREFIX_DIMS[i];
        assert_eq!((conv.out_channels, conv.in_channels), (o, inp));
        assert_eq!(conv.weight, tensors[2 * i].2);
        assert_eq!(conv.bias, tensors[2 * i + 1].2);
        // Weight layout is [out][in][ky][kx].
        assert_eq!(
            conv.weight[conv.weight_index(1, 2, 0, 1)],
            tensors[2 * i].2[(inp + 2) * 9 + 1]
        );
    }
}

#[test]
fn loads_from_disk_alongside_other_tensors() {
    let mut tensors = prefix_tensors();
    tensors.insert(0, ("conv1.weight".into(), vec![1], vec![7.0]));
    tensors.push(("meta.step".into(), vec![], vec![3.0]));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg.dlwt");
    std::fs::write(&path, encode(&tensors)).unwrap();
    let fx = VggPrefix::<f64>::from_weight_file(&path).unwrap();
    let img = Tensor::<f64>::filled(3, 4, 6, 0.5);
    let features = fx.features(&img).unwrap();
    assert_eq!((features.channels(), features.height(), features.width()), (128, 2, 3));
}

#[test]
fn missing_or_misshapen_tensors_are_named() {
    let mut tensors = prefix_tensors();
    tensors.retain(|t| t.0 != "fx.conv3.bias");
    let err = VggPrefix::<f32>::from_weights(&WeightFile::from_bytes(&encode(&tensors)).unwrap()).unwrap_err();
    assert!(matches!(&err, Error::Schema(m) if m.contains("fx.conv3.bias")), "{err}");

    let mut tensors = prefix_tensors();
    tensors[2].1 = vec![64, 32, 3, 3];
    tensors[2].2.truncate(64 * 32 * 9);
    let err = VggPrefix::<f32>::from_weights(&WeightFile::from_bytes(&encode(&tensors)).unwrap()).unwrap_err();
    assert!(
        matches!(&err, Error::Schema(m) if m.contains("fx.conv2.weight") && m.contains("64x32x3x3")),
        "{err}"
    );
}

#[test]
fn missing_file_is_an_io_error() {
    let err = VggPrefix::<f32>::from_weight_file(std::path::Path::new("/nonexistent/vgg.dlwt")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn training_accepts_a_pretrained_extractor() {
    let root = tempfile::tempdir().unwrap();
    let (data, out) = (root.path().join("data"), root.path().join("out"));
    std::fs::create_dir_all(&data).unwrap();
    for i in 0..2u8 {
        let img = image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8 * 4, y as u8 * 4, 40 * i]));
        img.save(data.join(format!("{i}.png"))).unwrap();
    }
    let fx_path = root.path().join("vgg.dlwt");
    std::fs::write(&fx_path, encode(&prefix_tensors())).unwrap();

    let mut cfg = TrainConfig::new(&data, &out);
    cfg.image_size = 32;
    cfg.batch_size = 2;
    cfg.epochs = 1;
    cfg.feature_extractor = FeatureSource::Pretrained(fx_path);
    let run = train(&cfg).unwrap();
    assert_eq!(run.history.len(), 1);
    assert!(run.history[0].total.is_finite());

    cfg.feature_extractor = FeatureSource::Pretrained(root.path().join("absent.dlwt"));
    assert!(train(&cfg).is_err());
}
