use idlat::blocking::{partition, BlockSpec};
use idlat::codec::{compress_volume, decompress_latents, decompress_volume, CompressedVolume};
use idlat::importance::{importance_from_region, ImportanceMap, VoxelBox};
use idlat::metrics::report;
use idlat::network::{Model, ModelConfig};
use idlat::training::{train, TrainConfig};
use idlat::volume::{load_raw, normalize, save_raw, synthetic_blobs, Dims, Dtype};

#[test]
fn train_save_compress_decompress() {
    let dir = tempfile::tempdir().unwrap();
    let v = synthetic_blobs(Dims::new(16, 16, 12), 6, 0.01, 3);
    save_raw(&v, dir.path().join("v.raw"), Dtype::F32le).unwrap();
    let v = load_raw(dir.path().join("v.raw"), v.dims, Dtype::F32le).unwrap();

    let spec = BlockSpec::new(8, 2).unwrap();
    let (normalized, norm) = normalize(&v).unwrap();
    let blocks = partition(&normalized, &ImportanceMap::constant(v.dims, 1.0), &spec).unwrap();
    let mut model = Model::new(ModelConfig::desk(4), spec).unwrap();
    model.normalization = Some(norm);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        lambda: 10.0,
        checkpoint_dir: Some(dir.path().join("ckpt")),
        log_path: Some(dir.path().join("train.csv")),
        ..Default::default()
    };
    let rep = train(&blocks, &cfg, &mut model).unwrap();
    assert_eq!(rep.epochs.len(), 2);
    let log = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let restored = Model::load(dir.path().join("ckpt/latest.idlc")).unwrap();
    assert_eq!(restored.hash(), model.hash());

    let roi = importance_from_region(&v, &VoxelBox::new([0, 0, 0], [8, 8, 6])).unwrap();
    let (file, _) = compress_volume(&v, &roi, &restored).unwrap();
    let path = dir.path().join("v.idlt");
    file.write(&path).unwrap();
    let back = CompressedVolume::read(&path).unwrap();
    assert_eq!(back, file);
    let latents = decompress_latents(&back, &model).unwrap();
    assert_eq!(latents.len(), 8);
    let recon = decompress_volume(&back, &model).unwrap();
    assert_eq!(recon.dims, v.dims);
    let size = std::fs::metadata(&path).unwrap().len();
    let r = report(&v, &recon, &roi, Some(size)).unwrap();
    assert!(r.wmse.is_finite() && r.psnr.is_finite());
    assert!(r.lsr.unwrap() > 1.0);
}
