use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use stampgen::checkpoint::{self, meta_for, ModelConfig};
use stampgen::dataset::{DatasetTensors, ExampleBatch};
use stampgen::domain::composite;
use stampgen::pipeline::{sample_latent, InterpolationAxis};
use stampgen::{Dataset, ImageTensor, MaskGan, MaskGanConfig, MaskTensor, StampError, StampModel, TextureGan, TextureGanConfig};

const SIZE: usize = 16;

fn mask_config() -> MaskGanConfig {
    MaskGanConfig { size: SIZE, z_dim: 6, base_channels: 2, max_channels: 4, downsamples: 2, res_blocks: 1, hidden: 8, ..Default::default() }
}

fn texture_config() -> TextureGanConfig {
    TextureGanConfig { size: SIZE, z_dim: 3, base_channels: 2, max_channels: 4, downsamples: 2, res_blocks: 1, ..Default::default() }
}

fn batch(n: usize, seed: u64) -> ExampleBatch {
    let data = Dataset::synthetic("striped-blob", SIZE, n, seed).unwrap();
    DatasetTensors::new(&data.records, DType::F32, &Device::Cpu).unwrap().batch(&(0..n).collect::<Vec<_>>()).unwrap()
}

fn to_vec(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn background(seed: u64) -> ImageTensor {
    ImageTensor::new(Array3::from_shape_fn((SIZE, SIZE, 3), |(y, x, c)| (((y * 31 + x * 17 + c * 7) as u64 ^ seed) % 13) as f32 / 6.5 - 1.0)).unwrap()
}

fn model(dir: &std::path::Path) -> StampModel {
    let m = MaskGan::new(mask_config(), 1, DType::F32, &Device::Cpu).unwrap();
    let t = TextureGan::new(texture_config(), 2, DType::F32, &Device::Cpu).unwrap();
    let (mp, tp) = (dir.join("m.safetensors"), dir.join("t.safetensors"));
    checkpoint::save_mask(&m, &mp, meta_for("blob", ModelConfig::Mask(mask_config()), DType::F32, 1).unwrap()).unwrap();
    checkpoint::save_texture(&t, &tp, meta_for("blob", ModelConfig::Texture(texture_config()), DType::F32, 2).unwrap()).unwrap();
    StampModel::load(&mp, &tp, &Device::Cpu).unwrap()
}

#[test]
fn mask_latent_reaches_the_conditioning() {
    let m = MaskGan::new(mask_config(), 3, DType::F32, &Device::Cpu).unwrap();
    let b = batch(2, 4);
    let z = m.step_latents(2, 5, 0).unwrap();
    let nudged = (&z + 0.1).unwrap();
    let p = m.forward(&b.image_bbox_cut, &b.bbox_vec, &z).unwrap();
    let q = m.forward(&b.image_bbox_cut, &b.bbox_vec, &nudged).unwrap();
    assert_ne!(to_vec(&p.adain_params), to_vec(&q.adain_params));
    assert_ne!(to_vec(&p.mask), to_vec(&q.mask));
}

#[test]
fn texture_discriminator_sees_the_mask() {
    let t = TextureGan::new(texture_config(), 6, DType::F32, &Device::Cpu).unwrap();
    let b = batch(3, 7);
    let rolled = Tensor::cat(&[b.mask.narrow(0, 1, 2).unwrap(), b.mask.narrow(0, 0, 1).unwrap()], 0).unwrap();
    let a = to_vec(&t.disc_scores(&b.image, &b.mask).unwrap());
    let c = to_vec(&t.disc_scores(&b.image, &rolled).unwrap());
    assert_ne!(a, c);
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = MaskGan::new(mask_config(), 8, DType::F32, &Device::Cpu).unwrap();
    m.train_step(&batch(4, 9), 1, 0).unwrap();
    let path = dir.path().join("m.safetensors");
    checkpoint::save_mask(&m, &path, meta_for("blob", ModelConfig::Mask(mask_config()), DType::F32, 8).unwrap()).unwrap();
    let (back, meta) = checkpoint::load_mask(&path, &Device::Cpu).unwrap();
    assert_eq!(meta.class, "blob");
    let rec = &Dataset::synthetic("striped-blob", SIZE, 1, 3).unwrap().records[0];
    let z = sample_latent(6, 4);
    let i_b = stampgen::domain::cutout(&rec.image, rec.bbox.raster()).unwrap();
    assert_eq!(m.gen_mask(&i_b, &z, &rec.bbox).unwrap(), back.gen_mask(&i_b, &z, &rec.bbox).unwrap());
    assert_eq!(m.ema.values().len(), back.ema.values().len());
    assert_eq!(m.ema.updates(), back.ema.updates());

    // a texture checkpoint is not a mask checkpoint
    let t = TextureGan::new(texture_config(), 2, DType::F32, &Device::Cpu).unwrap();
    let tp = dir.path().join("t.safetensors");
    checkpoint::save_texture(&t, &tp, meta_for("blob", ModelConfig::Texture(texture_config()), DType::F32, 2).unwrap()).unwrap();
    assert!(checkpoint::load_mask(&tp, &Device::Cpu).is_err());
    // truncated files are rejected
    let bytes = std::fs::read(&tp).unwrap();
    assert!(checkpoint::texture_from_bytes(&bytes[..bytes.len() / 2], &Device::Cpu).is_err());
}

#[test]
fn stamp_is_a_function_of_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let sm = model(dir.path());
    let bg = background(1);
    let (zm, zt) = (sample_latent(6, 1), sample_latent(3, 2));
    let bbox = [0.2, 0.1, 0.8, 0.9];
    let a = sm.stamp(&bg, bbox, &zm, &zt, 5).unwrap();
    let b = sm.stamp(&bg, bbox, &zm, &zt, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.mask.is_binary());
    assert_eq!(a.composite, composite(&bg, &a.texture, &a.mask).unwrap());
    let other = sm.stamp(&bg, bbox, &zm, &sample_latent(3, 3), 5).unwrap();
    assert_ne!(other.texture, a.texture);

    let frames = sm.interpolate(&bg, bbox, InterpolationAxis::Texture, &zt, &sample_latent(3, 3), &zm, 3, 5).unwrap();
    assert_eq!(frames[0], a);
    assert_eq!(frames[2], other);
    assert!(matches!(sm.interpolate(&bg, bbox, InterpolationAxis::Mask, &zm, &zm, &zt, 1, 5), Err(_)));
}

#[test]
fn stamp_and_retexture_reject_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let sm = model(dir.path());
    let bg = background(2);
    let (zm, zt) = (sample_latent(6, 1), sample_latent(3, 2));
    assert!(matches!(sm.stamp(&bg, [0.0, 0.0, 0.0, 0.0], &zm, &zt, 0), Err(StampError::InvalidBox(_))));
    assert!(sm.stamp(&bg, [0.5, 0.1, 0.4, 0.9], &zm, &zt, 0).is_err());
    assert!(sm.stamp(&bg, [0.1, 0.1, 0.9, 0.9], &sample_latent(5, 1), &zt, 0).is_err());
    assert!(sm.stamp(&background_sized(20), [0.1, 0.1, 0.9, 0.9], &zm, &zt, 0).is_err());

    assert!(matches!(sm.retexture(&bg, &MaskTensor::zeros(SIZE, SIZE), &zt, 0), Err(StampError::EmptyMask)));
    assert!(matches!(sm.retexture(&bg, &MaskTensor::ones(SIZE + 1, SIZE), &zt, 0), Err(StampError::Dimension(_))));
    let mask = MaskTensor::new(Array2::from_shape_fn((SIZE, SIZE), |(y, x)| ((4..10).contains(&y) && (3..12).contains(&x)) as u8 as f32)).unwrap();
    let out = sm.retexture(&bg, &mask, &zt, 0).unwrap();
    assert_eq!(out.composite, composite(&bg, &out.texture, &mask).unwrap());
    assert_eq!(sm.encode_texture(&out.composite, &mask).unwrap().dim(), 3);
}

fn background_sized(side: usize) -> ImageTensor {
    ImageTensor::filled(side, side, 0.0).unwrap()
}
