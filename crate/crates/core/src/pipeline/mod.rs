//! Data, training and the encode/decode pipeline.

pub mod codec;
pub mod data;
pub mod image;
pub mod train;

pub use codec::{decode_batch, decode_image, decode_samples, encode_image, encode_images, model_guidance, DecodeJob};
pub use data::{caption, generate_dataset, render, Background, Sample, Scene, ToyDatasetSpec};
pub use image::{caption_for, decode_ppm, encode_ppm, read_ppm, write_ppm, Image};
pub use train::{pretrain_ae, train_codec, AeTrainConfig, PretrainedAe, StepLog, TrainConfig, TrainLog};
