#![allow(dead_code)]

pub mod bss;
pub mod gradcheck;
pub mod stft;

use wlss_core::pipeline::RunConfig;

/// A full pipeline that runs in seconds: few short clips, narrow networks, few steps.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.data.train_clips = 40;
    cfg.data.eval_clips = 16;
    cfg.data.clip_secs = 2.0;
    cfg.sed.arch.widths = vec![4, 8];
    cfg.sed.train.epochs = 1;
    cfg.sed.train.batch_size = 8;
    cfg.separator.unet.encoder_widths = vec![4, 8];
    cfg.separator.unet.decoder_widths = vec![8, 4];
    cfg.separator.unet.embed_dim = 8;
    cfg.separator.train.steps = 3;
    cfg.separator.train.batch_size = 3;
    cfg.separator.train.log_every = 1;
    cfg.eval.pairs = 4;
    cfg.eval.single_tag_clips = false;
    cfg
}
