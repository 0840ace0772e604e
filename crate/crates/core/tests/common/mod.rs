#![allow(dead_code)]

use echobench::harness::Config;

/// Small worlds and short episodes so each episode runs in well under a second.
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.worlds.extent_min = 10;
    cfg.worlds.extent_max = 12;
    cfg.worlds.rooms_max = 2;
    cfg.worlds.train = 2;
    cfg.worlds.val = 1;
    cfg.worlds.test = 2;
    cfg.episode.horizon = 24;
    cfg.episode.budget = 4;
    cfg.episode.queries = 6;
    cfg.acoustics.rays_per_band = 128;
    cfg.policy.hidden = 16;
    cfg.trainer.episodes_per_update = 2;
    cfg.trainer.val_every = 2;
    cfg.trainer.checkpoint_every = 2;
    cfg.train.total_updates = 4;
    cfg.train.minibatch_size = 16;
    cfg.train.bptt_len = 8;
    cfg.train.epochs = 2;
    cfg
}
