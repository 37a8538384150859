#![allow(dead_code)]

pub mod oracles;

use cipnet::config::RunConfig;

/// Small enough to train in seconds: 6 classes in 3 tasks of 24x24 images.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.data.num_classes = 6;
    c.data.num_tasks = 3;
    c.data.per_class = 10;
    c.data.image_size = 24;
    c.model.prototypes = 8;
    c.model.channels = vec![4, 8, 8];
    c.trainer.epochs_pretrain = 1;
    c.trainer.epochs_train = 2;
    c
}
