#![allow(dead_code)]

use goats::trainer::RunConfig;

pub const TINY_TOML: &str = "\
total_episodes = 6
eval_every = 3
eval_episodes = 4

[env]
episode_len = 20

[sac]
hidden = [16, 16]
batch_size = 16
warmup_steps = 40
";

pub fn tiny_config() -> RunConfig {
    goats::cli::parse_run_config(TINY_TOML).unwrap()
}
