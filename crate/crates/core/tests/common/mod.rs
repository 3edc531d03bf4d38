#![allow(dead_code)]

use cdmm_core::harness::RunConfig;
use cdmm_core::tensor::ParamStore;

/// Small synthetic run that finishes in well under a second.
pub fn tiny_config() -> RunConfig {
    RunConfig::parse(
        r#"
seed = 7
[model]
d_model = 8
heads = 2
encoder_layers = 1
decoder_layers = 1
n_queries = 3
[train]
steps = 4
fine_tune_steps = 2
log_every = 1
[episode]
n_way = 2
k_shot = 2
n_query = 1
[synthetic]
n_base_classes = 3
n_novel_classes = 2
base_images = 16
novel_images = 12
grid = 4
d_in = 6
max_size = 2
"#,
    )
    .unwrap()
}

pub fn bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}
