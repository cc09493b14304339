fn main() {
    let tmp = tempfile::tempdir().unwrap();
    std::env::set_var("SRL_RUN_DIR", tmp.path());
    let mut cfg = srl_core::model::config::ExperimentConfig::from_toml_str(r#"
name = "bufdbg"
seed = 3
[scheduler]
backend = "thread"
[stop]
frames = 5000
[models.rl]
hidden = [16]
[[streams]]
name = "inf0"
kind = "inference"
transport = "inline"
policy = "rl"
[[streams]]
name = "spl0"
kind = "sample"
transport = "shared_memory"
capacity = 8
drop_policy = "block"
[[actors]]
env = { name = "pole_balance" }
ring_size = 1
chunk_length = 16
inference_streams = ["inf0"]
sample_streams = ["spl0"]
[[actors.agent_specs]]
index_pattern = ".*"
inference_stream_idx = 0
sample_stream_idx = 0
[[trainers]]
policy = "rl"
sample_stream = "spl0"
batch_size = 4
buffer_capacity = 8
prefetch = false
publish_every = 0
algorithm = { kind = "ppo", lr = 1e-3, normalize_advantages = false }
"#).unwrap();
    cfg.streams.push(srl_core::model::config::StreamConfig {
        name: "up".into(),
        kind: srl_core::model::config::StreamKind::Sample,
        transport: srl_core::model::config::Transport::SharedMemory,
        policy: None,
        pull_interval_ms: 100,
        capacity: 8,
        drop_policy: srl_core::model::config::DropPolicy::Block,
    });
    cfg.actors[0].sample_streams = vec!["up".into()];
    cfg.custom_workers.push(srl_core::model::config::CustomWorkerConfig {
        kind: "buffer".into(),
        consume_streams: vec!["up".into()],
        produce_streams: vec!["spl0".into()],
        params: Default::default(),
        count: 1,
    });
    match srl_core::control::controller::run_experiment(&cfg) {
        Ok(r) => {
            println!("stop: {}", r.stop_reason);
            println!("states: {:?}", r.worker_states);
            println!("failures: {:?}", r.failures);
        }
        Err(e) => println!("error: {e}"),
    }
}
