fn main() {
    let run_dir = std::env::args().nth(1).expect("run dir");
    let bytes = std::fs::read(format!("{run_dir}/params/rl.bin")).expect("params");
    use srl_core::model::wire::WireDecode;
    let blob = srl_core::model::types::ParameterBlob::decode(&bytes).expect("blob");
    let spec = srl_core::model::validate::ModelSpec { obs_dim: 4, action_count: 2, hidden: vec![64, 64] };
    let policy = srl_core::learning::eval::policy_from_blob(&spec, &blob).expect("load");
    println!("version {}", blob.version);
    let env = srl_core::model::config::EnvConfig { name: "pole_balance".into(), params: Default::default() };
    let mean = srl_core::learning::eval::evaluate(&policy, &env, 100, 77, true).unwrap();
    println!("greedy mean over 100 episodes: {mean:.1}");
}
