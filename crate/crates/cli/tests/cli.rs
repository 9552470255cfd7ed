use std::path::Path;
use std::process::{Command, Output};

use discogp_cli::{RunConfig, SEED_ENV};

fn discogp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discogp"))
        .args(args)
        .env_remove(SEED_ENV)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config = RunConfig::load(&path).unwrap();
        config.into_run(None).unwrap();
        n += 1;
    }
    assert_eq!(n, 3);
}

#[test]
fn missing_seed_exits_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"task": "ioi", "paths": {"model": "m.bin", "output": "out"}}"#).unwrap();
    let o = discogp(&["discover", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]: no seed"), "{}", stderr(&o));

    let o = discogp(&["discover", path.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run `discogp pretrain` first"), "{}", stderr(&o));

    let o = discogp(&["--workers", "0", "discover", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn comparing_circuits_of_different_models_fails() {
    use discogp::mask::{MaskMode, SampledMasks};
    use discogp::model::{GraphTopology, ModelConfig, WeightLayout};
    use discogp::pruner::{prune, CircuitDocument};

    let dir = tempfile::tempdir().unwrap();
    let write = |layers: usize, name: &str| {
        let config = ModelConfig {
            layers,
            heads: 1,
            d_model: 8,
            d_head: 8,
            d_ff: 8,
            vocab: 10,
            max_seq: 6,
        };
        let topology = GraphTopology::build(&config);
        let layout = WeightLayout::new(&config, &topology);
        let circuit = prune(&SampledMasks::full(MaskMode::Joint, &topology, &layout), &topology, &layout).unwrap();
        let path = dir.path().join(name);
        std::fs::write(&path, serde_json::to_string(&CircuitDocument::new(&circuit, &topology)).unwrap()).unwrap();
        path.to_str().unwrap().to_string()
    };
    let (a, b, c) = (write(1, "a.json"), write(2, "b.json"), write(1, "c.json"));

    let o = discogp(&["compare", &a, &c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("edges    100.00% ("), "{table}");

    let o = discogp(&["compare", &a, &b]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error["), "{}", stderr(&o));
}
