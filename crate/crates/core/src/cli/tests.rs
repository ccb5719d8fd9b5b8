use std::fs;

use clap::Parser;

use super::*;

fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("cade").chain(args.iter().copied()))
}

fn resolved(args: &[&str]) -> Result<Config, CliError> {
    resolve(&parse(args).unwrap())
}

#[test]
fn defaults_round_trip_through_toml() {
    let cfg = resolved(&["--print-config"]).unwrap();
    assert_eq!(cfg, Config::default());
    assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let text = cfg.to_toml();
    for key in ["[train]", "[adv]", "[lagrange]", "[trust]", "[cost_adv]", "[safety]", "[nets]", "[dyn_bench]", "[eval]"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}

#[test]
fn flags_are_reflected() {
    let cfg = resolved(&["--env", "planar-river", "--adv", "gae", "--level", "hard", "--seeds", "3,4", "--steps", "99", "--lagrangian", "train"]).unwrap();
    assert_eq!(cfg.env, EnvKind::PlanarRiver);
    assert_eq!(cfg.adv.kind, AdvKind::Gae);
    assert_eq!(cfg.level, Level::Hard);
    assert_eq!(cfg.seeds, vec![3, 4]);
    assert_eq!(cfg.train.steps, Some(99));
    assert!(cfg.train.lagrangian);
    let cfg = resolved(&["--safety-layer", "both", "eval", "--episodes", "7", "--greedy"]).unwrap();
    assert_eq!(cfg.safety.mode, SafetyMode::Both);
    assert_eq!(cfg.eval.episodes, 7);
    assert!(cfg.eval.greedy);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "level = \"easy\"\nseeds = [5]\n[adv]\nkind = \"td\"\nwindow = 4\n").unwrap();
    let p = path.to_str().unwrap();
    let cfg = resolved(&["--config", p]).unwrap();
    assert_eq!((cfg.level, cfg.adv.kind, cfg.adv.window, cfg.seeds.clone()), (Level::Easy, AdvKind::Td, 4, vec![5]));
    let cfg = resolved(&["--config", p, "--adv", "vtrace", "--seed", "9"]).unwrap();
    assert_eq!((cfg.level, cfg.adv.kind, cfg.adv.window, cfg.seeds), (Level::Easy, AdvKind::Vtrace, 4, vec![9]));
}

#[test]
fn bogus_estimator_names_the_allowed_set() {
    let err = parse(&["--adv", "bogus"]).unwrap_err().to_string();
    for name in ["mgae", "td", "gae", "vtrace"] {
        assert!(err.contains(name), "{err}");
    }
    assert_eq!(main_with_args(["cade", "--adv", "bogus", "train"]), 2);
}

#[test]
fn conflicting_flags_are_rejected() {
    assert!(parse(&["--lagrangian", "--no-lagrangian"]).is_err());
}

#[test]
fn unknown_keys_and_bad_ranges_are_config_errors() {
    let err = Config::from_toml("[train]\nbogus_key = 1\n").unwrap_err();
    assert!(err.to_string().contains("bogus_key"), "{err}");
    assert_eq!(err.exit_code(), 2);

    for (text, key) in [
        ("[adv]\ngamma = 1.5\n", "adv.gamma"),
        ("[train]\nactor_epochs = 0\n", "train.actor_epochs"),
        ("[safety]\nthreshold = 0.0\n", "safety.threshold"),
        ("[trust]\ninv_alpha = -1.0\n", "trust.inv_alpha"),
        ("seeds = []\n", "seeds"),
    ] {
        let err = Config::from_toml(text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains(key), "{text}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn run_ids_encode_the_variant() {
    let mut cfg = Config::default();
    assert_eq!(cfg.default_run_id(2), "cliff-circular-medium-mgae-s2");
    cfg.train.lagrangian = true;
    cfg.safety.mode = SafetyMode::Train;
    assert_eq!(cfg.default_run_id(0), "cliff-circular-medium-mgae-lagrangian-safety-s0");
    cfg.run_id = Some("x".into());
    assert_eq!(cfg.run_dir(1), PathBuf::from("runs/x"));
    cfg.seeds = vec![1, 2];
    assert_eq!(cfg.run_dir(1), PathBuf::from("runs/x-s1"));
}

#[test]
fn missing_subcommand_is_a_config_error() {
    assert_eq!(main_with_args(["cade"]), 2);
    assert_eq!(main_with_args(["cade", "--print-config"]), 0);
}

#[test]
fn collect_writes_episodes_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cli = parse(&["--out-dir", out, "--run-id", "c", "collect", "--episodes", "2", "--dump-obs"]).unwrap();
    let cfg = resolve(&cli).unwrap();
    let dirs = run(&cli, &cfg).unwrap();
    assert_eq!(dirs, vec![dir.path().join("c")]);
    let d = &dirs[0];
    for f in ["episode_0000.csv", "episode_0001.csv", METRICS_FILE, MANIFEST_FILE, CONFIG_FILE] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let summary = fs::read_to_string(d.join(METRICS_FILE)).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(fs::read_dir(d.join("obs")).unwrap().count() > 2);
    let again = run(&cli, &cfg).unwrap();
    assert_eq!(again, dirs);
    assert_eq!(fs::read_to_string(d.join(METRICS_FILE)).unwrap(), summary);
}
