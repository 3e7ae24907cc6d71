use std::collections::HashMap;
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saicl_core::tasks::{read_dataset, sample_episode, sample_episode_with, write_dataset, TaskFamily, TaskKind};
use saicl_core::Error;

#[test]
fn lookup_replay_over_a_thousand_episodes() {
    let family = TaskFamily::lookup();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..1000 {
        let k = 1 + i % 12;
        let ep = sample_episode_with(&family, k, &mut rng).unwrap();
        assert_eq!(ep.demos.len(), k);
        let mut table = HashMap::new();
        for d in &ep.demos {
            // one latent mapping per episode
            assert_eq!(*table.entry(d.input.clone()).or_insert(d.output.clone()), d.output);
        }
        assert_eq!(table.get(&ep.test.input), Some(&ep.test.output), "episode {i}");
        assert!(ep.test.validate().is_ok());
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [TaskKind::Lookup, TaskKind::LinearLabel, TaskKind::CopyOffset] {
        let family = TaskFamily::of_kind(kind);
        let write = |name: &str| {
            let ep = sample_episode(&family, 6, 42).unwrap();
            let path = dir.path().join(name);
            let mut all = ep.demos.clone();
            all.push(ep.test);
            write_dataset(&path, &all).unwrap();
            fs::read(path).unwrap()
        };
        assert_eq!(write("a.jsonl"), write("b.jsonl"));
    }
}

#[test]
fn fifty_examples_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kinds = [TaskKind::Lookup, TaskKind::LinearLabel, TaskKind::CopyOffset];
    let mut examples = Vec::new();
    for kind in kinds.iter().cycle() {
        if examples.len() >= 50 {
            break;
        }
        let ep = sample_episode_with(&TaskFamily::of_kind(*kind), 4, &mut rng).unwrap();
        examples.extend(ep.demos.into_iter().chain([ep.test]));
    }
    examples.truncate(50);
    write_dataset(&path, &examples).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), examples);
}

#[test]
fn empty_and_single_line_files() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert!(read_dataset(&empty).unwrap().is_empty());

    let one = dir.path().join("one.jsonl");
    fs::write(&one, "{\"task\":\"t\",\"input\":[2,3],\"output\":[4]}\n").unwrap();
    let got = read_dataset(&one).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].input, vec![2, 3]);
    assert_eq!(got[0].options, None);
}

#[test]
fn malformed_lines_are_located() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, "{\"task\":\"t\",\"input\":[2],\"output\":[4]}\n{not json\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Dataset { line: 2, .. })));

    fs::write(&path, "\n{\"task\":\"t\",\"input\":[2]}\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::MissingField { line: 2, field: "output" })));

    fs::write(&path, "{\"task\":\"t\",\"input\":[2],\"output\":[4],\"options\":[[5],[6]]}\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Dataset { line: 1, .. })));
}
