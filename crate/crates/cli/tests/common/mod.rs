//! Shared pipeline fixture for the integration test targets: a synthetic
//! corpus, a config wired to scripted mock backends, and binary runners.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// 10 users x 30 interactions over 40 films. User u starts at film 3u, so
/// every user's first-seen title (echoed into the scripted profile) is
/// distinct and profile embeddings separate cleanly.
pub fn write_corpus(root: &Path) {
    let mut ratings = String::new();
    for user in 0..10u32 {
        for step in 0..30u32 {
            let item = (user * 3 + step) % 40;
            let rating = 1 + item % 5;
            let ts = 946_684_800 + u64::from(step) * 86_400;
            ratings.push_str(&format!("{}::{}::{}::{}\n", 100 + user, item, rating, ts));
        }
    }
    fs::write(root.join("ratings.dat"), ratings).unwrap();

    let mut movies = String::new();
    for item in 0..40u32 {
        movies.push_str(&format!(
            "{item}::Film {item} ({})::Drama|Comedy\n",
            1960 + item
        ));
    }
    fs::write(root.join("movies.dat"), movies).unwrap();
}

/// Config with scripted chat rules: rationales echo the requested opening,
/// seed profiles embed the user's first-seen title, reflections keep the
/// description stable so re-runs and embeddings are deterministic.
pub fn pipeline_config(root: &Path, with_endpoints: bool, with_cache: bool) -> PathBuf {
    let rootd = root.display();
    let cache_line = if with_cache {
        format!("cache_dir = \"{rootd}/cache\"\n")
    } else {
        String::new()
    };
    let mut text = format!(
        r#"[corpus]
ratings = "{rootd}/ratings.dat"
movies = "{rootd}/movies.dat"
out_root = "{rootd}/out"

[cohort]
n_users = 10
min_interactions = 20
max_interactions = 40
seed = 17

[clustering]
k = 2
seed = 17

[distill]
workers = 3

[simulate]
workers = 3

[backends.chat]
kind = "mock"
embed_dim = 16
embed_seed = 5
{cache_line}
[[backends.chat.rules]]
pattern = 'beginning exactly with: (I rated movie .+ because)'
response = '$1 it fit the kind of story I usually reach for.'

[[backends.chat.rules]]
pattern = '(?s)first chronological batch.*?\n- ([^(\n]+?) \('
response = '''
ACTIVITY: A Regular Viewer. Rates a film most weeks without long gaps.
CONFORMITY: A Balanced Evaluator. Checks the crowd average, then trusts their own read.
DIVERSITY: A Selective Viewer. Stays close to a couple of familiar genres.
DESCRIPTION: I gravitate toward films like $1 and judge new candidates against that bar.
'''

[[backends.chat.rules]]
pattern = '(?s)DESCRIPTION: ([^\n]+)\s+The user.s next chronological batch'
response = '''
ACTIVITY: A Regular Viewer. Rates a film most weeks without long gaps.
CONFORMITY: A Balanced Evaluator. Checks the crowd average, then trusts their own read.
DIVERSITY: A Selective Viewer. Stays close to a couple of familiar genres.
DESCRIPTION: $1
'''

[backends.embed]
kind = "mock"
embed_dim = 16
embed_seed = 6
"#
    );
    if with_endpoints {
        for name in ["persona-0", "persona-1", "single-min", "single-max"] {
            text.push_str(&format!(
                "\n[[simulate.endpoints]]\nname = \"{name}\"\nkind = \"mock\"\ndefault_response = \"3\"\n"
            ));
        }
    }
    let path = root.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Invokes the binary with `--config` plus the given arguments and returns
/// the raw outcome, whatever the exit code.
pub fn try_stage(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uasim"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("launch pipeline binary")
}

/// Runs one stage and asserts it succeeded.
pub fn run_stage(config: &Path, stage: &str) {
    let output = try_stage(config, &[stage]);
    assert!(
        output.status.success(),
        "stage {stage} exited with {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
}
