//! Synthetic tweet corpora with Zipf-distributed users, hashtags and mentions.

use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    #[serde(rename = "@records")]
    pub records: usize,
    #[serde(rename = "@seed")]
    pub seed: u64,
    #[serde(rename = "@users")]
    pub users: usize,
    #[serde(rename = "@hashtags")]
    pub hashtags: usize,
    /// Zipf exponent shared by author, mention and hashtag popularity.
    #[serde(rename = "@zipf_s")]
    pub zipf_s: f64,
    #[serde(rename = "@max_hashtags")]
    pub max_hashtags: usize,
    #[serde(rename = "@max_mentions")]
    pub max_mentions: usize,
    #[serde(rename = "@emoji_only_fraction")]
    pub emoji_only_fraction: f64,
    #[serde(rename = "@missing_text_fraction")]
    pub missing_text_fraction: f64,
    #[serde(rename = "@malformed_fraction")]
    pub malformed_fraction: f64,
    /// Every this many records the hashtag popularity ranking rotates; 0 keeps it fixed.
    #[serde(rename = "@topic_shift_every")]
    pub topic_shift_every: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            records: 10_000,
            seed: 7,
            users: 1_500,
            hashtags: 300,
            zipf_s: 1.3,
            max_hashtags: 6,
            max_mentions: 4,
            emoji_only_fraction: 0.01,
            missing_text_fraction: 0.005,
            malformed_fraction: 0.0,
            topic_shift_every: 0,
        }
    }
}

const WORDS: [&str; 16] = [
    "graph", "stream", "vote", "today", "news", "live", "data", "city", "game", "music", "rain", "launch", "update",
    "night", "team", "policy",
];
const EMOJI: [&str; 6] = ["😀", "🎉", "🔥", "🙏", "🚀", "❤️"];

struct Draw {
    users: Zipf<f64>,
    tags: Zipf<f64>,
}

fn rank(z: &Zipf<f64>, rng: &mut ChaCha8Rng) -> usize {
    z.sample(rng) as usize - 1
}

/// Generates `spec.records` lines, deterministically for a given seed.
pub fn generate(spec: &CorpusSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = Draw {
        users: Zipf::new(spec.users.max(1) as f64, spec.zipf_s).expect("valid zipf"),
        tags: Zipf::new(spec.hashtags.max(1) as f64, spec.zipf_s).expect("valid zipf"),
    };
    (0..spec.records).map(|i| line(spec, &draw, &mut rng, i)).collect()
}

fn line(spec: &CorpusSpec, draw: &Draw, rng: &mut ChaCha8Rng, i: usize) -> String {
    let roll: f64 = rng.random();
    if roll < spec.malformed_fraction {
        return format!("{{\"id_str\": \"broken-{i}\", \"text\": ");
    }
    let author = rank(&draw.users, rng);
    let shift = match spec.topic_shift_every {
        0 => 0,
        n => (i / n) * spec.hashtags.max(1) / 7,
    };
    let n_tags = rng.random_range(0..=spec.max_hashtags);
    let mut tags: Vec<String> = Vec::new();
    for _ in 0..n_tags {
        let t = (rank(&draw.tags, rng) + shift) % spec.hashtags.max(1);
        let name = if rng.random_bool(0.2) { format!("Topic{t}") } else { format!("topic{t}") };
        if !tags.iter().any(|x| x.eq_ignore_ascii_case(&name)) {
            tags.push(name);
        }
    }
    let n_mentions = rng.random_range(0..=spec.max_mentions);
    let mut mentions: Vec<usize> = Vec::new();
    for _ in 0..n_mentions {
        let u = rank(&draw.users, rng);
        if u != author && !mentions.contains(&u) {
            mentions.push(u);
        }
    }

    let kind: f64 = rng.random();
    let text = if kind < spec.emoji_only_fraction {
        Some((0..rng.random_range(1..4)).map(|_| EMOJI[rng.random_range(0..EMOJI.len())]).collect::<Vec<_>>().join(" "))
    } else if kind < spec.emoji_only_fraction + spec.missing_text_fraction {
        None
    } else {
        let mut words: Vec<String> =
            (0..rng.random_range(3..9)).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
        words.extend(tags.iter().map(|t| format!("#{t}")));
        words.extend(mentions.iter().map(|u| format!("@user{u}")));
        Some(words.join(" "))
    };

    let mut doc = json!({
        "id_str": format!("{}{:09}", spec.seed, i),
        "created_at": format!("2020-11-03T{:02}:{:02}:{:02}Z", (i / 3600) % 24, (i / 60) % 60, i % 60),
        "user": {
            "id_str": format!("{author}"),
            "screen_name": format!("user{author}"),
            "followers_count": 10_000 / (author + 1),
        },
        "entities": {
            "hashtags": tags.iter().map(|t| json!({"text": t})).collect::<Vec<_>>(),
            "user_mentions": mentions
                .iter()
                .map(|u| json!({"id_str": format!("{u}"), "screen_name": format!("user{u}")}))
                .collect::<Vec<_>>(),
        }
    });
    if let Some(text) = text {
        doc["text"] = json!(text);
    }
    doc.to_string()
}

pub fn write_corpus(path: impl AsRef<Path>, spec: &CorpusSpec) -> io::Result<usize> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = io::BufWriter::new(std::fs::File::create(path)?);
    let lines = generate(spec);
    for l in &lines {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(lines.len())
}
