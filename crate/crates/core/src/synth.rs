//! Deterministic synthetic catalog and dialogue corpus.
//!
//! Movies fall into three groups: a popular head that train conversations
//! mention and recommend; "siblings", niche movies that share a director, lead
//! actor and genre with one popular movie but never occur in training
//! dialogue; and an unrelated niche tail. Test conversations mention a popular
//! movie and are answered either with another popular movie or with its niche
//! sibling, which retrieval can only reach through catalog structure.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub movies: usize,
    pub popular: usize,
    pub siblings: usize,
    pub actors: usize,
    pub directors: usize,
    pub genres: usize,
    pub train_conversations: usize,
    pub test_conversations: usize,
    /// Share of test conversations answered with a niche sibling.
    pub sibling_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            movies: 300,
            popular: 80,
            siblings: 60,
            actors: 150,
            directors: 40,
            genres: 10,
            train_conversations: 200,
            test_conversations: 100,
            sibling_share: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthData {
    pub kg: String,
    pub train: String,
    pub test: String,
}

impl SynthData {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("kg.tsv", &self.kg),
            ("train.jsonl", &self.train),
            ("test.jsonl", &self.test),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

const GENRES: [&str; 10] = [
    "Drama",
    "Comedy",
    "Thriller",
    "Western",
    "Horror",
    "Romance",
    "Musical",
    "Documentary",
    "Animation",
    "Fantasy",
];

const ADJECTIVES: [&str; 24] = [
    "Crimson",
    "Silent",
    "Broken",
    "Golden",
    "Hollow",
    "Distant",
    "Frozen",
    "Burning",
    "Hidden",
    "Savage",
    "Velvet",
    "Iron",
    "Midnight",
    "Scarlet",
    "Wandering",
    "Electric",
    "Painted",
    "Forgotten",
    "Restless",
    "Emerald",
    "Shattered",
    "Glass",
    "Northern",
    "Lonely",
];

const NOUNS: [&str; 24] = [
    "Harbor",
    "Mountain",
    "Empire",
    "Garden",
    "Kingdom",
    "Orchard",
    "Canyon",
    "Lantern",
    "Frontier",
    "Cathedral",
    "Voyage",
    "Meadow",
    "Fortress",
    "Island",
    "Compass",
    "Desert",
    "Bridge",
    "Tempest",
    "Citadel",
    "Journey",
    "Paradox",
    "Monsoon",
    "Tribunal",
    "Labyrinth",
];

const FIRST: [&str; 20] = [
    "Alma", "Bruno", "Clara", "Dorian", "Elsa", "Felix", "Greta", "Hugo", "Ingrid", "Jasper", "Katya", "Lionel",
    "Mira", "Nestor", "Odile", "Pavel", "Quinn", "Rosalind", "Silas", "Tamsin",
];

const LAST: [&str; 20] = [
    "Abernathy",
    "Brightwater",
    "Castellano",
    "Delacroix",
    "Eastwick",
    "Fairbanks",
    "Galloway",
    "Hartigan",
    "Ingersoll",
    "Jablonski",
    "Kowalczyk",
    "Lindqvist",
    "Montgomery",
    "Nakamura",
    "Oyelaran",
    "Pemberton",
    "Quintero",
    "Rasmussen",
    "Sandoval",
    "Thackeray",
];

#[derive(Clone)]
struct Movie {
    key: String,
    title: String,
    short: String,
    director: usize,
    genre: usize,
    actors: [usize; 3],
}

#[derive(Serialize)]
struct OutTurn<'a> {
    speaker: &'a str,
    text: String,
}

#[derive(Serialize)]
struct OutMention {
    turn: usize,
    entity: String,
}

#[derive(Serialize)]
struct OutRec {
    turn: usize,
    item: String,
    accepted: bool,
}

#[derive(Serialize)]
struct OutConversation<'a> {
    id: String,
    turns: Vec<OutTurn<'a>>,
    mentions: Vec<OutMention>,
    recs: Vec<OutRec>,
}

fn person_names(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    let mut all: Vec<String> = FIRST
        .iter()
        .flat_map(|f| LAST.iter().map(move |l| format!("{f} {l}")))
        .collect();
    all.shuffle(rng);
    all.truncate(count);
    all
}

struct Catalog {
    movies: Vec<Movie>,
    actors: Vec<String>,
    directors: Vec<String>,
}

fn catalog(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Catalog {
    assert!(
        cfg.popular + cfg.siblings <= cfg.movies,
        "siblings must fit in the catalog"
    );
    assert!(
        cfg.movies <= ADJECTIVES.len() * NOUNS.len(),
        "not enough distinct titles"
    );
    assert!(
        cfg.actors + cfg.directors <= FIRST.len() * LAST.len(),
        "not enough distinct names"
    );
    assert!(cfg.genres <= GENRES.len(), "not enough genres");
    let people = person_names(rng, cfg.actors + cfg.directors);
    let actors = people[..cfg.actors].to_vec();
    let directors = people[cfg.actors..].to_vec();
    let mut combos: Vec<(usize, usize)> = (0..ADJECTIVES.len())
        .flat_map(|a| (0..NOUNS.len()).map(move |n| (a, n)))
        .collect();
    combos.shuffle(rng);

    let mut movies: Vec<Movie> = Vec::with_capacity(cfg.movies);
    for (i, &(a, n)) in combos[..cfg.movies].iter().enumerate() {
        let short = if rng.random_bool(0.3) {
            format!("The {} {}", ADJECTIVES[a], NOUNS[n])
        } else {
            format!("{} {}", ADJECTIVES[a], NOUNS[n])
        };
        let year: u16 = rng.random_range(1960..=2020);
        let sibling_of = (i >= cfg.popular && i < cfg.popular + cfg.siblings).then(|| i - cfg.popular);
        let (director, genre, lead) = match sibling_of {
            Some(p) => (movies[p].director, movies[p].genre, movies[p].actors[0]),
            None => (
                rng.random_range(0..cfg.directors),
                rng.random_range(0..cfg.genres),
                rng.random_range(0..cfg.actors),
            ),
        };
        let actors = [lead, rng.random_range(0..cfg.actors), rng.random_range(0..cfg.actors)];
        movies.push(Movie {
            key: format!("m{i}"),
            title: format!("{short} ({year})"),
            short,
            director,
            genre,
            actors,
        });
    }
    Catalog {
        movies,
        actors,
        directors,
    }
}

fn kg_text(cfg: &SynthConfig, cat: &Catalog) -> String {
    let mut out = String::from("# synthetic movie catalog\n");
    for m in &cat.movies {
        writeln!(out, "E\t{}\titem\t{}\t{}", m.key, m.title, m.short).expect("write to string");
    }
    for (i, name) in cat.actors.iter().enumerate() {
        writeln!(out, "E\ta{i}\tattribute\t{name}").expect("write to string");
    }
    for (i, name) in cat.directors.iter().enumerate() {
        writeln!(out, "E\td{i}\tattribute\t{name}").expect("write to string");
    }
    for (i, name) in GENRES.iter().take(cfg.genres).enumerate() {
        writeln!(out, "E\tg{i}\tattribute\t{name}").expect("write to string");
    }
    for m in &cat.movies {
        writeln!(out, "T\t{}\tdirected by\td{}", m.key, m.director).expect("write to string");
        writeln!(out, "T\t{}\tgenre\tg{}", m.key, m.genre).expect("write to string");
        for a in m.actors {
            writeln!(out, "T\t{}\tstarring\ta{a}", m.key).expect("write to string");
        }
    }
    out
}

/// Popular movies sharing an attribute with `m`, excluding `m`.
fn related_popular(cat: &Catalog, popular: usize, m: usize) -> Vec<usize> {
    let a = &cat.movies[m];
    (0..popular)
        .filter(|&o| o != m)
        .filter(|&o| {
            let b = &cat.movies[o];
            b.director == a.director || b.genre == a.genre || b.actors.iter().any(|x| a.actors.contains(x))
        })
        .collect()
}

const OPENERS: [&str; 5] = [
    "Hi! I really enjoyed {M}. Any ideas?",
    "Hello, I watched {M} last week and loved it.",
    "I'm in the mood for something like {M}.",
    "Have you seen {M}? Looking for more like that.",
    "My favourite lately has been {M}, what else would I like?",
];

const SECOND_MENTION: [&str; 3] = [" I also liked {M}.", " {M} was fun too.", " And {M} of course."];

const ACTOR_MENTION: [&str; 2] = [" Anything with {A} would be great.", " I am a fan of {A}."];

const PITCHES: [&str; 4] = [
    "You might like {R}.",
    "How about {R}?",
    "I'd suggest {R}, it is a good match.",
    "Then {R} should be right up your alley.",
];

const REPLIES_ACCEPT: [&str; 3] = [
    "Sounds great, thanks!",
    "Oh nice, I'll check it out.",
    "Perfect, adding it to my list.",
];
const REPLIES_REJECT: [&str; 2] = ["I've seen that one, not for me.", "Hmm, not really my taste."];

fn fill(template: &str, slot: &str, value: &str) -> String {
    template.replace(slot, value)
}

fn train_conversation(id: usize, cfg: &SynthConfig, cat: &Catalog, rng: &mut ChaCha8Rng) -> String {
    let m1 = rng.random_range(0..cfg.popular);
    let mut turns = Vec::new();
    let mut mentions = Vec::new();
    let mut recs = Vec::new();

    let mut opener = fill(OPENERS.choose(rng).expect("nonempty"), "{M}", &cat.movies[m1].short);
    mentions.push(OutMention {
        turn: 0,
        entity: cat.movies[m1].key.clone(),
    });
    let mut mentioned = vec![m1];
    let related = related_popular(cat, cfg.popular, m1);
    if rng.random_bool(0.5) {
        let m2 = *related.choose(rng).unwrap_or(&((m1 + 1) % cfg.popular));
        if m2 != m1 {
            opener.push_str(&fill(
                SECOND_MENTION.choose(rng).expect("nonempty"),
                "{M}",
                &cat.movies[m2].short,
            ));
            mentions.push(OutMention {
                turn: 0,
                entity: cat.movies[m2].key.clone(),
            });
            mentioned.push(m2);
        }
    }
    if rng.random_bool(0.3) {
        let a = cat.movies[m1].actors[0];
        opener.push_str(&fill(
            ACTOR_MENTION.choose(rng).expect("nonempty"),
            "{A}",
            &cat.actors[a],
        ));
        mentions.push(OutMention {
            turn: 0,
            entity: format!("a{a}"),
        });
    }
    turns.push(OutTurn {
        speaker: "user",
        text: opener,
    });

    let rounds = if rng.random_bool(0.5) { 2 } else { 1 };
    for _ in 0..rounds {
        let pool: Vec<usize> = related.iter().copied().filter(|r| !mentioned.contains(r)).collect();
        let pick = if !pool.is_empty() && rng.random_bool(0.85) {
            *pool.choose(rng).expect("nonempty")
        } else {
            loop {
                let r = rng.random_range(0..cfg.popular);
                if !mentioned.contains(&r) {
                    break r;
                }
            }
        };
        mentioned.push(pick);
        let turn = turns.len();
        turns.push(OutTurn {
            speaker: "recommender",
            text: fill(PITCHES.choose(rng).expect("nonempty"), "{R}", &cat.movies[pick].title),
        });
        mentions.push(OutMention {
            turn,
            entity: cat.movies[pick].key.clone(),
        });
        let accepted = rng.random_bool(0.85);
        recs.push(OutRec {
            turn,
            item: cat.movies[pick].key.clone(),
            accepted,
        });
        let reply = if accepted {
            REPLIES_ACCEPT.choose(rng)
        } else {
            REPLIES_REJECT.choose(rng)
        };
        turns.push(OutTurn {
            speaker: "user",
            text: reply.expect("nonempty").to_string(),
        });
    }
    serde_json::to_string(&OutConversation {
        id: format!("train-{id:04}"),
        turns,
        mentions,
        recs,
    })
    .expect("serializes")
}

fn test_conversation(id: usize, cfg: &SynthConfig, cat: &Catalog, rng: &mut ChaCha8Rng) -> String {
    let sibling = rng.random_bool(cfg.sibling_share);
    let anchor = if sibling {
        rng.random_range(0..cfg.siblings.min(cfg.popular))
    } else {
        rng.random_range(0..cfg.popular)
    };
    let target = if sibling {
        cfg.popular + anchor
    } else {
        let related = related_popular(cat, cfg.popular, anchor);
        *related.choose(rng).unwrap_or(&((anchor + 1) % cfg.popular))
    };
    let opener = fill(OPENERS.choose(rng).expect("nonempty"), "{M}", &cat.movies[anchor].short);
    let turns = vec![
        OutTurn {
            speaker: "user",
            text: opener,
        },
        OutTurn {
            speaker: "recommender",
            text: fill(PITCHES.choose(rng).expect("nonempty"), "{R}", &cat.movies[target].title),
        },
        OutTurn {
            speaker: "user",
            text: REPLIES_ACCEPT.choose(rng).expect("nonempty").to_string(),
        },
    ];
    serde_json::to_string(&OutConversation {
        id: format!("test-{id:04}"),
        turns,
        mentions: vec![
            OutMention {
                turn: 0,
                entity: cat.movies[anchor].key.clone(),
            },
            OutMention {
                turn: 1,
                entity: cat.movies[target].key.clone(),
            },
        ],
        recs: vec![OutRec {
            turn: 1,
            item: cat.movies[target].key.clone(),
            accepted: true,
        }],
    })
    .expect("serializes")
}

pub fn generate(cfg: &SynthConfig) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cat = catalog(cfg, &mut rng);
    let kg = kg_text(cfg, &cat);
    let mut train = String::new();
    for i in 0..cfg.train_conversations {
        train.push_str(&train_conversation(i, cfg, &cat, &mut rng));
        train.push('\n');
    }
    let mut test = String::new();
    for i in 0..cfg.test_conversations {
        test.push_str(&test_conversation(i, cfg, &cat, &mut rng));
        test.push('\n');
    }
    SynthData { kg, train, test }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, CorpusOptions};
    use crate::kg::{KgOptions, KnowledgeGraph};

    #[test]
    fn generation_is_deterministic_and_loadable() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        let kg = KnowledgeGraph::parse(&a.kg, "kg", KgOptions::default()).unwrap();
        assert_eq!(kg.entity_count(), 500);
        assert_eq!(kg.item_count(), 300);
        let strict = CorpusOptions { strict: true };
        assert_eq!(parse_corpus(&a.train, "train", &kg, strict).unwrap().len(), 200);
        assert_eq!(parse_corpus(&a.test, "test", &kg, strict).unwrap().len(), 100);
        let triple_lines = a.kg.lines().filter(|l| l.starts_with("T\t")).count();
        assert_eq!(triple_lines, 1500);
    }

    #[test]
    fn other_seed_changes_output() {
        let a = generate(&SynthConfig::default());
        let b = generate(&SynthConfig {
            seed: 8,
            ..Default::default()
        });
        assert_ne!(a.train, b.train);
    }
}
