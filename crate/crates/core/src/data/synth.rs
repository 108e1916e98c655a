//! Synthetic entity-relation world with gold evidence chains and
//! answer-bearing distractor passages.
//!
//! Layout for `hops = n`: question entities are people; each person links to
//! a level-1 bridge entity, each level-j bridge links to a level-(j+1) bridge,
//! and the last bridge level links to a city, which is the answer. For `n = 1`
//! the person's passage names the city directly, describes the profession
//! with a paraphrase ("works with reagents") and the question uses a noun
//! ("chemist") plus the family name only. Relation wording differs between
//! questions and passages.
//!
//! Every answer-city passage is either on some question's gold chain or is
//! one of the `distractor_fraction · num_passages` distractors: a tour by one
//! question's person that lists several cities, among them another
//! question's answer.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, Dataset, Passage, PassageStore, Question};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_passages: usize,
    pub num_train: usize,
    pub num_dev: usize,
    pub hops: usize,
    pub distractor_fraction: f64,
    /// Bridge entities per intermediate level.
    pub num_entities: usize,
    /// Distinct answer entities (cities).
    pub num_answers: usize,
    /// Relation phrasings used for the first hop.
    pub num_relations: usize,
    /// Distinct given names and, separately, family names.
    pub name_pool: usize,
    /// Cities listed in each distractor, including the answer.
    pub distractor_cities: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_passages: 2000,
            num_train: 300,
            num_dev: 100,
            hops: 2,
            distractor_fraction: 0.2,
            num_entities: 30,
            num_answers: 40,
            num_relations: 4,
            name_pool: 1500,
            distractor_cities: 4,
            seed: 42,
        }
    }
}

impl GenConfig {
    /// Single-hop world: questions name the person by family name only, so
    /// only the profession paraphrase tells same-named people apart.
    pub fn single_hop() -> Self {
        Self {
            hops: 1,
            distractor_fraction: 0.0,
            name_pool: 30,
            ..Self::default()
        }
    }

    pub fn num_questions(&self) -> usize {
        self.num_train + self.num_dev
    }

    pub fn num_distractors(&self) -> usize {
        (self.distractor_fraction * self.num_passages as f64).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hops == 0 {
            return bad("hops must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return bad("distractor_fraction must lie in [0, 1]".into());
        }
        if self.num_questions() == 0 {
            return bad("at least one question is required".into());
        }
        if self.num_answers < 2 {
            return bad("need at least two answer entities".into());
        }
        if self.distractor_cities == 0 {
            return bad("distractor_cities must be positive".into());
        }
        if self.num_relations == 0 || self.num_relations > FIRST_HOP_RELATIONS.len() {
            return bad(format!(
                "num_relations must be in 1..={}",
                FIRST_HOP_RELATIONS.len()
            ));
        }
        if self.name_pool == 0 {
            return bad("name_pool must be positive".into());
        }
        if self.hops >= 2 {
            if self.num_entities == 0 {
                return bad("multi-hop worlds need bridge entities".into());
            }
            if self.num_entities > self.num_questions() {
                return bad(format!(
                    "num_entities ({}) exceeds question count ({}); every city-bearing bridge must lie on a gold chain",
                    self.num_entities,
                    self.num_questions()
                ));
            }
        }
        if self.fixed_passages() > self.num_passages {
            return bad(format!(
                "world too small: {} passages requested but questions, bridges and distractors need {}",
                self.num_passages,
                self.fixed_passages()
            ));
        }
        let persons = self.num_passages - self.num_distractors() - self.bridge_passages();
        let identities = self.name_pool * self.name_pool * PROFESSIONS.len();
        if persons > identities {
            return bad(format!(
                "world too small: {persons} people but only {identities} distinct name/profession identities"
            ));
        }
        Ok(())
    }

    fn bridge_passages(&self) -> usize {
        self.hops.saturating_sub(1) * self.num_entities
    }

    fn fixed_passages(&self) -> usize {
        self.num_questions() + self.num_distractors() + self.bridge_passages()
    }
}

/// (question noun, passage paraphrase)
const PROFESSIONS: &[(&str, &str)] = &[
    ("chemist", "works with reagents"),
    ("astronomer", "observes distant galaxies"),
    ("sculptor", "carves marble statues"),
    ("violinist", "performs string concertos"),
    ("surgeon", "operates on patients"),
    ("architect", "designs tall buildings"),
    ("novelist", "writes long fiction"),
    ("botanist", "catalogues flowering plants"),
    ("economist", "models financial markets"),
    ("geologist", "examines ancient rocks"),
    ("linguist", "analyzes spoken languages"),
    ("pilot", "flies commercial aircraft"),
    ("painter", "paints oil portraits"),
    ("engineer", "builds suspension bridges"),
    ("historian", "researches medieval archives"),
    ("mathematician", "proves abstract theorems"),
];

/// (question phrase, passage phrase) for the person → bridge hop.
const FIRST_HOP_RELATIONS: &[(&str, &str)] = &[
    ("the employer of", "is employed by"),
    ("the alma mater of", "graduated from"),
    ("the organization founded by", "established"),
    ("the sponsor of", "receives funding from"),
];

/// Kind words for bridge entities, by level.
const BRIDGE_KINDS: &[&[&str]] = &[
    &["institute", "university", "laboratory", "academy", "college"],
    &["foundation", "consortium", "trust", "society"],
    &["federation", "alliance", "league", "union"],
];

/// (question phrase, passage phrase) for bridge → bridge hops.
const BRIDGE_RELATIONS: &[(&str, &str)] = &[
    ("the parent body of", "is a member of"),
    ("the governing body of", "reports to"),
];

const CITY_TEMPLATES: &[&str] = &[
    "{e} is based in {c}.",
    "{e} has its headquarters in {c}.",
    "{e} operates from {c}.",
];

const EVENT_KINDS: &[&str] = &["symposium", "workshop", "lecture series", "gala", "exhibition"];
const EVENT_TOPICS: &[&str] = &[
    "climate policy",
    "rare manuscripts",
    "urban transit",
    "public health",
    "early music",
    "glass art",
    "ocean currents",
    "folk traditions",
];

#[derive(Debug, Clone)]
struct Person {
    first: String,
    last: String,
    profession: usize,
}

impl Person {
    fn name(&self) -> String {
        format!("{} {}", self.first, self.last)
    }
}

#[derive(Debug, Clone)]
struct Bridge {
    name: String,
    /// Index into the next level, or into the city list for the last level.
    link: usize,
    relation: usize,
    template: usize,
}

struct WordMint {
    used: HashSet<String>,
}

impl WordMint {
    fn new() -> Self {
        let mut used = HashSet::new();
        let reserved = PROFESSIONS
            .iter()
            .flat_map(|(a, b)| [*a, *b])
            .chain(FIRST_HOP_RELATIONS.iter().flat_map(|(a, b)| [*a, *b]))
            .chain(BRIDGE_RELATIONS.iter().flat_map(|(a, b)| [*a, *b]))
            .chain(BRIDGE_KINDS.iter().flat_map(|k| k.iter().copied()))
            .chain(CITY_TEMPLATES.iter().copied())
            .chain(EVENT_KINDS.iter().copied())
            .chain(EVENT_TOPICS.iter().copied())
            .chain([
                "which city hosts what is the hometown of who was born in toured and tour hosted a on",
            ]);
        for s in reserved {
            used.extend(tokenize(s));
        }
        Self { used }
    }

    /// Mints `n` new capitalized pseudo-words.
    fn mint(&mut self, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<String>> {
        const ONSETS: &[&str] = &[
            "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr",
            "kl", "st", "tr", "sh",
        ];
        const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
        const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "m"];
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 200 * n + 10_000 {
                return Err(Error::InvalidConfig(
                    "could not mint enough distinct entity names".into(),
                ));
            }
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
            }
            w.push_str(CODAS.choose(rng).unwrap());
            if self.used.insert(w.clone()) {
                out.push(capitalize(&w));
            }
        }
        Ok(out)
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn generate_synthetic(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mint = WordMint::new();

    let hops = config.hops;
    let num_q = config.num_questions();
    let num_distractors = config.num_distractors();
    let filler = config.num_passages - config.fixed_passages();
    // Fillers are split between extra people and bridge event notices.
    let num_events = if hops >= 2 { filler / 4 } else { 0 };
    let num_extra_people = filler - num_events;
    let num_people = num_q + num_extra_people;

    let cities = mint.mint(&mut rng, config.num_answers)?;
    // Tours pad their one answer city with cities that answer nothing.
    let filler_cities = mint.mint(&mut rng, config.distractor_cities.saturating_sub(1).max(1) * 4)?;
    let firsts = mint.mint(&mut rng, config.name_pool)?;
    let lasts = mint.mint(&mut rng, config.name_pool)?;

    // Distinct (first, last, profession) identities.
    let mut identities = BTreeSet::new();
    let mut people = Vec::with_capacity(num_people);
    while people.len() < num_people {
        let key = (
            rng.gen_range(0..config.name_pool),
            rng.gen_range(0..config.name_pool),
            rng.gen_range(0..PROFESSIONS.len()),
        );
        if identities.insert(key) {
            people.push(Person {
                first: firsts[key.0].clone(),
                last: lasts[key.1].clone(),
                profession: key.2,
            });
        }
    }

    // Bridge levels 1..hops-1; each level links surjectively into the next.
    let mut levels: Vec<Vec<Bridge>> = Vec::new();
    for level in 0..hops.saturating_sub(1) {
        let names = mint.mint(&mut rng, config.num_entities)?;
        let kinds = BRIDGE_KINDS[level.min(BRIDGE_KINDS.len() - 1)];
        let last_level = level + 2 == hops;
        let targets = if last_level {
            config.num_answers
        } else {
            config.num_entities
        };
        let mut cover: Vec<usize> = (0..targets).collect();
        cover.shuffle(&mut rng);
        let bridges = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| Bridge {
                name: format!("{n} {}", capitalize(kinds.choose(&mut rng).unwrap())),
                link: if i < cover.len() {
                    cover[i]
                } else {
                    rng.gen_range(0..targets)
                },
                relation: rng.gen_range(0..BRIDGE_RELATIONS.len()),
                template: rng.gen_range(0..CITY_TEMPLATES.len()),
            })
            .collect();
        levels.push(bridges);
    }

    // People 0..num_q are question subjects; every level-1 bridge gets at
    // least one of them so every city-bearing bridge lies on a gold chain.
    let mut person_links = Vec::with_capacity(num_people);
    let mut person_relations = Vec::with_capacity(num_people);
    if hops >= 2 {
        let mut cover: Vec<usize> = (0..config.num_entities).collect();
        cover.shuffle(&mut rng);
        for i in 0..num_people {
            let link = if i < cover.len() {
                cover[i]
            } else {
                rng.gen_range(0..config.num_entities)
            };
            person_links.push(link);
            person_relations.push(rng.gen_range(0..config.num_relations));
        }
    } else {
        for _ in 0..num_people {
            person_links.push(rng.gen_range(0..config.num_answers));
            person_relations.push(0);
        }
    }

    let mut passages: Vec<Passage> = Vec::with_capacity(config.num_passages);
    let mut person_passage = Vec::with_capacity(num_people);
    // Single-hop people who answer nothing are born in cities no question
    // asks about, spread as thinly as the answer cities are.
    let other_homes = if hops == 1 {
        let n = (num_extra_people * config.num_answers).div_ceil(num_q).max(1);
        mint.mint(&mut rng, n)?
    } else {
        Vec::new()
    };
    for (i, p) in people.iter().enumerate() {
        let (_, desc) = PROFESSIONS[p.profession];
        let text = if hops >= 2 {
            let (_, rel) = FIRST_HOP_RELATIONS[person_relations[i]];
            format!("{} {rel} {}.", p.name(), levels[0][person_links[i]].name)
        } else if i < num_q {
            format!("{}, who {desc}, was born in {}.", p.name(), cities[person_links[i]])
        } else {
            let home = other_homes.choose(&mut rng).unwrap();
            format!("{}, who {desc}, was born in {home}.", p.name())
        };
        person_passage.push(passages.len());
        passages.push(Passage::new("", p.name(), text));
    }

    let mut bridge_passage: Vec<Vec<usize>> = Vec::new();
    for (level, bridges) in levels.iter().enumerate() {
        let last_level = level + 2 == hops;
        let mut idx = Vec::with_capacity(bridges.len());
        for b in bridges {
            let text = if last_level {
                CITY_TEMPLATES[b.template]
                    .replace("{e}", &b.name)
                    .replace("{c}", &cities[b.link])
            } else {
                let (_, rel) = BRIDGE_RELATIONS[b.relation];
                format!("{} {rel} {}.", b.name, levels[level + 1][b.link].name)
            };
            idx.push(passages.len());
            passages.push(Passage::new("", b.name.clone(), text));
        }
        bridge_passage.push(idx);
    }

    for _ in 0..num_events {
        let b = levels[0].choose(&mut rng).unwrap();
        let text = format!(
            "{} hosted a {} on {} in {}.",
            b.name,
            EVENT_KINDS.choose(&mut rng).unwrap(),
            EVENT_TOPICS.choose(&mut rng).unwrap(),
            rng.gen_range(1950..2021)
        );
        passages.push(Passage::new("", b.name.clone(), text));
    }

    // Answer for each question subject, following its chain to the city.
    let chain_of = |i: usize| -> (Vec<usize>, usize) {
        let mut chain = vec![person_passage[i]];
        if hops == 1 {
            return (chain, person_links[i]);
        }
        let mut at = person_links[i];
        for (level, bridges) in levels.iter().enumerate() {
            chain.push(bridge_passage[level][at]);
            at = bridges[at].link;
        }
        (chain, at)
    };

    let mut subjects: Vec<usize> = (0..num_q).collect();
    subjects.shuffle(&mut rng);
    let mut distractor_owner: Vec<usize> = (0..num_distractors).map(|k| subjects[k % num_q]).collect();
    distractor_owner.shuffle(&mut rng);
    for owner in distractor_owner {
        let (_, answer) = chain_of(owner);
        let k = config.distractor_cities;
        let mut names: Vec<&str> = filler_cities.choose_multiple(&mut rng, k - 1).map(String::as_str).collect();
        names.push(cities[answer].as_str());
        names.shuffle(&mut rng);
        let list = match names.len() {
            1 => names[0].to_string(),
            n => format!("{} and {}", names[..n - 1].join(", "), names[n - 1]),
        };
        // The tourist is some other question's subject, so the tour carries
        // one question's answer under another question's name.
        let tourist = if num_q > 1 {
            let k = rng.gen_range(0..num_q - 1);
            if k >= owner { k + 1 } else { k }
        } else {
            owner
        };
        let person = &people[tourist];
        let year = rng.gen_range(1950..2021);
        let text = format!("In {year}, {} toured {list}.", person.name());
        passages.push(Passage::new("", format!("{} tour", person.name()), text));
    }

    // Shuffle so ids carry no structural signal, then assign ids.
    let mut order: Vec<usize> = (0..passages.len()).collect();
    order.shuffle(&mut rng);
    let mut id_of = vec![String::new(); passages.len()];
    for (new_pos, &old) in order.iter().enumerate() {
        id_of[old] = format!("p{new_pos:06}");
    }
    let mut final_passages = Vec::with_capacity(passages.len());
    for &old in &order {
        let mut p = passages[old].clone();
        p.id = id_of[old].clone();
        final_passages.push(p);
    }

    let mut questions = Vec::with_capacity(num_q);
    for (qi, &subject) in subjects.iter().enumerate() {
        let person = &people[subject];
        let (noun, _) = PROFESSIONS[person.profession];
        let (chain, answer) = chain_of(subject);
        let text = if hops == 1 {
            format!("What is the hometown of the {noun} named {}?", person.last)
        } else {
            let mut rel = String::new();
            for level in (0..levels.len() - 1).rev() {
                let at = bridge_of(&levels, person_links[subject], level);
                let (q, _) = BRIDGE_RELATIONS[levels[level][at].relation];
                rel.push_str(q);
                rel.push(' ');
            }
            let (q, _) = FIRST_HOP_RELATIONS[person_relations[subject]];
            format!("Which city hosts {rel}{q} the {noun} {}?", person.name())
        };
        let (split, n) = if qi < config.num_train {
            ("train", qi)
        } else {
            ("dev", qi - config.num_train)
        };
        questions.push(
            Question::new(format!("{split}-{n:04}"), text, vec![cities[answer].clone()])
                .with_gold(chain.iter().map(|&c| id_of[c].clone()).collect()),
        );
    }
    let dev = questions.split_off(config.num_train);

    Ok(Dataset {
        passages: PassageStore::new(final_passages)?,
        train: questions,
        dev,
    })
}

/// Bridge index reached at `level` starting from a level-0 bridge.
fn bridge_of(levels: &[Vec<Bridge>], start: usize, level: usize) -> usize {
    let mut at = start;
    for l in 0..level {
        at = levels[l][at].link;
    }
    at
}
