//! Word lists for the synthetic dialogues and the pretraining corpus.

use sha2::{Digest, Sha256};

use crate::backbone::Vocabulary;

pub const SPEAKERS: [&str; 2] = ["ana", "ben"];

pub const ENTITIES: [&str; 40] = [
    "tom", "mia", "leo", "zoe", "max", "ivy", "sam", "eva", "ray", "ada", "jon", "amy", "kai", "lia", "bea",
    "eli", "noa", "ian", "uma", "gus", "pia", "ned", "ora", "vic", "tess", "rex", "june", "otto", "ruth", "hugo",
    "nina", "carl", "dora", "finn", "gwen", "hank", "iris", "joel", "kate", "luke",
];

pub const ATTRIBUTES: [&str; 8] = ["city", "job", "pet", "color", "sport", "food", "car", "drink"];

/// Candidate values per attribute, aligned with [`ATTRIBUTES`].
pub const VALUES: [[&str; 12]; 8] = [
    [
        "paris", "london", "tokyo", "lima", "oslo", "cairo", "rome", "delhi", "new york", "cape town", "hong kong",
        "rio",
    ],
    [
        "nurse", "pilot", "chef", "lawyer", "farmer", "dentist", "painter", "baker", "teacher", "plumber",
        "data analyst", "bus driver",
    ],
    [
        "cat", "dog", "parrot", "rabbit", "turtle", "hamster", "goldfish", "pony", "lizard", "ferret", "guinea pig",
        "sea horse",
    ],
    [
        "red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "black", "white", "sky blue",
        "dark green",
    ],
    [
        "tennis", "soccer", "chess", "golf", "rugby", "hockey", "boxing", "rowing", "cricket", "skiing",
        "table tennis", "water polo",
    ],
    [
        "pizza", "sushi", "pasta", "tacos", "curry", "salad", "ramen", "steak", "soup", "noodles", "ice cream",
        "fried rice",
    ],
    [
        "sedan", "truck", "van", "jeep", "coupe", "wagon", "scooter", "minivan", "bike", "tractor", "sports car",
        "old van",
    ],
    [
        "tea", "coffee", "juice", "milk", "water", "soda", "cocoa", "lemonade", "cider", "smoothie", "green tea",
        "iced coffee",
    ],
];

/// Small talk lines; `{e}` is replaced by an entity.
pub const DISTRACTORS: [&str; 16] = [
    "how was your day ?",
    "the weather is nice today .",
    "i went for a long walk .",
    "that sounds like fun .",
    "i saw {e} yesterday .",
    "{e} says hello to you .",
    "we should meet again soon .",
    "i am a bit tired today .",
    "did you sleep well ?",
    "{e} was busy all week .",
    "let us talk later .",
    "i read a good book .",
    "what did you do today ?",
    "nothing much happened here .",
    "i had lunch with {e} .",
    "the movie was great .",
];

/// Fact statement templates over `{e}`, `{a}` and `{v}`.
pub const FACT_TEMPLATES: [&str; 4] = [
    "{e} {a} is {v} .",
    "by the way {e} {a} is {v} .",
    "remember that {e} {a} is {v} .",
    "i heard {e} {a} is {v} now .",
];

pub const QUESTION_TEMPLATE: &str = "what is {e} {a} ?";

fn split_words(s: &str) -> impl Iterator<Item = &str> {
    s.split_whitespace().filter(|w| !w.starts_with('{'))
}

/// Every word the generators can emit.
pub fn vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = Vec::new();
    words.extend(SPEAKERS);
    words.extend(ENTITIES);
    words.extend(ATTRIBUTES);
    for row in &VALUES {
        for v in row {
            words.extend(v.split_whitespace());
        }
    }
    for t in DISTRACTORS.iter().chain(&FACT_TEMPLATES).chain(std::iter::once(&QUESTION_TEMPLATE)) {
        words.extend(split_words(t));
    }
    Vocabulary::new(words)
}

/// Which half of the value list a fact belongs to. Benchmark dialogues use
/// half 0 and the pretraining corpus half 1, so no (entity, attribute, value)
/// triple appears in both.
pub fn fact_half(entity: usize, attribute: usize, value: usize) -> usize {
    let mut h = Sha256::new();
    h.update(ENTITIES[entity].as_bytes());
    h.update([0]);
    h.update(ATTRIBUTES[attribute].as_bytes());
    h.update([0]);
    h.update(VALUES[attribute][value].as_bytes());
    (h.finalize()[0] & 1) as usize
}

/// Value indices available to `half` for an (entity, attribute) pair. Each
/// half keeps at least one value.
pub fn values_for(entity: usize, attribute: usize, half: usize) -> Vec<usize> {
    let mine: Vec<usize> = (0..VALUES[attribute].len())
        .filter(|&v| fact_half(entity, attribute, v) == half)
        .collect();
    if mine.is_empty() || mine.len() == VALUES[attribute].len() {
        // degenerate hash split: fall back to parity of the index
        return (0..VALUES[attribute].len()).filter(|v| v % 2 == half).collect();
    }
    mine
}

pub fn fill(template: &str, entity: &str, attribute: &str, value: &str) -> String {
    template
        .replace("{e}", entity)
        .replace("{a}", attribute)
        .replace("{v}", value)
}
