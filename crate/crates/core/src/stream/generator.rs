//! Template generator for schema-style single-service dialogs.
//!
//! Every service draws its slots from one shared pool of slot types, so
//! a prompt that learned to read a date for a restaurant can read a date
//! for a flight as well. Descriptions and request phrasings differ per
//! service.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dialog, Service, StreamError, TaskStream};
use crate::codec::{Slot, ValueMap};

pub struct SlotType {
    pub name: &'static str,
    /// `{obj}` is replaced by the service's object noun.
    pub descriptions: &'static [&'static str],
    /// `{v}` is replaced by the value.
    pub phrases: &'static [&'static str],
    pub values: &'static [&'static str],
}

pub const SLOT_TYPES: [SlotType; 12] = [
    SlotType {
        name: "date",
        descriptions: &["date of the {obj}", "day of the {obj}", "day for the {obj}"],
        phrases: &["on {v}", "for {v}"],
        values: &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "march 3rd", "april 10th", "may 21st", "june 2nd", "today", "tomorrow"],
    },
    SlotType {
        name: "time",
        descriptions: &["time of the {obj}", "start time of the {obj}", "hour of the {obj}"],
        phrases: &["at {v}", "around {v}"],
        values: &["7 pm", "9 am", "noon", "10:30 am", "6 pm", "8:15 pm", "11 am", "4 pm", "midnight", "2:45 pm"],
    },
    SlotType {
        name: "city",
        descriptions: &["city of the {obj}", "location of the {obj}", "city where the {obj} is"],
        phrases: &["in {v}", "somewhere in {v}"],
        values: &["boston", "paris", "new york", "san jose", "london", "tokyo", "berlin", "chicago", "seattle", "madrid", "rome"],
    },
    SlotType {
        name: "party_size",
        descriptions: &["number of people for the {obj}", "party size of the {obj}", "how many people in the {obj}"],
        phrases: &["for {v} people", "with {v} guests"],
        values: &["two", "three", "four", "five", "six", "seven", "eight", "ten"],
    },
    SlotType {
        name: "venue",
        descriptions: &["name of the place for the {obj}", "venue of the {obj}", "place name of the {obj}"],
        phrases: &["called {v}", "named {v}"],
        values: &["golden dragon", "blue moon", "the grill", "olive garden", "sunset club", "river house", "green leaf", "the palace"],
    },
    SlotType {
        name: "price",
        descriptions: &["price range of the {obj}", "budget of the {obj}", "cost level of the {obj}"],
        phrases: &["something {v}", "that is {v}"],
        values: &["cheap", "moderate", "expensive", "affordable", "pricey", "inexpensive"],
    },
    SlotType {
        name: "category",
        descriptions: &["category of the {obj}", "kind of {obj}", "style of the {obj}"],
        phrases: &["of the {v} kind", "in {v} style"],
        values: &["italian", "mexican", "indian", "classic", "modern", "family", "casual", "luxury", "vegan"],
    },
    SlotType {
        name: "destination",
        descriptions: &["destination of the {obj}", "arrival city of the {obj}", "where the {obj} goes"],
        phrases: &["to {v}", "going to {v}"],
        values: &["denver", "atlanta", "miami", "dallas", "toronto", "vancouver", "portland", "phoenix", "houston"],
    },
    SlotType {
        name: "origin",
        descriptions: &["departure city of the {obj}", "origin of the {obj}", "where the {obj} leaves from"],
        phrases: &["from {v}", "leaving {v}"],
        values: &["austin", "detroit", "orlando", "las vegas", "san diego", "baltimore", "sacramento", "cleveland"],
    },
    SlotType {
        name: "amount",
        descriptions: &["amount of money for the {obj}", "total amount of the {obj}", "sum paid for the {obj}"],
        phrases: &["{v} dollars", "paying {v} dollars"],
        values: &["twenty", "fifty", "one hundred", "two hundred", "thirty five", "eighty", "five hundred", "sixty"],
    },
    SlotType {
        name: "contact",
        descriptions: &["name of the contact for the {obj}", "person on the {obj}", "recipient of the {obj}"],
        phrases: &["with {v}", "for my friend {v}"],
        values: &["alice", "bob", "maria", "john", "wei", "fatima", "omar", "lucy", "diego", "priya"],
    },
    SlotType {
        name: "rating",
        descriptions: &["star rating of the {obj}", "rating of the {obj}", "minimum stars of the {obj}"],
        phrases: &["rated {v} stars", "with {v} stars"],
        values: &["one", "2.5", "3.5", "4.5", "nine", "high", "top"],
    },
];

struct Domain {
    name: &'static str,
    obj: &'static str,
    verbs: &'static [&'static str],
}

const DOMAINS: [Domain; 12] = [
    Domain { name: "restaurants", obj: "reservation", verbs: &["book", "reserve", "make"] },
    Domain { name: "hotels", obj: "stay", verbs: &["book", "arrange", "plan"] },
    Domain { name: "flights", obj: "flight", verbs: &["book", "find", "search"] },
    Domain { name: "buses", obj: "trip", verbs: &["book", "plan", "find"] },
    Domain { name: "movies", obj: "showing", verbs: &["find", "book", "get"] },
    Domain { name: "payments", obj: "transfer", verbs: &["make", "send", "schedule"] },
    Domain { name: "events", obj: "event", verbs: &["find", "book", "get"] },
    Domain { name: "rentalcars", obj: "rental", verbs: &["book", "reserve", "arrange"] },
    Domain { name: "doctors", obj: "appointment", verbs: &["schedule", "book", "make"] },
    Domain { name: "salons", obj: "visit", verbs: &["schedule", "book", "plan"] },
    Domain { name: "rides", obj: "ride", verbs: &["get", "book", "order"] },
    Domain { name: "tours", obj: "tour", verbs: &["book", "find", "plan"] },
];

const OPENERS: [&str; 6] = [
    "i want to {verb} a {obj}",
    "please {verb} a {obj}",
    "can you {verb} a {obj}",
    "i need to {verb} a {obj}",
    "help me {verb} a {obj}",
    "i would like to {verb} a {obj}",
];

const JOINERS: [&str; 3] = ["", "and", "also"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_services: usize,
    pub min_slots: usize,
    pub max_slots: usize,
    /// How many of the shared slot types services may draw from.
    pub slot_pool: usize,
    pub templates_per_service: usize,
    /// Dialogs per service, before splitting.
    pub min_samples: usize,
    pub max_samples: usize,
    /// Chance that a slot is mentioned in a dialog.
    pub fill_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_services: 15,
            min_slots: 2,
            max_slots: 6,
            slot_pool: SLOT_TYPES.len(),
            templates_per_service: 4,
            min_samples: 183,
            max_samples: 731,
            fill_rate: 0.7,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        let err = |m: &str| Err(StreamError::Config(m.into()));
        if self.n_services == 0 || self.templates_per_service == 0 {
            return err("counts must be positive");
        }
        if self.min_slots < 2 || self.max_slots > 10 || self.min_slots > self.max_slots {
            return err("slot range must lie within 2..=10");
        }
        if self.slot_pool == 0 || self.slot_pool > SLOT_TYPES.len() || self.max_slots > self.slot_pool {
            return err("slot pool must cover max_slots and fit the built-in types");
        }
        if self.min_samples < 32 || self.max_samples > 4096 || self.min_samples > self.max_samples {
            return err("sample range must lie within 32..=4096");
        }
        if !(0.0..=1.0).contains(&self.fill_rate) {
            return err("fill_rate must be a probability");
        }
        Ok(())
    }
}

struct Plan {
    domain: &'static Domain,
    types: Vec<&'static SlotType>,
    descriptions: Vec<String>,
    openers: Vec<String>,
}

fn plan_service(cfg: &GeneratorConfig, index: usize, rng: &mut ChaCha8Rng) -> Plan {
    let domain = &DOMAINS[index % DOMAINS.len()];
    let n = rng.gen_range(cfg.min_slots..=cfg.max_slots);
    let pool: Vec<&SlotType> = SLOT_TYPES[..cfg.slot_pool].iter().collect();
    let types: Vec<&SlotType> = pool.choose_multiple(rng, n).copied().collect();
    let descriptions = types
        .iter()
        .map(|t| t.descriptions.choose(rng).unwrap().replace("{obj}", domain.obj))
        .collect();
    let openers = (0..cfg.templates_per_service)
        .map(|_| {
            OPENERS
                .choose(rng)
                .unwrap()
                .replace("{verb}", domain.verbs.choose(rng).unwrap())
                .replace("{obj}", domain.obj)
        })
        .collect();
    Plan { domain, types, descriptions, openers }
}

fn utterance(plan: &Plan, fill_rate: f64, rng: &mut ChaCha8Rng) -> Dialog {
    let mut words = vec![plan.openers.choose(rng).unwrap().clone()];
    let mut values = ValueMap::new();
    let mut order: Vec<usize> = (0..plan.types.len()).collect();
    order.shuffle(rng);
    for i in order {
        if !rng.gen_bool(fill_rate) {
            continue;
        }
        let t = plan.types[i];
        let v = *t.values.choose(rng).unwrap();
        let joiner = *JOINERS.choose(rng).unwrap();
        if !joiner.is_empty() && !values.is_empty() {
            words.push(joiner.to_string());
        }
        words.push(t.phrases.choose(rng).unwrap().replace("{v}", v));
        values.insert(t.name.to_string(), v.to_string());
    }
    words.push(".".to_string());
    Dialog { text: words.join(" "), values }
}

pub fn generate_stream(cfg: &GeneratorConfig) -> Result<TaskStream, StreamError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut services = Vec::with_capacity(cfg.n_services);
    for index in 0..cfg.n_services {
        let plan = plan_service(cfg, index, &mut rng);
        let id = format!("{}_{}", plan.domain.name, index / DOMAINS.len() + 1);
        let slots = plan
            .types
            .iter()
            .zip(&plan.descriptions)
            .map(|(t, d)| Slot::new(t.name, d.clone(), id.clone()))
            .collect();
        let n = rng.gen_range(cfg.min_samples..=cfg.max_samples);
        let dialogs = (0..n).map(|_| utterance(&plan, cfg.fill_rate, &mut rng)).collect();
        services.push(Service { id: id.clone(), name: id, slots, dialogs });
    }
    TaskStream::new(services, cfg.seed ^ 0x0005_7171)
}

/// Sentences for backbone pre-training, drawn from services planned with
/// `seed` rather than the services of any experiment stream. A share
/// `fact_share` are utterances followed by `<sep>` and
/// `<description> : <value> .` for the slots they fill; the rest are split
/// evenly between bare request utterances and
/// `the <description> is <value> .` statements.
pub fn pretraining_corpus(
    cfg: &GeneratorConfig,
    n_sentences: usize,
    fact_share: f64,
    seed: u64,
) -> Result<Vec<String>, StreamError> {
    if !(0.0..=1.0).contains(&fact_share) {
        return Err(StreamError::Config(format!("fact_share {fact_share} outside [0, 1]")));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<Plan> = (0..DOMAINS.len() * 2).map(|i| plan_service(cfg, i, &mut rng)).collect();
    let mut out = Vec::with_capacity(n_sentences);
    while out.len() < n_sentences {
        let p = plans.choose(&mut rng).unwrap();
        let kind = if rng.gen_bool(fact_share) { 2 } else { rng.gen_range(0..2) };
        match kind {
            0 => out.push(utterance(p, cfg.fill_rate, &mut rng).text),
            1 => {
                let t = SLOT_TYPES[..cfg.slot_pool].choose(&mut rng).unwrap();
                let obj = DOMAINS.choose(&mut rng).unwrap().obj;
                let desc = t.descriptions.choose(&mut rng).unwrap().replace("{obj}", obj);
                let v = t.values.choose(&mut rng).unwrap();
                out.push(format!("the {desc} is {v} ."));
            }
            _ => {
                let d = utterance(p, cfg.fill_rate, &mut rng);
                let mut facts: Vec<String> = p
                    .types
                    .iter()
                    .zip(&p.descriptions)
                    .filter_map(|(t, desc)| d.values.get(t.name).map(|v| format!("{desc} : {v} .")))
                    .collect();
                if facts.is_empty() {
                    out.push(d.text);
                    continue;
                }
                facts.shuffle(&mut rng);
                out.push(format!("{} {} {}", d.text, crate::codec::vocab::SEP_TEXT, facts.join(" ")));
            }
        }
    }
    Ok(out)
}
