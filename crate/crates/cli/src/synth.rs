//! Seeded synthetic survey corpora for demos and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use coo_core::model::{AttributeSchema, ExplicitPersona, ImplicitOpinion, UserRecord};

pub const SCALE: [&str; 5] = ["Strongly agree", "Somewhat agree", "Somewhat disagree", "Strongly disagree", "Refused"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub topics: usize,
    pub users_per_topic: usize,
    pub history: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { topics: 15, users_per_topic: 30, history: 20, seed: 0 }
    }
}

/// Every user answers the whole question bank of their topic; answers and
/// attribute values are drawn from a seeded generator.
pub fn corpus(spec: &SynthSpec) -> Vec<UserRecord> {
    let schema = AttributeSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut users = Vec::with_capacity(spec.topics * spec.users_per_topic);
    for t in 0..spec.topics {
        let topic = format!("topic-{t:02}");
        for u in 0..spec.users_per_topic {
            let explicit: Vec<(String, String)> = AttributeSchema::DEFAULT_NAMES
                .iter()
                .map(|name| (name.to_string(), format!("{} level {}", name, rng.gen_range(0..4))))
                .collect();
            let explicit = ExplicitPersona::new(explicit, &schema).expect("schema names are valid");
            let implicit = (0..spec.history)
                .map(|j| {
                    let n = if j % 3 == 0 { 5 } else { 4 };
                    let choices = SCALE[..n].iter().map(|c| c.to_string()).collect();
                    ImplicitOpinion::new(format!("On {topic}, do you agree with statement {j}?"), choices, rng.gen_range(0..n))
                        .expect("chosen index is in range")
                })
                .collect();
            users.push(UserRecord {
                user_id: format!("{topic}-u{u:03}"),
                topic: topic.clone(),
                explicit,
                implicit,
                tests: Vec::new(),
            });
        }
    }
    users
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let spec = SynthSpec { topics: 2, users_per_topic: 3, history: 7, seed: 5 };
        let a = corpus(&spec);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|u| u.implicit.len() == 7 && u.explicit.len() == 12 && u.validate().is_ok()));
        assert_eq!(a, corpus(&spec));
        assert_ne!(a, corpus(&SynthSpec { seed: 6, ..spec }));
    }
}
