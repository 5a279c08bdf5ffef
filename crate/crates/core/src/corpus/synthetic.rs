//! Template-generated micro-passages about invented people.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::{human_count, sample_subset};
use super::QAExample;
use crate::io::derive_seed;

const FIRST: [&str; 20] = [
    "Mira", "Tomas", "Ilse", "Joran", "Aiko", "Bram", "Celia", "Dario", "Elin", "Farid", "Greta", "Hugo", "Ines",
    "Jalen", "Kira", "Luca", "Noor", "Oskar", "Priya", "Rafe",
];
const LAST: [&str; 20] = [
    "Voss", "Brandt", "Okafor", "Lind", "Moreau", "Sato", "Quill", "Haddad", "Novak", "Ferris", "Kowal", "Amaral",
    "Dunmore", "Ekberg", "Fontaine", "Grell", "Ibsen", "Juarez", "Keel", "Larue",
];
const CITIES: [&str; 20] = [
    "Telford", "Arles", "Bergen", "Cusco", "Dundee", "Erfurt", "Faro", "Galway", "Hilo", "Izmir", "Jena", "Kobe",
    "Leeds", "Mainz", "Nantes", "Oulu", "Perth", "Quito", "Riga", "Split",
];
const PROFESSIONS: [&str; 15] = [
    "chemist",
    "baker",
    "surveyor",
    "printer",
    "violinist",
    "carpenter",
    "pilot",
    "botanist",
    "tailor",
    "architect",
    "glassblower",
    "cartographer",
    "nurse",
    "engineer",
    "weaver",
];

struct Person {
    name: String,
    birthplace: &'static str,
    year: u32,
    profession: &'static str,
    moved_to: &'static str,
}

impl Person {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let name = format!("{} {}", FIRST[rng.gen_range(0..FIRST.len())], LAST[rng.gen_range(0..LAST.len())]);
        let birthplace = CITIES[rng.gen_range(0..CITIES.len())];
        let mut moved_to = CITIES[rng.gen_range(0..CITIES.len())];
        while moved_to == birthplace {
            moved_to = CITIES[rng.gen_range(0..CITIES.len())];
        }
        Self {
            name,
            birthplace,
            year: rng.gen_range(1820..1990),
            profession: PROFESSIONS[rng.gen_range(0..PROFESSIONS.len())],
            moved_to,
        }
    }

    fn birth(&self) -> String {
        format!("{} was born in {} in {}.", self.name, self.birthplace, self.year)
    }

    fn work(&self) -> String {
        format!("{} worked as a {}.", self.name, self.profession)
    }

    fn moved(&self) -> String {
        format!("{} later moved to {}.", self.name, self.moved_to)
    }
}

/// `n` extractive QA examples; exactly round-half-up(n/4) are unanswerable.
/// Every gold answer is a substring of its passage.
pub fn make_synthetic_corpus(n: usize, seed: u64) -> Vec<QAExample> {
    let indices: Vec<usize> = (0..n).collect();
    let mut unanswerable = vec![false; n];
    for i in
        sample_subset(&indices, human_count(n, 0.25), derive_seed(seed, "synthetic.unanswerable")).expect("count <= n")
    {
        unanswerable[i] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic.content"));
    let mut out = Vec::with_capacity(n);
    for (i, &missing) in unanswerable.iter().enumerate() {
        let p = Person::draw(&mut rng);
        let id = format!("syn-{seed}-{i:04}");
        let (passage, question, gold) = if missing {
            match rng.gen_range(0..3) {
                0 => (format!("{} {}", p.birth(), p.moved()), format!("What did {} work as?", p.name), None),
                1 => (format!("{} {}", p.birth(), p.work()), format!("Where did {} move to?", p.name), None),
                _ => {
                    let mut other = Person::draw(&mut rng);
                    while other.name == p.name {
                        other = Person::draw(&mut rng);
                    }
                    (
                        format!("{} {} {}", p.birth(), p.work(), p.moved()),
                        format!("Where was {} born?", other.name),
                        None,
                    )
                }
            }
        } else {
            let passage = format!("{} {} {}", p.birth(), p.work(), p.moved());
            let (q, a) = match rng.gen_range(0..4) {
                0 => (format!("Where was {} born?", p.name), p.birthplace.to_string()),
                1 => (format!("In what year was {} born?", p.name), p.year.to_string()),
                2 => (format!("What did {} work as?", p.name), p.profession.to_string()),
                _ => (format!("Where did {} move to?", p.name), p.moved_to.to_string()),
            };
            (passage, q, Some(a))
        };
        out.push(QAExample {
            id,
            passage,
            question,
            is_answerable: gold.is_some(),
            gold_answers: gold.into_iter().collect(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_are_in_passages() {
        for ex in make_synthetic_corpus(60, 3) {
            for g in &ex.gold_answers {
                assert!(ex.passage.contains(g.as_str()), "{ex:?}");
            }
        }
    }

    #[test]
    fn unanswerable_count_is_exact() {
        for n in [1, 2, 3, 7, 10, 100, 201] {
            let c = make_synthetic_corpus(n, 0).iter().filter(|e| !e.is_answerable).count();
            assert_eq!(c, (n as f64 * 0.25 + 0.5).floor() as usize, "n={n}");
        }
    }
}
