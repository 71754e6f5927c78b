//! Reward orderings on constructed (exact, paraphrase, unrelated) triples.

use socialnav_core::embedder::EmbeddingProvider;
use socialnav_core::navsim::{ActionSentence, LIGHTING, WEATHER};
use socialnav_core::reward::{character_reward, hard_reward, ssr};

use super::Check;

/// Replaces every word that has synonyms with the member `offset` places
/// further along its cluster.
pub fn paraphrase(sentence: &str, e: &EmbeddingProvider, offset: usize) -> String {
    sentence
        .split_whitespace()
        .map(|w| {
            let members = e.cluster_of(w).and_then(|c| e.clusters().get(c));
            match members {
                Some(m) if m.len() > 1 => {
                    let at = m.iter().position(|x| x == w).unwrap();
                    m[(at + offset) % m.len()].clone()
                }
                _ => w.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scene-style words that share no cluster with any action word.
pub fn unrelated(len: usize, shift: usize) -> String {
    let pool: Vec<&str> = LIGHTING.iter().chain(WEATHER.iter()).copied().collect();
    (0..len)
        .map(|i| pool[(i + shift) % pool.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn triples(e: &EmbeddingProvider) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    for a in ActionSentence::all() {
        let exact = a.render();
        let n = exact.split_whitespace().count();
        for offset in 1..=3 {
            let p = paraphrase(&exact, e, offset);
            if p == exact {
                continue;
            }
            for shift in [0, 4] {
                out.push((exact.clone(), p.clone(), unrelated(n, shift)));
            }
        }
    }
    for (r, p, u) in [
        ("stop", "halt", "sunny"),
        (
            "continue straight at moderate speed",
            "go forward at normal pace",
            "dim foggy rainy bright snowy",
        ),
        (
            "slight left turn at slow speed",
            "gentle left turn slowly",
            "cloudy dark golden sunny",
        ),
        (
            "slight right turn at moderate speed",
            "slight right veer at steady speed",
            "rainy rainy dim dim bright bright",
        ),
    ] {
        out.push((r.into(), p.into(), u.into()));
    }
    out
}

pub fn check_ordering() -> Check {
    let e = EmbeddingProvider::builtin();
    let ts = triples(&e);
    let mut worst_gap = f64::INFINITY;
    for (r, p, u) in &ts {
        let (s_exact, s_para, s_unrel) = (ssr(r, r, &e), ssr(p, r, &e), ssr(u, r, &e));
        if !(s_exact == 1.0 && s_exact > s_para && s_para > s_unrel) {
            return Check::new(
                false,
                format!(
                    "{r:?}: exact {s_exact}, paraphrase {p:?} {s_para}, unrelated {u:?} {s_unrel}"
                ),
            );
        }
        worst_gap = worst_gap.min((s_exact - s_para).min(s_para - s_unrel));
    }
    Check::new(
        true,
        format!("{} triples, smallest gap {worst_gap:.3}", ts.len()),
    )
}

pub fn check_hard_implies_others() -> Check {
    let e = EmbeddingProvider::builtin();
    let mut n = 0;
    for a in ActionSentence::all() {
        let r = a.render();
        let variants = [
            r.clone(),
            format!("  {}  ", r.to_uppercase()),
            r.replace(' ', " \t "),
        ];
        for v in variants {
            if hard_reward(&v, &r) == 1.0 {
                n += 1;
                if character_reward(&v, &r) != 1.0 || ssr(&v, &r, &e) != 1.0 {
                    return Check::new(false, format!("{v:?} vs {r:?}"));
                }
            }
        }
    }
    Check::new(n > 0, format!("{n} exact matches all score 1"))
}

pub fn check_character_example() -> Check {
    let v = character_reward("turn", "turns");
    Check::new(v == 0.8, format!("turn/turns = {v}"))
}

pub fn check_all() -> Check {
    Check::all(vec![
        ("ordering", check_ordering()),
        (
            "hard implies character and ssr",
            check_hard_implies_others(),
        ),
        ("character example", check_character_example()),
    ])
}
