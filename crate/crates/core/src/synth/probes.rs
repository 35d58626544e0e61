// SPDX-License-Identifier: MIT OR Apache-2.0

//! Balanced yes/no object-presence probes.

use serde::{Deserialize, Serialize};

use super::world::World;
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Random,
    Popular,
    Adversarial,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Random, ProbeKind::Popular, ProbeKind::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Random => "random",
            ProbeKind::Popular => "popular",
            ProbeKind::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub scene: usize,
    pub kind: ProbeKind,
    pub class: usize,
    /// Whether the object is present (the correct answer is "yes").
    pub expected: bool,
    /// The question asks about a bias target whose cue is in the scene
    /// while the target itself is absent.
    pub planted: bool,
}

/// True when `class` is a bias target, its cue is present and it is not.
pub fn is_planted(world: &World, scene: usize, class: usize) -> bool {
    let s = &world.scenes[scene];
    world
        .config
        .bias
        .iter()
        .any(|b| b.target == class && s.contains(b.cue) && !s.contains(class))
}

/// One "yes" and one "no" probe per scene and kind.
///
/// Negatives: random picks a uniform absent class; popular picks the most
/// frequent absent class; adversarial picks a planted bias target when one
/// exists, else the absent class co-occurring most with the present ones.
/// Scenes containing every class are skipped. Ties go to the lower id.
pub fn build_probes(world: &World, seed: u64) -> Vec<Probe> {
    let root = Rng::new(seed);
    let n = world.n_classes();
    let mut probes = Vec::new();
    for s in &world.scenes {
        let present = s.classes();
        let absent: Vec<usize> = (0..n).filter(|k| !s.contains(*k)).collect();
        if absent.is_empty() {
            continue;
        }
        let mut rng = root.child(s.id as u64);
        for kind in ProbeKind::ALL {
            let yes = present[rng.below(present.len())];
            let no = match kind {
                ProbeKind::Random => absent[rng.below(absent.len())],
                ProbeKind::Popular => *absent
                    .iter()
                    .max_by(|a, b| world.class_counts[**a].cmp(&world.class_counts[**b]).then(b.cmp(a)))
                    .expect("absent is nonempty"),
                ProbeKind::Adversarial => absent
                    .iter()
                    .copied()
                    .find(|&k| is_planted(world, s.id, k))
                    .unwrap_or_else(|| {
                        let score = |k: usize| -> u64 { present.iter().map(|&p| world.cooccurrence[k][p]).sum() };
                        *absent
                            .iter()
                            .max_by(|a, b| score(**a).cmp(&score(**b)).then(b.cmp(a)))
                            .expect("absent is nonempty")
                    }),
            };
            probes.push(Probe {
                scene: s.id,
                kind,
                class: yes,
                expected: true,
                planted: false,
            });
            probes.push(Probe {
                scene: s.id,
                kind,
                class: no,
                expected: false,
                planted: is_planted(world, s.id, no),
            });
        }
    }
    probes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::world::{BiasPair, WorldConfig};

    fn world() -> World {
        World::generate(&WorldConfig {
            bias: vec![BiasPair {
                cue: 2,
                target: 3,
                prob: 0.3,
            }],
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn probes_are_balanced_and_correct() {
        let w = world();
        let probes = build_probes(&w, 1);
        for kind in ProbeKind::ALL {
            let of: Vec<_> = probes.iter().filter(|p| p.kind == kind).collect();
            let yes = of.iter().filter(|p| p.expected).count();
            assert_eq!(yes * 2, of.len());
        }
        for p in &probes {
            assert_eq!(w.scenes[p.scene].contains(p.class), p.expected);
        }
        assert_eq!(build_probes(&w, 1), probes);
    }

    #[test]
    fn adversarial_probes_target_the_planted_pair() {
        let w = world();
        let probes = build_probes(&w, 1);
        let mut planted = 0;
        for s in &w.scenes {
            if s.contains(2) && !s.contains(3) {
                let adv = probes
                    .iter()
                    .find(|p| p.scene == s.id && p.kind == ProbeKind::Adversarial && !p.expected)
                    .unwrap();
                assert_eq!(adv.class, 3);
                assert!(adv.planted);
                planted += 1;
            }
        }
        assert!(planted > 0);
    }

    #[test]
    fn popular_probes_ask_for_the_most_frequent_absent_class() {
        let w = world();
        for p in build_probes(&w, 1)
            .iter()
            .filter(|p| p.kind == ProbeKind::Popular && !p.expected)
        {
            let best = (0..8)
                .filter(|k| !w.scenes[p.scene].contains(*k))
                .map(|k| w.class_counts[k])
                .max()
                .unwrap();
            assert_eq!(w.class_counts[p.class], best);
        }
    }
}
