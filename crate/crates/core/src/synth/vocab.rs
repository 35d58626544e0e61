// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed token vocabulary of the synthetic benchmark.

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const YES: u32 = 3;
pub const NO: u32 = 4;
pub const DESCRIBE: u32 = 5;
pub const IS_THERE: u32 = 6;
const FIRST_CONFUSER: u32 = 7;

/// Layout: seven control tokens, `n_confusers` prefix tokens used as the
/// misleading instruction of prompt-contrast baselines, then one token per
/// object class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_classes: usize,
    pub n_confusers: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        FIRST_CONFUSER as usize + self.n_confusers + self.n_classes
    }

    pub fn confuser(&self, i: usize) -> u32 {
        assert!(i < self.n_confusers, "confuser {i} out of range");
        FIRST_CONFUSER + i as u32
    }

    /// All confuser ids, in order.
    pub fn confuser_prefix(&self) -> Vec<u32> {
        (0..self.n_confusers).map(|i| self.confuser(i)).collect()
    }

    pub fn class_token(&self, class: usize) -> u32 {
        assert!(class < self.n_classes, "class {class} out of range");
        (FIRST_CONFUSER as usize + self.n_confusers + class) as u32
    }

    pub fn class_of(&self, token: u32) -> Option<usize> {
        let base = FIRST_CONFUSER as usize + self.n_confusers;
        let t = token as usize;
        (t >= base && t < base + self.n_classes).then(|| t - base)
    }

    pub fn probe_prompt(&self, class: usize) -> Vec<u32> {
        vec![BOS, IS_THERE, self.class_token(class)]
    }

    pub fn caption_prompt(&self) -> Vec<u32> {
        vec![BOS, DESCRIBE]
    }

    pub fn token_name(&self, token: u32, ontology: &[String]) -> String {
        match token {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            YES => "yes".into(),
            NO => "no".into(),
            DESCRIBE => "describe".into(),
            IS_THERE => "is-there".into(),
            t => match self.class_of(t) {
                Some(c) => ontology.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
                None if (t as usize) < self.size() => format!("<confuser{}>", t - FIRST_CONFUSER),
                None => format!("<unk{t}>"),
            },
        }
    }

    pub fn render(&self, tokens: &[u32], ontology: &[String]) -> String {
        tokens
            .iter()
            .map(|&t| self.token_name(t, ontology))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_round_trips() {
        let v = Vocab {
            n_classes: 5,
            n_confusers: 2,
        };
        assert_eq!(v.size(), 14);
        assert_eq!(v.confuser_prefix(), vec![7, 8]);
        assert_eq!(v.class_token(0), 9);
        for c in 0..5 {
            assert_eq!(v.class_of(v.class_token(c)), Some(c));
        }
        assert_eq!(v.class_of(YES), None);
        assert_eq!(v.class_of(14), None);
        let names: Vec<String> = ["dog", "cat"].iter().map(|s| s.to_string()).collect();
        assert_eq!(v.render(&[YES, 9, 11, EOS], &names), "yes dog class2 <eos>");
    }
}
