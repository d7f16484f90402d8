//! Induction-head sequence generator and validator.
//!
//! Layout (`‖` is concatenation, padding has `L_tar - 1` pad symbols):
//!
//! ```text
//! noise1 ‖ trigger ‖ [gap noise] ‖ target ‖ noise2 ‖ trigger ‖ pad…
//! ```
//!
//! The first trigger start is drawn uniformly over all feasible positions,
//! which fixes both noise lengths. Symbols are then drawn uniformly from `V`
//! and the draw is discarded whenever the trigger appears anywhere other
//! than the two planted occurrences.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::numerics::RngState;
use crate::pipeline::{PredictionTarget, Vocab};

/// Symbol draws tried per sample before the configuration is declared infeasible.
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IHConfig {
    pub l_seq: usize,
    pub l_tri: usize,
    pub l_tar: usize,
    /// Noise between the first trigger and the target.
    #[serde(default)]
    pub l_noise_between: Option<usize>,
    /// Task alphabet `V`.
    pub alphabet: Vec<u32>,
    pub trigger: Vec<u32>,
    pub pad_symbol: u32,
}

impl IHConfig {
    /// Alphabet `{1, …, 7}`, pad `0`, trigger drawn from `trigger_rng`.
    pub fn standard(
        l_seq: usize,
        l_tri: usize,
        l_tar: usize,
        trigger_rng: &mut RngState,
    ) -> Result<Self> {
        let alphabet: Vec<u32> = (1..=7).collect();
        let trigger = (0..l_tri).map(|_| alphabet[trigger_rng.below(alphabet.len())]).collect();
        let cfg = Self { l_seq, l_tri, l_tar, l_noise_between: None, alphabet, trigger, pad_symbol: 0 };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Free noise symbols split between `noise1` and `noise2`.
    pub fn free_noise(&self) -> Option<usize> {
        self.l_seq
            .checked_sub(2 * self.l_tri + self.l_tar + self.l_noise_between.unwrap_or(0))
    }

    pub fn token_len(&self) -> usize {
        self.l_seq + self.l_tar.saturating_sub(1)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let mut symbols = vec![self.pad_symbol];
        symbols.extend(self.alphabet.iter().copied().filter(|&s| s != self.pad_symbol));
        Vocab::new(symbols, self.alphabet.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoffeeError::InvalidArgument(m));
        if self.l_tri == 0 || self.l_tar == 0 {
            return bad("trigger and target lengths must be at least 1".into());
        }
        if self.trigger.len() != self.l_tri {
            return bad(format!(
                "trigger has {} symbols but L_tri = {}",
                self.trigger.len(),
                self.l_tri
            ));
        }
        if self.alphabet.is_empty() {
            return bad("alphabet is empty".into());
        }
        if self.alphabet.contains(&self.pad_symbol) {
            return bad(format!("pad symbol {} must not be in the alphabet", self.pad_symbol));
        }
        if let Some(s) = self.trigger.iter().find(|s| !self.alphabet.contains(s)) {
            return bad(format!("trigger symbol {s} is not in the alphabet"));
        }
        match self.free_noise() {
            Some(free) if free >= 1 => Ok(()),
            _ => bad(format!(
                "L_seq = {} leaves no room for noise with L_tri = {}, L_tar = {}{}",
                self.l_seq,
                self.l_tri,
                self.l_tar,
                self.l_noise_between.map(|g| format!(", gap = {g}")).unwrap_or_default()
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IHSample {
    pub tokens: Vec<u32>,
    pub target: Vec<u32>,
    /// Start indices of the two trigger occurrences.
    pub trigger_starts: [usize; 2],
    /// `(time index, expected symbol)`; the last trigger token predicts the
    /// first target symbol, each pad token the next one.
    pub supervised: Vec<(usize, u32)>,
}

impl IHSample {
    pub fn prediction_target(&self, vocab: &Vocab) -> Result<PredictionTarget> {
        let positions = self
            .supervised
            .iter()
            .map(|&(t, s)| Ok((t, vocab.index_of(s)?)))
            .collect::<Result<_>>()?;
        Ok(PredictionTarget { positions })
    }

    /// `tokens;target`, both comma separated.
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        join_into(&mut s, &self.tokens);
        s.push(';');
        join_into(&mut s, &self.target);
        s
    }
}

fn join_into(out: &mut String, xs: &[u32]) {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x}");
    }
}

/// Start indices of every (possibly overlapping) occurrence of `pattern`.
pub fn occurrences(tokens: &[u32], pattern: &[u32]) -> Vec<usize> {
    if pattern.is_empty() || pattern.len() > tokens.len() {
        return Vec::new();
    }
    tokens.windows(pattern.len()).enumerate().filter(|(_, w)| *w == pattern).map(|(i, _)| i).collect()
}

fn supervised_positions(cfg: &IHConfig, target: &[u32]) -> Vec<(usize, u32)> {
    target.iter().enumerate().map(|(m, &s)| (cfg.l_seq - 1 + m, s)).collect()
}

pub fn gen_ih(cfg: &IHConfig, rng: &mut RngState) -> Result<IHSample> {
    cfg.validate()?;
    let free = cfg.free_noise().expect("validated");
    let gap = cfg.l_noise_between.unwrap_or(0);
    let first = rng.below(free + 1);
    let target_start = first + cfg.l_tri + gap;
    let second = cfg.l_seq - cfg.l_tri;

    let mut tokens = vec![cfg.pad_symbol; cfg.token_len()];
    tokens[first..first + cfg.l_tri].copy_from_slice(&cfg.trigger);
    tokens[second..cfg.l_seq].copy_from_slice(&cfg.trigger);
    let is_free = |k: usize| k < first || (k >= first + cfg.l_tri && k < second);

    // With a one-symbol trigger the rejection event factorizes per position,
    // so drawing each free symbol from V minus the trigger is the same
    // distribution without the retries.
    let pool: Vec<u32> = if cfg.l_tri == 1 {
        cfg.alphabet.iter().copied().filter(|&s| s != cfg.trigger[0]).collect()
    } else {
        cfg.alphabet.clone()
    };
    if pool.is_empty() {
        return Err(CoffeeError::InfeasibleTask(
            "alphabet has no symbol other than the trigger".into(),
        ));
    }
    for _ in 0..MAX_REJECTIONS {
        for (k, tok) in tokens.iter_mut().enumerate().take(cfg.l_seq) {
            if is_free(k) {
                *tok = pool[rng.below(pool.len())];
            }
        }
        if occurrences(&tokens, &cfg.trigger) == [first, second] {
            let target = tokens[target_start..target_start + cfg.l_tar].to_vec();
            let supervised = supervised_positions(cfg, &target);
            return Ok(IHSample { tokens, target, trigger_starts: [first, second], supervised });
        }
    }
    Err(CoffeeError::InfeasibleTask(format!(
        "no admissible sequence after {MAX_REJECTIONS} draws (L_seq = {}, trigger {:?})",
        cfg.l_seq, cfg.trigger
    )))
}

/// Draw `count` samples from one stream.
pub fn gen_ih_batch(cfg: &IHConfig, rng: &mut RngState, count: usize) -> Result<Vec<IHSample>> {
    (0..count).map(|_| gen_ih(cfg, rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IHValidation {
    pub violations: Vec<String>,
}

impl IHValidation {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every structural rule; the layout is recovered from the trigger
/// positions, so this also accepts sequences built by hand.
pub fn validate_ih(sample: &IHSample, cfg: &IHConfig) -> IHValidation {
    let mut v = Vec::new();
    if let Err(e) = cfg.validate() {
        v.push(format!("config: {e}"));
        return IHValidation { violations: v };
    }
    let tokens = &sample.tokens;
    if tokens.len() != cfg.token_len() {
        v.push(format!("token count {} != {}", tokens.len(), cfg.token_len()));
        return IHValidation { violations: v };
    }
    if let Some(k) = (cfg.l_seq..tokens.len()).find(|&k| tokens[k] != cfg.pad_symbol) {
        v.push(format!("position {k} should be padding"));
    }
    if let Some(k) = (0..cfg.l_seq).find(|&k| !cfg.alphabet.contains(&tokens[k])) {
        v.push(format!("symbol {} at position {k} is not in the alphabet", tokens[k]));
    }
    let occ = occurrences(tokens, &cfg.trigger);
    if occ.len() != 2 {
        v.push(format!("trigger occurs {} times, expected 2", occ.len()));
    }
    let second = cfg.l_seq - cfg.l_tri;
    if occ.last() != Some(&second) {
        v.push("sequence does not end with the trigger".into());
    }
    if let Some(&first) = occ.first().filter(|_| occ.len() == 2) {
        let free = cfg.free_noise().expect("validated");
        if first > free {
            v.push(format!("first trigger at {first} leaves no room for the target"));
        } else {
            let start = first + cfg.l_tri + cfg.l_noise_between.unwrap_or(0);
            let target = &tokens[start..start + cfg.l_tar];
            if target != sample.target.as_slice() {
                v.push(format!("target {:?} does not follow the trigger ({target:?})", sample.target));
            }
            if sample.trigger_starts != [first, second] {
                v.push("recorded trigger positions differ from the sequence".into());
            }
        }
    }
    if sample.supervised != supervised_positions(cfg, &sample.target) {
        v.push("supervised positions do not match the padding rule".into());
    }
    IHValidation { violations: v }
}

/// Parse one `tokens;target` line.
pub fn parse_line(line: &str) -> Result<(Vec<u32>, Vec<u32>)> {
    let (tok, tgt) = line
        .split_once(';')
        .ok_or_else(|| CoffeeError::InvalidArgument(format!("missing ';' in line '{line}'")))?;
    let parse = |s: &str| -> Result<Vec<u32>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CoffeeError::InvalidArgument(format!("bad symbol '{p}'")))
            })
            .collect()
    };
    Ok((parse(tok)?, parse(tgt)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> (IHConfig, IHSample) {
        let cfg = IHConfig {
            l_seq: 16,
            l_tri: 3,
            l_tar: 3,
            l_noise_between: None,
            alphabet: (1..=7).collect(),
            trigger: vec![5, 6, 7],
            pad_symbol: 0,
        };
        let tokens = vec![3, 2, 6, 5, 6, 7, 2, 4, 3, 1, 2, 2, 6, 5, 6, 7, 0, 0];
        let sample = IHSample {
            tokens,
            target: vec![2, 4, 3],
            trigger_starts: [3, 13],
            supervised: vec![(15, 2), (16, 4), (17, 3)],
        };
        (cfg, sample)
    }

    #[test]
    fn worked_example_validates() {
        let (cfg, s) = worked();
        let r = validate_ih(&s, &cfg);
        assert!(r.is_valid(), "{:?}", r.violations);
    }

    #[test]
    fn broken_samples_rejected() {
        let (cfg, s) = worked();
        let mut three = s.clone();
        three.tokens[9..12].copy_from_slice(&[5, 6, 7]);
        assert!(!validate_ih(&three, &cfg).is_valid());
        let mut short = s.clone();
        short.tokens.pop();
        assert!(!validate_ih(&short, &cfg).is_valid());
    }

    #[test]
    fn generated_samples_validate() {
        let mut rng = RngState::new(3);
        for (l_seq, l_tri, l_tar) in [(16, 1, 1), (16, 1, 2), (16, 2, 1), (12, 3, 3), (6, 2, 1)] {
            let cfg = IHConfig::standard(l_seq, l_tri, l_tar, &mut rng).unwrap();
            for _ in 0..500 {
                let s = gen_ih(&cfg, &mut rng).unwrap();
                assert!(validate_ih(&s, &cfg).is_valid(), "{cfg:?} {s:?}");
            }
        }
    }

    #[test]
    fn gap_variant() {
        let mut rng = RngState::new(5);
        let mut cfg = IHConfig::standard(16, 1, 1, &mut rng).unwrap();
        cfg.l_noise_between = Some(2);
        for _ in 0..200 {
            let s = gen_ih(&cfg, &mut rng).unwrap();
            assert!(validate_ih(&s, &cfg).is_valid());
            assert_eq!(s.tokens[s.trigger_starts[0] + 3], s.target[0]);
        }
    }

    #[test]
    fn infeasible_configs() {
        let mut rng = RngState::new(1);
        assert!(IHConfig::standard(4, 1, 2, &mut rng).is_err());
        let cfg = IHConfig {
            l_seq: 4,
            l_tri: 1,
            l_tar: 1,
            l_noise_between: None,
            alphabet: vec![1],
            trigger: vec![1],
            pad_symbol: 0,
        };
        assert!(matches!(gen_ih(&cfg, &mut rng), Err(CoffeeError::InfeasibleTask(_))));
    }

    #[test]
    fn line_round_trip() {
        let (_, s) = worked();
        let line = s.to_line();
        assert_eq!(line, "3,2,6,5,6,7,2,4,3,1,2,2,6,5,6,7,0,0;2,4,3");
        assert_eq!(parse_line(&line).unwrap(), (s.tokens, s.target));
    }
}
