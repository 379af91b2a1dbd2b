//! Plain-text stage profile for the pipeline simulator.
//!
//! ```text
//! # component latency [loss multipliers...]
//! embed 2
//! layer 1
//! head 1
//! loss 3 1.0 1.2
//! layers 12
//! devices 4
//! microbatches 8
//! ```
//!
//! `positions` and `hidden` set the per-transfer volume. Missing keys keep
//! their defaults.

use anyhow::{bail, Context};
use dina_core::pipeline_sim::StageProfile;

pub fn parse_profile(text: &str) -> anyhow::Result<StageProfile> {
    let mut p = StageProfile::default();
    let mut seen = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let key = words.next().unwrap_or_default().to_ascii_lowercase();
        let rest: Vec<&str> = words.collect();
        let ctx = || format!("profile line {}: {line:?}", i + 1);
        if seen.contains(&key) {
            bail!("{}: {key} given twice", ctx());
        }
        let real = |s: &str| s.parse::<f64>().with_context(ctx);
        let count = |s: &str| s.parse::<usize>().with_context(ctx);
        let one = || match rest.as_slice() {
            [v] => Ok(*v),
            _ => Err(anyhow::anyhow!("{}: expected exactly one value", ctx())),
        };
        match key.as_str() {
            "embed" => p.embed = real(one()?)?,
            "layer" => p.layer = real(one()?)?,
            "head" => p.head = real(one()?)?,
            "loss" => {
                let (first, mults) = rest.split_first().with_context(|| format!("{}: missing latency", ctx()))?;
                p.loss = real(first)?;
                if !mults.is_empty() {
                    p.loss_multipliers = mults.iter().map(|m| real(m)).collect::<anyhow::Result<_>>()?;
                }
            }
            "layers" => p.n_layers = count(one()?)?,
            "devices" => p.n_devices = count(one()?)?,
            "microbatches" => p.n_microbatches = count(one()?)?,
            "positions" => p.positions = count(one()?)?,
            "hidden" => p.hidden = count(one()?)?,
            _ => bail!("{}: unknown key {key:?}", ctx()),
        }
        seen.push(key);
    }
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_profile() {
        let p = parse_profile("embed 0.5\nlayer 1\nhead 2 # lm head\nloss 4 1 1.5\nlayers 8\ndevices 2\nmicrobatches 3\n").unwrap();
        assert_eq!((p.embed, p.head, p.loss), (0.5, 2.0, 4.0));
        assert_eq!(p.loss_multipliers, vec![1.0, 1.5]);
        assert_eq!((p.n_layers, p.n_devices, p.n_microbatches), (8, 2, 3));
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_profile("embed -1").is_err());
        assert!(parse_profile("embed 1 2").is_err());
        assert!(parse_profile("bogus 1").is_err());
        assert!(parse_profile("layer 1\nlayer 2").is_err());
        assert!(parse_profile("layers 2\ndevices 4").is_err());
    }
}
