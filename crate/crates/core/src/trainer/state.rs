use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParameterSet;
use crate::scalar::Scalar;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Forward and backward passes spent on training steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub forward: u64,
    pub backward: u64,
}

/// The three random streams of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub shuffle: ChaCha8Rng,
    pub kind: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            shuffle: stream(seed, 1),
            kind: stream(seed, 2),
            noise: stream(seed, 3),
        }
    }

    /// One `name seed stream word_pos` line per stream.
    pub fn to_text(&self) -> String {
        [("shuffle", &self.shuffle), ("kind", &self.kind), ("noise", &self.noise)]
            .iter()
            .map(|(n, r)| {
                let seed: String = r.get_seed().iter().map(|b| format!("{b:02x}")).collect();
                format!("{n} {seed} {} {}\n", r.get_stream(), r.get_word_pos())
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("rng state: {m}"));
        let mut found: [Option<ChaCha8Rng>; 3] = [None, None, None];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, seed, st, pos] = parts[..] else {
                return Err(bad("expected `name seed stream word_pos`"));
            };
            if seed.len() != 64 {
                return Err(bad("seed must be 64 hex digits"));
            }
            let mut key = [0u8; 32];
            for (i, k) in key.iter_mut().enumerate() {
                *k = u8::from_str_radix(&seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
            }
            let mut r = ChaCha8Rng::from_seed(key);
            r.set_stream(st.parse().map_err(|_| bad("bad stream"))?);
            r.set_word_pos(pos.parse().map_err(|_| bad("bad word position"))?);
            let slot = match name {
                "shuffle" => 0,
                "kind" => 1,
                "noise" => 2,
                _ => return Err(bad("unknown stream name")),
            };
            found[slot] = Some(r);
        }
        match found {
            [Some(shuffle), Some(kind), Some(noise)] => Ok(RngStreams { shuffle, kind, noise }),
            _ => Err(bad("missing stream")),
        }
    }
}

/// Everything a training loop mutates.
#[derive(Clone, Debug)]
pub struct TrainState<T = f64> {
    pub params: ParameterSet<T>,
    pub optimizer: Optimizer<T>,
    pub rngs: RngStreams,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: u64,
    pub passes: PassCounter,
    pub adversarial_steps: u64,
    pub random_steps: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ParameterSet<T>, optimizer: OptimizerKind, seed: u64) -> Self {
        let optimizer = Optimizer::new(optimizer, &params);
        TrainState {
            params,
            optimizer,
            rngs: RngStreams::new(seed),
            epoch: 0,
            steps: 0,
            passes: PassCounter::default(),
            adversarial_steps: 0,
            random_steps: 0,
        }
    }

    /// Counters and rng positions as text, written next to checkpoints.
    pub fn describe(&self) -> String {
        format!(
            "epoch {}\nsteps {}\npasses {} {}\nkinds {} {}\n{}",
            self.epoch,
            self.steps,
            self.passes.forward,
            self.passes.backward,
            self.adversarial_steps,
            self.random_steps,
            self.rngs.to_text()
        )
    }
}
