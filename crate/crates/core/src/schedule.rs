//! Prompt-mixing schedules.
//!
//! Timesteps count down. A run of `T` steps executes steps `T, T-1, ..., 1`;
//! step `t` maps latent `z_t` to `z_{t-1}`. An interval `[t_hi, t_lo)` holds
//! the steps `t` with `t_lo < t <= t_hi`, so a schedule covering `[T, 0)`
//! assigns a prompt to every executed step.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptSpec;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimestepInterval {
    pub t_hi: u32,
    pub t_lo: u32,
}

impl TimestepInterval {
    pub fn new(t_hi: u32, t_lo: u32) -> Result<Self> {
        if t_hi <= t_lo {
            return Err(Error::BadInterval(format!("[{t_hi},{t_lo}) is empty")));
        }
        Ok(Self { t_hi, t_lo })
    }

    pub fn contains(&self, t: u32) -> bool {
        self.t_lo < t && t <= self.t_hi
    }

    /// Executed steps in this interval, in denoising order.
    pub fn steps(&self) -> impl Iterator<Item = u32> {
        (self.t_lo + 1..=self.t_hi).rev()
    }

    pub fn len(&self) -> u32 {
        self.t_hi.saturating_sub(self.t_lo)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for TimestepInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.t_hi, self.t_lo)
    }
}

/// Which cross-attention projections receive an interval's prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvPolicy {
    #[default]
    ValuesOnly,
    KeysOnly,
    KeysAndValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub interval: TimestepInterval,
    pub prompt: PromptSpec,
    pub kv_policy: KvPolicy,
}

/// A validated assignment of prompts to timestep intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct MixSchedule {
    total_steps: u32,
    entries: Vec<ScheduleEntry>,
}

#[derive(Deserialize)]
struct RawSchedule {
    total_steps: u32,
    entries: Vec<ScheduleEntry>,
}

impl TryFrom<RawSchedule> for MixSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        MixSchedule::new(raw.total_steps, raw.entries)
    }
}

impl MixSchedule {
    pub fn new(total_steps: u32, entries: Vec<ScheduleEntry>) -> Result<Self> {
        let schedule = Self {
            total_steps,
            entries,
        };
        validate_schedule(&schedule)?;
        Ok(schedule)
    }

    /// Plain generation: one prompt over the whole run.
    pub fn single(prompt: PromptSpec, total_steps: u32) -> Result<Self> {
        let interval = TimestepInterval::new(total_steps, 0)?;
        Self::new(
            total_steps,
            vec![ScheduleEntry {
                interval,
                prompt,
                kv_policy: KvPolicy::KeysAndValues,
            }],
        )
    }

    pub fn total_steps(&self) -> u32 {
        self.total_steps
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// The prompt of the first (layout) interval.
    pub fn base_prompt(&self) -> &PromptSpec {
        &self.entries[0].prompt
    }

    pub fn entry_at(&self, t: u32) -> Result<&ScheduleEntry> {
        self.entries
            .iter()
            .find(|e| e.interval.contains(t))
            .ok_or(Error::StepOutOfRange {
                t,
                total: self.total_steps,
            })
    }
}

pub fn validate_schedule(s: &MixSchedule) -> Result<()> {
    let total = s.total_steps;
    if total == 0 {
        return Err(Error::BadInterval(
            "total step count must be positive".into(),
        ));
    }
    let Some(first) = s.entries.first() else {
        return Err(Error::EmptySchedule);
    };
    for e in &s.entries {
        if e.interval.t_hi <= e.interval.t_lo || e.interval.t_hi > total {
            return Err(Error::BadInterval(format!(
                "{} is not a non-empty interval within [{total},0)",
                e.interval
            )));
        }
        e.prompt.validate()?;
    }
    if first.interval.t_hi < total {
        return Err(Error::Gap {
            interval: TimestepInterval {
                t_hi: total,
                t_lo: first.interval.t_hi,
            },
        });
    }
    for pair in s.entries.windows(2) {
        let (prev, next) = (pair[0].interval, pair[1].interval);
        if next.t_hi > prev.t_lo {
            return Err(Error::Overlap {
                interval: next,
                other: prev,
            });
        }
        if next.t_hi < prev.t_lo {
            return Err(Error::Gap {
                interval: TimestepInterval {
                    t_hi: prev.t_lo,
                    t_lo: next.t_hi,
                },
            });
        }
    }
    let last = s.entries[s.entries.len() - 1].interval;
    if last.t_lo > 0 {
        return Err(Error::Gap {
            interval: TimestepInterval {
                t_hi: last.t_lo,
                t_lo: 0,
            },
        });
    }
    Ok(())
}

/// Builds a schedule from consecutive (interval, prompt) pairs. The first
/// interval sets the layout and always feeds its prompt to both projections;
/// every later interval uses `kv_policy`.
pub fn build_general_schedule(
    prompts: Vec<(TimestepInterval, PromptSpec)>,
    total_steps: u32,
    kv_policy: KvPolicy,
) -> Result<MixSchedule> {
    let entries = prompts
        .into_iter()
        .enumerate()
        .map(|(i, (interval, prompt))| ScheduleEntry {
            interval,
            prompt,
            kv_policy: if i == 0 {
                KvPolicy::KeysAndValues
            } else {
                kv_policy
            },
        })
        .collect();
    MixSchedule::new(total_steps, entries)
}

/// Mix-and-Match: `prompt` on `[T,T3)` and `[T2,0)`, the prompt with its
/// object word replaced by `proxy` on `[T3,T2)`, where only the Values see it.
pub fn build_mix_and_match(
    tokenizer: &dyn Tokenizer,
    prompt: &PromptSpec,
    proxy: &str,
    total_steps: u32,
    t3: u32,
    t2: u32,
) -> Result<MixSchedule> {
    if !(total_steps > t3 && t3 > t2 && t2 > 0) {
        return Err(Error::BadInterval(format!(
            "Mix-and-Match needs T > T3 > T2 > 0, got T={total_steps}, T3={t3}, T2={t2}"
        )));
    }
    let proxied = prompt.with_object_replaced(tokenizer, proxy)?;
    let entries = vec![
        ScheduleEntry {
            interval: TimestepInterval::new(total_steps, t3)?,
            prompt: prompt.clone(),
            kv_policy: KvPolicy::KeysAndValues,
        },
        ScheduleEntry {
            interval: TimestepInterval::new(t3, t2)?,
            prompt: proxied,
            kv_policy: KvPolicy::ValuesOnly,
        },
        ScheduleEntry {
            interval: TimestepInterval::new(t2, 0)?,
            prompt: prompt.clone(),
            kv_policy: KvPolicy::KeysAndValues,
        },
    ];
    MixSchedule::new(total_steps, entries)
}

/// The prompts feeding the Key and the Value projections of cross-attention
/// at one step.
///
/// Backends pad both encodings to their fixed context length, so the two
/// always present the same sequence length to the attention layers even when
/// the raw token counts differ.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedPromptPair {
    pub key_prompt: PromptSpec,
    pub value_prompt: PromptSpec,
}

pub fn resolve_prompt(s: &MixSchedule, t: u32) -> Result<ResolvedPromptPair> {
    let entry = s.entry_at(t)?;
    let base = s.base_prompt();
    let (key_prompt, value_prompt) = match entry.kv_policy {
        KvPolicy::ValuesOnly => (base, &entry.prompt),
        KvPolicy::KeysOnly => (&entry.prompt, base),
        KvPolicy::KeysAndValues => (&entry.prompt, &entry.prompt),
    };
    Ok(ResolvedPromptPair {
        key_prompt: key_prompt.clone(),
        value_prompt: value_prompt.clone(),
    })
}
