//! Synthetic multi-step arithmetic word problems.
//!
//! Twenty fixed templates (six 1-step, seven 2-step, seven 3-step) vary the
//! surface form while the arithmetic stays controlled: every chain-of-thought
//! step is an equation `a op b = r` whose operands are question quantities or
//! earlier step results, division is always exact, and every quantity and
//! result lies inside the configured value range. The OOD mode scales the
//! range tenfold, so out-of-distribution problems are disjoint in magnitude
//! from training ones.
//!
//! Corpus files are JSONL, one `{question, cot, answer}` object per line.

use crate::error::{CoreError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub question: String,
    pub cot: Vec<String>,
    pub answer: i64,
}

/// Inclusive magnitude range for question quantities and step results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: i64,
    pub hi: i64,
}

impl ValueRange {
    pub const TRAIN: ValueRange = ValueRange { lo: 10, hi: 99 };

    /// Tenfold magnitude shift: every quantity exceeds the base range's hi.
    pub fn ood(self) -> ValueRange {
        ValueRange { lo: self.lo * 10, hi: self.hi * 10 }
    }

    pub fn validate(self) -> Result<()> {
        // hi >= 4*lo keeps every template satisfiable (the four-way sum
        // needs four range-sized addends; multipliers need hi/lo >= 2).
        if self.lo < 2 || self.hi < self.lo * 4 {
            return Err(CoreError::InvalidConfig(format!(
                "value range {}..={} too narrow (need lo >= 2, hi >= 4*lo)",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn contains(self, v: i64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub size: usize,
    pub max_steps: usize,
    pub range: ValueRange,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if self.max_steps == 0 || self.max_steps > 3 {
            return Err(CoreError::InvalidConfig("max_steps must be 1..=3".into()));
        }
        if self.size == 0 {
            return Err(CoreError::InvalidConfig("size must be positive".into()));
        }
        Ok(())
    }
}

/// All but the last reasoning step; the final step is withheld from the
/// teacher so the distillation target cannot shortcut-read the answer.
/// One-step problems yield an empty list.
pub fn drop_final_cot_step<T: Clone>(steps: &[T]) -> Vec<T> {
    steps[..steps.len().saturating_sub(1)].to_vec()
}

const NAMES: [&str; 16] = [
    "anna", "ben", "carla", "dan", "emma", "farid", "grace", "hugo", "ivy", "jack", "kira",
    "liam", "mara", "nina", "omar", "priya",
];

const ITEMS: [&str; 12] = [
    "apples", "pears", "plums", "marbles", "cards", "shells", "stickers", "cookies", "muffins",
    "beads", "buttons", "stamps",
];

fn rint(rng: &mut ChaCha20Rng, lo: i64, hi: i64) -> i64 {
    debug_assert!(lo <= hi);
    rng.gen_range(lo..=hi)
}

fn item(rng: &mut ChaCha20Rng) -> &'static str {
    ITEMS[rng.gen_range(0..ITEMS.len())]
}

/// `n` distinct names.
fn names(rng: &mut ChaCha20Rng, n: usize) -> Vec<&'static str> {
    let mut idx: Vec<usize> = (0..NAMES.len()).collect();
    for i in 0..n {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| NAMES[i]).collect()
}

fn eq(a: i64, op: char, b: i64, r: i64) -> String {
    format!("{a} {op} {b} = {r}")
}

/// Largest small multiplier usable with this range (capped at 9 so the
/// multiplier stays a single digit).
fn max_mult(range: ValueRange) -> i64 {
    (range.hi / range.lo).min(9)
}

type Build = fn(&mut ChaCha20Rng, ValueRange) -> Problem;

fn t01_give_more(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 2);
    let it = item(rng);
    let x = rint(rng, v.lo, v.hi - v.lo);
    let y = rint(rng, v.lo, v.hi - x);
    Problem {
        question: format!(
            "{0} has {x} {it} . {1} gives {0} {y} more . how many {it} does {0} have now ?",
            n[0], n[1]
        ),
        cot: vec![eq(x, '+', y, x + y)],
        answer: x + y,
    }
}

fn t02_give_away(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 2);
    let it = item(rng);
    let x = rint(rng, 2 * v.lo, v.hi);
    let y = rint(rng, v.lo, x - v.lo);
    Problem {
        question: format!(
            "{0} has {x} {it} . {0} gives {y} of them to {1} . how many {it} are left ?",
            n[0], n[1]
        ),
        cot: vec![eq(x, '-', y, x - y)],
        answer: x - y,
    }
}

fn t03_boxes(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let k = rint(rng, 2, max_mult(v));
    let m = rint(rng, v.lo, v.hi / k);
    Problem {
        question: format!(
            "{0} packs {k} {it} into each box . how many {it} fit in {m} boxes ?",
            n[0]
        ),
        cot: vec![eq(k, '*', m, k * m)],
        answer: k * m,
    }
}

fn t04_share(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let k = rint(rng, 2, max_mult(v));
    let r = rint(rng, v.lo, v.hi / k);
    let x = r * k;
    Problem {
        question: format!(
            "{0} shares {x} {it} equally among {k} friends . how many {it} does each friend get ?",
            n[0]
        ),
        cot: vec![eq(x, '/', k, r)],
        answer: r,
    }
}

fn t05_eat(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let x = rint(rng, 2 * v.lo, v.hi);
    let y = rint(rng, v.lo, x - v.lo);
    Problem {
        question: format!("{0} had {x} {it} and eats {y} of them . how many {it} remain ?", n[0]),
        cot: vec![eq(x, '-', y, x - y)],
        answer: x - y,
    }
}

fn t06_find_together(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 2);
    let it = item(rng);
    let x = rint(rng, v.lo, v.hi - v.lo);
    let y = rint(rng, v.lo, v.hi - x);
    Problem {
        question: format!(
            "{0} finds {x} {it} and {1} finds {y} {it} . how many {it} did they find in all ?",
            n[0], n[1]
        ),
        cot: vec![eq(x, '+', y, x + y)],
        answer: x + y,
    }
}

fn t07_three_way_sum(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 3);
    let it = item(rng);
    let x = rint(rng, v.lo, v.hi - 2 * v.lo);
    let y = rint(rng, v.lo, v.hi - v.lo - x);
    let s1 = x + y;
    let z = rint(rng, v.lo, v.hi - s1);
    Problem {
        question: format!(
            "{0} has {x} {it} . {1} has {y} {it} . {2} has {z} {it} . how many {it} do they have in total ?",
            n[0], n[1], n[2]
        ),
        cot: vec![eq(x, '+', y, s1), eq(s1, '+', z, s1 + z)],
        answer: s1 + z,
    }
}

fn t08_buy_boxes_give(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let k = rint(rng, 2, max_mult(v));
    let m = rint(rng, v.lo, v.hi / k);
    let s1 = k * m;
    let z = rint(rng, v.lo, s1 - v.lo);
    Problem {
        question: format!(
            "{0} buys {k} boxes with {m} {it} in each box . then {0} gives away {z} {it} . how many {it} are left ?",
            n[0]
        ),
        cot: vec![eq(k, '*', m, s1), eq(s1, '-', z, s1 - z)],
        answer: s1 - z,
    }
}

fn t09_buy_lose(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let x = rint(rng, v.lo, v.hi - v.lo);
    let y = rint(rng, v.lo, v.hi - x);
    let s1 = x + y;
    let z = rint(rng, v.lo, s1 - v.lo);
    Problem {
        question: format!(
            "{0} starts with {x} {it} . {0} buys {y} more and loses {z} . how many {it} now ?",
            n[0]
        ),
        cot: vec![eq(x, '+', y, s1), eq(s1, '-', z, s1 - z)],
        answer: s1 - z,
    }
}

fn t10_times_as_many(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 2);
    let it = item(rng);
    let k = rint(rng, 2, max_mult(v));
    let x = rint(rng, v.lo, v.hi / k);
    let s1 = x * k;
    let z = rint(rng, v.lo, s1 - v.lo);
    Problem {
        question: format!(
            "{0} has {x} {it} . {1} has {k} times as many {it} . how many {it} does {1} have after giving away {z} ?",
            n[0], n[1]
        ),
        cot: vec![eq(x, '*', k, s1), eq(s1, '-', z, s1 - z)],
        answer: s1 - z,
    }
}

fn t11_daily_make(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let k = rint(rng, 2, max_mult(v));
    let m = rint(rng, v.lo, v.hi / k);
    let s1 = m * k;
    let z = rint(rng, v.lo, s1 - v.lo);
    Problem {
        question: format!(
            "{0} makes {m} {it} every day . after {k} days {0} sells {z} of them . how many {it} are left ?",
            n[0]
        ),
        cot: vec![eq(m, '*', k, s1), eq(s1, '-', z, s1 - z)],
        answer: s1 - z,
    }
}

fn t12_split_then_find(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let k = rint(rng, 2, max_mult(v));
    let r = rint(rng, v.lo, v.hi / k);
    let x = r * k;
    let y = rint(rng, v.lo, v.hi - r);
    Problem {
        question: format!(
            "{0} splits {x} {it} equally among {k} friends . each friend then finds {y} more . how many {it} does each friend have ?",
            n[0]
        ),
        cot: vec![eq(x, '/', k, r), eq(r, '+', y, r + y)],
        answer: r + y,
    }
}

fn t13_sell_twice(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let x = rint(rng, 3 * v.lo, v.hi);
    let y = rint(rng, v.lo, x - 2 * v.lo);
    let s1 = x - y;
    let z = rint(rng, v.lo, s1 - v.lo);
    Problem {
        question: format!(
            "{0} had {x} {it} . {0} sold {y} in the morning and {z} in the afternoon . how many {it} are left ?",
            n[0]
        ),
        cot: vec![eq(x, '-', y, s1), eq(s1, '-', z, s1 - z)],
        answer: s1 - z,
    }
}

fn t14_four_way_sum(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 4);
    let it = item(rng);
    let x = rint(rng, v.lo, v.hi - 3 * v.lo);
    let y = rint(rng, v.lo, v.hi - 2 * v.lo - x);
    let s1 = x + y;
    let z = rint(rng, v.lo, v.hi - v.lo - s1);
    let s2 = s1 + z;
    let w = rint(rng, v.lo, v.hi - s2);
    Problem {
        question: format!(
            "{0} has {x} {it} . {1} has {y} {it} . {2} has {z} {it} . {3} has {w} {it} . how many {it} in all ?",
            n[0], n[1], n[2], n[3]
        ),
        cot: vec![eq(x, '+', y, s1), eq(s1, '+', z, s2), eq(s2, '+', w, s2 + w)],
        answer: s2 + w,
    }
}

fn t15_two_purchases(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    // Keep s1 <= hi - 2*lo so the second purchase still fits in range.
    let a = rint(rng, 2, max_mult(v).min((v.hi - 2 * v.lo) / v.lo));
    let p = rint(rng, v.lo, (v.hi - 2 * v.lo) / a);
    let s1 = a * p;
    let b = rint(rng, 2, max_mult(v).min((v.hi - s1) / v.lo));
    let q = rint(rng, v.lo, (v.hi - s1) / b);
    let s2 = b * q;
    Problem {
        question: format!(
            "{0} buys {a} pens of {p} coins each and {b} books of {q} coins each . how many coins does {0} pay ?",
            n[0]
        ),
        cot: vec![eq(a, '*', p, s1), eq(b, '*', q, s2), eq(s1, '+', s2, s1 + s2)],
        answer: s1 + s2,
    }
}

fn t16_buy_lose_find(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 1);
    let it = item(rng);
    let x = rint(rng, v.lo, v.hi - v.lo);
    let y = rint(rng, v.lo, v.hi - x);
    let s1 = x + y;
    let z = rint(rng, v.lo, s1 - v.lo);
    let s2 = s1 - z;
    let w = rint(rng, v.lo, v.hi - s2);
    Problem {
        question: format!(
            "{0} starts with {x} {it} . {0} buys {y} more , loses {z} , and then finds {w} . how many {it} now ?",
            n[0]
        ),
        cot: vec![eq(x, '+', y, s1), eq(s1, '-', z, s2), eq(s2, '+', w, s2 + w)],
        answer: s2 + w,
    }
}

fn t17_times_together_give(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 2);
    let it = item(rng);
    let kmax = ((v.hi / v.lo) - 1).clamp(2, 9);
    let k = rint(rng, 2, kmax);
    let x = rint(rng, v.lo, v.hi / (k + 1));
    let s1 = x * k;
    let s2 = x + s1;
    let z = rint(rng, v.lo, s2 - v.lo);
    Problem {
        question: format!(
            "{0} has {x} {it} . {1} has {k} times as many . they then sell {z} of them . how many {it} do they keep ?",
            n[0], n[1]
        ),
        cot: vec![eq(x, '*', k, s1), eq(x, '+', s1, s2), eq(s2, '-', z, s2 - z)],
        answer: s2 - z,
    }
}

fn t18_give_split_find(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 2);
    let it = item(rng);
    let k = rint(rng, 2, max_mult(v).min((v.hi - v.lo) / v.lo));
    let s2 = rint(rng, v.lo, (v.hi - v.lo) / k);
    let s1 = s2 * k;
    let x = rint(rng, s1 + v.lo, v.hi);
    let y = x - s1;
    let w = rint(rng, v.lo, v.hi - s2);
    Problem {
        question: format!(
            "{0} had {x} {it} and gave {y} to {1} . {0} splits the rest equally among {k} friends . each friend then finds {w} more . how many {it} does each friend have ?",
            n[0], n[1]
        ),
        cot: vec![eq(x, '-', y, s1), eq(s1, '/', k, s2), eq(s2, '+', w, s2 + w)],
        answer: s2 + w,
    }
}

fn t19_pick_sell_pack(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 2);
    let it = item(rng);
    // Keep s2 <= hi - lo so the pre-sale total s1 = s2 + z stays in range.
    let k = rint(rng, 2, max_mult(v).min((v.hi - v.lo) / v.lo));
    let s3 = rint(rng, v.lo, (v.hi - v.lo) / k);
    let s2 = s3 * k;
    let z = rint(rng, v.lo, v.hi - s2);
    let s1 = s2 + z;
    let x = rint(rng, v.lo, s1 - v.lo);
    let y = s1 - x;
    Problem {
        question: format!(
            "{0} picks {x} {it} and {1} picks {y} {it} . they sell {z} of them and pack the rest into boxes of {k} . how many boxes do they get ?",
            n[0], n[1]
        ),
        cot: vec![eq(x, '+', y, s1), eq(s1, '-', z, s2), eq(s2, '/', k, s3)],
        answer: s3,
    }
}

fn t20_crates_add_take(rng: &mut ChaCha20Rng, v: ValueRange) -> Problem {
    let n = names(rng, 2);
    let it = item(rng);
    let k = rint(rng, 2, max_mult(v).min((v.hi - v.lo) / v.lo));
    let m = rint(rng, v.lo, (v.hi - v.lo) / k);
    let s1 = k * m;
    let w = rint(rng, v.lo, v.hi - s1);
    let s2 = s1 + w;
    let z = rint(rng, v.lo, s2 - v.lo);
    Problem {
        question: format!(
            "each crate holds {k} {it} . {0} fills {m} crates and then adds {w} more {it} . {1} takes {z} . how many {it} are left ?",
            n[0], n[1]
        ),
        cot: vec![eq(k, '*', m, s1), eq(s1, '+', w, s2), eq(s2, '-', z, s2 - z)],
        answer: s2 - z,
    }
}

const TEMPLATES_1: [Build; 6] =
    [t01_give_more, t02_give_away, t03_boxes, t04_share, t05_eat, t06_find_together];
const TEMPLATES_2: [Build; 7] = [
    t07_three_way_sum,
    t08_buy_boxes_give,
    t09_buy_lose,
    t10_times_as_many,
    t11_daily_make,
    t12_split_then_find,
    t13_sell_twice,
];
const TEMPLATES_3: [Build; 7] = [
    t14_four_way_sum,
    t15_two_purchases,
    t16_buy_lose_find,
    t17_times_together_give,
    t18_give_split_find,
    t19_pick_sell_pack,
    t20_crates_add_take,
];

fn build_with(rng: &mut ChaCha20Rng, n_steps: usize, range: ValueRange) -> Problem {
    let group: &[Build] = match n_steps {
        1 => &TEMPLATES_1,
        2 => &TEMPLATES_2,
        3 => &TEMPLATES_3,
        _ => panic!("n_steps must be 1..=3"),
    };
    group[rng.gen_range(0..group.len())](rng, range)
}

/// One problem with exactly `n_steps` reasoning steps, deterministic in
/// `seed`.
pub fn gen_problem(seed: u64, n_steps: usize, range: ValueRange) -> Result<Problem> {
    range.validate()?;
    if !(1..=3).contains(&n_steps) {
        return Err(CoreError::InvalidConfig("n_steps must be 1..=3".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(build_with(&mut rng, n_steps, range))
}

/// A deduplicated corpus with uniformly mixed step counts, deterministic in
/// the config seed.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Vec<Problem>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.size);
    let max_attempts = cfg.size.saturating_mul(200).max(10_000);
    let mut attempts = 0;
    while out.len() < cfg.size {
        attempts += 1;
        if attempts > max_attempts {
            return Err(CoreError::GeneratorExhausted(max_attempts));
        }
        let n_steps = rng.gen_range(1..=cfg.max_steps);
        let p = build_with(&mut rng, n_steps, cfg.range);
        if seen.insert(p.question.clone()) {
            out.push(p);
        }
    }
    Ok(out)
}

/// `"a op b = r"` → (a, op, b, r).
pub fn parse_step(step: &str) -> Option<(i64, char, i64, i64)> {
    let parts: Vec<&str> = step.split_whitespace().collect();
    if parts.len() != 5 || parts[3] != "=" {
        return None;
    }
    let op = parts[1].chars().next()?;
    if parts[1].len() != 1 || !"+-*/".contains(op) {
        return None;
    }
    Some((parts[0].parse().ok()?, op, parts[2].parse().ok()?, parts[4].parse().ok()?))
}

/// Every numeric literal appearing in the question, in order.
pub fn question_numbers(question: &str) -> Vec<i64> {
    question
        .split_whitespace()
        .filter_map(|w| if w.bytes().all(|b| b.is_ascii_digit()) { w.parse().ok() } else { None })
        .collect()
}

/// Structural check: steps parse, arithmetic is exact, operands come from
/// the question or earlier results, results stay in range, and the final
/// result equals the answer.
pub fn validate_problem(p: &Problem, range: ValueRange) -> std::result::Result<(), String> {
    if p.cot.is_empty() || p.cot.len() > 3 {
        return Err(format!("bad step count {}", p.cot.len()));
    }
    let known = question_numbers(&p.question);
    let mut results: Vec<i64> = Vec::new();
    for (i, step) in p.cot.iter().enumerate() {
        let (a, op, b, r) = parse_step(step).ok_or_else(|| format!("unparseable step {step:?}"))?;
        let expect = match op {
            '+' => a.checked_add(b),
            '-' => a.checked_sub(b),
            '*' => a.checked_mul(b),
            '/' => {
                if b != 0 && a % b == 0 {
                    Some(a / b)
                } else {
                    None
                }
            }
            _ => None,
        };
        if expect != Some(r) {
            return Err(format!("step {i} arithmetic wrong: {step}"));
        }
        for operand in [a, b] {
            if !known.contains(&operand) && !results.contains(&operand) {
                return Err(format!("step {i} operand {operand} not derivable"));
            }
        }
        if !range.contains(r) {
            return Err(format!("step {i} result {r} outside {}..={}", range.lo, range.hi));
        }
        results.push(r);
    }
    if *results.last().unwrap() != p.answer {
        return Err(format!("final result {} != answer {}", results.last().unwrap(), p.answer));
    }
    Ok(())
}

pub fn write_problems(path: &Path, problems: &[Problem]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in problems {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_problems(path: &Path) -> Result<Vec<Problem>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(&line).map_err(|e| CoreError::BadRecord {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}
