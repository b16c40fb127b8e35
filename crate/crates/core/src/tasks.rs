//! Synthetic tasks with verifiable rewards in `[0, 1]`.
//!
//! * `copy_reverse`: the completion should be the prompt reversed; reward is
//!   the fraction of matching positions.
//! * `mini_countdown`: prompt `[a, b, c, tens, units]`, completion
//!   `[d, op, d, op, d]` over digits and `+`/`-`; 1.0 if it uses exactly the
//!   three numbers and hits the target, 0.1 if it uses them but misses, 0.0
//!   otherwise.
//! * `mini_sudoku`: a 4x4 puzzle with a unique solution, `0` marking empty
//!   cells; the completion is the full grid and the reward is the fraction
//!   of originally empty cells filled correctly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::mdm::{Token, TokenSequence, Vocabulary};

pub const PLUS: Token = 10;
pub const MINUS: Token = 11;
pub const SUDOKU_CELLS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskId {
    CopyReverse,
    MiniCountdown,
    MiniSudoku,
}

impl TaskId {
    pub fn name(&self) -> &'static str {
        match self {
            TaskId::CopyReverse => "copy_reverse",
            TaskId::MiniCountdown => "mini_countdown",
            TaskId::MiniSudoku => "mini_sudoku",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy_reverse" => Ok(TaskId::CopyReverse),
            "mini_countdown" => Ok(TaskId::MiniCountdown),
            "mini_sudoku" => Ok(TaskId::MiniSudoku),
            _ => Err(invalid(format!(
                "unknown task '{s}' (expected copy_reverse, mini_countdown or mini_sudoku)"
            ))),
        }
    }
}

/// A task together with its size knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Task {
    pub id: TaskId,
    /// copy_reverse vocabulary size.
    pub copy_vocab: u32,
    /// copy_reverse prompt and completion length.
    pub copy_len: usize,
    /// Number of empty cells in sudoku puzzles; at least 4.
    pub sudoku_empty: usize,
}

impl Task {
    pub fn new(id: TaskId) -> Self {
        Self {
            id,
            copy_vocab: 8,
            copy_len: 8,
            sudoku_empty: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id == TaskId::CopyReverse && (self.copy_len == 0 || self.copy_vocab < 2) {
            return Err(invalid(
                "copy_reverse needs length >= 1 and vocabulary >= 2",
            ));
        }
        if self.id == TaskId::MiniSudoku && !(4..=12).contains(&self.sudoku_empty) {
            return Err(invalid(format!(
                "sudoku empty cells {} outside 4..=12",
                self.sudoku_empty
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        let size = match self.id {
            TaskId::CopyReverse => self.copy_vocab,
            TaskId::MiniCountdown => 12,
            TaskId::MiniSudoku => 5,
        };
        Vocabulary::new(size).expect("task vocabularies have at least two tokens")
    }

    pub fn prompt_len(&self) -> usize {
        match self.id {
            TaskId::CopyReverse => self.copy_len,
            TaskId::MiniCountdown => 5,
            TaskId::MiniSudoku => SUDOKU_CELLS,
        }
    }

    pub fn completion_len(&self) -> usize {
        match self.id {
            TaskId::CopyReverse => self.copy_len,
            TaskId::MiniCountdown => 5,
            TaskId::MiniSudoku => SUDOKU_CELLS,
        }
    }

    pub fn max_reward(&self) -> f64 {
        1.0
    }

    /// A prompt as a sequence consisting only of prompt tokens.
    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TokenSequence> {
        self.validate()?;
        let tokens = match self.id {
            TaskId::CopyReverse => (0..self.copy_len)
                .map(|_| rng.random_range(0..self.copy_vocab))
                .collect(),
            TaskId::MiniCountdown => countdown_prompt(rng),
            TaskId::MiniSudoku => sudoku_puzzle(self.sudoku_empty, rng),
        };
        TokenSequence::new(tokens, self.prompt_len(), self.vocab())
    }

    /// Reward of `completion` for `prompt`. Wrong lengths or tokens outside
    /// the vocabulary are errors; any in-vocabulary completion scores.
    pub fn reward(&self, prompt: &[Token], completion: &[Token]) -> Result<f64> {
        let fail = |reason: String| Error::Reward {
            completion: completion.to_vec(),
            reason,
        };
        if prompt.len() != self.prompt_len() {
            return Err(fail(format!(
                "prompt length {} != {}",
                prompt.len(),
                self.prompt_len()
            )));
        }
        if completion.len() != self.completion_len() {
            return Err(fail(format!(
                "completion length {} != {}",
                completion.len(),
                self.completion_len()
            )));
        }
        let v = self.vocab();
        if let Some(t) = completion.iter().chain(prompt).find(|&&t| !v.contains(t)) {
            return Err(fail(format!(
                "token {t} outside vocabulary of size {}",
                v.size()
            )));
        }
        Ok(match self.id {
            TaskId::CopyReverse => {
                let hits = completion
                    .iter()
                    .zip(prompt.iter().rev())
                    .filter(|(a, b)| a == b)
                    .count();
                hits as f64 / completion.len() as f64
            }
            TaskId::MiniCountdown => countdown_reward(prompt, completion),
            TaskId::MiniSudoku => {
                let solution = solve_unique(prompt)
                    .ok_or_else(|| fail("puzzle has no unique solution".into()))?;
                let empty: Vec<usize> = (0..SUDOKU_CELLS).filter(|&i| prompt[i] == 0).collect();
                if empty.is_empty() {
                    return Err(fail("puzzle has no empty cells".into()));
                }
                let right = empty
                    .iter()
                    .filter(|&&i| completion[i] == solution[i])
                    .count();
                right as f64 / empty.len() as f64
            }
        })
    }

    /// A completion earning the maximal reward.
    pub fn solution(&self, prompt: &[Token]) -> Result<Vec<Token>> {
        match self.id {
            TaskId::CopyReverse => Ok(prompt.iter().rev().copied().collect()),
            TaskId::MiniCountdown => {
                countdown_solution(prompt).ok_or_else(|| invalid("target is unreachable"))
            }
            TaskId::MiniSudoku => {
                solve_unique(prompt).ok_or_else(|| invalid("puzzle has no unique solution"))
            }
        }
    }
}

fn countdown_prompt<R: Rng + ?Sized>(rng: &mut R) -> Vec<Token> {
    loop {
        let nums: [u32; 3] = [
            rng.random_range(1..=9),
            rng.random_range(1..=9),
            rng.random_range(1..=9),
        ];
        let ops = [rng.random_bool(0.5), rng.random_bool(0.5)];
        let target = apply(nums[0] as i32, ops[0], nums[1] as i32);
        let target = apply(target, ops[1], nums[2] as i32);
        if (0..=99).contains(&target) {
            let t = target as u32;
            return vec![nums[0], nums[1], nums[2], t / 10, t % 10];
        }
    }
}

fn apply(a: i32, plus: bool, b: i32) -> i32 {
    if plus {
        a + b
    } else {
        a - b
    }
}

fn countdown_reward(prompt: &[Token], c: &[Token]) -> f64 {
    let is_digit = |t: Token| t <= 9;
    let is_op = |t: Token| t == PLUS || t == MINUS;
    if !(is_digit(c[0]) && is_op(c[1]) && is_digit(c[2]) && is_op(c[3]) && is_digit(c[4])) {
        return 0.0;
    }
    let mut used = [c[0], c[2], c[4]];
    let mut given = [prompt[0], prompt[1], prompt[2]];
    used.sort_unstable();
    given.sort_unstable();
    if used != given {
        return 0.0;
    }
    let value = apply(
        apply(c[0] as i32, c[1] == PLUS, c[2] as i32),
        c[3] == PLUS,
        c[4] as i32,
    );
    let target = (prompt[3] * 10 + prompt[4]) as i32;
    if value == target {
        1.0
    } else {
        0.1
    }
}

fn countdown_solution(prompt: &[Token]) -> Option<Vec<Token>> {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    for p in PERMS {
        for op1 in [PLUS, MINUS] {
            for op2 in [PLUS, MINUS] {
                let c = vec![prompt[p[0]], op1, prompt[p[1]], op2, prompt[p[2]]];
                if countdown_reward(prompt, &c) == 1.0 {
                    return Some(c);
                }
            }
        }
    }
    None
}

fn sudoku_puzzle<R: Rng + ?Sized>(empty: usize, rng: &mut R) -> Vec<Token> {
    loop {
        let grid = random_solved_grid(rng);
        let mut cells: Vec<usize> = (0..SUDOKU_CELLS).collect();
        cells.shuffle(rng);
        let mut puzzle = grid.clone();
        let mut removed = 0;
        for &i in &cells {
            if removed == empty {
                break;
            }
            let keep = puzzle[i];
            puzzle[i] = 0;
            if count_solutions(&mut puzzle.clone(), 2) == 1 {
                removed += 1;
            } else {
                puzzle[i] = keep;
            }
        }
        if removed == empty {
            return puzzle;
        }
    }
}

fn random_solved_grid<R: Rng + ?Sized>(rng: &mut R) -> Vec<Token> {
    // A valid base grid, relabelled and with rows, columns, bands and stacks
    // permuted; every 4x4 solution is reachable this way up to transposition.
    const BASE: [[Token; 4]; 4] = [[1, 2, 3, 4], [3, 4, 1, 2], [2, 1, 4, 3], [4, 3, 2, 1]];
    let mut digits: Vec<Token> = vec![1, 2, 3, 4];
    digits.shuffle(rng);
    let band_order = |rng: &mut R| -> [usize; 4] {
        let b = if rng.random_bool(0.5) { [0, 2] } else { [2, 0] };
        let (s0, s1) = (rng.random_bool(0.5) as usize, rng.random_bool(0.5) as usize);
        [b[0] + s0, b[0] + 1 - s0, b[1] + s1, b[1] + 1 - s1]
    };
    let rows = band_order(rng);
    let cols = band_order(rng);
    let transpose = rng.random_bool(0.5);
    let mut g = vec![0; SUDOKU_CELLS];
    for r in 0..4 {
        for c in 0..4 {
            let (rr, cc) = if transpose { (c, r) } else { (r, c) };
            g[r * 4 + c] = digits[(BASE[rows[rr]][cols[cc]] - 1) as usize];
        }
    }
    g
}

fn allowed(g: &[Token], i: usize, d: Token) -> bool {
    let (r, c) = (i / 4, i % 4);
    let (br, bc) = (r / 2 * 2, c / 2 * 2);
    (0..4).all(|k| g[r * 4 + k] != d && g[k * 4 + c] != d)
        && (0..2).all(|a| (0..2).all(|b| g[(br + a) * 4 + bc + b] != d))
}

/// Number of completions of `g`, counting no further than `limit`.
fn count_solutions(g: &mut [Token], limit: usize) -> usize {
    let Some(i) = g.iter().position(|&x| x == 0) else {
        return 1;
    };
    let mut n = 0;
    for d in 1..=4 {
        if allowed(g, i, d) {
            g[i] = d;
            n += count_solutions(g, limit - n);
            g[i] = 0;
            if n >= limit {
                break;
            }
        }
    }
    n
}

fn first_solution(g: &mut [Token]) -> bool {
    let Some(i) = g.iter().position(|&x| x == 0) else {
        return true;
    };
    for d in 1..=4 {
        if allowed(g, i, d) {
            g[i] = d;
            if first_solution(g) {
                return true;
            }
        }
    }
    g[i] = 0;
    false
}

/// The solution of a puzzle if it exists and is unique.
pub fn solve_unique(puzzle: &[Token]) -> Option<Vec<Token>> {
    if puzzle.len() != SUDOKU_CELLS || puzzle.iter().any(|&t| t > 4) {
        return None;
    }
    for i in 0..SUDOKU_CELLS {
        let mut g = puzzle.to_vec();
        let d = g[i];
        if d != 0 {
            g[i] = 0;
            if !allowed(&g, i, d) {
                return None;
            }
        }
    }
    if count_solutions(&mut puzzle.to_vec(), 2) != 1 {
        return None;
    }
    let mut g = puzzle.to_vec();
    first_solution(&mut g);
    Some(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn task_ids_round_trip() {
        for id in [
            TaskId::CopyReverse,
            TaskId::MiniCountdown,
            TaskId::MiniSudoku,
        ] {
            assert_eq!(id.name().parse::<TaskId>().unwrap(), id);
        }
        assert!("sudoku".parse::<TaskId>().is_err());
    }

    #[test]
    fn copy_reverse_rewards() {
        let t = Task {
            copy_len: 3,
            ..Task::new(TaskId::CopyReverse)
        };
        assert_eq!(t.reward(&[0, 1, 2], &[2, 1, 0]).unwrap(), 1.0);
        assert!((t.reward(&[0, 1, 2], &[2, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(t.reward(&[0, 1, 2], &[2, 1]).is_err());
        assert!(matches!(
            t.reward(&[0, 1, 2], &[2, 1, 8]),
            Err(Error::Reward { .. })
        ));
    }

    #[test]
    fn countdown_ladder() {
        let t = Task::new(TaskId::MiniCountdown);
        let p = [3, 5, 2, 0, 6];
        assert_eq!(t.reward(&p, &[3, PLUS, 5, MINUS, 2]).unwrap(), 1.0);
        assert_eq!(t.reward(&p, &[5, MINUS, 2, PLUS, 3]).unwrap(), 1.0);
        assert_eq!(t.reward(&p, &[3, PLUS, 5, PLUS, 2]).unwrap(), 0.1);
        assert_eq!(t.reward(&p, &[3, PLUS, 5, PLUS, 4]).unwrap(), 0.0);
        assert_eq!(t.reward(&p, &[3, 5, PLUS, 2, MINUS]).unwrap(), 0.0);
    }

    #[test]
    fn countdown_targets_are_reachable() {
        let t = Task::new(TaskId::MiniCountdown);
        let mut rng = stream(3);
        for _ in 0..200 {
            let p = t.sample_prompt(&mut rng).unwrap();
            let s = t.solution(p.tokens()).unwrap();
            assert_eq!(t.reward(p.tokens(), &s).unwrap(), 1.0);
            assert!(p.tokens()[..3].iter().all(|&d| (1..=9).contains(&d)));
        }
    }

    #[test]
    fn sudoku_puzzles_are_unique_and_graded_by_empty_cells() {
        let t = Task::new(TaskId::MiniSudoku);
        let mut rng = stream(4);
        for _ in 0..50 {
            let p = t.sample_prompt(&mut rng).unwrap();
            assert!(p.tokens().iter().filter(|&&x| x == 0).count() >= 4);
            let s = solve_unique(p.tokens()).unwrap();
            assert_eq!(t.reward(p.tokens(), &s).unwrap(), 1.0);
        }
        let p = t.sample_prompt(&mut stream(5)).unwrap();
        let s = t.solution(p.tokens()).unwrap();
        let empty: Vec<usize> = (0..16).filter(|&i| p.tokens()[i] == 0).collect();
        let t4 = Task {
            sudoku_empty: 4,
            ..t
        };
        let p4 = t4.sample_prompt(&mut stream(6)).unwrap();
        let s4 = t4.solution(p4.tokens()).unwrap();
        let e4: Vec<usize> = (0..16).filter(|&i| p4.tokens()[i] == 0).collect();
        let mut c = s4.clone();
        for &i in &e4[..2] {
            c[i] = c[i] % 4 + 1;
        }
        assert_eq!(t4.reward(p4.tokens(), &c).unwrap(), 0.5);
        let mut wrong = s.clone();
        wrong[empty[0]] = 0;
        assert!(t.reward(p.tokens(), &wrong).unwrap() < 1.0);
    }

    #[test]
    fn prompts_are_seeded() {
        for id in [
            TaskId::CopyReverse,
            TaskId::MiniCountdown,
            TaskId::MiniSudoku,
        ] {
            let t = Task::new(id);
            assert_eq!(
                t.sample_prompt(&mut stream(9)).unwrap(),
                t.sample_prompt(&mut stream(9)).unwrap()
            );
        }
    }

    #[test]
    fn rewards_are_bounded_for_arbitrary_completions() {
        let mut rng = stream(10);
        for id in [
            TaskId::CopyReverse,
            TaskId::MiniCountdown,
            TaskId::MiniSudoku,
        ] {
            let t = Task::new(id);
            let v = t.vocab().size() as u32;
            for _ in 0..100 {
                let p = t.sample_prompt(&mut rng).unwrap();
                let c: Vec<Token> = (0..t.completion_len())
                    .map(|_| rng.random_range(0..v))
                    .collect();
                let r = t.reward(p.tokens(), &c).unwrap();
                assert!((0.0..=1.0).contains(&r));
                assert_eq!(r, t.reward(p.tokens(), &c).unwrap());
                if r == 1.0 {
                    assert_eq!(
                        t.reward(p.tokens(), &t.solution(p.tokens()).unwrap())
                            .unwrap(),
                        1.0
                    );
                }
            }
        }
    }
}
