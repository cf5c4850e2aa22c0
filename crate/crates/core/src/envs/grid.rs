//! Gridworld with a hidden goal tile.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

pub const GRID_ACTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Move {
    pub const ALL: [Move; GRID_ACTIONS] = [Move::Up, Move::Down, Move::Left, Move::Right, Move::Stay];

    pub fn from_index(i: usize) -> Move {
        Move::ALL[i]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTask {
    pub side: usize,
    pub goal: usize,
    pub start: usize,
    pub pos: usize,
    /// Steps taken in the current inner episode.
    pub t: usize,
}

impl GridTask {
    pub fn sample(rng: &mut RngStream, side: usize, allow_goal_at_start: bool) -> Self {
        let n = side * side;
        let start = rng.gen_range(0..n);
        let mut goal = rng.gen_range(0..n);
        while !allow_goal_at_start && goal == start && n > 1 {
            goal = rng.gen_range(0..n);
        }
        GridTask { side, goal, start, pos: start, t: 0 }
    }

    pub fn row_col(&self, tile: usize) -> (usize, usize) {
        (tile / self.side, tile % self.side)
    }

    /// Applies one move. Returns the reward `1/t` on the goal tile, else 0.
    pub fn step(&mut self, m: Move) -> f64 {
        let (r, c) = self.row_col(self.pos);
        let (r, c) = match m {
            Move::Up => (r.saturating_sub(1), c),
            Move::Down => ((r + 1).min(self.side - 1), c),
            Move::Left => (r, c.saturating_sub(1)),
            Move::Right => (r, (c + 1).min(self.side - 1)),
            Move::Stay => (r, c),
        };
        self.pos = r * self.side + c;
        self.t += 1;
        if self.pos == self.goal {
            1.0 / self.t as f64
        } else {
            0.0
        }
    }

    /// One-hot image of the agent position; the goal is not shown.
    pub fn observe(&self) -> Vec<f64> {
        tile_image(self.side, self.pos)
    }

    pub fn reset_inner(&mut self) {
        self.pos = self.start;
        self.t = 0;
    }
}

pub fn tile_image(side: usize, tile: usize) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    img[tile] = 1.0;
    img
}
