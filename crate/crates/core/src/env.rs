//! Deterministic, restorable grid environments and stochasticity wrappers.
//!
//! Three worlds share one tile engine:
//!
//! * `deceptive_maze` - a single-room maze with a small terminal reward near the
//!   start on a dead-end branch and a large terminal reward far away.
//! * `key_door_world` - a row of rooms joined by locked doors. Each room holds
//!   one key and one treasure; the last room has an exit that, used while holding
//!   the last key, pays out and advances the level counter.
//! * `pixel_maze` - the maze of `deceptive_maze`, additionally rendered to an
//!   84x84 grayscale frame with textured walls.
//!
//! Every base world is a pure function of its config and the action sequence.
//! Snapshots capture the full state, so `restore` followed by the same actions
//! reproduces the same stream exactly.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const NUM_ACTIONS: usize = 5;
pub const FRAME_SIZE: usize = 84;

const SNAPSHOT_TAG: &[u8; 4] = b"GXS1";
const STICKY_TAG: &[u8; 4] = b"GXW1";
const BASE_SNAPSHOT_LEN: usize = 4 + 8 + 1 + 2 + 2 + 4 + 4 + 4 + 4 + 1 + 2 + 4 + 8 + 1;

const TREASURE_REWARD: i64 = 10;
const EXIT_REWARD: i64 = 100;
const NEAR_REWARD: i64 = 1;
const FAR_REWARD: i64 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("episode is over; call reset before stepping again")]
    EpisodeDone,
    #[error("action {0} is outside the action set 0..{NUM_ACTIONS}")]
    InvalidAction(usize),
    #[error("snapshot was taken from a different environment configuration")]
    ConfigMismatch,
    #[error("malformed snapshot: {0}")]
    BadSnapshot(String),
    #[error("render_frame is only available on pixel_maze")]
    NotRenderable,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}

/// Discrete actions shared by every world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Action {
    Noop = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Noop, Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(index: usize) -> Result<Self, EnvError> {
        Self::ALL.get(index).copied().ok_or(EnvError::InvalidAction(index))
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Noop => (0, 0),
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvName {
    DeceptiveMaze,
    KeyDoorWorld,
    PixelMaze,
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvName::DeceptiveMaze => "deceptive_maze",
            EnvName::KeyDoorWorld => "key_door_world",
            EnvName::PixelMaze => "pixel_maze",
        })
    }
}

impl FromStr for EnvName {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deceptive_maze" => Ok(EnvName::DeceptiveMaze),
            "key_door_world" => Ok(EnvName::KeyDoorWorld),
            "pixel_maze" => Ok(EnvName::PixelMaze),
            other => Err(EnvError::InvalidConfig(format!("unknown env name `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub name: EnvName,
    /// Room width in tiles.
    pub width: usize,
    /// Room height in tiles.
    pub height: usize,
    /// Room count; only key_door_world uses more than one.
    pub n_rooms: usize,
    /// Number of times the exit may be used before the episode ends.
    pub n_levels: u32,
    /// Layout seed.
    pub seed: u64,
    pub max_episode_steps: u32,
    pub lives: u32,
    pub terminate_on_first_death: bool,
    /// Replace the maze with an open rectangle.
    pub open_layout: bool,
    /// Remove all rewards (and therefore all reward-triggered terminations).
    pub reward_free: bool,
}

impl EnvConfig {
    pub fn deceptive_maze(width: usize, height: usize, seed: u64) -> Self {
        Self {
            name: EnvName::DeceptiveMaze,
            width,
            height,
            n_rooms: 1,
            n_levels: 1,
            seed,
            max_episode_steps: 400,
            lives: 1,
            terminate_on_first_death: false,
            open_layout: false,
            reward_free: false,
        }
    }

    pub fn key_door_world(width: usize, height: usize, n_rooms: usize, seed: u64) -> Self {
        Self {
            name: EnvName::KeyDoorWorld,
            n_rooms,
            lives: 3,
            ..Self::deceptive_maze(width, height, seed)
        }
    }

    pub fn pixel_maze(width: usize, height: usize, seed: u64) -> Self {
        Self {
            name: EnvName::PixelMaze,
            ..Self::deceptive_maze(width, height, seed)
        }
    }

    pub fn open_grid(width: usize, height: usize) -> Self {
        Self {
            open_layout: true,
            reward_free: true,
            ..Self::deceptive_maze(width, height, 0)
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 || self.width > 255 || self.height > 255 {
            return bad(format!("room size {}x{} must be within 1..=255", self.width, self.height));
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be positive".into());
        }
        if self.lives == 0 {
            return bad("lives must be positive".into());
        }
        if self.n_levels == 0 {
            return bad("n_levels must be positive".into());
        }
        match self.name {
            EnvName::KeyDoorWorld => {
                if !(1..=16).contains(&self.n_rooms) {
                    return bad(format!("n_rooms = {} must be within 1..=16", self.n_rooms));
                }
                if self.width < 3 || self.height < 3 {
                    return bad("key_door_world rooms must be at least 3x3".into());
                }
            }
            EnvName::DeceptiveMaze | EnvName::PixelMaze => {
                if self.n_rooms != 1 {
                    return bad(format!("{} has exactly one room", self.name));
                }
                if !self.reward_free && (self.width < 2 || self.height < 2) {
                    return bad("rewarded mazes need at least 2x2 tiles".into());
                }
            }
        }
        if self.name == EnvName::PixelMaze && (self.width > FRAME_SIZE || self.height > FRAME_SIZE) {
            return bad(format!("pixel_maze is limited to {FRAME_SIZE} tiles per side"));
        }
        Ok(())
    }

    /// Stable 64-bit digest of every layout- and dynamics-relevant field.
    pub fn digest(&self) -> u64 {
        let text = format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.name,
            self.width,
            self.height,
            self.n_rooms,
            self.n_levels,
            self.seed,
            self.max_episode_steps,
            self.lives,
            self.terminate_on_first_death,
            self.open_layout,
            self.reward_free
        );
        let hash = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(hash[..8].try_into().expect("sha256 is 32 bytes"))
    }
}

/// 2-D grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer does not match dimensions");
        Self { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Features a hand-written domain classifier would extract.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DomainFeatures {
    pub room: u32,
    pub x: u32,
    pub y: u32,
    /// Ids of the keys currently held, in collection order.
    pub keys: Vec<u32>,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Network input: tile one-hot, factored position one-hots and inventory bits.
    pub features: Vec<f64>,
    pub domain: DomainFeatures,
    /// Present only for pixel_maze.
    pub frame: Option<GrayFrame>,
    pub score_so_far: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Opaque capture of the complete simulator state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvSnapshot {
    pub bytes: Vec<u8>,
    pub frame_index: u32,
}

/// Simulator contract consumed by the exploration and learning code.
pub trait Environment: Send {
    fn config(&self) -> &EnvConfig;
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }
    fn reset(&mut self) -> Observation;
    fn step(&mut self, action: usize) -> Result<StepResult, EnvError>;
    fn observe(&self) -> Observation;
    fn snapshot(&self) -> EnvSnapshot;
    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError>;
    fn render_frame(&self) -> Result<GrayFrame, EnvError>;
    fn frame_index(&self) -> u32;
    fn is_done(&self) -> bool;
    /// Size of `Observation::features`.
    fn feature_width(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tile {
    Floor,
    Wall,
    Key(u8),
    Door(u8),
    Treasure,
    Hazard,
    Goal(i64),
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Pos {
    room: u8,
    x: u16,
    y: u16,
}

#[derive(Debug)]
struct Layout {
    width: usize,
    height: usize,
    tiles: Vec<Vec<Tile>>,
    start: Pos,
    /// Row of the door on the right wall of room i, for i < n_rooms - 1.
    door_rows: Vec<u16>,
}

impl Layout {
    fn tile(&self, room: u8, x: u16, y: u16) -> Tile {
        self.tiles[room as usize][y as usize * self.width + x as usize]
    }

    fn entry(&self, room: u8) -> Pos {
        if room == 0 {
            self.start
        } else {
            Pos { room, x: 0, y: self.door_rows[room as usize - 1] }
        }
    }

    fn build(config: &EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        match config.name {
            EnvName::KeyDoorWorld => Ok(Self::key_door(config)),
            EnvName::DeceptiveMaze | EnvName::PixelMaze => Ok(Self::maze(config)),
        }
    }

    fn maze(config: &EnvConfig) -> Self {
        let (w, h) = (config.width, config.height);
        let mut tiles = vec![Tile::Floor; w * h];
        if !config.open_layout {
            tiles.fill(Tile::Wall);
            carve_maze(&mut tiles, w, h, config.seed);
        }
        let start = Pos { room: 0, x: 0, y: 0 };
        if !config.reward_free {
            let (near, far) = if config.open_layout {
                ((0, h - 1), (w - 1, h - 1))
            } else {
                maze_goal_positions(&tiles, w, h)
            };
            tiles[near.1 * w + near.0] = Tile::Goal(NEAR_REWARD);
            tiles[far.1 * w + far.0] = Tile::Goal(FAR_REWARD);
        }
        Self { width: w, height: h, tiles: vec![tiles], start, door_rows: Vec::new() }
    }

    fn key_door(config: &EnvConfig) -> Self {
        let (w, h, n) = (config.width, config.height, config.n_rooms);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6b65_795f_646f_6f72);
        let door_rows: Vec<u16> = (0..n.saturating_sub(1)).map(|_| rng.random_range(0..h) as u16).collect();
        let start = Pos { room: 0, x: 0, y: rng.random_range(0..h) as u16 };
        let mut tiles = Vec::with_capacity(n);
        for room in 0..n {
            let entry = if room == 0 { (0usize, start.y as usize) } else { (0, door_rows[room - 1] as usize) };
            let door = (room + 1 < n).then(|| (w - 1, door_rows[room] as usize));
            tiles.push(generate_room(&mut rng, w, h, room, entry, door, room + 1 == n));
        }
        Self { width: w, height: h, tiles, start, door_rows }
    }
}

fn carve_maze(tiles: &mut [Tile], w: usize, h: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7a65);
    let cw = w.div_ceil(2);
    let ch = h.div_ceil(2);
    let mut visited = vec![false; cw * ch];
    let mut stack = vec![(0usize, 0usize)];
    visited[0] = true;
    tiles[0] = Tile::Floor;
    while let Some(&(cx, cy)) = stack.last() {
        let mut options = Vec::with_capacity(4);
        if cx > 0 && !visited[cy * cw + cx - 1] {
            options.push((cx - 1, cy));
        }
        if cx + 1 < cw && !visited[cy * cw + cx + 1] {
            options.push((cx + 1, cy));
        }
        if cy > 0 && !visited[(cy - 1) * cw + cx] {
            options.push((cx, cy - 1));
        }
        if cy + 1 < ch && !visited[(cy + 1) * cw + cx] {
            options.push((cx, cy + 1));
        }
        if options.is_empty() {
            stack.pop();
            continue;
        }
        let (nx, ny) = options[rng.random_range(0..options.len())];
        visited[ny * cw + nx] = true;
        let (wx, wy) = (cx + nx, cy + ny);
        tiles[wy * w + wx] = Tile::Floor;
        tiles[2 * ny * w + 2 * nx] = Tile::Floor;
        stack.push((nx, ny));
    }
}

fn bfs_distances(tiles: &[Tile], w: usize, h: usize, from: (usize, usize)) -> Vec<Option<u32>> {
    let mut dist = vec![None; w * h];
    let mut queue = VecDeque::new();
    dist[from.1 * w + from.0] = Some(0);
    queue.push_back(from);
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[y * w + x].unwrap();
        for (nx, ny) in neighbours(x, y, w, h) {
            let i = ny * w + nx;
            if dist[i].is_none() && !matches!(tiles[i], Tile::Wall | Tile::Hazard) {
                dist[i] = Some(d + 1);
                queue.push_back((nx, ny));
            }
        }
    }
    dist
}

fn neighbours(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut out = Vec::with_capacity(4);
    if x > 0 {
        out.push((x - 1, y));
    }
    if x + 1 < w {
        out.push((x + 1, y));
    }
    if y > 0 {
        out.push((x, y - 1));
    }
    if y + 1 < h {
        out.push((x, y + 1));
    }
    out.into_iter()
}

/// True if walling off `tile` makes `target` unreachable from the start.
fn cuts_off(tiles: &[Tile], w: usize, h: usize, tile: (usize, usize), target: (usize, usize)) -> bool {
    let mut blocked = tiles.to_vec();
    blocked[tile.1 * w + tile.0] = Tile::Wall;
    bfs_distances(&blocked, w, h, (0, 0))[target.1 * w + target.0].is_none()
}

/// Far goal: the tile farthest from the start. Near goal: the closest dead end
/// at distance >= 2 that is not the far goal, else the closest tile that
/// does not cut the start off from the far goal, else a wall pocket off the
/// corridor.
fn maze_goal_positions(tiles: &[Tile], w: usize, h: usize) -> ((usize, usize), (usize, usize)) {
    let dist = bfs_distances(tiles, w, h, (0, 0));
    let mut far = (0, 0);
    let mut far_d = 0;
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = dist[y * w + x] {
                if d > far_d {
                    far_d = d;
                    far = (x, y);
                }
            }
        }
    }
    let open_degree = |x: usize, y: usize| {
        neighbours(x, y, w, h).filter(|&(nx, ny)| tiles[ny * w + nx] != Tile::Wall).count()
    };
    let mut near: Option<((usize, usize), u32)> = None;
    let mut fallback: Option<((usize, usize), u32)> = None;
    for y in 0..h {
        for x in 0..w {
            let Some(d) = dist[y * w + x] else { continue };
            if d < 2 || (x, y) == far {
                continue;
            }
            if open_degree(x, y) == 1 {
                if near.is_none_or(|(_, best)| d < best) {
                    near = Some(((x, y), d));
                }
            } else if fallback.is_none_or(|(_, best)| d < best) && !cuts_off(tiles, w, h, (x, y), far) {
                fallback = Some(((x, y), d));
            }
        }
    }
    let pocket = || {
        let mut best: Option<((usize, usize), u32)> = None;
        for y in 0..h {
            for x in 0..w {
                if tiles[y * w + x] != Tile::Wall {
                    continue;
                }
                // The goal ends the episode, so it never opens a shortcut.
                let d = neighbours(x, y, w, h).filter_map(|(nx, ny)| dist[ny * w + nx]).min();
                if let Some(d) = d.filter(|&d| d >= 1) {
                    if best.is_none_or(|(_, b)| d + 1 < b) {
                        best = Some(((x, y), d + 1));
                    }
                }
            }
        }
        best
    };
    let near = near.or(fallback).or_else(pocket).map(|(p, _)| p).unwrap_or((w - 1, 0));
    (near, far)
}

fn generate_room(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    room: usize,
    entry: (usize, usize),
    door: Option<(usize, usize)>,
    last: bool,
) -> Vec<Tile> {
    let area = w * h;
    'attempt: loop {
        let mut tiles = vec![Tile::Floor; area];
        let mut reserved = vec![entry];
        if let Some(d) = door {
            tiles[d.1 * w + d.0] = Tile::Door(room as u8);
            reserved.push(d);
        }
        let mut place = |tiles: &mut Vec<Tile>, reserved: &mut Vec<(usize, usize)>, tile: Tile| {
            loop {
                let p = (rng.random_range(0..w), rng.random_range(0..h));
                if !reserved.contains(&p) {
                    tiles[p.1 * w + p.0] = tile;
                    reserved.push(p);
                    return p;
                }
            }
        };
        let key = place(&mut tiles, &mut reserved, Tile::Key(room as u8));
        let treasure = place(&mut tiles, &mut reserved, Tile::Treasure);
        let exit = last.then(|| place(&mut tiles, &mut reserved, Tile::Exit));
        let n_walls = area / 8;
        for _ in 0..n_walls {
            place(&mut tiles, &mut reserved, Tile::Wall);
        }
        if area >= 16 {
            place(&mut tiles, &mut reserved, Tile::Hazard);
        }
        let dist = bfs_distances(&tiles, w, h, entry);
        let reachable = |p: (usize, usize)| dist[p.1 * w + p.0].is_some();
        let mut targets = vec![key, treasure];
        targets.extend(door);
        targets.extend(exit);
        if !targets.into_iter().all(reachable) {
            continue 'attempt;
        }
        return tiles;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct State {
    pos: Pos,
    keys_held: u32,
    keys_taken: u32,
    doors_open: u32,
    treasures: u32,
    lives: u8,
    level: u16,
    frame: u32,
    score: i64,
    done: bool,
}

/// The base deterministic world.
#[derive(Debug, Clone)]
pub struct GridWorld {
    config: EnvConfig,
    digest: u64,
    layout: Arc<Layout>,
    state: State,
}

impl GridWorld {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        let layout = Arc::new(Layout::build(&config)?);
        let digest = config.digest();
        let state = Self::initial_state(&config, &layout);
        Ok(Self { config, digest, layout, state })
    }

    fn initial_state(config: &EnvConfig, layout: &Layout) -> State {
        State {
            pos: layout.start,
            keys_held: 0,
            keys_taken: 0,
            doors_open: 0,
            treasures: 0,
            lives: config.lives.min(255) as u8,
            level: 0,
            frame: 0,
            score: 0,
            done: false,
        }
    }

    /// Largest score any episode can end with, ignoring the time limit.
    pub fn max_score(&self) -> f64 {
        if self.config.reward_free {
            return 0.0;
        }
        match self.config.name {
            EnvName::KeyDoorWorld => {
                let per_level = TREASURE_REWARD * self.config.n_rooms as i64 + EXIT_REWARD;
                (per_level * self.config.n_levels as i64) as f64
            }
            _ => FAR_REWARD as f64,
        }
    }

    fn apply(&self, state: &mut State, action: Action) -> i64 {
        let layout = &*self.layout;
        let n_rooms = self.config.n_rooms;
        let mut reward = 0;
        let here = layout.tile(state.pos.room, state.pos.x, state.pos.y);
        let last_key = 1u32 << (n_rooms - 1);
        if here == Tile::Exit && state.keys_held & last_key != 0 {
            reward += EXIT_REWARD;
            state.keys_held &= !last_key;
            state.level += 1;
            if state.level as u32 >= self.config.n_levels {
                state.done = true;
            } else {
                state.pos = layout.start;
                state.keys_held = 0;
                state.keys_taken = 0;
                state.doors_open = 0;
                state.treasures = 0;
            }
            return reward;
        }
        let (dx, dy) = action.delta();
        if (dx, dy) == (0, 0) {
            return 0;
        }
        let (w, h) = (layout.width as i32, layout.height as i32);
        let nx = state.pos.x as i32 + dx;
        let ny = state.pos.y as i32 + dy;
        let target = if (0..w).contains(&nx) && (0..h).contains(&ny) {
            Pos { room: state.pos.room, x: nx as u16, y: ny as u16 }
        } else if nx == w && matches!(here, Tile::Door(_)) {
            // Standing in an open doorway on the right wall.
            Pos { room: state.pos.room + 1, x: 0, y: state.pos.y }
        } else if nx < 0 && state.pos.room > 0 && layout.door_rows[state.pos.room as usize - 1] == state.pos.y {
            Pos { room: state.pos.room - 1, x: (w - 1) as u16, y: state.pos.y }
        } else {
            return 0;
        };
        match layout.tile(target.room, target.x, target.y) {
            Tile::Wall => return 0,
            Tile::Door(id) => {
                let bit = 1u32 << id;
                if state.doors_open & bit == 0 {
                    if state.keys_held & bit == 0 {
                        return 0;
                    }
                    state.keys_held &= !bit;
                    state.doors_open |= bit;
                }
                state.pos = target;
            }
            Tile::Key(id) => {
                let bit = 1u32 << id;
                if state.keys_taken & bit == 0 {
                    state.keys_taken |= bit;
                    state.keys_held |= bit;
                }
                state.pos = target;
            }
            Tile::Treasure => {
                let bit = 1u32 << target.room;
                if state.treasures & bit == 0 {
                    state.treasures |= bit;
                    reward += TREASURE_REWARD;
                }
                state.pos = target;
            }
            Tile::Hazard => {
                state.pos = target;
                state.lives = state.lives.saturating_sub(1);
                if self.config.terminate_on_first_death || state.lives == 0 {
                    state.done = true;
                } else {
                    state.pos = layout.entry(target.room);
                }
            }
            Tile::Goal(r) => {
                state.pos = target;
                reward += r;
                state.done = true;
            }
            Tile::Floor | Tile::Exit => state.pos = target,
        }
        reward
    }

    fn observation_of(&self, state: &State) -> Observation {
        let (w, h) = (self.layout.width, self.layout.height);
        let n = self.config.n_rooms;
        let levels = self.config.n_levels as usize + 1;
        let mut features = vec![0.0; self.feature_width()];
        let p = state.pos;
        features[p.room as usize * w * h + p.y as usize * w + p.x as usize] = 1.0;
        let mut off = n * w * h;
        features[off + p.room as usize] = 1.0;
        off += n;
        features[off + p.x as usize] = 1.0;
        off += w;
        features[off + p.y as usize] = 1.0;
        off += h;
        for i in 0..n {
            features[off + i] = f64::from((state.keys_held >> i) & 1);
            features[off + n + i] = f64::from((state.doors_open >> i) & 1);
            features[off + 2 * n + i] = f64::from((state.treasures >> i) & 1);
        }
        off += 3 * n;
        features[off + (state.level as usize).min(levels - 1)] = 1.0;
        let keys = (0..n as u32).filter(|i| (state.keys_held >> i) & 1 == 1).collect();
        Observation {
            features,
            domain: DomainFeatures {
                room: p.room as u32,
                x: p.x as u32,
                y: p.y as u32,
                keys,
                level: state.level as u32,
            },
            frame: (self.config.name == EnvName::PixelMaze).then(|| self.render_state(state)),
            score_so_far: state.score as f64,
            done: state.done,
        }
    }

    fn render_state(&self, state: &State) -> GrayFrame {
        let (w, h) = (self.layout.width, self.layout.height);
        let tile = (FRAME_SIZE / w.max(h)).max(1);
        let ox = (FRAME_SIZE - tile * w) / 2;
        let oy = (FRAME_SIZE - tile * h) / 2;
        let mut pixels = vec![0u8; FRAME_SIZE * FRAME_SIZE];
        for ty in 0..h {
            for tx in 0..w {
                let t = self.layout.tile(0, tx as u16, ty as u16);
                for py in 0..tile {
                    for px in 0..tile {
                        let gx = ox + tx * tile + px;
                        let gy = oy + ty * tile + py;
                        let value = match t {
                            Tile::Wall => 96 + ((gx * 5 + gy * 3) % 16) as u8 * 6,
                            Tile::Goal(r) if r >= FAR_REWARD => 200,
                            Tile::Goal(_) => 170,
                            _ => 24 + ((tx * 7 + ty * 13) % 5) as u8 * 4,
                        };
                        pixels[gy * FRAME_SIZE + gx] = value;
                    }
                }
            }
        }
        let border = usize::from(tile > 2);
        for py in border..tile - border {
            for px in border..tile - border {
                let gx = ox + state.pos.x as usize * tile + px;
                let gy = oy + state.pos.y as usize * tile + py;
                pixels[gy * FRAME_SIZE + gx] = 255;
            }
        }
        GrayFrame::new(FRAME_SIZE, FRAME_SIZE, pixels)
    }

    fn encode(&self, state: &State) -> Vec<u8> {
        let mut b = Vec::with_capacity(BASE_SNAPSHOT_LEN);
        b.extend_from_slice(SNAPSHOT_TAG);
        b.extend_from_slice(&self.digest.to_le_bytes());
        b.push(state.pos.room);
        b.extend_from_slice(&state.pos.x.to_le_bytes());
        b.extend_from_slice(&state.pos.y.to_le_bytes());
        b.extend_from_slice(&state.keys_held.to_le_bytes());
        b.extend_from_slice(&state.keys_taken.to_le_bytes());
        b.extend_from_slice(&state.doors_open.to_le_bytes());
        b.extend_from_slice(&state.treasures.to_le_bytes());
        b.push(state.lives);
        b.extend_from_slice(&state.level.to_le_bytes());
        b.extend_from_slice(&state.frame.to_le_bytes());
        b.extend_from_slice(&state.score.to_le_bytes());
        b.push(u8::from(state.done));
        b
    }

    fn decode(&self, bytes: &[u8]) -> Result<State, EnvError> {
        if bytes.len() != BASE_SNAPSHOT_LEN {
            return Err(EnvError::BadSnapshot(format!("expected {BASE_SNAPSHOT_LEN} bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != SNAPSHOT_TAG {
            return Err(EnvError::BadSnapshot("unknown format tag".into()));
        }
        let mut r = ByteReader { bytes, at: 4 };
        if r.u64() != self.digest {
            return Err(EnvError::ConfigMismatch);
        }
        let state = State {
            pos: Pos { room: r.u8(), x: r.u16(), y: r.u16() },
            keys_held: r.u32(),
            keys_taken: r.u32(),
            doors_open: r.u32(),
            treasures: r.u32(),
            lives: r.u8(),
            level: r.u16(),
            frame: r.u32(),
            score: r.u64() as i64,
            done: r.u8() != 0,
        };
        let l = &self.layout;
        if state.pos.room as usize >= self.config.n_rooms
            || state.pos.x as usize >= l.width
            || state.pos.y as usize >= l.height
        {
            return Err(EnvError::BadSnapshot("position outside the layout".into()));
        }
        Ok(state)
    }

    /// Breadth-first enumeration of every state reachable from reset within the
    /// time limit. Intended as a ground-truth oracle for tests.
    pub fn enumerate_reachable(&self) -> Vec<ReachableState> {
        let mut probe = self.clone();
        probe.reset();
        let key_of = |s: &State| State { frame: 0, ..*s };
        let mut seen: HashMap<State, ()> = HashMap::new();
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        seen.insert(key_of(&probe.state), ());
        queue.push_back((probe.state, 0u32));
        while let Some((state, depth)) = queue.pop_front() {
            probe.state = state;
            out.push(ReachableState { observation: probe.observation_of(&state), snapshot: probe.snapshot(), depth });
            if state.done {
                continue;
            }
            for action in Action::ALL {
                let mut next = state;
                let reward = self.apply(&mut next, action);
                next.score += reward;
                next.frame += 1;
                if next.frame >= self.config.max_episode_steps {
                    next.done = true;
                }
                let k = key_of(&next);
                if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(k) {
                    e.insert(());
                    queue.push_back((next, depth + 1));
                }
            }
        }
        out
    }
}

/// One entry of [`GridWorld::enumerate_reachable`].
#[derive(Debug, Clone)]
pub struct ReachableState {
    pub observation: Observation,
    pub snapshot: EnvSnapshot,
    /// Minimum number of steps from reset.
    pub depth: u32,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.at..self.at + N].try_into().unwrap();
        self.at += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
}

impl Environment for GridWorld {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn reset(&mut self) -> Observation {
        self.state = Self::initial_state(&self.config, &self.layout);
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        let action = Action::from_index(action)?;
        if self.state.done {
            return Err(EnvError::EpisodeDone);
        }
        let mut state = self.state;
        let reward = self.apply(&mut state, action);
        state.score += reward;
        state.frame += 1;
        if state.frame >= self.config.max_episode_steps {
            state.done = true;
        }
        self.state = state;
        Ok(StepResult { observation: self.observation_of(&state), reward: reward as f64, done: state.done })
    }

    fn observe(&self) -> Observation {
        self.observation_of(&self.state)
    }

    fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot { bytes: self.encode(&self.state), frame_index: self.state.frame }
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError> {
        self.state = self.decode(&snapshot.bytes)?;
        Ok(())
    }

    fn render_frame(&self) -> Result<GrayFrame, EnvError> {
        if self.config.name != EnvName::PixelMaze {
            return Err(EnvError::NotRenderable);
        }
        Ok(self.render_state(&self.state))
    }

    fn frame_index(&self) -> u32 {
        self.state.frame
    }

    fn is_done(&self) -> bool {
        self.state.done
    }

    fn feature_width(&self) -> usize {
        let (w, h, n) = (self.layout.width, self.layout.height, self.config.n_rooms);
        n * w * h + n + w + h + 3 * n + self.config.n_levels as usize + 1
    }
}

/// Previous-action memory of the sticky-action wrapper.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StickyMemory {
    pub previous: Option<usize>,
}

/// Steps `env` with sticky actions: with probability `stickiness` the previous
/// executed action is repeated instead of `action`. The first step of an
/// episode is never sticky.
pub fn sticky_step<E: Environment + ?Sized, R: Rng + ?Sized>(
    env: &mut E,
    memory: &mut StickyMemory,
    action: usize,
    stickiness: f64,
    rng: &mut R,
) -> Result<StepResult, EnvError> {
    if action >= env.num_actions() {
        return Err(EnvError::InvalidAction(action));
    }
    let executed = match memory.previous {
        Some(prev) if rng.random::<f64>() < stickiness => prev,
        _ => action,
    };
    let result = env.step(executed)?;
    memory.previous = Some(executed);
    Ok(result)
}

/// Executes k ~ Uniform{0..=max_noops} no-op actions, stopping early if the
/// episode ends. Returns the number executed.
pub fn random_noop_start<E: Environment + ?Sized, R: Rng + ?Sized>(
    env: &mut E,
    max_noops: usize,
    rng: &mut R,
) -> Result<usize, EnvError> {
    let k = rng.random_range(0..=max_noops);
    for i in 0..k {
        if env.step(Action::Noop as usize)?.done {
            return Ok(i + 1);
        }
    }
    Ok(k)
}

/// Sticky-action wrapper that owns its RNG, so snapshots stay exact.
#[derive(Debug, Clone)]
pub struct StickyEnv<E> {
    inner: E,
    stickiness: f64,
    rng: ChaCha8Rng,
    memory: StickyMemory,
}

impl<E: Environment> StickyEnv<E> {
    pub fn new(inner: E, stickiness: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&stickiness), "stickiness must lie in [0, 1]");
        Self { inner, stickiness, rng: ChaCha8Rng::seed_from_u64(seed), memory: StickyMemory::default() }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn stickiness(&self) -> f64 {
        self.stickiness
    }

    /// Restores a snapshot of the unwrapped environment and clears the
    /// previous-action memory, keeping the wrapper's RNG stream.
    pub fn restore_base(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError> {
        self.inner.restore(snapshot)?;
        self.memory = StickyMemory::default();
        Ok(())
    }
}

impl<E: Environment> Environment for StickyEnv<E> {
    fn config(&self) -> &EnvConfig {
        self.inner.config()
    }

    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn reset(&mut self) -> Observation {
        self.memory = StickyMemory::default();
        self.inner.reset()
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        sticky_step(&mut self.inner, &mut self.memory, action, self.stickiness, &mut self.rng)
    }

    fn observe(&self) -> Observation {
        self.inner.observe()
    }

    fn snapshot(&self) -> EnvSnapshot {
        let base = self.inner.snapshot();
        let mut bytes = Vec::with_capacity(base.bytes.len() + 72);
        bytes.extend_from_slice(STICKY_TAG);
        bytes.extend_from_slice(&(base.bytes.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&base.bytes);
        bytes.extend_from_slice(&self.stickiness.to_bits().to_le_bytes());
        bytes.push(self.memory.previous.map_or(u8::MAX, |a| a as u8));
        bytes.extend_from_slice(&self.rng.get_seed());
        bytes.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        bytes.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        EnvSnapshot { bytes, frame_index: base.frame_index }
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError> {
        let bytes = &snapshot.bytes;
        if bytes.len() >= 4 && &bytes[..4] == SNAPSHOT_TAG {
            return self.restore_base(snapshot);
        }
        if bytes.len() < 8 || &bytes[..4] != STICKY_TAG {
            return Err(EnvError::BadSnapshot("unknown format tag".into()));
        }
        let base_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let tail_len = 8 + 1 + 32 + 8 + 16;
        if bytes.len() != 8 + base_len + tail_len {
            return Err(EnvError::BadSnapshot("truncated sticky snapshot".into()));
        }
        let base = EnvSnapshot { bytes: bytes[8..8 + base_len].to_vec(), frame_index: snapshot.frame_index };
        let mut r = ByteReader { bytes, at: 8 + base_len };
        let stickiness = f64::from_bits(r.u64());
        if stickiness.to_bits() != self.stickiness.to_bits() {
            return Err(EnvError::ConfigMismatch);
        }
        self.inner.restore(&base)?;
        let prev = r.u8();
        self.memory.previous = (prev != u8::MAX).then_some(prev as usize);
        let seed: [u8; 32] = r.take();
        let stream = r.u64();
        let word_pos = u128::from_le_bytes(r.take());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        self.rng = rng;
        Ok(())
    }

    fn render_frame(&self) -> Result<GrayFrame, EnvError> {
        self.inner.render_frame()
    }

    fn frame_index(&self) -> u32 {
        self.inner.frame_index()
    }

    fn is_done(&self) -> bool {
        self.inner.is_done()
    }

    fn feature_width(&self) -> usize {
        self.inner.feature_width()
    }
}

/// Builds the base world for a config.
pub fn make_env(config: &EnvConfig) -> Result<GridWorld, EnvError> {
    GridWorld::new(config.clone())
}

/// Builds a sticky-wrapped world.
pub fn make_sticky_env(config: &EnvConfig, stickiness: f64, seed: u64) -> Result<StickyEnv<GridWorld>, EnvError> {
    Ok(StickyEnv::new(GridWorld::new(config.clone())?, stickiness, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(env: &mut impl Environment, actions: &[usize]) -> Vec<(Observation, f64, bool)> {
        actions
            .iter()
            .map(|&a| {
                let r = env.step(a).unwrap();
                (r.observation, r.reward, r.done)
            })
            .collect()
    }

    #[test]
    fn open_maze_moves_right() {
        let mut cfg = EnvConfig::deceptive_maze(3, 3, 0);
        cfg.open_layout = true;
        let mut env = GridWorld::new(cfg).unwrap();
        let obs = env.reset();
        assert_eq!((obs.domain.x, obs.domain.y), (0, 0));
        let r = env.step(Action::Right as usize).unwrap();
        assert_eq!((r.observation.domain.x, r.observation.domain.y), (1, 0));
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
    }

    #[test]
    fn time_limit_forces_done() {
        let mut cfg = EnvConfig::open_grid(4, 4);
        cfg.max_episode_steps = 5;
        let mut env = GridWorld::new(cfg).unwrap();
        env.reset();
        for _ in 0..4 {
            assert!(!env.step(0).unwrap().done);
        }
        assert!(env.step(0).unwrap().done);
        assert_eq!(env.step(0), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn invalid_action_rejected() {
        let mut env = GridWorld::new(EnvConfig::open_grid(3, 3)).unwrap();
        env.reset();
        assert_eq!(env.step(NUM_ACTIONS).unwrap_err(), EnvError::InvalidAction(NUM_ACTIONS));
    }

    #[test]
    fn exit_with_key_pays_and_ends() {
        let cfg = EnvConfig::key_door_world(5, 5, 2, 3);
        let env = GridWorld::new(cfg).unwrap();
        // Find a reachable state standing on the exit while holding the last key.
        let on_exit = env
            .enumerate_reachable()
            .into_iter()
            .find(|s| {
                let d = &s.observation.domain;
                !s.observation.done
                    && d.keys.contains(&1)
                    && env.layout.tile(d.room as u8, d.x as u16, d.y as u16) == Tile::Exit
            })
            .expect("exit reachable with key");
        for action in 0..NUM_ACTIONS {
            let mut e = env.clone();
            e.restore(&on_exit.snapshot).unwrap();
            let r = e.step(action).unwrap();
            assert_eq!(r.reward, 100.0);
            assert!(r.done);
        }
    }

    #[test]
    fn snapshot_round_trip_is_identity() {
        let mut env = GridWorld::new(EnvConfig::key_door_world(5, 5, 2, 1)).unwrap();
        env.reset();
        run(&mut env, &[4, 4, 2, 1]);
        let s = env.snapshot();
        env.restore(&s).unwrap();
        assert_eq!(env.snapshot(), s);
    }

    #[test]
    fn restore_replays_identically() {
        let mut env = make_sticky_env(&EnvConfig::key_door_world(5, 5, 2, 7), 0.25, 11).unwrap();
        env.reset();
        run(&mut env, &[4, 2, 2]);
        let snap = env.snapshot();
        let actions = [4, 4, 1, 3, 2];
        let first = run(&mut env, &actions);
        env.restore(&snap).unwrap();
        let second = run(&mut env, &actions);
        assert_eq!(first, second);
    }

    #[test]
    fn cross_config_restore_fails() {
        let maze = GridWorld::new(EnvConfig::deceptive_maze(5, 5, 0)).unwrap();
        let mut kd = GridWorld::new(EnvConfig::key_door_world(5, 5, 2, 0)).unwrap();
        assert_eq!(kd.restore(&maze.snapshot()), Err(EnvError::ConfigMismatch));
    }

    #[test]
    fn near_goal_never_blocks_far_goal() {
        for seed in 0..200 {
            for (w, h) in [(5, 5), (7, 5), (9, 9), (21, 21)] {
                let layout = Layout::maze(&EnvConfig::deceptive_maze(w, h, seed));
                let mut tiles = layout.tiles[0].clone();
                let far = tiles.iter().position(|t| *t == Tile::Goal(FAR_REWARD)).unwrap();
                for t in tiles.iter_mut() {
                    if *t == Tile::Goal(NEAR_REWARD) {
                        *t = Tile::Wall;
                    }
                }
                assert!(bfs_distances(&tiles, w, h, (0, 0))[far].is_some(), "seed {seed} {w}x{h}");
            }
        }
    }

    #[test]
    fn stickiness_one_repeats_first_action() {
        let mut env = make_sticky_env(&EnvConfig::open_grid(5, 5), 1.0, 0).unwrap();
        env.reset();
        let xs: Vec<_> = [4, 2, 3].iter().map(|&a| env.step(a).unwrap().observation.domain).collect();
        assert_eq!((xs[2].x, xs[2].y), (3, 0));
    }

    #[test]
    fn stickiness_zero_matches_base() {
        let cfg = EnvConfig::key_door_world(5, 5, 2, 4);
        let mut base = GridWorld::new(cfg.clone()).unwrap();
        let mut sticky = make_sticky_env(&cfg, 0.0, 9).unwrap();
        base.reset();
        sticky.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            if base.is_done() {
                break;
            }
            let a = rng.random_range(0..NUM_ACTIONS);
            assert_eq!(base.step(a).unwrap(), sticky.step(a).unwrap());
        }
    }

    #[test]
    fn noop_start_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = GridWorld::new(EnvConfig::open_grid(3, 3)).unwrap();
        env.reset();
        assert_eq!(random_noop_start(&mut env, 0, &mut rng).unwrap(), 0);
        assert_eq!(env.frame_index(), 0);
        for _ in 0..200 {
            env.reset();
            let k = random_noop_start(&mut env, 30, &mut rng).unwrap();
            assert!(k <= 30);
            assert_eq!(env.frame_index() as usize, k);
        }
    }

    #[test]
    fn render_requires_pixel_env() {
        let env = GridWorld::new(EnvConfig::deceptive_maze(5, 5, 0)).unwrap();
        assert_eq!(env.render_frame(), Err(EnvError::NotRenderable));
        let mut px = GridWorld::new(EnvConfig::pixel_maze(5, 5, 0)).unwrap();
        px.reset();
        let a = px.render_frame().unwrap();
        assert_eq!((a.width, a.height), (FRAME_SIZE, FRAME_SIZE));
        assert_eq!(a, px.render_frame().unwrap());
    }

    #[test]
    fn layouts_are_seed_deterministic() {
        let a = GridWorld::new(EnvConfig::key_door_world(6, 6, 3, 42)).unwrap();
        let b = GridWorld::new(EnvConfig::key_door_world(6, 6, 3, 42)).unwrap();
        assert_eq!(a.layout.tiles, b.layout.tiles);
        assert_eq!(a.layout.start, b.layout.start);
    }
}
