//! Declarative grid worlds with slippery cardinal moves.
//!
//! Cells are `[col, row]` with `row` growing northward; state index is
//! `row * width + col`. An action succeeds with probability `1 - 2 alpha` and
//! slips to each perpendicular direction with probability `alpha`. Moves into
//! an obstacle or off the grid leave the agent where it is. Goal cells absorb.
//!
//! Configurations are TOML documents; see `configs/` for the bundled ones.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hmm::SensorModel;
use crate::incentive::IncentiveProblem;
use crate::mdp::{FollowerSpec, SidePayment, DEFAULT_TEMPERATURE};

pub const FIRE_RESCUE: &str = include_str!("../configs/fire_rescue.toml");
pub const BEHAVIOR_COMPARISON: &str = include_str!("../configs/behavior_comparison.toml");
pub const TINY: &str = include_str!("../configs/tiny.toml");

/// Bundled configuration text by name.
pub fn bundled_config(name: &str) -> Option<&'static str> {
    match name {
        "fire_rescue" => Some(FIRE_RESCUE),
        "behavior_comparison" => Some(BEHAVIOR_COMPARISON),
        "tiny" => Some(TINY),
        _ => None,
    }
}

pub const BUNDLED_NAMES: [&str; 3] = ["fire_rescue", "behavior_comparison", "tiny"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub col: usize,
    pub row: usize,
}

impl Cell {
    pub fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.col, self.row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    North,
    South,
    East,
    West,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::North, Action::South, Action::East, Action::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Action::North => "N",
            Action::South => "S",
            Action::East => "E",
            Action::West => "W",
        }
    }

    fn perpendicular(self) -> [Action; 2] {
        match self {
            Action::North | Action::South => [Action::East, Action::West],
            Action::East | Action::West => [Action::North, Action::South],
        }
    }

    fn offset(self) -> (isize, isize) {
        match self {
            Action::North => (0, 1),
            Action::South => (0, -1),
            Action::East => (1, 0),
            Action::West => (-1, 0),
        }
    }

    pub fn parse(name: &str) -> Option<Action> {
        match name.to_ascii_lowercase().as_str() {
            "n" | "north" => Some(Action::North),
            "s" | "south" => Some(Action::South),
            "e" | "east" => Some(Action::East),
            "w" | "west" => Some(Action::West),
            _ => None,
        }
    }
}

/// How overlapping sensor ranges are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorOverlap {
    /// The lowest sensor id covering a cell wins.
    #[default]
    LowestId,
    /// Overlaps are a configuration error.
    Strict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeParams {
    pub name: String,
    pub slip: f64,
    pub fire_penalty: f64,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub discount: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub id: u32,
    pub from: Cell,
    pub to: Cell,
    pub p_hit: f64,
}

impl Sensor {
    pub fn covers(&self, cell: Cell) -> bool {
        (self.from.col..=self.to.col).contains(&cell.col) && (self.from.row..=self.to.row).contains(&cell.row)
    }
}

/// A validated grid configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub obstacles: BTreeSet<Cell>,
    pub fires: BTreeSet<Cell>,
    pub goals: BTreeSet<Cell>,
    pub types: Vec<TypeParams>,
    /// Sorted by id.
    pub sensors: Vec<Sensor>,
    pub sensor_overlap: SensorOverlap,
    pub prior: Vec<f64>,
    pub payment_cell: Cell,
    pub payment_actions: Vec<Action>,
    pub max_payment: f64,
    pub initial: Cell,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    grid: RawGrid,
    types: Vec<RawType>,
    #[serde(default)]
    sensors: Vec<RawSensor>,
    prior: Option<Vec<f64>>,
    payment_support: RawSupport,
    initial: [i64; 2],
    temperature: Option<f64>,
    #[serde(default)]
    sensor_overlap: SensorOverlap,
    max_payment: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    width: i64,
    height: i64,
    #[serde(default)]
    obstacles: Vec<[i64; 2]>,
    #[serde(default)]
    fires: Vec<[i64; 2]>,
    #[serde(default)]
    goals: Vec<[i64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawType {
    name: Option<String>,
    slip: f64,
    #[serde(default)]
    fire_penalty: f64,
    #[serde(default)]
    goal_reward: f64,
    #[serde(default)]
    step_reward: f64,
    discount: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensor {
    id: u32,
    from: [i64; 2],
    to: [i64; 2],
    p_hit: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSupport {
    cell: [i64; 2],
    actions: Vec<String>,
}

/// Default payment bound when a config does not set `max_payment`.
pub const DEFAULT_MAX_PAYMENT: f64 = 10.0;

fn config_err(path: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

struct Bounds {
    width: usize,
    height: usize,
}

impl Bounds {
    fn cell(&self, path: &str, raw: [i64; 2]) -> Result<Cell> {
        let [c, r] = raw;
        if c < 0 || r < 0 || c as usize >= self.width || r as usize >= self.height {
            return Err(config_err(
                path,
                format!("cell ({c},{r}) outside {}x{} grid", self.width, self.height),
            ));
        }
        Ok(Cell::new(c as usize, r as usize))
    }

    fn cells(&self, path: &str, raw: &[[i64; 2]]) -> Result<BTreeSet<Cell>> {
        raw.iter()
            .enumerate()
            .map(|(k, c)| self.cell(&format!("{path}[{k}]"), *c))
            .collect()
    }
}

/// Parses and validates a TOML grid configuration.
pub fn load_config(text: &str) -> Result<GridConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
    if raw.grid.width <= 0 || raw.grid.height <= 0 {
        return Err(config_err("grid", "width and height must be positive"));
    }
    let bounds = Bounds {
        width: raw.grid.width as usize,
        height: raw.grid.height as usize,
    };
    let obstacles = bounds.cells("grid.obstacles", &raw.grid.obstacles)?;
    let fires = bounds.cells("grid.fires", &raw.grid.fires)?;
    let goals = bounds.cells("grid.goals", &raw.grid.goals)?;
    let initial = bounds.cell("initial", raw.initial)?;
    for (name, set) in [("grid.obstacles", &obstacles), ("grid.fires", &fires), ("grid.goals", &goals)] {
        if set.contains(&initial) {
            return Err(config_err(name, format!("contains the initial cell {initial}")));
        }
    }
    if let Some(c) = obstacles.intersection(&fires).chain(obstacles.intersection(&goals)).next() {
        return Err(config_err("grid.obstacles", format!("cell {c} is also a fire or goal")));
    }
    if let Some(c) = fires.intersection(&goals).next() {
        return Err(config_err("grid.fires", format!("cell {c} is also a goal")));
    }

    if raw.types.is_empty() {
        return Err(config_err("types", "at least one type is required"));
    }
    let types = raw
        .types
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let path = format!("types[{i}]");
            if !(0.0..0.5).contains(&t.slip) {
                return Err(config_err(&format!("{path}.slip"), format!("{} not in [0, 0.5)", t.slip)));
            }
            if !(t.discount > 0.0 && t.discount < 1.0) {
                return Err(config_err(&format!("{path}.discount"), format!("{} not in (0, 1)", t.discount)));
            }
            for (field, v) in [("fire_penalty", t.fire_penalty), ("goal_reward", t.goal_reward), ("step_reward", t.step_reward)] {
                if !v.is_finite() {
                    return Err(config_err(&format!("{path}.{field}"), "must be finite"));
                }
            }
            Ok(TypeParams {
                name: t.name.clone().unwrap_or_else(|| format!("type {}", i + 1)),
                slip: t.slip,
                fire_penalty: t.fire_penalty,
                goal_reward: t.goal_reward,
                step_reward: t.step_reward,
                discount: t.discount,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sensors = raw
        .sensors
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let path = format!("sensors[{k}]");
            let from = bounds.cell(&format!("{path}.from"), s.from)?;
            let to = bounds.cell(&format!("{path}.to"), s.to)?;
            if from.col > to.col || from.row > to.row {
                return Err(config_err(&path, format!("empty range {from}..{to}")));
            }
            if !(0.0..=1.0).contains(&s.p_hit) {
                return Err(config_err(&format!("{path}.p_hit"), format!("{} not in [0, 1]", s.p_hit)));
            }
            Ok(Sensor {
                id: s.id,
                from,
                to,
                p_hit: s.p_hit,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sensors.sort_by_key(|s| s.id);
    if let Some(w) = sensors.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(config_err("sensors", format!("duplicate sensor id {}", w[0].id)));
    }
    if raw.sensor_overlap == SensorOverlap::Strict {
        for row in 0..bounds.height {
            for col in 0..bounds.width {
                let cell = Cell::new(col, row);
                let ids: Vec<u32> = sensors.iter().filter(|s| s.covers(cell)).map(|s| s.id).collect();
                if ids.len() > 1 {
                    return Err(config_err("sensors", format!("cell {cell} covered by sensors {ids:?}")));
                }
            }
        }
    }

    let prior = match raw.prior {
        Some(p) => p,
        None => vec![1.0 / types.len() as f64; types.len()],
    };
    if prior.len() != types.len() {
        return Err(config_err("prior", format!("{} entries for {} types", prior.len(), types.len())));
    }
    if prior.iter().any(|p| !(0.0..=1.0).contains(p)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(config_err("prior", "must be a probability distribution"));
    }

    let payment_cell = bounds.cell("payment_support.cell", raw.payment_support.cell)?;
    if obstacles.contains(&payment_cell) {
        return Err(config_err("payment_support.cell", format!("{payment_cell} is an obstacle")));
    }
    if raw.payment_support.actions.is_empty() {
        return Err(config_err("payment_support.actions", "at least one action is required"));
    }
    let mut payment_actions = Vec::new();
    for (k, name) in raw.payment_support.actions.iter().enumerate() {
        let action = Action::parse(name)
            .ok_or_else(|| config_err(&format!("payment_support.actions[{k}]"), format!("unknown action `{name}`")))?;
        if payment_actions.contains(&action) {
            return Err(config_err(&format!("payment_support.actions[{k}]"), format!("duplicate action `{name}`")));
        }
        payment_actions.push(action);
    }

    let temperature = raw.temperature.unwrap_or(DEFAULT_TEMPERATURE);
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(config_err("temperature", "must be positive"));
    }
    let max_payment = raw.max_payment.unwrap_or(DEFAULT_MAX_PAYMENT);
    if !(max_payment > 0.0 && max_payment.is_finite()) {
        return Err(config_err("max_payment", "must be positive"));
    }

    Ok(GridConfig {
        width: bounds.width,
        height: bounds.height,
        obstacles,
        fires,
        goals,
        types,
        sensors,
        sensor_overlap: raw.sensor_overlap,
        prior,
        payment_cell,
        payment_actions,
        max_payment,
        initial,
        temperature,
    })
}

impl GridConfig {
    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn state(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn cell(&self, state: usize) -> Cell {
        Cell::new(state % self.width, state / self.width)
    }

    /// Where a move in `action` from `cell` lands, before slipping.
    fn target(&self, cell: Cell, action: Action) -> Cell {
        let (dc, dr) = action.offset();
        let col = cell.col as isize + dc;
        let row = cell.row as isize + dr;
        if col < 0 || row < 0 || col >= self.width as isize || row >= self.height as isize {
            return cell;
        }
        let next = Cell::new(col as usize, row as usize);
        if self.obstacles.contains(&next) {
            cell
        } else {
            next
        }
    }

    /// Outcome distribution of `action` at `cell` for slip `alpha`.
    pub fn outcomes(&self, cell: Cell, action: Action, alpha: f64) -> Vec<(Cell, f64)> {
        if self.goals.contains(&cell) || self.obstacles.contains(&cell) {
            return vec![(cell, 1.0)];
        }
        let [p1, p2] = action.perpendicular();
        let mut out: Vec<(Cell, f64)> = Vec::with_capacity(3);
        for (dir, p) in [(action, 1.0 - 2.0 * alpha), (p1, alpha), (p2, alpha)] {
            if p == 0.0 {
                continue;
            }
            let t = self.target(cell, dir);
            match out.iter_mut().find(|(c, _)| *c == t) {
                Some(entry) => entry.1 += p,
                None => out.push((t, p)),
            }
        }
        out
    }

    fn reward_at(&self, cell: Cell, t: &TypeParams) -> f64 {
        if self.goals.contains(&cell) {
            t.goal_reward
        } else if self.fires.contains(&cell) {
            t.fire_penalty
        } else {
            t.step_reward
        }
    }

    /// Payment support as `(state, action)` pairs.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let s = self.state(self.payment_cell);
        self.payment_actions.iter().map(|a| (s, a.index())).collect()
    }

    pub fn type_index(&self, one_based: usize) -> Option<usize> {
        (1..=self.types.len()).contains(&one_based).then(|| one_based - 1)
    }
}

/// One follower MDP per configured type.
pub fn build_followers(config: &GridConfig) -> Result<Vec<FollowerSpec>> {
    let n = config.num_states();
    config
        .types
        .iter()
        .map(|t| {
            let kernels = Action::ALL
                .iter()
                .map(|&action| {
                    let mut p = DMatrix::zeros(n, n);
                    for s in 0..n {
                        for (next, prob) in config.outcomes(config.cell(s), action, t.slip) {
                            p[(s, config.state(next))] += prob;
                        }
                    }
                    p
                })
                .collect();
            let mut initial = DVector::zeros(n);
            initial[config.state(config.initial)] = 1.0;
            let reward = DMatrix::from_fn(n, Action::ALL.len(), |s, _| config.reward_at(config.cell(s), t));
            FollowerSpec::new(kernels, initial, t.discount, reward, config.temperature)
                .map_err(|e| Error::Config(format!("type `{}`: {e}", t.name)))
        })
        .collect()
}

/// Sensor alphabet is `n` (null, index 0) followed by sensor ids in ascending order.
pub fn build_sensor(config: &GridConfig) -> Result<SensorModel> {
    let n = config.num_states();
    let m = config.sensors.len() + 1;
    let mut labels = vec!["n".to_string()];
    labels.extend(config.sensors.iter().map(|s| s.id.to_string()));
    let mut emission = DMatrix::zeros(m, n);
    for s in 0..n {
        let cell = config.cell(s);
        match config.sensors.iter().position(|sensor| sensor.covers(cell)) {
            Some(k) => {
                let p = config.sensors[k].p_hit;
                emission[(k + 1, s)] = p;
                emission[(0, s)] = 1.0 - p;
            }
            None => emission[(0, s)] = 1.0,
        }
    }
    SensorModel::new(labels, emission, Some(0))
}

/// The full incentive problem a configuration describes.
pub fn build_problem(config: &GridConfig) -> Result<IncentiveProblem> {
    let followers = build_followers(config)?;
    let sensor = build_sensor(config)?;
    let domain = SidePayment::zeros(config.support(), config.max_payment)?;
    IncentiveProblem::new(
        followers,
        vec![sensor; config.types.len()],
        config.prior.clone(),
        domain,
    )
}
