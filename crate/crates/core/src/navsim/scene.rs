use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Half-width of the forward corridor in cells (corridor is 3 cells wide).
pub const CORRIDOR_HALF_WIDTH: i32 = 1;
/// How many cells ahead of the robot the corridor extends.
pub const HORIZON: i32 = 5;
/// Lateral offsets (on either side) that make up a side passage.
pub const SIDE_STRIP: std::ops::RangeInclusive<i32> = 2..=3;

const GRID_WIDTH: i32 = 11;
const GRID_HEIGHT: i32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Clear,
    Crowd,
    Crossing,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Clear, Difficulty::Crowd, Difficulty::Crossing];
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Clear => "clear",
            Difficulty::Crowd => "crowd",
            Difficulty::Crossing => "crossing",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    fn forward(self) -> (i32, i32) {
        match self {
            Heading::North => (0, 1),
            Heading::East => (1, 0),
            Heading::South => (0, -1),
            Heading::West => (-1, 0),
        }
    }

    fn right(self) -> (i32, i32) {
        match self {
            Heading::North => (1, 0),
            Heading::East => (0, -1),
            Heading::South => (-1, 0),
            Heading::West => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    None,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::None => Side::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pedestrian {
    pub cell: Cell,
    /// Cells per step.
    pub velocity: (i32, i32),
    pub moving: bool,
    pub in_crowd: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub width: i32,
    pub height: i32,
    pub robot: Cell,
    pub heading: Heading,
    pub goal: Heading,
    pub pedestrians: Vec<Pedestrian>,
    pub free_side: Side,
}

/// Geometry facts the action rules depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneFlags {
    pub corridor_occupancy: usize,
    /// At least one stationary pedestrian stands in the corridor.
    pub blocked: bool,
    pub crossing: bool,
    pub free_side: Side,
}

impl Scene {
    /// (forward, lateral) offset of `c` in the robot frame; lateral > 0 is right.
    pub fn relative(&self, c: Cell) -> (i32, i32) {
        let (dx, dy) = (c.x - self.robot.x, c.y - self.robot.y);
        let (fx, fy) = self.heading.forward();
        let (rx, ry) = self.heading.right();
        (dx * fx + dy * fy, dx * rx + dy * ry)
    }

    fn from_relative(&self, fwd: i32, lat: i32) -> Cell {
        let (fx, fy) = self.heading.forward();
        let (rx, ry) = self.heading.right();
        Cell {
            x: self.robot.x + fwd * fx + lat * rx,
            y: self.robot.y + fwd * fy + lat * ry,
        }
    }

    pub fn in_grid(&self, c: Cell) -> bool {
        (0..self.width).contains(&c.x) && (0..self.height).contains(&c.y)
    }

    pub fn in_corridor(&self, c: Cell) -> bool {
        let (f, l) = self.relative(c);
        (1..=HORIZON).contains(&f) && l.abs() <= CORRIDOR_HALF_WIDTH
    }

    pub fn in_side_strip(&self, c: Cell, side: Side) -> bool {
        let (f, l) = self.relative(c);
        let lat = match side {
            Side::Left => -l,
            Side::Right => l,
            Side::None => return false,
        };
        (1..=HORIZON).contains(&f) && SIDE_STRIP.contains(&lat)
    }

    /// Whether a moving pedestrian's straight-line extrapolation enters the
    /// corridor within the horizon (including its current cell).
    pub fn path_crosses_corridor(&self, p: &Pedestrian) -> bool {
        p.moving
            && (0..=HORIZON).any(|t| {
                self.in_corridor(Cell {
                    x: p.cell.x + t * p.velocity.0,
                    y: p.cell.y + t * p.velocity.1,
                })
            })
    }

    /// Side passage that is free of pedestrians. When both are free the
    /// right side is preferred.
    pub fn geometric_free_side(&self) -> Side {
        let free = |side| {
            !self
                .pedestrians
                .iter()
                .any(|p| self.in_side_strip(p.cell, side))
        };
        match (free(Side::Left), free(Side::Right)) {
            (_, true) => Side::Right,
            (true, false) => Side::Left,
            (false, false) => Side::None,
        }
    }

    pub fn flags(&self) -> SceneFlags {
        let in_corridor: Vec<_> = self
            .pedestrians
            .iter()
            .filter(|p| self.in_corridor(p.cell))
            .collect();
        SceneFlags {
            corridor_occupancy: in_corridor.len(),
            blocked: in_corridor.iter().any(|p| !p.moving),
            crossing: self
                .pedestrians
                .iter()
                .any(|p| self.path_crosses_corridor(p)),
            free_side: self.geometric_free_side(),
        }
    }

    /// Checks the structural invariants: everything in the grid, one
    /// pedestrian per cell, nobody on the robot.
    pub fn is_valid(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.in_grid(self.robot)
            && self
                .pedestrians
                .iter()
                .all(|p| self.in_grid(p.cell) && p.cell != self.robot && seen.insert(p.cell))
            && self.free_side == self.geometric_free_side()
    }

    fn occupied(&self, c: Cell) -> bool {
        c == self.robot || self.pedestrians.iter().any(|p| p.cell == c)
    }

    fn try_place(&mut self, p: Pedestrian) -> bool {
        if !self.in_grid(p.cell) || self.occupied(p.cell) {
            return false;
        }
        self.pedestrians.push(p);
        true
    }
}

fn stationary(cell: Cell, in_crowd: bool) -> Pedestrian {
    Pedestrian {
        cell,
        velocity: (0, 0),
        moving: false,
        in_crowd,
    }
}

fn empty_scene() -> Scene {
    Scene {
        width: GRID_WIDTH,
        height: GRID_HEIGHT,
        robot: Cell {
            x: GRID_WIDTH / 2,
            y: 1,
        },
        heading: Heading::North,
        goal: Heading::North,
        pedestrians: Vec::new(),
        free_side: Side::None,
    }
}

/// Stationary group filling part of the corridor and the side strip on
/// `blocked`, leaving the opposite strip free.
fn place_crowd<R: Rng>(scene: &mut Scene, blocked: Side, rng: &mut R) {
    let mut corridor: Vec<(i32, i32)> = (1..=3)
        .flat_map(|f| (-CORRIDOR_HALF_WIDTH..=CORRIDOR_HALF_WIDTH).map(move |l| (f, l)))
        .collect();
    corridor.shuffle(rng);
    let n = rng.gen_range(2..=4);
    for &(f, l) in corridor.iter().take(n) {
        let cell = scene.from_relative(f, l);
        scene.try_place(stationary(cell, true));
    }
    let sign = if blocked == Side::Left { -1 } else { 1 };
    let mut strip: Vec<(i32, i32)> = (1..=3)
        .flat_map(|f| SIDE_STRIP.map(move |l| (f, l * sign)))
        .collect();
    strip.shuffle(rng);
    let m = rng.gen_range(1..=3);
    for &(f, l) in strip.iter().take(m) {
        let cell = scene.from_relative(f, l);
        scene.try_place(stationary(cell, true));
    }
}

/// Adds bystanders that change none of the rule-relevant flags.
fn place_distractors<R: Rng>(scene: &mut Scene, rng: &mut R) {
    let target = rng.gen_range(0..=3);
    let before = scene.flags();
    let mut placed = 0;
    for _ in 0..200 {
        if placed == target {
            break;
        }
        let cell = Cell {
            x: rng.gen_range(0..scene.width),
            y: rng.gen_range(0..scene.height),
        };
        let moving = rng.gen_bool(0.3);
        let velocity = if moving {
            *[(1, 0), (-1, 0), (0, 1), (0, -1)]
                .choose(rng)
                .expect("non-empty")
        } else {
            (0, 0)
        };
        let p = Pedestrian {
            cell,
            velocity,
            moving,
            in_crowd: false,
        };
        if scene.in_corridor(cell)
            || scene.in_side_strip(cell, Side::Left)
            || scene.in_side_strip(cell, Side::Right)
            || scene.path_crosses_corridor(&p)
        {
            continue;
        }
        if scene.try_place(p) {
            if scene.flags() == before {
                placed += 1;
            } else {
                scene.pedestrians.pop();
            }
        }
    }
}

fn place_crosser<R: Rng>(scene: &mut Scene, rng: &mut R) {
    loop {
        let from_left = rng.gen_bool(0.5);
        let lat = rng.gen_range(3..=4) * if from_left { -1 } else { 1 };
        let fwd = rng.gen_range(1..=4);
        let cell = scene.from_relative(fwd, lat);
        let toward = scene.from_relative(fwd, lat + if from_left { 1 } else { -1 });
        let p = Pedestrian {
            cell,
            velocity: (toward.x - cell.x, toward.y - cell.y),
            moving: true,
            in_crowd: false,
        };
        if scene.path_crosses_corridor(&p) && scene.try_place(p) {
            return;
        }
    }
}

/// Generates a scene of the requested difficulty.
///
/// `clear`: nobody in the forward corridor and no crossing path.
/// `crowd`: a stationary group blocks the corridor with exactly one free side.
/// `crossing`: a moving pedestrian will enter the corridor within the horizon;
/// half of these scenes also contain a crowd.
pub fn generate_scene<R: Rng>(rng: &mut R, difficulty: Difficulty) -> Scene {
    loop {
        let mut scene = empty_scene();
        match difficulty {
            Difficulty::Clear => {}
            Difficulty::Crowd => {
                let blocked = if rng.gen_bool(0.5) {
                    Side::Left
                } else {
                    Side::Right
                };
                place_crowd(&mut scene, blocked, rng);
            }
            Difficulty::Crossing => {
                if rng.gen_bool(0.5) {
                    let blocked = if rng.gen_bool(0.5) {
                        Side::Left
                    } else {
                        Side::Right
                    };
                    place_crowd(&mut scene, blocked, rng);
                }
                place_crosser(&mut scene, rng);
            }
        }
        place_distractors(&mut scene, rng);
        scene.free_side = scene.geometric_free_side();
        let f = scene.flags();
        let ok = match difficulty {
            Difficulty::Clear => f.corridor_occupancy == 0 && !f.crossing,
            Difficulty::Crowd => {
                let stationary = scene
                    .pedestrians
                    .iter()
                    .filter(|p| !p.moving && scene.in_corridor(p.cell))
                    .count();
                stationary >= 2 && !f.crossing && f.free_side != Side::None
            }
            Difficulty::Crossing => f.crossing,
        };
        if ok && scene.is_valid() {
            return scene;
        }
    }
}
